use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

use super::grid::GridSpec;

/// Shape of the micro detector. Images must be divisible by 16.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
    /// Output channels of the four trunk convolutions (strides 1, 2, 2, 2).
    pub trunk_channels: [usize; 4],
    /// Channels of the stride-16 convolution and the shared head tower.
    pub head_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_height: 128,
            image_width: 128,
            num_classes: 3,
            trunk_channels: [16, 32, 32, 32],
            head_channels: 32,
        }
    }
}

/// Class-head bias prior probability.
pub const PRIOR_PROB: f64 = 0.01;

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height % 16 != 0 || self.image_width % 16 != 0 || self.image_height == 0 || self.image_width == 0
        {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} is not a positive multiple of 16",
                self.image_height, self.image_width
            )));
        }
        if self.num_classes == 0 || self.trunk_channels.contains(&0) || self.head_channels == 0 {
            return Err(Error::InvalidConfig("zero-sized layer".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.image_height, self.image_width, self.num_classes)
    }

    /// Convolutions in forward order.
    pub fn layers(&self) -> Vec<ConvLayer> {
        let t = self.trunk_channels;
        let hc = self.head_channels;
        let mut offset = 0;
        let mut layer = |name: &'static str, cin: usize, cout: usize, kernel: usize, stride: usize| {
            let l = ConvLayer {
                name,
                cin,
                cout,
                kernel,
                stride,
                weight_offset: offset,
                bias_offset: offset + cout * cin * kernel * kernel,
            };
            offset = l.bias_offset + cout;
            l
        };
        vec![
            layer("trunk.0", 3, t[0], 3, 1),
            layer("trunk.1", t[0], t[1], 3, 2),
            layer("trunk.2", t[1], t[2], 3, 2),
            layer("trunk.3", t[2], t[3], 3, 2),
            layer("down", t[3], hc, 3, 2),
            layer("head.0", hc, hc, 3, 1),
            layer("head.1", hc, hc, 3, 1),
            layer("cls", hc, self.num_classes, 1, 1),
            layer("reg", hc, 4, 1, 1),
        ]
    }

    pub fn tensors(&self) -> Vec<TensorInfo> {
        self.layers()
            .iter()
            .flat_map(|l| {
                [
                    TensorInfo {
                        name: format!("{}.weight", l.name),
                        shape: vec![l.cout, l.cin, l.kernel, l.kernel],
                        offset: l.weight_offset,
                    },
                    TensorInfo {
                        name: format!("{}.bias", l.name),
                        shape: vec![l.cout],
                        offset: l.bias_offset,
                    },
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        let last = *self.layers().last().expect("layers");
        last.bias_offset + last.cout
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: &'static str,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ConvLayer {
    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All learnable weights, stored flat in f64 in the order of
/// [`ArchConfig::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: &ArchConfig) -> Self {
        Self {
            arch: arch.clone(),
            values: vec![0.0; arch.num_params()],
        }
    }

    /// He-normal trunk and tower weights, N(0, 0.01) output layers, zero
    /// biases except the class bias at `-ln((1 - pi) / pi)`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Self {
        let mut p = Self::zeros(arch);
        for (li, layer) in arch.layers().iter().enumerate() {
            let mut rng = keyed_rng(seed, &[0x1417, li as u64]);
            let std = match layer.name {
                "cls" | "reg" => 0.01,
                _ => (2.0 / layer.fan_in() as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            let w = &mut p.values[layer.weight_offset..layer.bias_offset];
            for v in w.iter_mut() {
                *v = normal.sample(&mut rng);
            }
            if layer.name == "cls" {
                let b = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
                p.values[layer.bias_offset..layer.bias_offset + layer.cout].fill(b);
            }
        }
        p
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.arch
            .tensors()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| &self.values[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let info = self.arch.tensors().into_iter().find(|t| t.name == name)?;
        Some(&mut self.values[info.range()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.arch != other.arch || self.values.len() != other.values.len() {
            return Err(Error::ShapeMismatch {
                what: "model parameters",
                expected: format!("{} values ({:?})", self.values.len(), self.arch),
                got: format!("{} values ({:?})", other.values.len(), other.arch),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let arch = ArchConfig::default();
        let tensors = arch.tensors();
        assert_eq!(tensors.len(), 18);
        let mut next = 0;
        for t in &tensors {
            assert_eq!(t.offset, next, "{}", t.name);
            next += t.len();
        }
        assert_eq!(next, arch.num_params());
    }

    #[test]
    fn init_sets_class_prior_and_is_seeded() {
        let arch = ArchConfig::default();
        let p = ModelParams::init(&arch, 3);
        let b = p.tensor("cls.bias").unwrap();
        assert!(b.iter().all(|&v| (v + 99f64.ln()).abs() < 1e-12));
        assert_eq!(p, ModelParams::init(&arch, 3));
        assert_ne!(p, ModelParams::init(&arch, 4));
        assert!(p.is_finite());
    }
}
