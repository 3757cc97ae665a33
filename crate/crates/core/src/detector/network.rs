//! Forward and reverse-mode backward pass of the micro detector.
//!
//! Layout is CHW throughout. A 3x3 convolution is an im2col followed by a
//! GEMM; its backward pass is two GEMMs and a col2im. The cache keeps the
//! column matrices and post-ReLU activations of every layer.

use crate::error::{Error, Result};
use crate::synthdata::Image;

use super::grid::{DenseOutput, OutputGrad};
use super::params::{ArchConfig, ConvLayer, ModelParams};
use super::real::Real;

/// Raw ltrb outputs are clamped to this magnitude before the exponential.
pub const MAX_RAW_LTRB: f64 = 10.0;

/// Parameters cast to the compute precision.
#[derive(Debug, Clone)]
pub struct Weights<T: Real> {
    pub arch: ArchConfig,
    pub layers: Vec<ConvLayer>,
    pub values: Vec<T>,
}

impl<T: Real> Weights<T> {
    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            arch: params.arch.clone(),
            layers: params.arch.layers(),
            values: params.values.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }

    fn w(&self, l: &ConvLayer) -> &[T] {
        &self.values[l.weight_offset..l.bias_offset]
    }

    fn b(&self, l: &ConvLayer) -> &[T] {
        &self.values[l.bias_offset..l.bias_offset + l.cout]
    }
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    /// im2col matrix (`cin*k*k x P`); empty for 1x1 layers, which reuse
    /// their input.
    cols: Vec<T>,
    /// Output after the optional ReLU, `cout x P`.
    out: Vec<T>,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    tower0: ConvCache<T>,
    tower1: ConvCache<T>,
    /// Raw ltrb before the exponential, `4 x P`.
    raw_ltrb: Vec<T>,
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache<T> {
    trunk: Vec<ConvCache<T>>,
    down: ConvCache<T>,
    heads: Vec<HeadCache<T>>,
    /// ltrb values (pixels) in anchor-major order, for the exp chain rule.
    ltrb: Vec<f64>,
    num_anchors: usize,
    num_classes: usize,
}

impl<T: Real> ActivationCache<T> {
    /// On/off state of every ReLU unit followed by the clamp state of every
    /// raw ltrb output. The network is smooth between two parameter points
    /// whose patterns agree.
    pub fn gate_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        let outs = self
            .trunk
            .iter()
            .chain(std::iter::once(&self.down))
            .chain(self.heads.iter().flat_map(|h| [&h.tower0, &h.tower1]));
        for c in outs {
            bits.extend(c.out.iter().map(|&v| v > T::ZERO));
        }
        for h in &self.heads {
            bits.extend(h.raw_ltrb.iter().map(|v| v.to_f64().abs() > MAX_RAW_LTRB));
        }
        bits
    }
}

fn out_dim(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, l: &ConvLayer, ho: usize, wo: usize) -> Vec<T> {
    let k = l.kernel;
    let pad = (k / 2) as isize;
    let p = ho * wo;
    let mut cols = vec![T::ZERO; cin * k * k * p];
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * l.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * l.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, l: &ConvLayer, ho: usize, wo: usize) -> Vec<T> {
    let k = l.kernel;
    let pad = (k / 2) as isize;
    let p = ho * wo;
    let mut dx = vec![T::ZERO; cin * h * w];
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * l.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * l.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward<T: Real>(x: &[T], h: usize, w: usize, l: &ConvLayer, wts: &Weights<T>, relu: bool) -> ConvCache<T> {
    let (ho, wo) = (out_dim(h, l.kernel, l.stride), out_dim(w, l.kernel, l.stride));
    let p = ho * wo;
    let cols = if l.kernel == 1 && l.stride == 1 {
        Vec::new()
    } else {
        im2col(x, l.cin, h, w, l, ho, wo)
    };
    let rhs: &[T] = if cols.is_empty() { x } else { &cols };
    let mut out = vec![T::ZERO; l.cout * p];
    T::gemm(l.cout, l.fan_in(), p, wts.w(l), false, rhs, false, &mut out, false);
    let bias = wts.b(l);
    for (co, chunk) in out.chunks_exact_mut(p).enumerate() {
        let b = bias[co];
        if relu {
            for v in chunk.iter_mut() {
                let s = *v + b;
                *v = if s > T::ZERO { s } else { T::ZERO };
            }
        } else {
            for v in chunk.iter_mut() {
                *v += b;
            }
        }
    }
    ConvCache {
        cols,
        out,
        h_in: h,
        w_in: w,
        h_out: ho,
        w_out: wo,
    }
}

/// Backward through one convolution. `dout` is the gradient w.r.t. the
/// pre-activation output. Returns the input gradient when requested.
fn conv_backward<T: Real>(
    cache: &ConvCache<T>,
    input: &[T],
    dout: &[T],
    l: &ConvLayer,
    wts: &Weights<T>,
    grads: &mut [T],
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let p = cache.h_out * cache.w_out;
    let k = l.fan_in();
    let lhs: &[T] = if cache.cols.is_empty() { input } else { &cache.cols };
    {
        let gw = &mut grads[l.weight_offset..l.bias_offset];
        T::gemm(l.cout, p, k, dout, false, lhs, true, gw, true);
    }
    {
        let gb = &mut grads[l.bias_offset..l.bias_offset + l.cout];
        for (co, chunk) in dout.chunks_exact(p).enumerate() {
            let mut s = T::ZERO;
            for &v in chunk {
                s += v;
            }
            gb[co] += s;
        }
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = vec![T::ZERO; k * p];
    T::gemm(k, l.cout, p, wts.w(l), true, dout, false, &mut dcols, false);
    if cache.cols.is_empty() {
        Some(dcols)
    } else {
        Some(col2im(&dcols, l.cin, cache.h_in, cache.w_in, l, cache.h_out, cache.w_out))
    }
}

fn relu_mask<T: Real>(grad: &mut [T], out: &[T]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if !(o > T::ZERO) {
            *g = T::ZERO;
        }
    }
}

fn add_into<T: Real>(acc: &mut [T], other: &[T]) {
    for (a, &b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// CHW tensor of an HWC image.
pub fn image_to_chw<T: Real>(image: &Image) -> Vec<T> {
    let (h, w) = (image.height, image.width);
    let mut x = vec![T::ZERO; 3 * h * w];
    for (i, px) in image.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            x[c * h * w + i] = T::from_f64(px[c] as f64);
        }
    }
    x
}

const TRUNK: usize = 4;
const DOWN: usize = 4;
const TOWER0: usize = 5;
const TOWER1: usize = 6;
const CLS: usize = 7;
const REG: usize = 8;

/// Run the detector on one image.
pub fn forward<T: Real>(wts: &Weights<T>, image: &Image) -> Result<(DenseOutput, ActivationCache<T>)> {
    let arch = &wts.arch;
    if image.height != arch.image_height || image.width != arch.image_width || image.data.len() != image.height * image.width * 3
    {
        return Err(Error::ShapeMismatch {
            what: "input image",
            expected: format!("{}x{}x3", arch.image_height, arch.image_width),
            got: format!("{}x{}x{}", image.height, image.width, image.data.len() / (image.height * image.width).max(1)),
        });
    }
    let layers = &wts.layers;
    let x0 = image_to_chw::<T>(image);
    let mut trunk: Vec<ConvCache<T>> = Vec::with_capacity(TRUNK);
    let (mut h, mut w) = (image.height, image.width);
    for layer in layers.iter().take(TRUNK) {
        let input: &[T] = trunk.last().map(|c| c.out.as_slice()).unwrap_or(&x0);
        let c = conv_forward(input, h, w, layer, wts, true);
        (h, w) = (c.h_out, c.w_out);
        trunk.push(c);
    }
    let p3 = &trunk[TRUNK - 1];
    let down = conv_forward(&p3.out, p3.h_out, p3.w_out, &layers[DOWN], wts, true);

    let c = arch.num_classes;
    let mut logits = Vec::new();
    let mut ltrb = Vec::new();
    let mut heads = Vec::with_capacity(2);
    for (level, feat) in [p3, &down].into_iter().enumerate() {
        let stride = (arch.image_height / feat.h_out) as f64;
        debug_assert_eq!(stride, if level == 0 { 8.0 } else { 16.0 });
        let t0 = conv_forward(&feat.out, feat.h_out, feat.w_out, &layers[TOWER0], wts, true);
        let t1 = conv_forward(&t0.out, t0.h_out, t0.w_out, &layers[TOWER1], wts, true);
        let cls = conv_forward(&t1.out, t1.h_out, t1.w_out, &layers[CLS], wts, false);
        let reg = conv_forward(&t1.out, t1.h_out, t1.w_out, &layers[REG], wts, false);
        let p = t1.h_out * t1.w_out;
        for a in 0..p {
            for k in 0..c {
                logits.push(cls.out[k * p + a].to_f64());
            }
            for k in 0..4 {
                let raw = reg.out[k * p + a].to_f64().clamp(-MAX_RAW_LTRB, MAX_RAW_LTRB);
                ltrb.push(raw.exp() * stride);
            }
        }
        heads.push(HeadCache {
            tower0: t0,
            tower1: t1,
            raw_ltrb: reg.out,
        });
    }
    let output = DenseOutput::from_logits(c, logits, ltrb.clone());
    let cache = ActivationCache {
        trunk,
        down,
        heads,
        num_anchors: ltrb.len() / 4,
        ltrb,
        num_classes: c,
    };
    Ok((output, cache))
}

/// Reverse-mode gradients of all parameters given the gradient of a scalar
/// loss with respect to the dense output of the matching forward pass.
pub fn backward<T: Real>(wts: &Weights<T>, cache: &ActivationCache<T>, grad: &OutputGrad) -> Result<Vec<f64>> {
    let c = cache.num_classes;
    if grad.logits.len() != cache.num_anchors * c || grad.ltrb.len() != cache.num_anchors * 4 {
        return Err(Error::ShapeMismatch {
            what: "output gradient",
            expected: format!("{} anchors x ({c} + 4)", cache.num_anchors),
            got: format!("{} logits, {} ltrb", grad.logits.len(), grad.ltrb.len()),
        });
    }
    let layers = &wts.layers;
    let mut g = vec![T::ZERO; wts.values.len()];

    let mut dfeat: Vec<Vec<T>> = Vec::with_capacity(2);
    let mut anchor_base = 0;
    for head in &cache.heads {
        let t1 = &head.tower1;
        let p = t1.h_out * t1.w_out;
        let mut dlogits = vec![T::ZERO; c * p];
        let mut draw = vec![T::ZERO; 4 * p];
        for a in 0..p {
            let ga = anchor_base + a;
            for k in 0..c {
                dlogits[k * p + a] = T::from_f64(grad.logits[ga * c + k]);
            }
            for k in 0..4 {
                let raw = head.raw_ltrb[k * p + a].to_f64();
                // d exp(raw)*s / d raw = ltrb; zero where the clamp is active
                let d = if raw.abs() > MAX_RAW_LTRB {
                    0.0
                } else {
                    grad.ltrb[ga * 4 + k] * cache.ltrb[ga * 4 + k]
                };
                draw[k * p + a] = T::from_f64(d);
            }
        }
        anchor_base += p;
        let cls_in = &t1.out;
        let cls_cache = ConvCache {
            cols: Vec::new(),
            out: Vec::new(),
            h_in: t1.h_out,
            w_in: t1.w_out,
            h_out: t1.h_out,
            w_out: t1.w_out,
        };
        let mut dt1 = conv_backward(&cls_cache, cls_in, &dlogits, &layers[CLS], wts, &mut g, true).expect("input grad");
        let dreg = conv_backward(&cls_cache, cls_in, &draw, &layers[REG], wts, &mut g, true).expect("input grad");
        add_into(&mut dt1, &dreg);
        relu_mask(&mut dt1, &t1.out);
        let t0 = &head.tower0;
        let mut dt0 = conv_backward(t1, &t0.out, &dt1, &layers[TOWER1], wts, &mut g, true).expect("input grad");
        relu_mask(&mut dt0, &t0.out);
        // the tower's input is a feature map; its im2col is cached in tower0
        let df = conv_backward(t0, &[], &dt0, &layers[TOWER0], wts, &mut g, true).expect("input grad");
        dfeat.push(df);
    }

    // stride-16 level feeds back into the stride-8 feature
    let mut d_down = dfeat.pop().expect("two levels");
    let mut d_p3 = dfeat.pop().expect("two levels");
    relu_mask(&mut d_down, &cache.down.out);
    let p3 = &cache.trunk[TRUNK - 1];
    let back = conv_backward(&cache.down, &p3.out, &d_down, &layers[DOWN], wts, &mut g, true).expect("input grad");
    add_into(&mut d_p3, &back);

    let mut dcur = d_p3;
    for i in (0..TRUNK).rev() {
        let layer_cache = &cache.trunk[i];
        relu_mask(&mut dcur, &layer_cache.out);
        let need = i > 0;
        match conv_backward(layer_cache, &[], &dcur, &layers[i], wts, &mut g, need) {
            Some(d) => dcur = d,
            None => break,
        }
    }
    Ok(g.into_iter().map(T::to_f64).collect())
}

/// Forward pass in the given precision, discarding the cache.
pub fn predict<T: Real>(wts: &Weights<T>, image: &Image) -> Result<DenseOutput> {
    forward(wts, image).map(|(o, _)| o)
}
