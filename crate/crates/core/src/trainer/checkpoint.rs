//! Binary checkpoint format.
//!
//! ```text
//! "DTCK" | u32 version | u32 len | arch config JSON | u64 iteration
//! | u32 count | count x (u16 len | name | u8 ndim | ndim x u32 | f64 payload)
//! ```
//!
//! Integers and floats are little-endian. Arrays are the student tensors
//! under their own names, then `teacher/<name>` and `momentum/<name>`.

use std::fs;
use std::path::Path;

use crate::detector::{ArchConfig, ModelParams};
use crate::error::{Error, Result};

use super::TrainState;

pub const MAGIC: &[u8; 4] = b"DTCK";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let arch = &state.student.arch;
    let arch_json = serde_json::to_vec(arch).expect("arch serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch_json);
    out.extend_from_slice(&state.iteration.to_le_bytes());
    let tensors = arch.tensors();
    out.extend_from_slice(&((tensors.len() * 3) as u32).to_le_bytes());
    let groups: [(&str, &[f64]); 3] = [
        ("", &state.student.values),
        ("teacher/", &state.teacher.values),
        ("momentum/", &state.momentum),
    ];
    for (prefix, values) in groups {
        for t in &tensors {
            let name = format!("{prefix}{}", t.name);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &values[t.range()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u32("arch length")? as usize;
    let arch: ArchConfig = serde_json::from_slice(r.take(len, "arch config")?)
        .map_err(|e| Error::ArchMismatch(format!("unreadable arch config: {e}")))?;
    arch.validate()?;
    let iteration = r.u64("iteration")?;
    let count = r.u32("array count")? as usize;

    let tensors = arch.tensors();
    let mut student = ModelParams::zeros(&arch);
    let mut teacher = ModelParams::zeros(&arch);
    let mut momentum = vec![0.0; arch.num_params()];
    if count != tensors.len() * 3 {
        return Err(Error::ArchMismatch(format!(
            "{count} arrays, expected {}",
            tensors.len() * 3
        )));
    }
    for idx in 0..count {
        let name_len = r.u16("array name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "array name")?)
            .map_err(|_| Error::ArchMismatch(format!("array {idx} has a non-UTF-8 name")))?
            .to_string();
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("shape")? as usize);
        }
        let (dest, base): (&mut [f64], &str) = if let Some(n) = name.strip_prefix("teacher/") {
            (&mut teacher.values, n)
        } else if let Some(n) = name.strip_prefix("momentum/") {
            (&mut momentum, n)
        } else {
            (&mut student.values, name.as_str())
        };
        let info = tensors
            .iter()
            .find(|t| t.name == base)
            .ok_or_else(|| Error::ArchMismatch(format!("unknown array {name}")))?;
        if info.shape != shape {
            return Err(Error::ArchMismatch(format!(
                "array {name} has shape {shape:?}, expected {:?}",
                info.shape
            )));
        }
        let payload = r.take(info.len() * 8, &format!("payload of {name}"))?;
        for (v, chunk) in dest[info.range()].iter_mut().zip(payload.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::ArchMismatch(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(TrainState {
        student,
        teacher,
        momentum,
        iteration,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
