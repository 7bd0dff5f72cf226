//! Flat little-endian tensor container.
//!
//! ```text
//! magic      4 bytes  "MSUN"
//! version    u16      1
//! count      u32
//! count x {
//!   name_len u16, name (UTF-8)
//!   rank     u8   (always 4)
//!   dims     rank x u32
//!   data     prod(dims) x f32
//! }
//! trailer_len u32, trailer (JSON)
//! ```
//!
//! Model checkpoints carry the training config as the trailer; raw
//! probability-map dumps carry a small metadata object.

use std::fs;
use std::path::Path;

use crate::architecture::{build_cascade, CascadeModel};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MSUN";
pub const VERSION: u16 = 1;
const RANK: u8 = 4;

/// Serializes named tensors and a trailing JSON document.
pub fn encode_container(tensors: &[(&str, &Tensor<f32>)], trailer: &serde_json::Value) -> Result<Vec<u8>> {
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::checkpoint("count", "too many tensors"))?;
    let payload: usize = tensors.iter().map(|(n, t)| 2 + n.len() + 1 + 16 + 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(10 + payload + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::checkpoint("name", format!("name of {} bytes is too long", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(RANK);
        for d in t.shape().0 {
            let d = u32::try_from(d).map_err(|_| Error::checkpoint("dims", format!("{name}: dimension {d} overflows u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(trailer)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::checkpoint("config", "trailer too large"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::checkpoint(
                field,
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Inverse of [`encode_container`]. Rejects anything malformed, including
/// trailing bytes, naming the field that failed.
pub fn decode_container(bytes: &[u8]) -> Result<(Vec<(String, Tensor<f32>)>, serde_json::Value)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::checkpoint("magic", "not an MSUN container"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::checkpoint("version", format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16("name")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::checkpoint("name", "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")?;
        if rank != RANK {
            return Err(Error::checkpoint("rank", format!("{name}: rank {rank}, expected {RANK}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("dims")? as usize;
        }
        let shape = Shape(dims);
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::checkpoint("dims", format!("{name}: shape {shape} overflows")))?;
        let raw = r.take(numel, "data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    let len = r.u32("config")? as usize;
    let trailer = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::checkpoint("config", e.to_string()))?;
    if r.pos != bytes.len() {
        return Err(Error::checkpoint("trailer", format!("{} unexpected bytes after the config", bytes.len() - r.pos)));
    }
    Ok((tensors, trailer))
}

pub fn encode_checkpoint(model: &CascadeModel<f32>, config: &TrainConfig) -> Result<Vec<u8>> {
    if model.config() != &config.cascade_config() {
        return Err(Error::checkpoint("config", "model does not match the training config"));
    }
    let named = model.named_params();
    let refs: Vec<(&str, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    encode_container(&refs, &serde_json::to_value(config)?)
}

/// Rebuilds the model described by the embedded config and fills it with
/// the stored tensors, which must match its parameter names and shapes in
/// order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CascadeModel<f32>, TrainConfig)> {
    let (tensors, trailer) = decode_container(bytes)?;
    let config: TrainConfig =
        serde_json::from_value(trailer).map_err(|e| Error::checkpoint("config", e.to_string()))?;
    config.validate().map_err(|e| Error::checkpoint("config", e.to_string()))?;
    let mut model = build_cascade::<f32>(&config.cascade_config(), 0)
        .map_err(|e| Error::checkpoint("config", e.to_string()))?;
    let expected: Vec<(String, Shape)> =
        model.named_params().into_iter().map(|(n, t)| (n, t.shape())).collect();
    if expected.len() != tensors.len() {
        return Err(Error::checkpoint(
            "count",
            format!("config implies {} tensors, file has {}", expected.len(), tensors.len()),
        ));
    }
    for ((want_name, want_shape), (name, t)) in expected.iter().zip(&tensors) {
        if want_name != name {
            return Err(Error::checkpoint("name", format!("expected {want_name}, found {name}")));
        }
        if *want_shape != t.shape() {
            return Err(Error::checkpoint("dims", format!("{name}: expected {want_shape}, found {}", t.shape())));
        }
    }
    for (slot, (_, t)) in model.param_tensors_mut().into_iter().zip(tensors) {
        *slot = t;
    }
    Ok((model, config))
}

pub fn save_checkpoint(path: &Path, model: &CascadeModel<f32>, config: &TrainConfig) -> Result<()> {
    let bytes = encode_checkpoint(model, config)?;
    // Write-then-rename so an interrupted save never clobbers a good file.
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CascadeModel<f32>, TrainConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::from_vec([1, 2, 1, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let b = Tensor::from_vec([2, 1, 1, 1], vec![7.0, 8.0]).unwrap();
        encode_container(&[("a", &a), ("bee", &b)], &serde_json::json!({"k": 1})).unwrap()
    }

    #[test]
    fn container_round_trip_is_bitwise() {
        let bytes = sample();
        assert_eq!(&bytes[..4], b"MSUN");
        let (tensors, trailer) = decode_container(&bytes).unwrap();
        assert_eq!(tensors[0].0, "a");
        let bits: Vec<u32> = tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, [1.0f32, -0.0, f32::MIN_POSITIVE, 3.5].map(f32::to_bits));
        assert_eq!(tensors[1].1.shape(), Shape::new(2, 1, 1, 1));
        assert_eq!(trailer["k"], 1);
        let again = encode_container(
            &tensors.iter().map(|(n, t)| (n.as_str(), t)).collect::<Vec<_>>(),
            &trailer,
        )
        .unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample();
        for len in 0..bytes.len() {
            assert!(decode_container(&bytes[..len]).is_err(), "prefix of {len} bytes accepted");
        }
    }

    #[test]
    fn errors_name_the_field() {
        let mut bytes = sample();
        bytes[0] = b'X';
        assert!(decode_container(&bytes).unwrap_err().to_string().contains("magic"));

        let mut bytes = sample();
        bytes[4] = 9;
        assert!(decode_container(&bytes).unwrap_err().to_string().contains("version"));

        let mut bytes = sample();
        bytes.push(0);
        assert!(decode_container(&bytes).unwrap_err().to_string().contains("trailer"));

        let bytes = sample();
        let err = decode_container(&bytes[..20]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
