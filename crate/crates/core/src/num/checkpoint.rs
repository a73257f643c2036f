//! Parameter checkpoint file.
//!
//! Layout: magic "FSCK1", u32 little-endian header length, JSON header
//! {names, shapes, offsets, meta}, then raw little-endian f32 blobs.
//! Offsets are byte positions relative to the start of the payload.
//! Values are stored as f32 regardless of the in-memory scalar type.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};
use crate::num::scalar::Scalar;
use crate::num::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 5] = b"FSCK1";

#[derive(Serialize, Deserialize)]
struct Header {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<u64>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn save<S: Scalar>(
    path: &Path,
    tensors: &[(String, &Tensor<S>)],
    meta: serde_json::Value,
) -> Result<()> {
    let mut offsets = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (_, t) in tensors {
        offsets.push(payload.len() as u64);
        for v in t.data() {
            payload.extend_from_slice(&(v.to_f64c() as f32).to_le_bytes());
        }
    }
    let header = Header {
        names: tensors.iter().map(|(n, _)| n.clone()).collect(),
        shapes: tensors.iter().map(|(_, t)| t.shape().to_vec()).collect(),
        offsets,
        meta,
    };
    let hjson = serde_json::to_vec(&header)
        .map_err(|e| FloodError::Format(format!("header encode: {e}")))?;
    let mut out = Vec::with_capacity(9 + hjson.len() + payload.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    out.extend_from_slice(&payload);
    let mut f = fs::File::create(path).map_err(|e| FloodError::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| FloodError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<(Vec<(String, Tensor<S>)>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| FloodError::io(path.display().to_string(), e))?;
    if bytes.len() < 9 || &bytes[..5] != CKPT_MAGIC {
        return Err(FloodError::Format(format!(
            "{}: bad magic, want FSCK1",
            path.display()
        )));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + hlen {
        return Err(FloodError::Format(format!(
            "{}: truncated header, want {} bytes, have {}",
            path.display(),
            9 + hlen,
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[9..9 + hlen])
        .map_err(|e| FloodError::Format(format!("{}: header decode: {e}", path.display())))?;
    if header.names.len() != header.shapes.len() || header.names.len() != header.offsets.len() {
        return Err(FloodError::Format(format!(
            "{}: header arrays disagree in length",
            path.display()
        )));
    }
    let payload = &bytes[9 + hlen..];
    let mut tensors = Vec::with_capacity(header.names.len());
    for i in 0..header.names.len() {
        let n: usize = header.shapes[i].iter().product();
        let start = header.offsets[i] as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(FloodError::Format(format!(
                "{}: tensor '{}' wants payload bytes {}..{}, have {}",
                path.display(),
                header.names[i],
                start,
                end,
                payload.len()
            )));
        }
        let data: Vec<S> = payload[start..end]
            .chunks_exact(4)
            .map(|c| S::from_f64c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        tensors.push((
            header.names[i].clone(),
            Tensor::new(header.shapes[i].clone(), data)?,
        ));
    }
    Ok((tensors, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::rng::Rng;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.fsck");
        let mut rng = Rng::new(11);
        let a: Tensor<f32> = rng.randn(&[3, 4]);
        let b: Tensor<f32> = rng.randn(&[7]);
        let meta = serde_json::json!({"step": 12});
        save(&path, &[("a".into(), &a), ("b".into(), &b)], meta).unwrap();
        let (loaded, meta2) = load::<f32>(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].1, b);
        assert_eq!(meta2["step"], 12);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fsck");
        std::fs::write(&path, b"NOTCK\x00\x00\x00\x00").unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fsck");
        let a: Tensor<f32> = Rng::new(3).randn(&[4, 4]);
        save(&path, &[("a".into(), &a)], serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("wants payload bytes"), "{err}");
    }
}
