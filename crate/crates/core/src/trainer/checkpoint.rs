//! `RSCK` checkpoint files: the detector's parameter tensors plus a SHA-256
//! trailer over everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{LinearLayer, Mlp};
use crate::detector::DetectorParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

/// SHA-256 of a checkpoint's contents (its trailer).
pub type CheckpointHash = [u8; DIGEST_LEN];

pub fn encode_checkpoint(params: &DetectorParams) -> Vec<u8> {
    let tensors = params.named_parameters();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        params.feature_dim(),
        params.hidden(),
        params.patch,
        params.num_classes,
        params.channels,
        tensors.len(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in t.values().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// The content hash stored in the trailer of `bytes`, verified.
pub fn checkpoint_hash(bytes: &[u8]) -> Result<CheckpointHash> {
    if bytes.len() < DIGEST_LEN {
        return Err(Error::format("checkpoint", "file shorter than its hash trailer"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Integrity("checkpoint content hash does not match its trailer".into()));
    }
    Ok(digest.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Parses a checkpoint after verifying its hash. The tensors come back
/// trainable.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(DetectorParams, CheckpointHash)> {
    let hash = checkpoint_hash(bytes)?;
    let mut r = Reader {
        bytes: &bytes[..bytes.len() - DIGEST_LEN],
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let (d, h, p, k, c, n) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = r
            .take(count * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect::<Vec<_>>();
        tensors.push((name, shape, data));
    }
    if r.pos != r.bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes after the last tensor"));
    }

    let dims = [p * p * c, h, h, d, k + 1];
    let expected: Vec<(String, Vec<usize>)> = (0..3)
        .flat_map(|i| {
            [
                (format!("extractor.{i}.weight"), vec![dims[i], dims[i + 1]]),
                (format!("extractor.{i}.bias"), vec![dims[i + 1]]),
            ]
        })
        .chain([
            ("classifier.weight".to_string(), vec![d, k + 1]),
            ("classifier.bias".to_string(), vec![k + 1]),
        ])
        .collect();
    if tensors.len() != expected.len() {
        return Err(Error::format(
            "checkpoint",
            format!("expected {} tensors, found {}", expected.len(), tensors.len()),
        ));
    }
    for ((name, shape, _), (en, es)) in tensors.iter().zip(&expected) {
        if name != en || shape != es {
            return Err(Error::format(
                "checkpoint",
                format!("tensor {name} {shape:?} where {en} {es:?} was expected"),
            ));
        }
    }
    let mut it = tensors.into_iter().map(|(_, shape, data)| (shape, data));
    let mut layer = || -> Result<LinearLayer> {
        let (ws, w) = it.next().unwrap();
        let (_, b) = it.next().unwrap();
        LinearLayer::from_values(ws[0], ws[1], w, b, true)
    };
    let extractor = Mlp {
        layers: vec![layer()?, layer()?, layer()?],
    };
    let classifier = layer()?;
    Ok((
        DetectorParams {
            extractor,
            classifier,
            patch: p,
            channels: c,
            num_classes: k,
            frozen: false,
        },
        hash,
    ))
}

pub fn save_checkpoint(path: &Path, params: &DetectorParams) -> Result<CheckpointHash> {
    let bytes = encode_checkpoint(params);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    checkpoint_hash(&bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(DetectorParams, CheckpointHash)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::rng::stream;

    fn params() -> DetectorParams {
        let cfg = DetectorConfig {
            patch: 3,
            hidden: 5,
            feature_dim: 4,
            disc_hidden: 2,
        };
        DetectorParams::init(&cfg, 2, 3, &mut stream(1, "init", &[]))
    }

    #[test]
    fn round_trip_is_exact() {
        let p = params();
        let bytes = encode_checkpoint(&p);
        let (q, hash) = decode_checkpoint(&bytes).unwrap();
        for ((na, a), (nb, b)) in p.named_parameters().iter().zip(q.named_parameters()) {
            assert_eq!(na, &nb);
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.to_vec(), b.to_vec());
        }
        assert_eq!(encode_checkpoint(&q), bytes);
        assert_eq!(&hash[..], &bytes[bytes.len() - 32..]);
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = encode_checkpoint(&params());
        for pos in [0, 7, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            let err = decode_checkpoint(&bad).unwrap_err();
            assert!(err.is_integrity(), "{err}");
        }
        assert!(decode_checkpoint(&bytes[..10]).unwrap_err().is_integrity());
    }
}
