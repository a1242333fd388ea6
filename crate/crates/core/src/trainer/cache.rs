//! `RSPC` files: per-source-image prototype vectors computed once by the
//! frozen reference detector.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::checkpoint::CheckpointHash;
use crate::error::{Error, Result};
use crate::prototypes::PrototypeSet;

pub const CACHE_MAGIC: &[u8; 4] = b"RSPC";
pub const CACHE_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CachedPrototypes {
    /// Present classes, ascending.
    pub classes: Vec<usize>,
    /// One vector per entry of `classes`.
    pub vectors: Vec<Vec<f64>>,
    pub background: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeCache {
    pub dim: usize,
    /// Hash of the reference checkpoint that produced the vectors.
    pub ref_hash: CheckpointHash,
    pub entries: BTreeMap<u32, CachedPrototypes>,
}

impl PrototypeCache {
    pub fn new(dim: usize, ref_hash: CheckpointHash) -> Self {
        Self {
            dim,
            ref_hash,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, image_id: u32, ps: &PrototypeSet) -> Result<()> {
        let vectors: Vec<Vec<f64>> = ps.classes.values().map(|t| t.to_vec()).collect();
        let background = ps.background.to_vec();
        if vectors.iter().chain([&background]).any(|v| v.len() != self.dim) {
            return Err(Error::InvalidArgument(format!(
                "prototype of image {image_id} does not have dimension {}",
                self.dim
            )));
        }
        self.entries.insert(
            image_id,
            CachedPrototypes {
                classes: ps.present_classes(),
                vectors,
                background,
            },
        );
        Ok(())
    }

    /// Constant prototype set for `image_id`.
    pub fn prototype_set(&self, image_id: u32) -> Result<PrototypeSet> {
        let e = self
            .entries
            .get(&image_id)
            .ok_or(Error::MissingCacheEntry(image_id))?;
        let classes: Vec<(usize, Vec<f64>)> = e.classes.iter().copied().zip(e.vectors.iter().cloned()).collect();
        Ok(PrototypeSet::from_vectors(image_id, &classes, &e.background))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ref_hash);
        for (id, e) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&(e.classes.len() as u16).to_le_bytes());
            for &c in &e.classes {
                out.extend_from_slice(&(c as u16).to_le_bytes());
            }
            for v in e.vectors.iter().chain([&e.background]) {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::format("prototype cache", "file shorter than its hash trailer"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Integrity("prototype cache checksum mismatch".into()));
        }
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body
                .get(pos..pos + n)
                .ok_or_else(|| Error::format("prototype cache", format!("truncated at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CACHE_MAGIC {
            return Err(Error::format("prototype cache", "bad magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(Error::format("prototype cache", format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let ref_hash: CheckpointHash = take(32)?.try_into().unwrap();
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let id = u32::from_le_bytes(take(4)?.try_into().unwrap());
            let n = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let classes = (0..n)
                .map(|_| Ok(u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize))
                .collect::<Result<Vec<_>>>()?;
            let mut vecs = (0..=n)
                .map(|_| {
                    Ok(take(dim * 8)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            let background = vecs.pop().unwrap();
            entries.insert(
                id,
                CachedPrototypes {
                    classes,
                    vectors: vecs,
                    background,
                },
            );
        }
        if pos != body.len() {
            return Err(Error::format("prototype cache", "trailing bytes after the last record"));
        }
        Ok(Self {
            dim,
            ref_hash,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache() -> PrototypeCache {
        let mut c = PrototypeCache::new(2, [7; 32]);
        let ps = PrototypeSet::from_vectors(4, &[(0, vec![1., 2.]), (2, vec![-0.5, 3.])], &[0.25, 0.]);
        c.insert(4, &ps).unwrap();
        let ps = PrototypeSet::from_vectors(9, &[], &[1., 1.]);
        c.insert(9, &ps).unwrap();
        c
    }

    #[test]
    fn round_trip() {
        let c = cache();
        let bytes = c.encode();
        assert_eq!(PrototypeCache::decode(&bytes).unwrap(), c);
        let ps = c.prototype_set(4).unwrap();
        assert_eq!(ps.present_classes(), vec![0, 2]);
        assert_eq!(ps.classes[&2].to_vec(), vec![-0.5, 3.]);
    }

    #[test]
    fn missing_entry_names_the_image() {
        let err = cache().prototype_set(5).unwrap_err();
        assert!(matches!(err, Error::MissingCacheEntry(5)));
        assert!(err.to_string().contains('5'));
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let mut c = PrototypeCache::new(3, [0; 32]);
        let ps = PrototypeSet::from_vectors(0, &[], &[1., 1.]);
        assert!(c.insert(0, &ps).is_err());
    }

    #[test]
    fn corruption_is_an_integrity_error() {
        let mut bytes = cache().encode();
        bytes[20] ^= 1;
        assert!(PrototypeCache::decode(&bytes).unwrap_err().is_integrity());
    }
}
