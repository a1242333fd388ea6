//! On-disk layout: `manifest.json` plus one binary file per scene under
//! `scenes/`. A scene file is a 16-byte header (magic, version, H, W, C,
//! GT count, reserved; all little-endian u16 after the magic), the f32 pixel
//! block, then one `class, x1, y1, x2, y2` u16 record per object.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{
    check_instance_free, Dataset, DatasetManifest, GtObject, Scene, SceneEntry, SceneSpec, Split,
    SplitManifest, SplitSizes,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const SCENE_MAGIC: &[u8; 4] = b"IFDS";
pub const SCENE_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const GT_RECORD_LEN: usize = 10;
const MANIFEST_FILE: &str = "manifest.json";
const SCENE_DIR: &str = "scenes";
const FORMAT_VERSION: u32 = 1;

fn scene_file_name(id: u32) -> String {
    format!("{SCENE_DIR}/{id:06}.ifds")
}

pub(crate) fn encode_scene(scene: &Scene) -> Vec<u8> {
    let mut out =
        Vec::with_capacity(HEADER_LEN + 4 * scene.pixels.len() + GT_RECORD_LEN * scene.objects.len());
    out.extend_from_slice(SCENE_MAGIC);
    for v in [
        SCENE_VERSION,
        scene.height as u16,
        scene.width as u16,
        scene.channels as u16,
        scene.objects.len() as u16,
        0,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &scene.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for o in &scene.objects {
        let b = o.bbox;
        for v in [o.class as u16, b.x1 as u16, b.y1 as u16, b.x2 as u16, b.y2 as u16] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

pub(crate) fn decode_scene(bytes: &[u8], id: u32, split: Split) -> Result<Scene> {
    let bad = |detail: String| Error::format("scene file", format!("scene {id}: {detail}"));
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != SCENE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = read_u16(bytes, 4);
    if version != SCENE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (h, w, c, n_gt) = (
        read_u16(bytes, 6) as usize,
        read_u16(bytes, 8) as usize,
        read_u16(bytes, 10) as usize,
        read_u16(bytes, 12) as usize,
    );
    let n_px = h * w * c;
    let expected = HEADER_LEN + 4 * n_px + GT_RECORD_LEN * n_gt;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let pixels = bytes[HEADER_LEN..HEADER_LEN + 4 * n_px]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let gt_start = HEADER_LEN + 4 * n_px;
    let objects = (0..n_gt)
        .map(|i| {
            let at = gt_start + i * GT_RECORD_LEN;
            let f = |k: usize| read_u16(bytes, at + 2 * k);
            GtObject {
                class: f(0) as usize,
                bbox: BBox::new(f(1) as f64, f(2) as f64, f(3) as f64, f(4) as f64),
            }
        })
        .collect();
    Ok(Scene {
        id,
        domain: split.domain(),
        height: h,
        width: w,
        channels: c,
        pixels,
        objects,
    })
}

pub(crate) fn build_manifest(
    spec: &SceneSpec,
    sizes: SplitSizes,
    seed: u64,
    scenes: &BTreeMap<Split, Vec<Scene>>,
) -> DatasetManifest {
    let splits = scenes
        .iter()
        .map(|(&split, list)| {
            let mut class_counts = vec![0; spec.num_classes];
            let entries = list
                .iter()
                .map(|s| {
                    for o in &s.objects {
                        class_counts[o.class] += 1;
                    }
                    let bytes = encode_scene(s);
                    SceneEntry {
                        id: s.id,
                        file: scene_file_name(s.id),
                        bytes: bytes.len() as u64,
                        pixel_offset: HEADER_LEN as u64,
                        gt_offset: (HEADER_LEN + 4 * s.pixels.len()) as u64,
                        sha256: hex::encode(Sha256::digest(&bytes)),
                    }
                })
                .collect();
            (
                split,
                SplitManifest {
                    size: list.len(),
                    class_counts,
                    scenes: entries,
                },
            )
        })
        .collect();
    DatasetManifest {
        format_version: FORMAT_VERSION,
        spec_hash: spec.hash(),
        spec: spec.clone(),
        seed,
        sizes,
        splits,
    }
}

/// Writes the manifest and every scene file under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let scene_dir = dir.join(SCENE_DIR);
    fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
    for scenes in dataset.scenes.values() {
        for s in scenes {
            let path = dir.join(scene_file_name(s.id));
            fs::write(&path, encode_scene(s)).map_err(|e| Error::io(&path, e))?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&dataset.manifest)?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Verified access to a dataset directory.
#[derive(Debug)]
pub struct DatasetReader {
    dir: PathBuf,
    manifest: DatasetManifest,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&raw)?;
        if manifest.spec.hash() != manifest.spec_hash {
            return Err(Error::Integrity(format!(
                "spec hash {} does not match manifest spec ({})",
                manifest.spec_hash,
                manifest.spec.hash()
            )));
        }
        manifest.spec.validate()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn read_entry(&self, split: Split, entry: &SceneEntry) -> Result<Scene> {
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() as u64 != entry.bytes {
            return Err(Error::format(
                "scene file",
                format!("scene {}: truncated ({} of {} bytes)", entry.id, bytes.len(), entry.bytes),
            ));
        }
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::SceneChecksum(entry.id));
        }
        let scene = decode_scene(&bytes, entry.id, split)?;
        let spec = &self.manifest.spec;
        if (scene.height, scene.width, scene.channels) != (spec.height, spec.width, spec.channels) {
            return Err(Error::format(
                "scene file",
                format!("scene {}: dimensions disagree with the manifest spec", entry.id),
            ));
        }
        Ok(scene)
    }

    /// Scenes of `split` in manifest order, each verified against its checksum.
    pub fn scenes(&self, split: Split) -> impl Iterator<Item = Result<Scene>> + '_ {
        self.manifest
            .split(split)
            .into_iter()
            .flat_map(|m| m.scenes.iter())
            .map(move |e| self.read_entry(split, e))
    }

    pub fn load_all(self) -> Result<Dataset> {
        let mut scenes = BTreeMap::new();
        for split in self.manifest.splits.keys().copied() {
            let list = self.scenes(split).collect::<Result<Vec<_>>>()?;
            scenes.insert(split, list);
        }
        let dataset = Dataset {
            manifest: self.manifest,
            scenes,
        };
        check_instance_free(dataset.split(Split::TargetTrain))?;
        Ok(dataset)
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    DatasetReader::open(dir)?.load_all()
}
