//! Procedural instance-free benchmark: labeled source scenes, background-only
//! target training scenes, and labeled target validation scenes, where the
//! target domain is the source renderer followed by a per-channel affine
//! shift with additive noise.

mod io;
mod proposals;
mod render;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub use io::{load_dataset, write_dataset, DatasetReader, SCENE_MAGIC, SCENE_VERSION};
pub use proposals::{generate_proposals, ProposalConfig};
pub use render::SceneGenerator;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundStyle {
    /// Per-channel mean intensity.
    pub mean: Vec<f64>,
    /// Half-width of the uniform noise before smoothing.
    pub amplitude: f64,
    /// Box-blur radius applied to the noise field.
    pub smoothing: usize,
}

impl Default for BackgroundStyle {
    fn default() -> Self {
        Self {
            mean: vec![0.45, 0.45, 0.45],
            amplitude: 0.5,
            smoothing: 1,
        }
    }
}

/// `pixel' = scale[c]·pixel + offset[c] + N(0, noise_std²)`, then clamped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise_std: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            scale: vec![0.5, 0.5, 0.5],
            offset: vec![0.3, 0.3, 0.3],
            noise_std: 0.05,
        }
    }
}

impl DomainShift {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            offset: vec![0.0; channels],
            noise_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Inclusive range of objects in a labeled scene.
    pub objects_per_scene: [usize; 2],
    /// Inclusive range of object side lengths in pixels.
    pub object_size: [usize; 2],
    /// Base color per class (`num_classes` rows of `channels` values).
    pub class_colors: Vec<Vec<f64>>,
    /// Half-width of the uniform per-object color perturbation.
    pub color_jitter: f64,
    pub source_background: BackgroundStyle,
    pub target_background: BackgroundStyle,
    pub shift: DomainShift,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            num_classes: 3,
            objects_per_scene: [1, 3],
            object_size: [8, 14],
            class_colors: vec![
                vec![0.85, 0.25, 0.25],
                vec![0.25, 0.8, 0.3],
                vec![0.3, 0.35, 0.85],
            ],
            color_jitter: 0.08,
            source_background: BackgroundStyle::default(),
            target_background: BackgroundStyle::default(),
            shift: DomainShift::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.height < 8 || self.width < 8 {
            return bad(format!("grid {}x{} smaller than 8x8", self.height, self.width));
        }
        if self.channels == 0 {
            return bad("channels must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return bad("grid does not fit the scene file header".into());
        }
        let [lo, hi] = self.objects_per_scene;
        if lo == 0 || lo > hi {
            return bad(format!("objects_per_scene [{lo}, {hi}] must satisfy 1 <= lo <= hi"));
        }
        let [smin, smax] = self.object_size;
        if smin < 2 || smin > smax {
            return bad(format!("object_size [{smin}, {smax}] must satisfy 2 <= min <= max"));
        }
        if smax > self.height.min(self.width) {
            return bad(format!(
                "objects up to {smax}px cannot fit a {}x{} grid",
                self.height, self.width
            ));
        }
        if self.class_colors.len() != self.num_classes
            || self.class_colors.iter().any(|c| c.len() != self.channels)
        {
            return bad(format!(
                "class_colors must be {} rows of {} values",
                self.num_classes, self.channels
            ));
        }
        for (name, bg) in [
            ("source_background", &self.source_background),
            ("target_background", &self.target_background),
        ] {
            if bg.mean.len() != self.channels {
                return bad(format!("{name}.mean needs {} values", self.channels));
            }
        }
        if self.shift.scale.len() != self.channels || self.shift.offset.len() != self.channels {
            return bad(format!("shift scale/offset need {} values", self.channels));
        }
        if !(self.shift.noise_std >= 0.0) || !(self.color_jitter >= 0.0) {
            return bad("noise and jitter magnitudes must be non-negative".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetVal,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::SourceTrain, Split::TargetTrain, Split::TargetVal];

    pub fn name(&self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::TargetVal => "target_val",
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            Split::SourceTrain => Domain::Source,
            Split::TargetTrain | Split::TargetVal => Domain::Target,
        }
    }

    pub fn parse(name: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class: usize,
    pub bbox: BBox,
}

/// One rendered image: `height × width × channels` row-major pixels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u32,
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    pub objects: Vec<GtObject>,
}

impl Scene {
    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl SplitSizes {
    pub fn new(source_train: usize, target_train: usize, target_val: usize) -> Self {
        Self {
            source_train,
            target_train,
            target_val,
        }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::TargetTrain => self.target_train,
            Split::TargetVal => self.target_val,
        }
    }

    pub fn total(&self) -> usize {
        self.source_train + self.target_train + self.target_val
    }

    /// Global scene id of the first scene in `split`.
    pub fn first_id(&self, split: Split) -> u32 {
        (match split {
            Split::SourceTrain => 0,
            Split::TargetTrain => self.source_train,
            Split::TargetVal => self.source_train + self.target_train,
        }) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: u32,
    pub file: String,
    pub bytes: u64,
    /// Byte offset of the pixel block.
    pub pixel_offset: u64,
    /// Byte offset of the ground-truth records.
    pub gt_offset: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub size: usize,
    /// Objects per class, indexed by class.
    pub class_counts: Vec<usize>,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec_hash: String,
    pub spec: SceneSpec,
    pub seed: u64,
    pub sizes: SplitSizes,
    pub splits: BTreeMap<Split, SplitManifest>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Option<&SplitManifest> {
        self.splits.get(&split)
    }

    /// Table of per-class object counts per split.
    pub fn summary_table(&self) -> String {
        let k = self.spec.num_classes;
        let mut out = String::from("split          images");
        for c in 0..k {
            out.push_str(&format!("  class{c:<3}"));
        }
        out.push_str("  objects\n");
        for (split, m) in &self.splits {
            out.push_str(&format!("{:<14} {:>6}", split.name(), m.size));
            for count in &m.class_counts {
                out.push_str(&format!("  {count:>8}"));
            }
            out.push_str(&format!("  {:>7}\n", m.class_counts.iter().sum::<usize>()));
        }
        out
    }
}

/// In-memory dataset: manifest plus scenes grouped by split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: BTreeMap<Split, Vec<Scene>>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Scene] {
        self.scenes.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.manifest.spec
    }

    /// Pre-shift renderings of the target validation layouts: identical
    /// objects and background noise, source-domain style.
    pub fn source_view_of_target_val(&self) -> Vec<Scene> {
        let gen = SceneGenerator::new(self.manifest.spec.clone(), self.manifest.seed)
            .expect("manifest spec was validated at generation");
        let first = self.manifest.sizes.first_id(Split::TargetVal);
        (0..self.manifest.sizes.target_val as u32)
            .map(|i| gen.render_unshifted(Split::TargetVal, first + i))
            .collect()
    }
}

/// Renders every split. Output depends only on `(spec, sizes, seed)`.
pub fn generate_dataset(spec: &SceneSpec, sizes: SplitSizes, seed: u64) -> Result<Dataset> {
    if sizes.source_train == 0 || sizes.target_train == 0 || sizes.target_val == 0 {
        return Err(Error::InvalidArgument(format!(
            "every split needs at least one scene, got {sizes:?}"
        )));
    }
    let gen = SceneGenerator::new(spec.clone(), seed)?;
    let mut scenes = BTreeMap::new();
    for split in Split::ALL {
        let first = sizes.first_id(split);
        let ids: Vec<u32> = (first..first + sizes.get(split) as u32).collect();
        scenes.insert(split, gen.render_many(split, &ids));
    }
    let manifest = io::build_manifest(spec, sizes, seed, &scenes);
    let dataset = Dataset { manifest, scenes };
    check_instance_free(dataset.split(Split::TargetTrain))?;
    Ok(dataset)
}

/// Fails on the first target-train scene that carries annotations.
pub fn check_instance_free(scenes: &[Scene]) -> Result<()> {
    match scenes.iter().find(|s| !s.objects.is_empty()) {
        Some(s) => Err(Error::InstanceFreeViolation(s.id)),
        None => Ok(()),
    }
}
