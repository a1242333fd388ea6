use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Scene, SceneSpec};
use crate::geometry::BBox;
use crate::rng::stream;

/// Jittered copies of each ground-truth box.
pub const COPIES_PER_GT: usize = 3;

/// Oracle proposal source: jittered ground truth plus uniform random boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub n_bg: usize,
    /// Maximum absolute offset applied to each GT coordinate.
    pub jitter: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl ProposalConfig {
    pub fn for_spec(spec: &SceneSpec, n_bg: usize, jitter: f64) -> Self {
        Self {
            n_bg,
            jitter,
            min_size: spec.object_size[0] as f64,
            max_size: spec.object_size[1] as f64,
        }
    }
}

/// `3·|GT| + n_bg` boxes, deterministic in `(scene.id, seed)`. Jittered
/// copies come first, in GT order.
pub fn generate_proposals(scene: &Scene, cfg: &ProposalConfig, seed: u64) -> Vec<BBox> {
    let mut rng = stream(seed, "proposals", &[scene.id as u64]);
    let (w, h) = (scene.width as f64, scene.height as f64);
    let mut boxes = Vec::with_capacity(COPIES_PER_GT * scene.objects.len() + cfg.n_bg);
    for gt in &scene.objects {
        for _ in 0..COPIES_PER_GT {
            let mut off = || {
                if cfg.jitter > 0.0 {
                    rng.random_range(-cfg.jitter..=cfg.jitter)
                } else {
                    0.0
                }
            };
            let b = gt.bbox;
            let cand = BBox::new(
                (b.x1 + off()).clamp(0.0, w),
                (b.y1 + off()).clamp(0.0, h),
                (b.x2 + off()).clamp(0.0, w),
                (b.y2 + off()).clamp(0.0, h),
            );
            boxes.push(if cand.width() >= 1.0 && cand.height() >= 1.0 {
                cand
            } else {
                b
            });
        }
    }
    let max_w = cfg.max_size.min(w);
    let max_h = cfg.max_size.min(h);
    for _ in 0..cfg.n_bg {
        let bw = sample_len(&mut rng, cfg.min_size.min(max_w), max_w);
        let bh = sample_len(&mut rng, cfg.min_size.min(max_h), max_h);
        let x1 = rng.random_range(0.0..=w - bw);
        let y1 = rng.random_range(0.0..=h - bh);
        boxes.push(BBox::new(x1, y1, x1 + bw, y1 + bh));
    }
    boxes
}

fn sample_len(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{SceneGenerator, Split};

    fn scene_with(n_objects: usize) -> Scene {
        let gen = SceneGenerator::new(SceneSpec::default(), 0).unwrap();
        (0..)
            .map(|id| gen.render(Split::SourceTrain, id))
            .find(|s| s.objects.len() == n_objects)
            .unwrap()
    }

    #[test]
    fn counts_three_per_gt_plus_random() {
        let s = scene_with(2);
        let cfg = ProposalConfig::for_spec(&SceneSpec::default(), 4, 2.0);
        assert_eq!(generate_proposals(&s, &cfg, 1).len(), 10);
    }

    #[test]
    fn instance_free_scene_gets_only_random_boxes() {
        let gen = SceneGenerator::new(SceneSpec::default(), 0).unwrap();
        let s = gen.render(Split::TargetTrain, 3);
        assert!(s.objects.is_empty());
        let cfg = ProposalConfig::for_spec(&SceneSpec::default(), 4, 2.0);
        assert_eq!(generate_proposals(&s, &cfg, 1).len(), 4);
    }

    #[test]
    fn zero_jitter_copies_gt_exactly() {
        let s = scene_with(3);
        let cfg = ProposalConfig::for_spec(&SceneSpec::default(), 4, 0.0);
        let boxes = generate_proposals(&s, &cfg, 7);
        for (i, gt) in s.objects.iter().enumerate() {
            for k in 0..COPIES_PER_GT {
                assert_eq!(boxes[i * COPIES_PER_GT + k], gt.bbox);
            }
        }
    }

    #[test]
    fn proposals_are_valid_in_grid_and_deterministic() {
        let s = scene_with(3);
        let cfg = ProposalConfig::for_spec(&SceneSpec::default(), 16, 3.0);
        let a = generate_proposals(&s, &cfg, 5);
        assert_eq!(a, generate_proposals(&s, &cfg, 5));
        assert_ne!(a, generate_proposals(&s, &cfg, 6));
        for b in &a {
            assert!(b.is_valid() && b.within(32.0, 32.0), "{b:?}");
        }
    }
}
