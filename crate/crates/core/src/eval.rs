//! Detection quality (AP@50, mAP) and feature-space analysis metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::autodiff::{dot, Tensor};
use crate::detector::{
    classify_proposals, crop_patches, detections_from_logits, Detection, DetectorParams,
};
use crate::error::{Error, Result};
use crate::prototypes::{assign_proposal_labels, ProposalLabel, BG_IOU, FG_IOU};
use crate::rng::stream;
use crate::synthbench::{generate_proposals, Dataset, GtObject, ProposalConfig, Scene, Split};

pub use crate::geometry::iou;

pub const MATCH_IOU: f64 = 0.5;

/// VOC all-points AP for class `class`, or `None` when no image holds a GT
/// of that class.
///
/// Detections of the class are ranked by descending score (ties: image
/// order, then position within the image). Each is matched to its
/// highest-IoU GT of the class in the same image; IoU ≥ 0.5 on an unclaimed
/// GT is a true positive, anything else a false positive.
pub fn ap50(dets: &[Vec<Detection>], gts: &[Vec<GtObject>], class: usize) -> Option<f64> {
    let n_gt: usize = gts
        .iter()
        .map(|g| g.iter().filter(|o| o.class == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (d.score, img, d)))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (k, (_, img, d)) in ranked.iter().enumerate() {
        let best = gts
            .get(*img)
            .into_iter()
            .flatten()
            .enumerate()
            .filter(|(_, g)| g.class == class)
            .map(|(j, g)| (j, d.bbox.iou_unchecked(&g.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        if let Some((j, v)) = best {
            if v >= MATCH_IOU && !claimed[*img][j] {
                claimed[*img][j] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // precision envelope, then area under the step curve
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Mean of the defined per-class APs.
pub fn map50(aps: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::InvalidArgument("mAP needs at least one class with ground truth".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt().max(crate::autodiff::EPS);
    v.iter().map(|x| x / n).collect()
}

/// Per class, the mean cosine similarity over every (source, target)
/// feature pair. Classes missing on either side are absent from the result.
pub fn cross_domain_intra_class_similarity(
    source: &BTreeMap<usize, Vec<Vec<f64>>>,
    target: &BTreeMap<usize, Vec<Vec<f64>>>,
) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for (class, src) in source {
        let Some(tgt) = target.get(class) else { continue };
        if src.is_empty() || tgt.is_empty() {
            continue;
        }
        let tn: Vec<Vec<f64>> = tgt.iter().map(|t| normalized(t)).collect();
        let mut total = 0.0;
        for s in src {
            let sn = normalized(s);
            total += tn.iter().map(|t| dot(&sn, t)).sum::<f64>();
        }
        out.insert(*class, total / (src.len() * tgt.len()) as f64);
    }
    out
}

/// `1 − (1/(N(N−1))) Σ_{i≠j} cos(p_i, p_j)`.
pub fn inter_class_discriminability(prototypes: &[Vec<f64>]) -> Result<f64> {
    let n = prototypes.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "discriminability needs at least two prototypes, got {n}"
        )));
    }
    let normed: Vec<Vec<f64>> = prototypes.iter().map(|p| normalized(p)).collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += dot(&normed[i], &normed[j]);
            }
        }
    }
    Ok(1.0 - total / (n * (n - 1)) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    /// Random proposals per evaluated scene.
    pub n_bg: usize,
    pub jitter: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_iou: 0.5,
            n_bg: 16,
            jitter: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub checkpoint_hash: String,
    /// AP@50 per class; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub map50: f64,
    pub detections: usize,
    pub ground_truths: usize,
    pub intra_class_sim: BTreeMap<usize, f64>,
    pub intra_class_sim_mean: Option<f64>,
    pub inter_class_disc: Option<f64>,
}

/// Detections plus correctly-labeled foreground features for one scene set.
pub struct SceneSetOutputs {
    pub detections: Vec<Vec<Detection>>,
    pub fg_features: BTreeMap<usize, Vec<Vec<f64>>>,
}

/// Runs the detector on every scene with oracle proposals drawn from
/// `proposal_seed`.
pub fn run_detector(
    params: &DetectorParams,
    scenes: &[Scene],
    cfg: &EvalConfig,
    proposals: &ProposalConfig,
    proposal_seed: u64,
) -> Result<SceneSetOutputs> {
    let per_scene = |scene: &Scene| -> Result<(Vec<Detection>, Vec<(usize, Vec<f64>)>)> {
        let boxes = generate_proposals(scene, proposals, proposal_seed);
        if boxes.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let feats = params.embed_patches(&crop_patches(scene, &boxes, params.patch)?)?;
        let logits = classify_proposals(params, &feats)?;
        let dets = detections_from_logits(&logits, &boxes, params.num_classes, cfg.score_thresh, cfg.nms_iou);
        let labels = assign_proposal_labels(&boxes, &scene.objects, FG_IOU, BG_IOU)?;
        let fg = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                ProposalLabel::Class(c) => Some((*c, feats.row(i))),
                _ => None,
            })
            .collect();
        Ok((dets, fg))
    };
    let results: Vec<_> = scenes.iter().map(per_scene).collect::<Result<_>>()?;
    let mut detections = Vec::with_capacity(results.len());
    let mut fg_features: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (d, fg) in results {
        detections.push(d);
        for (c, f) in fg {
            fg_features.entry(c).or_default().push(f);
        }
    }
    Ok(SceneSetOutputs {
        detections,
        fg_features,
    })
}

/// AP@50 report on `scenes`, with the analysis metrics computed against
/// `source_outputs` (features of the source training set).
pub fn evaluate_scenes(
    split: &str,
    checkpoint_hash: &str,
    num_classes: usize,
    scenes: &[Scene],
    outputs: &SceneSetOutputs,
    source_outputs: Option<&SceneSetOutputs>,
) -> Result<EvalReport> {
    let gts: Vec<Vec<GtObject>> = scenes.iter().map(|s| s.objects.clone()).collect();
    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| ap50(&outputs.detections, &gts, c))
        .collect();
    let map = map50(&per_class_ap)?;
    let (intra, intra_mean, disc) = match source_outputs {
        Some(src) => {
            let intra = cross_domain_intra_class_similarity(&src.fg_features, &outputs.fg_features);
            let mean = (!intra.is_empty()).then(|| intra.values().sum::<f64>() / intra.len() as f64);
            let protos: Vec<Vec<f64>> = src
                .fg_features
                .values()
                .filter(|fs| !fs.is_empty())
                .map(|fs| mean_vector(fs))
                .collect();
            (intra, mean, inter_class_discriminability(&protos).ok())
        }
        None => (BTreeMap::new(), None, None),
    };
    Ok(EvalReport {
        split: split.to_string(),
        checkpoint_hash: checkpoint_hash.to_string(),
        per_class_ap,
        map50: map,
        detections: outputs.detections.iter().map(Vec::len).sum(),
        ground_truths: gts.iter().map(Vec::len).sum(),
        intra_class_sim: intra,
        intra_class_sim_mean: intra_mean,
        inter_class_disc: disc,
    })
}

/// Scene sets an [`EvalReport`] can be computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    SourceTrain,
    TargetVal,
    /// Target validation layouts rendered in source style.
    SourceVal,
}

impl EvalSplit {
    pub const ALL: [EvalSplit; 3] = [EvalSplit::SourceTrain, EvalSplit::TargetVal, EvalSplit::SourceVal];

    pub fn name(&self) -> &'static str {
        match self {
            EvalSplit::SourceTrain => "source_train",
            EvalSplit::TargetVal => "target_val",
            EvalSplit::SourceVal => "source_val",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn scenes(&self, dataset: &Dataset) -> Vec<Scene> {
        match self {
            EvalSplit::SourceTrain => dataset.split(Split::SourceTrain).to_vec(),
            EvalSplit::TargetVal => dataset.split(Split::TargetVal).to_vec(),
            EvalSplit::SourceVal => dataset.source_view_of_target_val(),
        }
    }
}

/// Seed of the fixed evaluation proposals.
pub fn eval_proposal_seed(seed: u64) -> u64 {
    stream(seed, "eval_proposals", &[]).random()
}

/// Full report on `split`. Analysis metrics pair the split's features with
/// those of the source training set.
pub fn evaluate(
    params: &DetectorParams,
    dataset: &Dataset,
    split: EvalSplit,
    cfg: &EvalConfig,
    seed: u64,
    checkpoint_hash: &str,
) -> Result<EvalReport> {
    let pcfg = ProposalConfig::for_spec(dataset.spec(), cfg.n_bg, cfg.jitter);
    let pseed = eval_proposal_seed(seed);
    let scenes = split.scenes(dataset);
    let outputs = run_detector(params, &scenes, cfg, &pcfg, pseed)?;
    let source = if split == EvalSplit::SourceTrain {
        None
    } else {
        Some(run_detector(params, dataset.split(Split::SourceTrain), cfg, &pcfg, pseed)?)
    };
    let source_ref = match split {
        EvalSplit::SourceTrain => Some(&outputs),
        _ => source.as_ref(),
    };
    evaluate_scenes(split.name(), checkpoint_hash, params.num_classes, &scenes, &outputs, source_ref)
}

fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for r in rows {
        out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= rows.len() as f64);
    out
}

/// Convenience for tests and small tools: the feature rows as a tensor.
pub fn features_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    Tensor::constant(&[rows.len(), d], rows.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn gt(class: usize, b: [f64; 4]) -> GtObject {
        GtObject {
            class,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        }
    }

    fn det(class: usize, b: [f64; 4], score: f64) -> Detection {
        Detection {
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            class,
            score,
        }
    }

    #[test]
    fn ap_basic_cases() {
        let g = vec![vec![gt(0, [0., 0., 10., 10.])]];
        assert_eq!(ap50(&[vec![det(0, [0., 0., 10., 10.], 0.9)]], &g, 0), Some(1.0));
        assert_eq!(ap50(&[vec![]], &g, 0), Some(0.0));
        assert_eq!(ap50(&[vec![]], &g, 1), None);
        // higher-scored FP then lower-scored TP: precision 1/2 at recall 1
        let ds = vec![vec![det(0, [20., 20., 30., 30.], 0.9), det(0, [0., 0., 10., 10.], 0.5)]];
        assert_eq!(ap50(&ds, &g, 0), Some(0.5));
    }

    #[test]
    fn duplicate_detection_counts_as_false_positive() {
        let g = vec![vec![gt(0, [0., 0., 10., 10.]), gt(0, [20., 20., 30., 30.])]];
        let ds = vec![vec![
            det(0, [0., 0., 10., 10.], 0.9),
            det(0, [0., 0., 10., 10.], 0.8),
            det(0, [20., 20., 30., 30.], 0.7),
        ]];
        // TP, FP, TP: recall 0.5 @ p=1, recall 1 @ p=2/3
        let ap = ap50(&ds, &g, 0).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn map_cases() {
        assert_eq!(map50(&[Some(1.0), Some(0.0)]).unwrap(), 0.5);
        assert_eq!(map50(&[Some(0.3), None]).unwrap(), 0.3);
        let five = [Some(0.1), Some(0.2), Some(0.3), Some(0.4), Some(0.5)];
        assert!((map50(&five).unwrap() - 0.3).abs() < 1e-15);
        assert!(map50(&[None, None]).is_err());
    }

    #[test]
    fn intra_class_similarity_cases() {
        let a: BTreeMap<usize, Vec<Vec<f64>>> = [(0, vec![vec![1., 0.], vec![0., 2.]])].into();
        let s = cross_domain_intra_class_similarity(&a, &a);
        // pairs: (e1,e1)=1, (e1,e2)=0, (e2,e1)=0, (e2,e2)=1
        assert_eq!(s[&0], 0.5);
        let src: BTreeMap<usize, Vec<Vec<f64>>> = [(0, vec![vec![1., 0.]])].into();
        assert_eq!(cross_domain_intra_class_similarity(&src, &src)[&0], 1.0);
        let tgt: BTreeMap<usize, Vec<Vec<f64>>> = [(0, vec![vec![0., 3.]]), (1, vec![vec![1., 1.]])].into();
        let s = cross_domain_intra_class_similarity(&src, &tgt);
        assert_eq!(s[&0], 0.0);
        assert!(!s.contains_key(&1));
        // one pair at cos 0.5, one at cos 0.7
        let c7 = (1.0f64 - 0.49).sqrt();
        let src: BTreeMap<usize, Vec<Vec<f64>>> = [(0, vec![vec![1., 0.]])].into();
        let tgt: BTreeMap<usize, Vec<Vec<f64>>> =
            [(0, vec![vec![0.5, 0.75f64.sqrt()], vec![0.7, c7]])].into();
        assert!((cross_domain_intra_class_similarity(&src, &tgt)[&0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn discriminability_cases() {
        let v = vec![0.3, -0.2, 0.9];
        assert!(inter_class_discriminability(&[v.clone(), v.clone(), v]).unwrap().abs() < 1e-12);
        let e = |i: usize| (0..3).map(|j| (i == j) as u8 as f64).collect::<Vec<f64>>();
        assert_eq!(inter_class_discriminability(&[e(0), e(1), e(2)]).unwrap(), 1.0);
        let half = vec![0.5, 0.75f64.sqrt(), 0.0];
        let d = inter_class_discriminability(&[e(0), half]).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        assert!(inter_class_discriminability(&[e(0)]).is_err());
    }

    #[test]
    fn discriminability_ignores_positive_rescaling() {
        let ps = vec![vec![1., 2., 0.], vec![-1., 0.5, 3.], vec![0.2, 0.2, 0.1]];
        let mut scaled = ps.clone();
        scaled[1].iter_mut().for_each(|v| *v *= 17.0);
        let a = inter_class_discriminability(&ps).unwrap();
        let b = inter_class_discriminability(&scaled).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
