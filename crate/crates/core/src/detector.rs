//! Toy two-stage detector over oracle proposals: crop each proposal, resize
//! it to a fixed patch, embed it with an MLP and classify it into `K`
//! foreground classes plus background (index `K`).

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{LinearLayer, Mlp, Tensor};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synthbench::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Side length of the resized proposal patch.
    pub patch: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Width of the two hidden layers of the background discriminator.
    pub disc_hidden: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            hidden: 128,
            feature_dim: 64,
            disc_hidden: 64,
        }
    }
}

/// Detector `G`: a three-layer extractor `P·P·C → h → h → d` and a linear
/// classifier `d → K+1`.
#[derive(Clone, Debug)]
pub struct DetectorParams {
    pub extractor: Mlp,
    pub classifier: LinearLayer,
    pub patch: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub frozen: bool,
}

impl DetectorParams {
    pub fn init(cfg: &DetectorConfig, channels: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let input = cfg.patch * cfg.patch * channels;
        let extractor = Mlp::init(&[input, cfg.hidden, cfg.hidden, cfg.feature_dim], rng);
        let classifier = LinearLayer::init(cfg.feature_dim, num_classes + 1, rng);
        Self {
            extractor,
            classifier,
            patch: cfg.patch,
            channels,
            num_classes,
            frozen: false,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.out_dim()
    }

    pub fn hidden(&self) -> usize {
        self.extractor.layers[0].fan_out()
    }

    pub fn background_class(&self) -> usize {
        self.num_classes
    }

    /// Constant copy: no tensor of the result ever receives gradient.
    pub fn frozen(&self) -> Self {
        Self {
            extractor: self.extractor.frozen(),
            classifier: self.classifier.frozen(),
            frozen: true,
            ..*self
        }
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            extractor: self.extractor.deep_clone(),
            classifier: self.classifier.deep_clone(),
            ..*self
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = self.extractor.named_parameters("extractor");
        out.push(("classifier.weight".into(), self.classifier.weight.clone()));
        out.push(("classifier.bias".into(), self.classifier.bias.clone()));
        out
    }

    /// Embeds a `[n, P·P·C]` patch matrix.
    pub fn embed_patches(&self, patches: &Tensor) -> Result<Tensor> {
        self.extractor.forward(patches)
    }
}

/// Bilinear crop-and-resize of `bbox` to a `patch × patch` grid, flattened
/// as `(row, col, channel)`.
///
/// Output cell `(i, j)` samples the continuous point
/// `u = x1 + (j + ½)·(x2 − x1)/P − ½`, `v = y1 + (i + ½)·(y2 − y1)/P − ½`
/// in pixel-index coordinates (pixel centers on integers). With
/// `x0 = ⌊u⌋, fx = u − x0` (and likewise for y), the value is
/// `(1−fx)(1−fy)·p[y0,x0] + fx(1−fy)·p[y0,x0+1] + (1−fx)fy·p[y0+1,x0] + fx·fy·p[y0+1,x0+1]`
/// with indices clamped to the grid.
pub fn crop_resize(scene: &Scene, bbox: &BBox, patch: usize, out: &mut Vec<f64>) -> Result<()> {
    bbox.validate()?;
    let (w, h, ch) = (scene.width, scene.height, scene.channels);
    let sx = bbox.width() / patch as f64;
    let sy = bbox.height() / patch as f64;
    let clamp_x = |x: isize| x.clamp(0, w as isize - 1) as usize;
    let clamp_y = |y: isize| y.clamp(0, h as isize - 1) as usize;
    for i in 0..patch {
        let v = bbox.y1 + (i as f64 + 0.5) * sy - 0.5;
        let y0f = v.floor();
        let fy = v - y0f;
        let (ya, yb) = (clamp_y(y0f as isize), clamp_y(y0f as isize + 1));
        for j in 0..patch {
            let u = bbox.x1 + (j as f64 + 0.5) * sx - 0.5;
            let x0f = u.floor();
            let fx = u - x0f;
            let (xa, xb) = (clamp_x(x0f as isize), clamp_x(x0f as isize + 1));
            for c in 0..ch {
                let p = |y: usize, x: usize| scene.pixel(y, x, c) as f64;
                out.push(
                    (1.0 - fx) * (1.0 - fy) * p(ya, xa)
                        + fx * (1.0 - fy) * p(ya, xb)
                        + (1.0 - fx) * fy * p(yb, xa)
                        + fx * fy * p(yb, xb),
                );
            }
        }
    }
    Ok(())
}

/// `[n, P·P·C]` extractor input: one resized crop per box, with pixel values
/// mapped from `[0, 1]` to `[-1, 1]`.
pub fn crop_patches(scene: &Scene, boxes: &[BBox], patch: usize) -> Result<Tensor> {
    let width = patch * patch * scene.channels;
    let mut data = Vec::with_capacity(boxes.len() * width);
    for b in boxes {
        crop_resize(scene, b, patch, &mut data)?;
    }
    data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    Tensor::constant(&[boxes.len(), width], data)
}

/// Row `i` of the result is the feature of `boxes[i]`.
pub fn extract_proposal_features(params: &DetectorParams, scene: &Scene, boxes: &[BBox]) -> Result<Tensor> {
    if scene.channels != params.channels {
        return Err(Error::InvalidArgument(format!(
            "scene has {} channels, detector expects {}",
            scene.channels, params.channels
        )));
    }
    let patches = crop_patches(scene, boxes, params.patch)?;
    params.embed_patches(&patches)
}

/// Raw `[n, K+1]` logits.
pub fn classify_proposals(params: &DetectorParams, features: &Tensor) -> Result<Tensor> {
    params.classifier.forward(features)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Greedy class-wise suppression in descending score order; equal scores
/// keep their input order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && k.bbox.iou_unchecked(&d.bbox) >= iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

pub(crate) fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .values()
        .chunks(c.max(1))
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Proposals → features → softmax; foreground argmax with probability at
/// least `score_thresh` becomes a detection; then class-wise NMS.
pub fn detect(
    params: &DetectorParams,
    scene: &Scene,
    proposals: &[BBox],
    score_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Detection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let feats = extract_proposal_features(params, scene, proposals)?;
    let logits = classify_proposals(params, &feats)?;
    Ok(detections_from_logits(&logits, proposals, params.num_classes, score_thresh, iou_thresh))
}

pub(crate) fn detections_from_logits(
    logits: &Tensor,
    proposals: &[BBox],
    num_classes: usize,
    score_thresh: f64,
    iou_thresh: f64,
) -> Vec<Detection> {
    let dets: Vec<Detection> = softmax_rows(logits)
        .into_iter()
        .zip(proposals)
        .filter_map(|(probs, &bbox)| {
            let (class, &score) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)))?;
            (class < num_classes && score >= score_thresh).then_some(Detection { bbox, class, score })
        })
        .collect();
    nms(&dets, iou_thresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::synthbench::{SceneGenerator, SceneSpec, Split};

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            patch: 4,
            hidden: 8,
            feature_dim: 5,
            disc_hidden: 4,
        }
    }

    fn scene() -> Scene {
        SceneGenerator::new(SceneSpec::default(), 0)
            .unwrap()
            .render(Split::SourceTrain, 0)
    }

    fn params() -> DetectorParams {
        DetectorParams::init(&small_cfg(), 3, 3, &mut stream(0, "init", &[]))
    }

    fn zero_layers(p: &mut DetectorParams) {
        for l in p.extractor.layers.iter_mut().chain(std::iter::once(&mut p.classifier)) {
            *l = LinearLayer::zeros(l.fan_in(), l.fan_out());
        }
    }

    #[test]
    fn feature_shape_and_identical_rows() {
        let p = params();
        let b = BBox::new(2.0, 3.0, 12.5, 11.0);
        let f = extract_proposal_features(&p, &scene(), &[b, b, BBox::new(0., 0., 5., 5.)]).unwrap();
        assert_eq!(f.shape(), &[3, 5]);
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn zero_extractor_gives_zero_features() {
        let mut p = params();
        zero_layers(&mut p);
        let f = extract_proposal_features(&p, &scene(), &[BBox::new(1., 1., 9., 9.)]).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_box_is_an_error() {
        let p = params();
        let r = extract_proposal_features(&p, &scene(), &[BBox::new(4., 4., 4., 9.)]);
        assert!(matches!(r, Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn crop_of_whole_aligned_grid_is_exact_downsample_average() {
        // A box covering 2x2 pixel blocks samples block corners' midpoint:
        // every sample lands halfway between pixel centers.
        let s = scene();
        let mut out = Vec::new();
        crop_resize(&s, &BBox::new(0., 0., 32., 32.), 16, &mut out).unwrap();
        let expected = 0.25
            * (s.pixel(0, 0, 1) as f64
                + s.pixel(0, 1, 1) as f64
                + s.pixel(1, 0, 1) as f64
                + s.pixel(1, 1, 1) as f64);
        assert!((out[1] - expected).abs() < 1e-12);
        // a unit box at integer coordinates samples one pixel exactly
        let mut out = Vec::new();
        crop_resize(&s, &BBox::new(5., 7., 6., 8.), 1, &mut out).unwrap();
        assert_eq!(out[2], s.pixel(7, 5, 2) as f64);
    }

    #[test]
    fn patches_are_centered_crops() {
        let s = scene();
        let b = BBox::new(3., 2., 14., 9.);
        let mut raw = Vec::new();
        crop_resize(&s, &b, 4, &mut raw).unwrap();
        let t = crop_patches(&s, &[b], 4).unwrap();
        assert_eq!(t.shape(), &[1, raw.len()]);
        for (c, r) in t.values().iter().zip(&raw) {
            assert!((c - (2.0 * r - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn classifier_cases() {
        let p = params();
        let empty = Tensor::zeros(&[0, 5]);
        assert_eq!(classify_proposals(&p, &empty).unwrap().shape(), &[0, 4]);
        let mut z = params();
        zero_layers(&mut z);
        let logits = classify_proposals(&z, &Tensor::zeros(&[2, 5])).unwrap();
        for row in softmax_rows(&logits) {
            for v in row {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
        assert!(classify_proposals(&p, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn classifier_matches_straight_line_oracle() {
        let p = params();
        let feats: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let logits = classify_proposals(&p, &Tensor::constant(&[2, 5], feats.clone()).unwrap()).unwrap();
        let w = p.classifier.weight.to_vec();
        let b = p.classifier.bias.to_vec();
        for r in 0..2 {
            for j in 0..4 {
                let mut acc = b[j];
                for i in 0..5 {
                    acc += feats[r * 5 + i] * w[i * 4 + j];
                }
                assert!((logits.row(r)[j] - acc).abs() < 1e-12);
            }
        }
    }

    fn det(b: BBox, class: usize, score: f64) -> Detection {
        Detection { bbox: b, class, score }
    }

    #[test]
    fn nms_cases() {
        let a = BBox::new(0., 0., 10., 10.);
        assert_eq!(nms(&[det(a, 0, 0.3)], 0.5).len(), 1);
        let kept = nms(&[det(a, 1, 0.8), det(a, 1, 0.9)], 0.5);
        assert_eq!(kept, vec![det(a, 1, 0.9)]);
        let far = BBox::new(20., 20., 25., 25.);
        assert_eq!(nms(&[det(a, 0, 0.8), det(far, 0, 0.9)], 0.5).len(), 2);
        // different classes never suppress each other
        assert_eq!(nms(&[det(a, 0, 0.8), det(a, 1, 0.9)], 0.5).len(), 2);
        // ties keep input order
        let b = BBox::new(30., 0., 32., 2.);
        assert_eq!(nms(&[det(b, 0, 0.5), det(a, 0, 0.5)], 0.5)[0].bbox, b);
    }

    fn constant_head(p: &mut DetectorParams, bias: Vec<f64>) {
        zero_layers(p);
        let k1 = bias.len();
        p.classifier = LinearLayer::from_values(p.feature_dim(), k1, vec![0.0; p.feature_dim() * k1], bias, true).unwrap();
    }

    #[test]
    fn always_background_detects_nothing() {
        let mut p = params();
        constant_head(&mut p, vec![0.0, 0.0, 0.0, 10.0]);
        let s = scene();
        let dets = detect(&p, &s, &s.gt_boxes(), 0.05, 0.5).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn confident_foreground_yields_one_detection_after_nms() {
        let mut p = params();
        // softmax([ln 27, 0, 0, 0]) = [0.9, 1/30, 1/30, 1/30]
        constant_head(&mut p, vec![27f64.ln(), 0.0, 0.0, 0.0]);
        let s = scene();
        let b = s.objects[0].bbox;
        let dets = detect(&p, &s, &[b], 0.05, 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.9).abs() < 1e-12);
        let dup = detect(&p, &s, &[b, b, b], 0.05, 0.5).unwrap();
        assert_eq!(dup.len(), 1);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let p = params().frozen();
        let f = extract_proposal_features(&p, &scene(), &[BBox::new(1., 1., 9., 9.)]).unwrap();
        let loss = classify_proposals(&p, &f).unwrap().sum();
        loss.backward().unwrap();
        assert!(p.named_parameters().iter().all(|(_, t)| t.grad().is_none()));
        assert!(p.frozen);
    }
}
