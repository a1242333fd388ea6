//! Optimization: source-only training of the reference detector, offline
//! prototype caching, and the adaptation loop.

mod cache;
mod checkpoint;
mod metrics;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use cache::{CachedPrototypes, PrototypeCache, CACHE_MAGIC, CACHE_VERSION};
pub use checkpoint::{
    checkpoint_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHash,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use metrics::{parse_log, EvalBlock, MetricsLog, MetricsRecord};

use crate::autodiff::Tensor;
use crate::detector::{classify_proposals, crop_patches, DetectorConfig, DetectorParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalSplit};
use crate::losses::{
    loss_bpa_batch, loss_detection, loss_rsh, loss_ssp, total_loss_g, Discriminator, LossWeights,
};
use crate::prototypes::{
    assign_proposal_labels, build_source_prototypes, build_target_bg_prototype, cosine_matrix_over,
    PrototypeSet, ProposalLabel, BG_IOU, FG_IOU,
};
use crate::rng::stream;
use crate::synthbench::{check_instance_free, generate_proposals, Dataset, ProposalConfig, Scene, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(skip)]
    pub seed: u64,
    pub lr: f64,
    /// Discriminator learning rate as a multiple of `lr`.
    pub disc_lr_scale: f64,
    /// Heavy-ball coefficient; 0 gives plain SGD.
    pub momentum: f64,
    pub source_batch: usize,
    pub target_batch: usize,
    pub iterations: usize,
    /// Share of the run, at the end, trained at `lr·decay_factor`.
    pub decay_fraction: f64,
    pub decay_factor: f64,
    /// Random proposals per training image.
    pub n_bg: usize,
    pub jitter: f64,
    /// Evaluate on target_val every this many steps; 0 disables.
    pub eval_interval: usize,
    #[serde(skip)]
    pub model: DetectorConfig,
    #[serde(skip)]
    pub weights: LossWeights,
    #[serde(skip)]
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 5e-4,
            disc_lr_scale: 1.0,
            momentum: 0.0,
            source_batch: 2,
            target_batch: 2,
            iterations: 2500,
            decay_fraction: 0.2,
            decay_factor: 0.1,
            n_bg: 8,
            jitter: 2.0,
            eval_interval: 0,
            model: DetectorConfig::default(),
            weights: LossWeights::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    /// First step trained at the decayed rate.
    pub fn decay_boundary(&self) -> usize {
        self.iterations - (self.iterations as f64 * self.decay_fraction).ceil() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.decay_boundary() {
            self.lr
        } else {
            self.lr * self.decay_factor
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.decay_fraction) {
            return bad(format!("decay_fraction must lie in [0, 1), got {}", self.decay_fraction));
        }
        if self.decay_boundary() >= self.iterations && self.decay_fraction > 0.0 {
            return bad("decay boundary must fall before the last iteration".into());
        }
        let rates = [self.lr, self.disc_lr_scale, self.decay_factor];
        if !rates.iter().all(|r| *r >= 0.0 && r.is_finite()) {
            return bad("lr, disc_lr_scale and decay_factor must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.source_batch == 0 || self.target_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.jitter >= 0.0) {
            return bad("jitter must be non-negative".into());
        }
        self.weights.validate()
    }
}

/// Stochastic gradient descent with optional momentum.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// `p ← p − lr·g` (or the momentum form) for every trainable tensor that
    /// holds a gradient, then clears all gradients. Nothing is updated if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.step_groups(&[(params, lr)])
    }

    /// One update over several parameter groups with their own rates.
    pub fn step_groups(&mut self, groups: &[(&[(String, Tensor)], f64)]) -> Result<()> {
        for (name, t) in groups.iter().flat_map(|g| g.0.iter()) {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
            }
        }
        for &(params, lr) in groups {
            self.update(params, lr);
        }
        Ok(())
    }

    fn update(&mut self, params: &[(String, Tensor)], lr: f64) {
        for (name, t) in params {
            if !t.requires_grad() {
                continue;
            }
            if self.momentum == 0.0 {
                t.update_with_grad(|p, g| *p -= lr * g);
            } else {
                let Some(g) = t.grad() else { continue };
                let mu = self.momentum;
                let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                v.iter_mut().zip(&g).for_each(|(vi, gi)| *vi = mu * *vi + gi);
                let mut i = 0;
                t.update_with_grad(|p, _| {
                    *p -= lr * v[i];
                    i += 1;
                });
            }
            t.zero_grad();
        }
    }
}

/// One plain SGD update.
pub fn sgd_step(params: &[(String, Tensor)], lr: f64) -> Result<()> {
    Sgd::new(0.0).step(params, lr)
}

/// Initial detector parameters for a run; shared by the reference and the
/// adapted detector.
pub fn init_detector(cfg: &TrainConfig, channels: usize, num_classes: usize) -> DetectorParams {
    DetectorParams::init(&cfg.model, channels, num_classes, &mut stream(cfg.seed, "init", &[]))
}

fn sample_batch(seed: u64, name: &str, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = stream(seed, name, &[step as u64]);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn step_proposal_seed(seed: u64, step: usize) -> u64 {
    stream(seed, "proposals", &[step as u64]).random()
}

fn cache_proposal_seed(seed: u64) -> u64 {
    stream(seed, "cache", &[]).random()
}

/// Features and labels of one batch, rows grouped per image.
struct Pass {
    features: Tensor,
    labels: Vec<ProposalLabel>,
    /// `(image id, first row, end row)`.
    rows: Vec<(u32, usize, usize)>,
}

fn forward_batch(
    params: &DetectorParams,
    scenes: &[&Scene],
    pcfg: &ProposalConfig,
    proposal_seed: u64,
) -> Result<Option<Pass>> {
    let mut patches = Vec::new();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for scene in scenes {
        let boxes = generate_proposals(scene, pcfg, proposal_seed);
        let start = labels.len();
        if !boxes.is_empty() {
            patches.push(crop_patches(scene, &boxes, params.patch)?);
            labels.extend(assign_proposal_labels(&boxes, &scene.objects, FG_IOU, BG_IOU)?);
        }
        rows.push((scene.id, start, labels.len()));
    }
    if patches.is_empty() {
        return Ok(None);
    }
    let features = params.embed_patches(&Tensor::concat(&patches)?)?;
    Ok(Some(Pass {
        features,
        labels,
        rows,
    }))
}

fn proposal_config(cfg: &TrainConfig, dataset: &Dataset) -> ProposalConfig {
    ProposalConfig::for_spec(dataset.spec(), cfg.n_bg, cfg.jitter)
}

fn source_scenes(dataset: &Dataset) -> Result<&[Scene]> {
    let s = dataset.split(Split::SourceTrain);
    if s.is_empty() {
        return Err(Error::InvalidArgument("dataset has no source_train scenes".into()));
    }
    Ok(s)
}

fn maybe_eval(
    cfg: &TrainConfig,
    params: &DetectorParams,
    dataset: &Dataset,
    step: usize,
) -> Result<Option<EvalBlock>> {
    if cfg.eval_interval == 0 || (step + 1) % cfg.eval_interval != 0 {
        return Ok(None);
    }
    let report = evaluate(params, dataset, EvalSplit::TargetVal, &cfg.eval, cfg.seed, "")?;
    Ok(Some(EvalBlock::from(&report)))
}

/// Trains the reference detector on the source detection loss alone.
pub fn train_source_only(cfg: &TrainConfig, dataset: &Dataset, log: &mut MetricsLog) -> Result<DetectorParams> {
    let mut source_only = cfg.clone();
    source_only.weights = LossWeights::source_only();
    run(&source_only, dataset, None, log)
}

/// Trains the adapted detector against a reference prototype cache.
pub fn train_rscn(
    cfg: &TrainConfig,
    dataset: &Dataset,
    cache: &PrototypeCache,
    log: &mut MetricsLog,
) -> Result<DetectorParams> {
    if cache.dim != cfg.model.feature_dim {
        return Err(Error::InvalidArgument(format!(
            "prototype cache has dimension {} but the detector emits {}",
            cache.dim, cfg.model.feature_dim
        )));
    }
    for scene in source_scenes(dataset)? {
        if !cache.entries.contains_key(&scene.id) {
            return Err(Error::MissingCacheEntry(scene.id));
        }
    }
    check_instance_free(dataset.split(Split::TargetTrain))?;
    run(cfg, dataset, Some(cache), log)
}

fn run(
    cfg: &TrainConfig,
    dataset: &Dataset,
    cache: Option<&PrototypeCache>,
    log: &mut MetricsLog,
) -> Result<DetectorParams> {
    cfg.validate()?;
    let spec = dataset.spec();
    let sources = source_scenes(dataset)?;
    let targets = dataset.split(Split::TargetTrain);
    let w = cfg.weights;
    let needs_target = w.bpa > 0.0 || w.rsh > 0.0;
    if needs_target && targets.is_empty() {
        return Err(Error::InvalidArgument("dataset has no target_train scenes".into()));
    }
    let pcfg = proposal_config(cfg, dataset);

    let g = init_detector(cfg, spec.channels, spec.num_classes);
    let disc = Discriminator::init(
        cfg.model.feature_dim,
        cfg.model.disc_hidden,
        &mut stream(cfg.seed, "disc_init", &[]),
    );
    let g_params = g.named_parameters();
    let d_params = if w.bpa > 0.0 { disc.named_parameters() } else { Vec::new() };
    let mut opt = Sgd::new(cfg.momentum);

    for step in 0..cfg.iterations {
        let lr = cfg.lr_at(step);
        let pseed = step_proposal_seed(cfg.seed, step);
        let batch: Vec<&Scene> = sample_batch(cfg.seed, "source_batch", step, sources.len(), cfg.source_batch)
            .into_iter()
            .map(|i| &sources[i])
            .collect();
        let src = forward_batch(&g, &batch, &pcfg, pseed)?
            .ok_or_else(|| Error::InvalidArgument("source batch produced no proposals".into()))?;
        let logits = classify_proposals(&g, &src.features)?;
        let l_det = loss_detection(&logits, &src.labels)?;

        let mut record = MetricsRecord {
            step,
            lr,
            loss_det: Some(l_det.item()),
            loss_bpa: None,
            loss_rsh: None,
            loss_ssp: None,
            loss_total: None,
            note: None,
            eval: None,
        };
        let zero = Tensor::scalar(0.0);
        let (mut l_bpa, mut l_rsh, mut l_ssp) = (zero.clone(), zero.clone(), zero.clone());

        if w.bpa > 0.0 || w.rsh > 0.0 || w.ssp > 0.0 {
            let protos: Vec<PrototypeSet> = src
                .rows
                .iter()
                .filter_map(|&(id, a, b)| {
                    let feats = src.features.slice_rows(a, b).ok()?;
                    match build_source_prototypes(id, &feats, &src.labels[a..b]) {
                        Ok(ps) => Some(Ok(ps)),
                        Err(Error::NoBackgroundProposals) => None,
                        Err(e) => Some(Err(e)),
                    }
                })
                .collect::<Result<_>>()?;

            if needs_target {
                let tbatch: Vec<&Scene> =
                    sample_batch(cfg.seed, "target_batch", step, targets.len(), cfg.target_batch)
                        .into_iter()
                        .map(|i| &targets[i])
                        .collect();
                if let Some(s) = tbatch.iter().find(|s| !s.objects.is_empty()) {
                    return Err(Error::InstanceFreeViolation(s.id));
                }
                match forward_batch(&g, &tbatch, &pcfg, pseed)? {
                    Some(tgt) if !protos.is_empty() => {
                        let t_bg = tgt
                            .rows
                            .iter()
                            .filter(|r| r.2 > r.1)
                            .map(|&(_, a, b)| build_target_bg_prototype(&tgt.features.slice_rows(a, b)?))
                            .collect::<Result<Vec<_>>>()?;
                        if w.bpa > 0.0 {
                            let s_bg: Vec<Tensor> = protos.iter().map(|p| p.background.clone()).collect();
                            l_bpa = loss_bpa_batch(&s_bg, &t_bg, &disc, w.grl_lambda)?;
                            record.loss_bpa = Some(l_bpa.item());
                        }
                        if w.rsh > 0.0 {
                            let t_mean = Tensor::stack(&t_bg)?.mean_rows()?;
                            let terms = protos
                                .iter()
                                .filter(|p| !p.classes.is_empty())
                                .map(|p| loss_rsh(p, &t_mean)?.reshape(&[1]))
                                .collect::<Result<Vec<_>>>()?;
                            if !terms.is_empty() {
                                l_rsh = Tensor::concat(&terms)?.mean();
                                record.loss_rsh = Some(l_rsh.item());
                            }
                        }
                    }
                    Some(_) => record.note = Some("no source background prototype; BPA and RSH skipped".into()),
                    None => record.note = Some("target batch has no proposals; BPA and RSH skipped".into()),
                }
            }

            if w.ssp > 0.0 {
                let cache = cache.ok_or_else(|| Error::InvalidArgument("SSP needs a prototype cache".into()))?;
                let mut terms = Vec::new();
                for live in &protos {
                    let reference = cache.prototype_set(live.image_id)?;
                    let common: Vec<usize> = live
                        .present_classes()
                        .into_iter()
                        .filter(|c| reference.classes.contains_key(c))
                        .collect();
                    if common.is_empty() {
                        continue;
                    }
                    let ms = cosine_matrix_over(live, &common)?;
                    let mr = cosine_matrix_over(&reference, &common)?;
                    terms.push(loss_ssp(&ms, &mr)?.reshape(&[1])?);
                }
                if !terms.is_empty() {
                    l_ssp = Tensor::concat(&terms)?.mean();
                    record.loss_ssp = Some(l_ssp.item());
                }
            }
        }

        let total = total_loss_g(&l_det, &l_bpa, &l_rsh, &l_ssp, &w)?;
        record.loss_total = Some(total.item());
        total.backward()?;
        opt.step_groups(&[(&g_params, lr), (&d_params, lr * cfg.disc_lr_scale)])?;
        record.eval = maybe_eval(cfg, &g, dataset, step)?;
        log.log(record)?;
    }
    Ok(g)
}

/// Prototype vectors of the frozen reference detector for every source
/// image, on proposals drawn from the cache stream.
pub fn cache_reference_prototypes(
    reference: &DetectorParams,
    ref_hash: CheckpointHash,
    cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<PrototypeCache> {
    let spec = dataset.spec();
    if reference.num_classes != spec.num_classes || reference.channels != spec.channels {
        return Err(Error::InvalidArgument(format!(
            "checkpoint expects {} classes / {} channels, dataset has {} / {}",
            reference.num_classes, reference.channels, spec.num_classes, spec.channels
        )));
    }
    let frozen = reference.frozen();
    let pcfg = proposal_config(cfg, dataset);
    let pseed = cache_proposal_seed(cfg.seed);
    let mut cache = PrototypeCache::new(frozen.feature_dim(), ref_hash);
    for scene in source_scenes(dataset)? {
        let ps = reference_prototypes(&frozen, scene, &pcfg, pseed)?;
        cache.insert(scene.id, &ps)?;
    }
    Ok(cache)
}

const CACHE_ATTEMPTS: u64 = 16;

/// Prototypes of `scene` under `params` on the cache proposals. A draw
/// without any background proposal is replaced by a redraw from a derived
/// seed.
pub fn reference_prototypes(
    params: &DetectorParams,
    scene: &Scene,
    pcfg: &ProposalConfig,
    proposal_seed: u64,
) -> Result<PrototypeSet> {
    for attempt in 0..CACHE_ATTEMPTS {
        let seed = if attempt == 0 {
            proposal_seed
        } else {
            stream(proposal_seed, "cache_redraw", &[attempt]).random()
        };
        let Some(pass) = forward_batch(params, &[scene], pcfg, seed)? else {
            break;
        };
        match build_source_prototypes(scene.id, &pass.features, &pass.labels) {
            Err(Error::NoBackgroundProposals) => continue,
            other => return other,
        }
    }
    Err(Error::NoBackgroundProposals)
}

/// Proposal configuration and seed used by [`cache_reference_prototypes`].
pub fn cache_proposals(cfg: &TrainConfig, dataset: &Dataset) -> (ProposalConfig, u64) {
    (proposal_config(cfg, dataset), cache_proposal_seed(cfg.seed))
}
