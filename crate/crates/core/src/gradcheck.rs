//! Central finite-difference verification of every autodiff primitive and
//! every training loss.

use std::collections::HashSet;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{bce_with_logits, cosine_similarity, set_grl_sign_fault, Tensor};
use crate::detector::{classify_proposals, DetectorConfig, DetectorParams};
use crate::error::{Error, Result};
use crate::losses::{
    loss_bpa_batch, loss_detection, loss_rsh, loss_ssp, total_loss_g, Discriminator, LossWeights,
};
use crate::prototypes::{
    build_source_prototypes, build_target_bg_prototype, cosine_matrix, cosine_matrix_over,
    ProposalLabel,
};
use crate::rng::{stream, StreamRng};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-3;
pub const DEFAULT_TRIALS: usize = 100;
/// Inputs whose `relu`/`abs` arguments fall this close to the kink are
/// redrawn: central differences are meaningless there.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 50;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<CheckReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Fault injected into the engine for the duration of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    GrlSign,
}

type Closure = Box<dyn Fn() -> Result<Tensor>>;
type RefClosure = Box<dyn Fn(usize) -> Result<Tensor>>;

/// One randomized instance: the leaves under test, the graph whose backward
/// gives the analytic gradient, and per leaf the scalar whose central
/// differences should reproduce it.
struct Case {
    inputs: Vec<Tensor>,
    build: Closure,
    reference: RefClosure,
}

impl Case {
    fn plain(inputs: Vec<Tensor>, f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static) -> Self {
        let f = std::rc::Rc::new(f);
        let (i1, i2) = (inputs.clone(), inputs.clone());
        let f2 = f.clone();
        Case {
            inputs,
            build: Box::new(move || f(&i1)),
            reference: Box::new(move |_| f2(&i2)),
        }
    }
}

type Generator = fn(&mut StreamRng) -> Result<Case>;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn param(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero.
fn away(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::param(shape, v).unwrap()
}

fn dim(rng: &mut StreamRng) -> usize {
    rng.random_range(1..=4)
}

/// Random fixed weights turning any output into a scalar.
fn contract(shape: &[usize], rng: &mut StreamRng) -> impl Fn(Tensor) -> Result<Tensor> {
    let n = shape.iter().product();
    let w = Tensor::constant(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    move |out: Tensor| Ok(out.mul(&w)?.sum())
}

fn binary(rng: &mut StreamRng, op: fn(&Tensor, &Tensor) -> Result<Tensor>) -> Result<Case> {
    let s = [dim(rng), dim(rng)];
    let (a, b) = (param(&s, rng), param(&s, rng));
    let c = contract(&s, rng);
    Ok(Case::plain(vec![a, b], move |x| c(op(&x[0], &x[1])?)))
}

fn unary(rng: &mut StreamRng, x: Tensor, op: fn(&Tensor) -> Tensor) -> Result<Case> {
    let c = contract(&x.shape().to_vec(), rng);
    Ok(Case::plain(vec![x], move |x| c(op(&x[0]))))
}

fn primitives() -> Vec<(&'static str, Generator)> {
    vec![
        ("add", |r| binary(r, Tensor::add)),
        ("sub", |r| binary(r, Tensor::sub)),
        ("mul", |r| binary(r, Tensor::mul)),
        ("matmul", |r| {
            let (n, k, m) = (dim(r), dim(r), dim(r));
            let (a, b) = (param(&[n, k], r), param(&[k, m], r));
            let c = contract(&[n, m], r);
            Ok(Case::plain(vec![a, b], move |x| c(x[0].matmul(&x[1])?)))
        }),
        ("add_row", |r| {
            let (n, m) = (dim(r), dim(r));
            let (a, b) = (param(&[n, m], r), param(&[m], r));
            let c = contract(&[n, m], r);
            Ok(Case::plain(vec![a, b], move |x| c(x[0].add_row(&x[1])?)))
        }),
        ("relu", |r| {
            let x = away(&[dim(r), dim(r)], r);
            unary(r, x, Tensor::relu)
        }),
        ("sigmoid", |r| {
            let x = uniform(&[dim(r), dim(r)], -4.0, 4.0, r);
            unary(r, x, Tensor::sigmoid)
        }),
        ("abs", |r| {
            let x = away(&[dim(r), dim(r)], r);
            unary(r, x, Tensor::abs)
        }),
        ("mean", |r| {
            let x = param(&[dim(r), dim(r)], r);
            Ok(Case::plain(vec![x], |x| Ok(x[0].mean())))
        }),
        ("sum", |r| {
            let x = param(&[dim(r), dim(r)], r);
            Ok(Case::plain(vec![x], |x| Ok(x[0].sum())))
        }),
        ("mean_rows", |r| {
            let (n, m) = (dim(r), dim(r));
            let x = param(&[n, m], r);
            let c = contract(&[m], r);
            Ok(Case::plain(vec![x], move |x| c(x[0].mean_rows()?)))
        }),
        ("scale", |r| {
            let k = r.random_range(-3.0..3.0);
            let x = param(&[dim(r), dim(r)], r);
            let c = contract(&x.shape().to_vec(), r);
            Ok(Case::plain(vec![x], move |x| c(x[0].scale(k))))
        }),
        ("concat", |r| {
            let m = dim(r);
            let parts: Vec<Tensor> = (0..r.random_range(1..=3)).map(|_| param(&[dim(r), m], r)).collect();
            let n: usize = parts.iter().map(|p| p.shape()[0]).sum();
            let c = contract(&[n, m], r);
            Ok(Case::plain(parts, move |x| c(Tensor::concat(x)?)))
        }),
        ("stack", |r| {
            let m = dim(r);
            let parts: Vec<Tensor> = (0..r.random_range(1..=3)).map(|_| param(&[m], r)).collect();
            let c = contract(&[parts.len(), m], r);
            Ok(Case::plain(parts, move |x| c(Tensor::stack(x)?)))
        }),
        ("slice_rows", |r| {
            let (n, m) = (dim(r) + 1, dim(r));
            let start = r.random_range(0..n);
            let end = r.random_range(start + 1..=n);
            let x = param(&[n, m], r);
            let c = contract(&[end - start, m], r);
            Ok(Case::plain(vec![x], move |x| c(x[0].slice_rows(start, end)?)))
        }),
        ("gather_rows", |r| {
            let (n, m) = (dim(r), dim(r));
            // repeats exercise gradient accumulation
            let idx: Vec<usize> = (0..r.random_range(1..=6)).map(|_| r.random_range(0..n)).collect();
            let x = param(&[n, m], r);
            let c = contract(&[idx.len(), m], r);
            Ok(Case::plain(vec![x], move |x| c(x[0].gather_rows(&idx)?)))
        }),
        ("reshape", |r| {
            let (n, m) = (dim(r), dim(r));
            let x = param(&[n, m], r);
            let c = contract(&[m, n], r);
            Ok(Case::plain(vec![x], move |x| c(x[0].reshape(&[m, n])?)))
        }),
        ("grad_reverse", |r| {
            let lambda = r.random_range(0.0..2.0);
            let x = param(&[dim(r), dim(r)], r);
            let c = std::rc::Rc::new(contract(&x.shape().to_vec(), r));
            let c2 = c.clone();
            let (x1, x2) = (x.clone(), x.clone());
            // forward is the identity, so the reversed gradient is -lambda
            // times the differences of the un-reversed graph
            Ok(Case {
                inputs: vec![x],
                build: Box::new(move || c(x1.grad_reverse(lambda)?)),
                reference: Box::new(move |_| Ok(c2(x2.clone())?.scale(-lambda))),
            })
        }),
        ("gradient_scale", |r| {
            let k = r.random_range(-2.0..2.0);
            let x = param(&[dim(r), dim(r)], r);
            let c = std::rc::Rc::new(contract(&x.shape().to_vec(), r));
            let c2 = c.clone();
            let (x1, x2) = (x.clone(), x.clone());
            Ok(Case {
                inputs: vec![x],
                build: Box::new(move || c(x1.gradient_scale(k))),
                reference: Box::new(move |_| Ok(c2(x2.clone())?.scale(k))),
            })
        }),
        ("l2_normalize", |r| {
            let x = param(&[dim(r) + 1], r);
            unary(r, x, Tensor::l2_normalize)
        }),
        ("cosine_similarity", |r| {
            let n = dim(r) + 1;
            let (a, b) = (param(&[n], r), param(&[n], r));
            Ok(Case::plain(vec![a, b], |x| cosine_similarity(&x[0], &x[1])))
        }),
        ("bce_with_logits", |r| {
            let target = if r.random::<bool>() { 1.0 } else { 0.0 };
            let x = uniform(&[], -5.0, 5.0, r);
            Ok(Case::plain(vec![x], move |x| bce_with_logits(&x[0], target)))
        }),
        ("softmax_cross_entropy", |r| {
            let (n, c) = (dim(r), dim(r) + 1);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
            let x = uniform(&[n, c], -3.0, 3.0, r);
            let w = contract(&[n], r);
            Ok(Case::plain(vec![x], move |x| w(x[0].softmax_cross_entropy_rows(&labels)?)))
        }),
    ]
}

const CHANNELS: usize = 3;
const CLASSES: usize = 2;
const PROPOSALS: usize = 6;

fn tiny_config() -> DetectorConfig {
    DetectorConfig {
        patch: 2,
        hidden: 4,
        feature_dim: 3,
        disc_hidden: 3,
    }
}

/// Random extractor input rows for one image.
fn patches(rng: &mut StreamRng) -> Tensor {
    let n = PROPOSALS * 4 * CHANNELS;
    Tensor::constant(&[PROPOSALS, 4 * CHANNELS], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Labels with at least one foreground row and one background row.
fn labels(rng: &mut StreamRng) -> Vec<ProposalLabel> {
    let mut l: Vec<ProposalLabel> = (0..PROPOSALS)
        .map(|_| match rng.random_range(0..4) {
            0 => ProposalLabel::Background,
            1 => ProposalLabel::Ignore,
            k => ProposalLabel::Class(k - 2),
        })
        .collect();
    l[0] = ProposalLabel::Class(rng.random_range(0..CLASSES));
    l[1] = ProposalLabel::Background;
    l
}

/// Tiny detector plus a batch of two annotated source images, two
/// background-only target images and a frozen reference detector.
struct LossFixture {
    g: DetectorParams,
    disc: Discriminator,
    reference: DetectorParams,
    source: Vec<(Tensor, Vec<ProposalLabel>)>,
    target: Vec<Tensor>,
    lambda: f64,
}

impl LossFixture {
    fn new(rng: &mut StreamRng) -> Self {
        let cfg = tiny_config();
        let g = DetectorParams::init(&cfg, CHANNELS, CLASSES, rng);
        let disc = Discriminator::init(cfg.feature_dim, cfg.disc_hidden, rng);
        let reference = DetectorParams::init(&cfg, CHANNELS, CLASSES, rng).frozen();
        let source = (0..2).map(|_| (patches(rng), labels(rng))).collect();
        let target = (0..2).map(|_| patches(rng)).collect();
        Self {
            g,
            disc,
            reference,
            source,
            target,
            lambda: rng.random_range(0.1..1.5),
        }
    }

    fn g_inputs(&self) -> Vec<Tensor> {
        self.g.named_parameters().into_iter().map(|p| p.1).collect()
    }

    fn disc_inputs(&self) -> Vec<Tensor> {
        self.disc.named_parameters().into_iter().map(|p| p.1).collect()
    }

    fn det(&self) -> Result<Tensor> {
        let losses = self
            .source
            .iter()
            .map(|(x, l)| {
                let logits = classify_proposals(&self.g, &self.g.embed_patches(x)?)?;
                loss_detection(&logits, l)?.reshape(&[1])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::concat(&losses)?.mean())
    }

    fn bpa(&self) -> Result<Tensor> {
        let s = self
            .source
            .iter()
            .map(|(x, l)| Ok(build_source_prototypes(0, &self.g.embed_patches(x)?, l)?.background))
            .collect::<Result<Vec<_>>>()?;
        let t = self
            .target
            .iter()
            .map(|x| build_target_bg_prototype(&self.g.embed_patches(x)?))
            .collect::<Result<Vec<_>>>()?;
        loss_bpa_batch(&s, &t, &self.disc, self.lambda)
    }

    fn rsh(&self) -> Result<Tensor> {
        let p_t = build_target_bg_prototype(&self.g.embed_patches(&self.target[0])?)?;
        let (x, l) = &self.source[0];
        let ps = build_source_prototypes(0, &self.g.embed_patches(x)?, l)?;
        loss_rsh(&ps, &p_t)
    }

    fn ssp(&self) -> Result<Tensor> {
        let (x, l) = &self.source[0];
        let ps = build_source_prototypes(0, &self.g.embed_patches(x)?, l)?;
        let pr = build_source_prototypes(0, &self.reference.embed_patches(x)?, l)?;
        loss_ssp(&cosine_matrix(&ps)?, &cosine_matrix_over(&pr, &ps.present_classes())?)
    }
}

fn loss_case(rng: &mut StreamRng, f: fn(&LossFixture) -> Result<Tensor>) -> Result<Case> {
    let fx = std::rc::Rc::new(LossFixture::new(rng));
    let fx2 = fx.clone();
    Ok(Case {
        inputs: fx.g_inputs(),
        build: Box::new(move || f(&fx)),
        reference: Box::new(move |_| f(&fx2)),
    })
}

/// BPA-bearing objectives: the discriminator descends the loss while the
/// detector receives it reversed, so detector leaves are compared against
/// differences of `-lambda · L_BPA`.
fn adversarial_case(rng: &mut StreamRng, weights: Option<LossWeights>) -> Result<Case> {
    let fx = std::rc::Rc::new(LossFixture::new(rng));
    let n_g = fx.g_inputs().len();
    let mut inputs = fx.g_inputs();
    inputs.extend(fx.disc_inputs());
    let (fx1, fx2) = (fx.clone(), fx.clone());
    let build = move || match weights {
        None => fx1.bpa(),
        Some(w) => total_loss_g(&fx1.det()?, &fx1.bpa()?, &fx1.rsh()?, &fx1.ssp()?, &w),
    };
    let reference = move |i: usize| {
        let bpa_sign = if i < n_g { -fx2.lambda } else { 1.0 };
        match weights {
            None => Ok(fx2.bpa()?.scale(bpa_sign)),
            Some(w) => fx2
                .det()?
                .scale(w.det)
                .add(&fx2.bpa()?.scale(w.bpa * bpa_sign))?
                .add(&fx2.rsh()?.scale(w.rsh))?
                .add(&fx2.ssp()?.scale(w.ssp)),
        }
    };
    Ok(Case {
        inputs,
        build: Box::new(build),
        reference: Box::new(reference),
    })
}

fn losses() -> Vec<(&'static str, Generator)> {
    vec![
        ("L_det", |r| loss_case(r, LossFixture::det)),
        ("L_BPA", |r| adversarial_case(r, None)),
        ("L_RSH", |r| loss_case(r, LossFixture::rsh)),
        ("L_SSP", |r| loss_case(r, LossFixture::ssp)),
        ("L_G", |r| {
            let mut w = || r.random_range(0.2..2.0);
            let weights = LossWeights::with_terms(w(), w(), w(), w());
            adversarial_case(r, Some(weights))
        }),
    ]
}

/// Names of every check, primitives first.
pub fn check_names() -> Vec<&'static str> {
    primitives().into_iter().chain(losses()).map(|c| c.0).collect()
}

/// True if some `relu` or `abs` node reachable from `out` has an argument
/// within `margin` of zero.
fn near_kink(out: &Tensor, margin: f64) -> bool {
    let mut seen = HashSet::new();
    let mut stack = vec![out.clone()];
    while let Some(t) = stack.pop() {
        if !seen.insert(&*t.values() as *const Vec<f64> as usize) {
            continue;
        }
        if matches!(t.op_name(), "relu" | "abs") {
            let arg = &t.parents()[0];
            if arg.values().iter().any(|v| v.abs() < margin) {
                return true;
            }
        }
        stack.extend(t.parents());
    }
    false
}

/// Max relative error between backprop and central differences over all
/// elements of all inputs of one case.
fn check_case(case: &Case) -> Result<f64> {
    for x in &case.inputs {
        x.zero_grad();
    }
    (case.build)()?.backward()?;
    let mut worst: f64 = 0.0;
    for (i, x) in case.inputs.iter().enumerate() {
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.len()]);
        let base = x.to_vec();
        let mut probe = base.clone();
        for k in 0..base.len() {
            probe[k] = base[k] + FD_STEP;
            x.set_values(&probe);
            let up = (case.reference)(i)?.item();
            probe[k] = base[k] - FD_STEP;
            x.set_values(&probe);
            let down = (case.reference)(i)?.item();
            probe[k] = base[k];
            x.set_values(&base);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic[k], numeric);
            if !e.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(e);
        }
        x.zero_grad();
    }
    Ok(worst)
}

fn run_check(seed: u64, index: usize, name: &str, generator: Generator, trials: usize) -> Result<CheckReport> {
    let mut rng = stream(seed, "gradcheck", &[index as u64]);
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..trials {
        let mut case = generator(&mut rng)?;
        let mut redraws = 0;
        while near_kink(&(case.build)()?, KINK_MARGIN) {
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::InvalidArgument(format!("{name}: inputs keep landing on a kink")));
            }
            case = generator(&mut rng)?;
        }
        max_rel_err = max_rel_err.max(check_case(&case)?);
    }
    Ok(CheckReport {
        name: name.to_string(),
        trials,
        max_rel_err,
        passed: max_rel_err < REL_TOL,
    })
}

/// Runs every check for `trials` seeded trials.
pub fn run_gradcheck(seed: u64, trials: usize) -> Result<GradcheckReport> {
    let checks = primitives()
        .into_iter()
        .chain(losses())
        .enumerate()
        .map(|(i, (name, g))| run_check(seed, i, name, g, trials))
        .collect::<Result<_>>()?;
    Ok(GradcheckReport { seed, checks })
}

/// `run_gradcheck` with `fault` active on this thread.
pub fn run_gradcheck_with_fault(seed: u64, trials: usize, fault: Fault) -> Result<GradcheckReport> {
    struct Reset;
    impl Drop for Reset {
        fn drop(&mut self) {
            set_grl_sign_fault(false);
        }
    }
    let _reset = Reset;
    match fault {
        Fault::GrlSign => set_grl_sign_fault(true),
    }
    run_gradcheck(seed, trials)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_definition() {
        assert_eq!(rel_err(2.0, 2.0), 0.0);
        assert_eq!(rel_err(2.0, 1.0), 0.5);
        assert_eq!(rel_err(-1.0, 1.0), 2.0);
        // both tiny: compared against the floor
        assert!((rel_err(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn every_check_passes_a_few_trials() {
        let r = run_gradcheck(3, 5).unwrap();
        assert_eq!(r.checks.len(), check_names().len());
        for c in &r.checks {
            assert!(c.passed, "{} rel err {}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn grl_sign_fault_is_caught_and_cleared() {
        let r = run_gradcheck_with_fault(3, 3, Fault::GrlSign).unwrap();
        let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec!["grad_reverse", "L_BPA", "L_G"]);
        assert!(run_gradcheck(3, 1).unwrap().passed());
    }

    #[test]
    fn kink_detection() {
        let x = Tensor::param(&[2], vec![0.5, 1e-6]).unwrap();
        assert!(near_kink(&x.relu().sum(), KINK_MARGIN));
        let y = Tensor::param(&[2], vec![0.5, -0.2]).unwrap();
        assert!(!near_kink(&y.abs().sum(), KINK_MARGIN));
    }
}
