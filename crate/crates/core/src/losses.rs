//! Detection loss, the three prototype constraints and the two objectives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_with_logits, Mlp, Tensor};
use crate::error::{Error, Result};
use crate::prototypes::{PrototypeSet, ProposalLabel, SimilarityMatrix};

/// Relative vectors shorter than this are treated as undefined and skipped.
pub const RSH_MIN_NORM: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub det: f64,
    pub bpa: f64,
    pub rsh: f64,
    pub ssp: f64,
    pub grl_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            det: 1.0,
            bpa: 1.0,
            rsh: 1.0,
            ssp: 1.0,
            grl_lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn source_only() -> Self {
        Self::with_terms(1.0, 0.0, 0.0, 0.0)
    }

    pub fn with_terms(det: f64, bpa: f64, rsh: f64, ssp: f64) -> Self {
        Self {
            det,
            bpa,
            rsh,
            ssp,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.det, self.bpa, self.rsh, self.ssp, self.grl_lambda];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }

    /// True when any target-dependent constraint is active.
    pub fn uses_target(&self) -> bool {
        self.bpa > 0.0 || self.rsh > 0.0
    }
}

/// Background-prototype domain discriminator: a three-layer MLP
/// `d → h → h → 1` emitting a logit for "source".
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub mlp: Mlp,
}

impl Discriminator {
    pub fn init(feature_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::init(&[feature_dim, hidden, hidden, 1], rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.mlp.layers[0].fan_out()
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.mlp.named_parameters("disc")
    }

    /// `[m, d]` prototypes to `[m, 1]` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.mlp.forward(x)
    }
}

/// Mean softmax cross-entropy over the non-ignored rows of `[n, K+1]`
/// logits. Background rows target class `K`.
pub fn loss_detection(logits: &Tensor, labels: &[ProposalLabel]) -> Result<Tensor> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_detection",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let bg = logits.shape()[1] - 1;
    let (rows, targets): (Vec<usize>, Vec<usize>) = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            ProposalLabel::Class(c) => Some((i, *c)),
            ProposalLabel::Background => Some((i, bg)),
            ProposalLabel::Ignore => None,
        })
        .unzip();
    if rows.is_empty() {
        return Err(Error::AllIgnored);
    }
    Ok(logits
        .gather_rows(&rows)?
        .softmax_cross_entropy_rows(&targets)?
        .mean())
}

/// Adversarial background alignment for one source/target prototype pair.
pub fn loss_bpa(p_bg_s: &Tensor, p_bg_t: &Tensor, disc: &Discriminator, lambda: f64) -> Result<Tensor> {
    loss_bpa_batch(std::slice::from_ref(p_bg_s), std::slice::from_ref(p_bg_t), disc, lambda)
}

/// `mean_s BCE(D(GRL(p_s)), 1) + mean_t BCE(D(GRL(p_t)), 0)`: the
/// discriminator sees its gradient unchanged, the prototypes see it
/// multiplied by `-lambda`.
pub fn loss_bpa_batch(
    source: &[Tensor],
    target: &[Tensor],
    disc: &Discriminator,
    lambda: f64,
) -> Result<Tensor> {
    let term = |protos: &[Tensor], label: f64| -> Result<Tensor> {
        if protos.is_empty() {
            return Err(Error::InvalidArgument("BPA needs at least one prototype per domain".into()));
        }
        for p in protos {
            if p.shape() != [disc.input_dim()] {
                return Err(Error::ShapeMismatch {
                    op: "loss_bpa",
                    lhs: p.shape().to_vec(),
                    rhs: vec![disc.input_dim()],
                });
            }
        }
        let logits = disc.forward(&Tensor::stack(protos)?.grad_reverse(lambda)?)?;
        let losses = (0..protos.len())
            .map(|i| bce_with_logits(&logits.slice_rows(i, i + 1)?.reshape(&[])?, label)?.reshape(&[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::concat(&losses)?.mean())
    };
    term(source, 1.0)?.add(&term(target, 0.0)?)
}

/// `Σ_c ‖N(p_c − p_bg^s) − N(p_c − p_bg^t)‖₁` over the classes of `ps`.
/// Classes whose relative vector is (near) zero contribute nothing.
pub fn loss_rsh(ps: &PrototypeSet, p_bg_t: &Tensor) -> Result<Tensor> {
    if ps.classes.is_empty() {
        return Err(Error::InvalidArgument("RSH needs at least one foreground class".into()));
    }
    let mut terms = Vec::new();
    for p_c in ps.classes.values() {
        let rel_s = p_c.sub(&ps.background)?;
        let rel_t = p_c.sub(p_bg_t)?;
        if rel_s.norm() < RSH_MIN_NORM || rel_t.norm() < RSH_MIN_NORM {
            continue;
        }
        let diff = rel_s.l2_normalize().sub(&rel_t.l2_normalize())?;
        terms.push(diff.abs().sum().reshape(&[1])?);
    }
    if terms.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    Ok(Tensor::concat(&terms)?.sum())
}

/// `Σ_{i≠j} |M_S[i,j] − M_R[i,j]|` over ordered pairs.
pub fn loss_ssp(ms: &SimilarityMatrix, mr: &SimilarityMatrix) -> Result<Tensor> {
    if ms.classes != mr.classes {
        return Err(Error::InvalidArgument(format!(
            "similarity matrices disagree on classes: {:?} vs {:?}",
            ms.classes, mr.classes
        )));
    }
    let m = ms.size();
    let off: Vec<usize> = (0..m * m).filter(|k| k / m != k % m).collect();
    if off.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let diff = ms.values.sub(&mr.values)?.reshape(&[m * m, 1])?;
    Ok(diff.gather_rows(&off)?.abs().sum())
}

/// Weighted sum of the detector objective's four terms.
pub fn total_loss_g(det: &Tensor, bpa: &Tensor, rsh: &Tensor, ssp: &Tensor, w: &LossWeights) -> Result<Tensor> {
    for t in [det, bpa, rsh, ssp] {
        if !t.is_scalar() {
            return Err(Error::NonScalarLoss(t.shape().to_vec()));
        }
    }
    let s = |t: &Tensor| t.reshape(&[]);
    s(det)?
        .scale(w.det)
        .add(&s(bpa)?.scale(w.bpa))?
        .add(&s(rsh)?.scale(w.rsh))?
        .add(&s(ssp)?.scale(w.ssp))
}

/// The reference detector is trained on the detection loss alone.
pub fn total_loss_gr(det: &Tensor) -> Tensor {
    det.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::LinearLayer;
    use crate::prototypes::{cosine_matrix, ClassKey};
    use crate::rng::stream;
    use std::f64::consts::LN_2;
    use ProposalLabel::*;

    #[test]
    fn detection_loss_cases() {
        let sat = Tensor::constant(&[2, 3], vec![40., 0., 0., 0., 0., 40.]).unwrap();
        assert!(loss_detection(&sat, &[Class(0), Background]).unwrap().item() < 1e-12);
        let uniform = Tensor::zeros(&[2, 3]);
        let l = loss_detection(&uniform, &[Class(1), Background]).unwrap().item();
        assert!((l - 3f64.ln()).abs() < 1e-15);
        // rows [1,0,0]->class0 and [0,2,0]->bg(2): mean of two hand losses
        let logits = Tensor::constant(&[3, 3], vec![1., 0., 0., 0., 2., 0., 9., 9., 9.]).unwrap();
        let l0 = (1f64.exp() + 2.0).ln() - 1.0;
        let l1 = (2.0 + 2f64.exp()).ln();
        let l = loss_detection(&logits, &[Class(0), Background, Ignore]).unwrap().item();
        assert!((l - 0.5 * (l0 + l1)).abs() < 1e-14);
        assert!(matches!(loss_detection(&logits, &[Ignore; 3]), Err(Error::AllIgnored)));
    }

    fn zero_disc(d: usize, bias: f64) -> Discriminator {
        let mut disc = Discriminator::init(d, 3, &mut stream(0, "t", &[]));
        let last = disc.mlp.layers.len() - 1;
        disc.mlp.layers[last] = LinearLayer::from_values(3, 1, vec![0.0; 3], vec![bias], true).unwrap();
        disc
    }

    #[test]
    fn bpa_at_zero_logits_is_two_ln_two() {
        let disc = zero_disc(2, 0.0);
        let l = loss_bpa(&Tensor::vector(&[1., 2.]), &Tensor::vector(&[-1., 0.5]), &disc, 1.0)
            .unwrap()
            .item();
        assert!((l - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_gives_near_zero_bpa() {
        // h = relu(x₀ + 1): source (1, 0) -> 2, target (−1, 0) -> 0;
        // logit = 40·h − 40 gives +40 and −40.
        let mut disc = zero_disc(2, 0.0);
        disc.mlp.layers = vec![
            LinearLayer::from_values(2, 1, vec![1.0, 0.0], vec![1.0], true).unwrap(),
            LinearLayer::from_values(1, 1, vec![1.0], vec![0.0], true).unwrap(),
            LinearLayer::from_values(1, 1, vec![40.0], vec![-40.0], true).unwrap(),
        ];
        let l = loss_bpa(&Tensor::vector(&[1., 0.]), &Tensor::vector(&[-1., 0.]), &disc, 1.0)
            .unwrap()
            .item();
        assert!(l < 1e-12 && l >= 0.0, "{l}");
    }

    #[test]
    fn bpa_rejects_dimension_mismatch() {
        let disc = zero_disc(2, 0.0);
        assert!(loss_bpa(&Tensor::vector(&[1., 2., 3.]), &Tensor::vector(&[1., 2.]), &disc, 1.0).is_err());
    }

    #[test]
    fn rsh_is_zero_when_backgrounds_coincide() {
        let ps = PrototypeSet::from_vectors(0, &[(0, vec![1., 2.]), (2, vec![-3., 0.5])], &[0.2, 0.1]);
        let l = loss_rsh(&ps, &Tensor::vector(&[0.2, 0.1])).unwrap().item();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn rsh_hand_case_is_one() {
        // p_c=(1,0), p_bg^s=(0,0), p_bg^t=(0,1): d_s=(1,0), d_t=(√2/2, −√2/2)
        let ps = PrototypeSet::from_vectors(0, &[(0, vec![1., 0.])], &[0., 0.]);
        let l = loss_rsh(&ps, &Tensor::vector(&[0., 1.])).unwrap().item();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((l - ((1.0 - h) + h)).abs() < 1e-15);
        assert!((l - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rsh_skips_coincident_prototypes() {
        let ps = PrototypeSet::from_vectors(0, &[(0, vec![1., 1.])], &[1., 1.]);
        let l = loss_rsh(&ps, &Tensor::vector(&[0., 1.])).unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(l.item().is_finite());
    }

    fn matrix(m: usize, vals: Vec<f64>) -> SimilarityMatrix {
        let mut classes: Vec<ClassKey> = (0..m - 1).map(ClassKey::Class).collect();
        classes.push(ClassKey::Background);
        SimilarityMatrix {
            classes,
            values: Tensor::constant(&[m, m], vals).unwrap(),
        }
    }

    #[test]
    fn ssp_cases() {
        let a = matrix(2, vec![1.0, 0.8, 0.8, 1.0]);
        let b = matrix(2, vec![1.0, 0.6, 0.6, 1.0]);
        assert_eq!(loss_ssp(&a, &a).unwrap().item(), 0.0);
        assert!((loss_ssp(&a, &b).unwrap().item() - 0.4).abs() < 1e-15);
        let diag = matrix(2, vec![0.5, 0.8, 0.8, 0.9]);
        assert_eq!(loss_ssp(&a, &diag).unwrap().item(), 0.0);
        let three = matrix(3, vec![1.0; 9]);
        assert!(loss_ssp(&a, &three).is_err());
    }

    #[test]
    fn total_objectives() {
        let s = Tensor::scalar;
        let w = LossWeights::default();
        assert_eq!(total_loss_g(&s(0.), &s(0.), &s(0.), &s(0.), &w).unwrap().item(), 0.0);
        let parts = (s(0.5), s(0.2), s(0.1), s(0.3));
        let t = total_loss_g(&parts.0, &parts.1, &parts.2, &parts.3, &w).unwrap().item();
        assert!((t - 1.1).abs() < 1e-15);
        let t = total_loss_g(&parts.0, &parts.1, &parts.2, &parts.3, &LossWeights::source_only())
            .unwrap()
            .item();
        assert_eq!(t, 0.5);
        assert_eq!(total_loss_gr(&s(0.7)).item(), 0.7);
        assert_eq!(total_loss_gr(&s(0.0)).item(), 0.0);
    }

    #[test]
    fn ssp_on_live_matrices_flows_only_into_live_side() {
        let live = Tensor::param(&[2], vec![1.0, 0.3]).unwrap();
        let ps = PrototypeSet {
            image_id: 0,
            classes: [(0, live.clone())].into_iter().collect(),
            background: Tensor::vector(&[0.2, 1.0]),
        };
        let reference = PrototypeSet::from_vectors(0, &[(0, vec![1.0, 0.0])], &[0.0, 1.0]);
        let l = loss_ssp(&cosine_matrix(&ps).unwrap(), &cosine_matrix(&reference).unwrap()).unwrap();
        l.backward().unwrap();
        assert!(live.grad().is_some());
        assert!(reference.classes[&0].grad().is_none());
    }
}
