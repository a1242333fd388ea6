//! Per-image class prototypes and their cosine-similarity structure.

use std::collections::BTreeMap;

use crate::autodiff::{cosine_similarity, Tensor};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synthbench::GtObject;

pub const FG_IOU: f64 = 0.5;
pub const BG_IOU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalLabel {
    Class(usize),
    Background,
    Ignore,
}

/// Max-IoU assignment: class of the best GT if IoU ≥ `fg_iou`, background
/// if below `bg_iou`, ignore in between. No GT means all background.
pub fn assign_proposal_labels(
    boxes: &[BBox],
    gts: &[GtObject],
    fg_iou: f64,
    bg_iou: f64,
) -> Result<Vec<ProposalLabel>> {
    if !(0.0 <= bg_iou && bg_iou <= fg_iou && fg_iou <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label thresholds need 0 <= bg ({bg_iou}) <= fg ({fg_iou}) <= 1"
        )));
    }
    Ok(boxes
        .iter()
        .map(|b| {
            let best = gts
                .iter()
                .map(|g| (b.iou_unchecked(&g.bbox), g.class))
                .fold(None, |acc: Option<(f64, usize)>, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((iou, class)) if iou >= fg_iou => ProposalLabel::Class(class),
                Some((iou, _)) if iou >= bg_iou => ProposalLabel::Ignore,
                _ => ProposalLabel::Background,
            }
        })
        .collect())
}

/// Foreground prototypes keyed by class plus the background prototype.
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    pub image_id: u32,
    pub classes: BTreeMap<usize, Tensor>,
    pub background: Tensor,
}

impl PrototypeSet {
    /// `C(x)` in ascending order.
    pub fn present_classes(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    /// Constant prototypes from stored vectors.
    pub fn from_vectors(image_id: u32, classes: &[(usize, Vec<f64>)], background: &[f64]) -> Self {
        Self {
            image_id,
            classes: classes
                .iter()
                .map(|(c, v)| (*c, Tensor::vector(v)))
                .collect(),
            background: Tensor::vector(background),
        }
    }

    /// Prototypes in similarity-matrix order: classes ascending, background
    /// last.
    pub fn ordered(&self, classes: &[usize]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(classes.len() + 1);
        for c in classes {
            let p = self.classes.get(c).ok_or_else(|| {
                Error::InvalidArgument(format!("class {c} absent from image {}", self.image_id))
            })?;
            out.push(p.clone());
        }
        out.push(self.background.clone());
        Ok(out)
    }
}

/// Means of the rows of `features` per label; ignore rows are dropped.
pub fn build_source_prototypes(
    image_id: u32,
    features: &Tensor,
    labels: &[ProposalLabel],
) -> Result<PrototypeSet> {
    if features.shape().len() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "build_source_prototypes",
            lhs: features.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut bg = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            ProposalLabel::Class(c) => by_class.entry(*c).or_default().push(i),
            ProposalLabel::Background => bg.push(i),
            ProposalLabel::Ignore => {}
        }
    }
    if bg.is_empty() {
        return Err(Error::NoBackgroundProposals);
    }
    let classes = by_class
        .into_iter()
        .map(|(c, rows)| Ok((c, features.gather_rows(&rows)?.mean_rows()?)))
        .collect::<Result<_>>()?;
    Ok(PrototypeSet {
        image_id,
        classes,
        background: features.gather_rows(&bg)?.mean_rows()?,
    })
}

/// Mean of every proposal feature of a background-only image.
pub fn build_target_bg_prototype(features: &Tensor) -> Result<Tensor> {
    if features.shape().len() != 2 || features.shape()[0] == 0 {
        return Err(Error::InvalidArgument(
            "target background prototype needs at least one proposal".into(),
        ));
    }
    features.mean_rows()
}

/// Row/column key of a similarity matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ClassKey {
    Class(usize),
    Background,
}

/// Pairwise cosine similarities of prototypes, classes ascending then
/// background.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    pub classes: Vec<ClassKey>,
    /// `[m, m]`.
    pub values: Tensor,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.values()[i * self.size() + j]
    }
}

/// Similarity matrix over all of `C(x)` plus background.
pub fn cosine_matrix(ps: &PrototypeSet) -> Result<SimilarityMatrix> {
    cosine_matrix_over(ps, &ps.present_classes())
}

/// Similarity matrix restricted to `classes` (ascending) plus background.
pub fn cosine_matrix_over(ps: &PrototypeSet, classes: &[usize]) -> Result<SimilarityMatrix> {
    let protos = ps.ordered(classes)?;
    let m = protos.len();
    let mut entries = Vec::with_capacity(m * m);
    for a in &protos {
        for b in &protos {
            entries.push(cosine_similarity(a, b)?.reshape(&[1])?);
        }
    }
    let values = Tensor::concat(&entries)?.reshape(&[m, m])?;
    let mut keys: Vec<ClassKey> = classes.iter().map(|&c| ClassKey::Class(c)).collect();
    keys.push(ClassKey::Background);
    Ok(SimilarityMatrix { classes: keys, values })
}
