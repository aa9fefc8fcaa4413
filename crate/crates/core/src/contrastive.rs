//! Margined contrastive losses over prototypes.
//!
//! Intra: same-task prototypes closer than the margin repel,
//! `(1/N^2) sum_{i != j} max(0, m - |C_i - C_j|)^2`, averaged over the intent
//! and slot sets. Inter: each intent attracts its related slots quadratically
//! and repels unrelated slots inside the margin, each side scaled by
//! `1 / (2 |set|)`. Slot prototypes here never include "O".

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which prototypes the losses act on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalSpace {
    Merged,
    Original,
}

impl std::str::FromStr for CalSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merged" => Ok(CalSpace::Merged),
            "original" => Ok(CalSpace::Original),
            other => Err(Error::InvalidArgument(format!("cal.space `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub enabled: bool,
    pub margin: f64,
    pub space: CalSpace,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            enabled: true,
            margin: 1.0,
            space: CalSpace::Merged,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cal.margin must be positive, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Related (co-occurring) and unrelated slot columns per intent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelatednessSets {
    pub related: Vec<Vec<usize>>,
    pub unrelated: Vec<Vec<usize>>,
}

impl RelatednessSets {
    /// Slot `j` relates to intent `i` when `counts[i][j] > 0`.
    pub fn from_counts(counts: &[Vec<usize>]) -> Self {
        let split = |want: bool| {
            counts
                .iter()
                .map(|row| (0..row.len()).filter(|&j| (row[j] > 0) == want).collect())
                .collect()
        };
        RelatednessSets {
            related: split(true),
            unrelated: split(false),
        }
    }
}

fn hinge_squared<T: Scalar>(g: &mut Graph<T>, dist: NodeId, margin: f64) -> NodeId {
    let neg = g.scale(dist, -T::one());
    let gap = g.add_scalar(neg, T::of(margin));
    let active = g.relu(gap);
    g.square(active)
}

/// Ordered pairs `i != j`; zero when there are fewer than two prototypes.
pub fn intra_loss<T: Scalar>(g: &mut Graph<T>, protos: NodeId, margin: f64) -> Result<NodeId> {
    let n = g.value(protos).rows();
    if n < 2 {
        return Ok(g.scalar(T::zero()));
    }
    let (left, right): (Vec<usize>, Vec<usize>) = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .unzip();
    let a = g.gather_rows(protos, &left)?;
    let b = g.gather_rows(protos, &right)?;
    let d = g.distance(a, b)?;
    let h = hinge_squared(g, d, margin);
    let s = g.sum(h);
    Ok(g.scale(s, T::one() / T::of((n * n) as f64)))
}

/// `sum_i (L^R_i + L^U_i)`; an empty related or unrelated set adds nothing.
pub fn inter_loss<T: Scalar>(
    g: &mut Graph<T>,
    intent_protos: NodeId,
    slot_protos: NodeId,
    relatedness: &RelatednessSets,
    margin: f64,
) -> Result<NodeId> {
    let ni = g.value(intent_protos).rows();
    if relatedness.related.len() != ni || relatedness.unrelated.len() != ni {
        return Err(Error::InvalidArgument(format!(
            "relatedness covers {} intents, prototypes have {ni}",
            relatedness.related.len()
        )));
    }
    let pairs = |sets: &[Vec<usize>]| {
        let mut is = vec![];
        let mut js = vec![];
        let mut w = vec![];
        for (i, set) in sets.iter().enumerate() {
            for &j in set {
                is.push(i);
                js.push(j);
                w.push(T::one() / T::of(2.0 * set.len() as f64));
            }
        }
        (is, js, w)
    };

    let mut terms = vec![];
    let (is, js, w) = pairs(&relatedness.related);
    if !is.is_empty() {
        let a = g.gather_rows(intent_protos, &is)?;
        let b = g.gather_rows(slot_protos, &js)?;
        let diff = g.sub(a, b)?;
        let sq = g.square(diff);
        let d2 = g.sum_rows(sq)?;
        let wc = g.constant(Tensor::vector(w));
        let weighted = g.mul(d2, wc)?;
        terms.push(g.sum(weighted));
    }
    let (is, js, w) = pairs(&relatedness.unrelated);
    if !is.is_empty() {
        let a = g.gather_rows(intent_protos, &is)?;
        let b = g.gather_rows(slot_protos, &js)?;
        let d = g.distance(a, b)?;
        let h = hinge_squared(g, d, margin);
        let wc = g.constant(Tensor::vector(w));
        let weighted = g.mul(h, wc)?;
        terms.push(g.sum(weighted));
    }
    match terms.as_slice() {
        [] => Ok(g.scalar(T::zero())),
        [t] => Ok(*t),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// Loss nodes of one contrastive evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveTerms {
    pub intra_intent: NodeId,
    pub intra_slot: NodeId,
    /// `(intra_intent + intra_slot) / 2`
    pub intra: NodeId,
    pub inter: NodeId,
    pub total: NodeId,
}

/// `L_Inter + L_Intra`, or all zeros when disabled.
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    intent_protos: NodeId,
    slot_protos: NodeId,
    relatedness: &RelatednessSets,
    config: &ContrastiveConfig,
) -> Result<ContrastiveTerms> {
    if !config.enabled {
        let z = g.scalar(T::zero());
        return Ok(ContrastiveTerms {
            intra_intent: z,
            intra_slot: z,
            intra: z,
            inter: z,
            total: z,
        });
    }
    config.validate()?;
    let intra_intent = intra_loss(g, intent_protos, config.margin)?;
    let intra_slot = intra_loss(g, slot_protos, config.margin)?;
    let both = g.add(intra_intent, intra_slot)?;
    let intra = g.scale(both, T::of(0.5));
    let inter = inter_loss(g, intent_protos, slot_protos, relatedness, config.margin)?;
    let total = g.add(inter, intra)?;
    Ok(ContrastiveTerms {
        intra_intent,
        intra_slot,
        intra,
        inter,
        total,
    })
}
