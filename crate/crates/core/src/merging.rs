//! Prototype merging: intent/slot cross-attention from support co-occurrence
//! statistics and from additive attention over prototypes, followed by
//! attentive fusion of the two prototype sets.
//!
//! Only non-"O" tags take part; the "O" prototype passes through untouched.
//! Attention is per tag symbol, so `B-x` and `I-x` are separate columns.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamMap, Tensor};
use crate::corpus::SemanticFrame;
use crate::error::{Error, Result};
use crate::protonet::{LabelSpace, PrototypeSet};
use crate::scalar::Scalar;

pub const W: &str = "merge.w";
pub const U: &str = "merge.u";
pub const V: &str = "merge.v";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub enabled: bool,
    /// Weight of the statistic attention against the learned one.
    pub lambda: f64,
    /// Weight of fused prototypes against originals.
    pub alpha: f64,
    /// Hidden width of the additive attention; 0 means the embedding dim.
    pub hidden: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            enabled: true,
            lambda: 0.5,
            alpha: 0.5,
            hidden: 0,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("merge.lambda", self.lambda), ("merge.alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `W, U: [h x d]` and `V: [h]`, uniform in `[-0.1, 0.1]`.
pub fn init_params<T: Scalar, R: Rng>(
    dim: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<ParamMap<T>> {
    let h = if hidden == 0 { dim } else { hidden };
    let mut draw =
        |n: usize| -> Vec<T> { (0..n).map(|_| T::of(rng.gen_range(-0.1..=0.1))).collect() };
    let mut p = ParamMap::new();
    p.insert(W.to_string(), Tensor::matrix(h, dim, draw(h * dim))?);
    p.insert(U.to_string(), Tensor::matrix(h, dim, draw(h * dim))?);
    p.insert(V.to_string(), Tensor::vector(draw(h)));
    Ok(p)
}

/// Frame-level co-occurrence of intents and non-"O" tags in a support set.
#[derive(Clone, Debug, PartialEq)]
pub struct Cooccurrence<T> {
    /// `counts[i][j]`: support frames with intent `i` containing tag column `j`.
    pub counts: Vec<Vec<usize>>,
    /// Row-normalized counts; rows with no slots are uniform.
    pub a_stat: Tensor<T>,
}

/// Columns follow [`LabelSpace::slot_tag_indices`].
pub fn cooccurrence_attention<T: Scalar>(
    support: &[SemanticFrame],
    labels: &LabelSpace,
) -> Cooccurrence<T> {
    let columns = labels.slot_tag_indices();
    let (ni, nt) = (labels.intents.len(), columns.len());
    let mut counts = vec![vec![0usize; nt]; ni];
    for f in support {
        let Some(i) = labels.intent_index(&f.intent) else {
            continue;
        };
        for tag in f.slot_tag_set() {
            if let Some(j) = labels
                .tag_index(tag)
                .and_then(|t| columns.iter().position(|&c| c == t))
            {
                counts[i][j] += 1;
            }
        }
    }
    let mut a = Tensor::zeros(&[ni, nt]);
    for (i, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &c) in row.iter().enumerate() {
            a.data_mut()[i * nt + j] = if total == 0 {
                T::one() / T::of(nt as f64)
            } else {
                T::of(c as f64) / T::of(total as f64)
            };
        }
    }
    Cooccurrence { counts, a_stat: a }
}

/// Bound handles of the additive attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct MergeHandles {
    pub w: NodeId,
    pub u: NodeId,
    pub v: NodeId,
}

impl MergeHandles {
    pub fn bind(nodes: &std::collections::BTreeMap<String, NodeId>) -> Result<Self> {
        let get = |k: &str| {
            nodes
                .get(k)
                .copied()
                .ok_or_else(|| Error::UnknownParameter(k.into()))
        };
        Ok(MergeHandles {
            w: get(W)?,
            u: get(U)?,
            v: get(V)?,
        })
    }
}

/// `score[i][j] = V . tanh(W c_i + U s_j)`, softmaxed along each row.
pub fn representation_attention<T: Scalar>(
    g: &mut Graph<T>,
    intent_protos: NodeId,
    slot_protos: NodeId,
    params: MergeHandles,
) -> Result<NodeId> {
    let (ni, d) = g.value(intent_protos).dims2();
    let (nt, ds) = g.value(slot_protos).dims2();
    let (h, dw) = g.value(params.w).dims2();
    if d != ds || dw != d || g.value(params.u).shape() != [h, d] || g.value(params.v).shape() != [h]
    {
        return Err(Error::shape(
            "representation_attention",
            format!(
                "intents {:?}, slots {:?}, W {:?}, U {:?}, V {:?}",
                g.value(intent_protos).shape(),
                g.value(slot_protos).shape(),
                g.value(params.w).shape(),
                g.value(params.u).shape(),
                g.value(params.v).shape()
            ),
        ));
    }
    let wt = g.transpose(params.w)?;
    let wi = g.matmul(intent_protos, wt)?;
    let ut = g.transpose(params.u)?;
    let us = g.matmul(slot_protos, ut)?;
    let rows_i: Vec<usize> = (0..ni).flat_map(|i| std::iter::repeat_n(i, nt)).collect();
    let rows_t: Vec<usize> = (0..ni).flat_map(|_| 0..nt).collect();
    let a = g.gather_rows(wi, &rows_i)?;
    let b = g.gather_rows(us, &rows_t)?;
    let pre = g.add(a, b)?;
    let act = g.tanh(pre);
    let v = g.reshape(params.v, &[h, 1])?;
    let scores = g.matmul(act, v)?;
    let scores = g.reshape(scores, &[ni, nt])?;
    g.row_softmax(scores)
}

/// Attention matrices of one episode, all `[N_I x N_T']`.
#[derive(Clone, Debug)]
pub struct AttentionState<T> {
    pub cooccurrence_counts: Vec<Vec<usize>>,
    pub a_stat: Tensor<T>,
    pub a_stat_node: NodeId,
    pub a_repr: NodeId,
    pub a_final: NodeId,
}

/// `A = lambda A^S + (1 - lambda) A^R`.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    protos: &PrototypeSet,
    support: &[SemanticFrame],
    labels: &LabelSpace,
    params: MergeHandles,
    lambda: f64,
) -> Result<AttentionState<T>> {
    let co = cooccurrence_attention::<T>(support, labels);
    let columns = labels.slot_tag_indices();
    let slot_rows = g.gather_rows(protos.slots, &columns)?;
    let a_repr = representation_attention(g, protos.intents, slot_rows, params)?;
    let a_stat_node = g.constant(co.a_stat.clone());
    let s = g.scale(a_stat_node, T::of(lambda));
    let r = g.scale(a_repr, T::of(1.0 - lambda));
    let a_final = g.add(s, r)?;
    Ok(AttentionState {
        cooccurrence_counts: co.counts,
        a_stat: co.a_stat,
        a_stat_node,
        a_repr,
        a_final,
    })
}

/// Fused intent `i` = `sum_j A[i][j] slot_j`; fused slot `j` =
/// `sum_i A[i][j] intent_i` (columns are not renormalized). Merged
/// prototypes are `alpha * fused + (1 - alpha) * original`.
pub fn merge_prototypes<T: Scalar>(
    g: &mut Graph<T>,
    protos: &PrototypeSet,
    labels: &LabelSpace,
    a_final: NodeId,
    alpha: f64,
) -> Result<PrototypeSet> {
    let columns = labels.slot_tag_indices();
    if columns.is_empty() {
        return Ok(*protos);
    }
    let (keep, mix) = (T::of(1.0 - alpha), T::of(alpha));
    let slot_rows = g.gather_rows(protos.slots, &columns)?;

    let fused_i = g.matmul(a_final, slot_rows)?;
    let fused_i = g.scale(fused_i, mix);
    let orig_i = g.scale(protos.intents, keep);
    let intents = g.add(fused_i, orig_i)?;

    let at = g.transpose(a_final)?;
    let fused_s = g.matmul(at, protos.intents)?;
    let fused_s = g.scale(fused_s, mix);
    let orig_s = g.scale(slot_rows, keep);
    let merged_s = g.add(fused_s, orig_s)?;

    let slots = match labels.outside_index() {
        None => merged_s,
        Some(o) => {
            let outside = g.gather_rows(protos.slots, &[o])?;
            let stacked = g.concat_rows(&[merged_s, outside])?;
            let order: Vec<usize> = (0..labels.tags.len())
                .map(|t| {
                    columns
                        .iter()
                        .position(|&c| c == t)
                        .unwrap_or(columns.len())
                })
                .collect();
            g.gather_rows(stacked, &order)?
        }
    };
    Ok(PrototypeSet { intents, slots })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn fr(intent: &str, tags: &[&str]) -> SemanticFrame {
        let tokens: Vec<&str> = tags.iter().map(|_| "w").collect();
        SemanticFrame::new(&tokens, intent, tags)
    }

    fn handles(g: &mut Graph<f64>, w: Tensor<f64>, u: Tensor<f64>, v: Tensor<f64>) -> MergeHandles {
        let mut p = ParamMap::new();
        p.insert(W.to_string(), w);
        p.insert(U.to_string(), u);
        p.insert(V.to_string(), v);
        let nodes: BTreeMap<String, NodeId> = g.params_from(&p);
        MergeHandles::bind(&nodes).unwrap()
    }

    #[test]
    fn counts_over_frames() {
        let support = vec![
            fr("A", &["B-b", "O"]),
            fr("A", &["B-b", "B-c"]),
            fr("B", &["B-c"]),
        ];
        let labels = LabelSpace::from_frames(&support);
        let co = cooccurrence_attention::<f64>(&support, &labels);
        assert_eq!(co.counts, vec![vec![2, 1], vec![0, 1]]);
        assert_eq!(co.a_stat.data(), &[2.0 / 3.0, 1.0 / 3.0, 0.0, 1.0]);
    }

    #[test]
    fn repeated_tag_counts_once_per_frame() {
        let support = vec![fr("A", &["B-b", "B-b"])];
        let labels = LabelSpace::from_frames(&support);
        let co = cooccurrence_attention::<f64>(&support, &labels);
        assert_eq!(co.counts, vec![vec![1]]);
        assert_eq!(co.a_stat.data(), &[1.0]);
    }

    #[test]
    fn slotless_intent_row_is_uniform() {
        let support = vec![fr("A", &["B-b", "B-c"]), fr("B", &["O"])];
        let labels = LabelSpace::from_frames(&support);
        let co = cooccurrence_attention::<f64>(&support, &labels);
        assert_eq!(co.a_stat.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn zero_projections_give_uniform_rows() {
        let mut g = Graph::new();
        let h = handles(
            &mut g,
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[2, 2]),
            Tensor::vector(vec![0.7, -0.3]),
        );
        let ci = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let cs = g.constant(Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let a = representation_attention(&mut g, ci, cs, h).unwrap();
        assert!(g
            .value(a)
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let h = handles(
            &mut g,
            Tensor::matrix(2, 2, vec![1.0, 0.3, -0.2, 0.8]).unwrap(),
            Tensor::matrix(2, 2, vec![0.5, 0.5, 0.1, -0.9]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]),
        );
        let a = representation_attention(&mut g, ci, cs, h).unwrap();
        assert!(g
            .value(a)
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn scalar_attention_hand_value() {
        let mut g = Graph::new();
        let one = || Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let h = handles(&mut g, one(), one(), Tensor::vector(vec![1.0]));
        let ci = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let cs = g.constant(Tensor::matrix(2, 1, vec![0.0, 10.0]).unwrap());
        let a = representation_attention(&mut g, ci, cs, h).unwrap();
        // softmax([0, tanh 10])
        let t = 10f64.tanh();
        let expect = 1.0 / (1.0 + t.exp());
        assert!((g.value(a).data()[0] - expect).abs() < 1e-15);
        assert!((g.value(a).data()[0] - 0.2689).abs() < 1e-4);
        assert!((g.value(a).data()[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let h = handles(
            &mut g,
            Tensor::zeros(&[2, 3]),
            Tensor::zeros(&[2, 3]),
            Tensor::zeros(&[2]),
        );
        let ci = g.constant(Tensor::zeros(&[2, 2]));
        let cs = g.constant(Tensor::zeros(&[2, 2]));
        assert!(representation_attention(&mut g, ci, cs, h).is_err());
    }

    fn labels(intents: &[&str], tags: &[&str]) -> LabelSpace {
        LabelSpace {
            intents: intents.iter().map(|s| s.to_string()).collect(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn degenerate_row_selects_one_slot() {
        let mut g = Graph::new();
        let ls = labels(&["A"], &["B-p", "B-q"]);
        let intents = g.constant(Tensor::matrix(1, 2, vec![5.0, 5.0]).unwrap());
        let slots = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let m = merge_prototypes(&mut g, &PrototypeSet { intents, slots }, &ls, a, 1.0).unwrap();
        assert_eq!(g.value(m.intents).data(), &[1.0, 2.0]);
    }

    #[test]
    fn alpha_zero_is_identity() {
        let mut g = Graph::new();
        let ls = labels(&["A", "B"], &["B-p", "I-p", "O"]);
        let intents = g.constant(Tensor::matrix(2, 2, vec![0.3, -1.1, 2.5, 0.125]).unwrap());
        let slots = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, -5.5, 0.01]).unwrap());
        let a = g.constant(Tensor::matrix(2, 2, vec![0.25, 0.75, 0.6, 0.4]).unwrap());
        let p = PrototypeSet { intents, slots };
        let m = merge_prototypes(&mut g, &p, &ls, a, 0.0).unwrap();
        assert_eq!(g.value(m.intents), g.value(intents));
        assert_eq!(g.value(m.slots), g.value(slots));
    }

    #[test]
    fn alpha_one_single_pair_swaps() {
        let mut g = Graph::new();
        let ls = labels(&["A"], &["B-p", "O"]);
        let intents = g.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let slots = g.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 9.0, 9.0]).unwrap());
        let a = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let m = merge_prototypes(&mut g, &PrototypeSet { intents, slots }, &ls, a, 1.0).unwrap();
        assert_eq!(g.value(m.intents).data(), &[3.0, 4.0]);
        // B-p takes the intent prototype, O passes through
        assert_eq!(g.value(m.slots).data(), &[1.0, -1.0, 9.0, 9.0]);
    }

    #[test]
    fn outside_keeps_its_position() {
        let mut g = Graph::new();
        // "O" sorts between the slot tags here
        let ls = labels(&["A"], &["B-p", "O", "a-q"]);
        let intents = g.constant(Tensor::matrix(1, 1, vec![10.0]).unwrap());
        let slots = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let a = g.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let m = merge_prototypes(&mut g, &PrototypeSet { intents, slots }, &ls, a, 0.5).unwrap();
        assert_eq!(g.value(m.slots).data(), &[3.0, 2.0, 4.0]);
    }
}
