//! The full joint model: encoder, prototypes, merging and the training objective.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, softmax_slice, GradCheckReport, Graph, NodeId, ParamMap};
use crate::contrastive::{
    contrastive_loss, CalSpace, ContrastiveConfig, ContrastiveTerms, RelatednessSets,
};
use crate::corpus::SemanticFrame;
use crate::encoder::{self, EncoderConfig, LookupEncoder, TokenVocab};
use crate::error::{Error, Result};
use crate::merging::{self, AttentionState, MergeConfig, MergeHandles};
use crate::protonet::{
    compute_prototypes, query_logits, task_cross_entropy, LabelSpace, PrototypeSet, QueryLogits,
};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub merge: MergeConfig,
    pub cal: ContrastiveConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.dim < 2 {
            return Err(Error::InvalidArgument(
                "encoder.dim must be at least 2".into(),
            ));
        }
        if !(self.encoder.init_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "encoder.init_scale must be positive".into(),
            ));
        }
        self.merge.validate()?;
        self.cal.validate()
    }
}

/// Encoder and merge parameters. Merge parameters exist even when merging
/// is disabled so that ablations share one checkpoint layout.
pub fn init_params<T: Scalar, R: Rng>(
    vocab: &TokenVocab,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<ParamMap<T>> {
    config.validate()?;
    let mut params = encoder::init_params(vocab, &config.encoder, rng)?;
    let hidden = if config.merge.hidden == 0 {
        config.encoder.dim
    } else {
        config.merge.hidden
    };
    params.extend(merging::init_params(config.encoder.dim, hidden, rng)?);
    Ok(params)
}

/// Graph handles of one episode's forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub labels: LabelSpace,
    pub original: PrototypeSet,
    /// Equal to `original` when merging is disabled.
    pub merged: PrototypeSet,
    pub attention: Option<AttentionState<T>>,
    pub relatedness: RelatednessSets,
    pub logits: QueryLogits,
    pub ce_intent: NodeId,
    pub ce_slot: NodeId,
    pub cal: ContrastiveTerms,
    /// `CE_intent + CE_slot + L_Contrastive`
    pub total: NodeId,
}

/// Scalar values of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_intent: f64,
    pub ce_slot: f64,
    pub intra: f64,
    pub inter: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.ce_intent,
            self.ce_slot,
            self.intra,
            self.inter,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "L_all={} CE_intent={} CE_slot={} L_intra={} L_inter={}",
            self.total, self.ce_intent, self.ce_slot, self.intra, self.inter
        )
    }
}

impl<T: Scalar> Forward<T> {
    pub fn breakdown(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |n: NodeId| g.value(n).item().as_f64();
        LossBreakdown {
            total: v(self.total),
            ce_intent: v(self.ce_intent),
            ce_slot: v(self.ce_slot),
            intra: v(self.cal.intra),
            inter: v(self.cal.inter),
        }
    }
}

/// Builds the whole objective for `support` and `queries` on `g`, with the
/// parameters already registered as `nodes`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &BTreeMap<String, NodeId>,
    vocab: &TokenVocab,
    config: &ModelConfig,
    support: &[SemanticFrame],
    queries: &[SemanticFrame],
) -> Result<Forward<T>> {
    if support.is_empty() || queries.is_empty() {
        return Err(Error::InvalidArgument(
            "episode needs support and query frames".into(),
        ));
    }
    let enc = LookupEncoder::bind(vocab, nodes, config.encoder.dim)?;
    let labels = LabelSpace::from_frames(support);
    let original = compute_prototypes(g, &enc, support, &labels)?;

    let (merged, attention, counts) = if config.merge.enabled {
        let handles = MergeHandles::bind(nodes)?;
        let att = merging::attention(g, &original, support, &labels, handles, config.merge.lambda)?;
        let merged =
            merging::merge_prototypes(g, &original, &labels, att.a_final, config.merge.alpha)?;
        let counts = att.cooccurrence_counts.clone();
        (merged, Some(att), counts)
    } else {
        let counts = merging::cooccurrence_attention::<T>(support, &labels).counts;
        (original, None, counts)
    };

    let logits = query_logits(g, &enc, queries, &merged)?;
    let (ce_intent, ce_slot) = task_cross_entropy(g, &logits, queries, &labels)?;

    let relatedness = RelatednessSets::from_counts(&counts);
    let space = match config.cal.space {
        CalSpace::Merged => merged,
        CalSpace::Original => original,
    };
    let slot_rows = g.gather_rows(space.slots, &labels.slot_tag_indices())?;
    let cal = contrastive_loss(g, space.intents, slot_rows, &relatedness, &config.cal)?;

    let ce = g.add(ce_intent, ce_slot)?;
    let total = g.add(ce, cal.total)?;
    Ok(Forward {
        labels,
        original,
        merged,
        attention,
        relatedness,
        logits,
        ce_intent,
        ce_slot,
        cal,
        total,
    })
}

/// Class distributions for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPrediction {
    pub intent_probs: Vec<f64>,
    /// One distribution over the episode's tags per token.
    pub tag_probs: Vec<Vec<f64>>,
}

/// A trained parameter set with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: TokenVocab,
    pub params: ParamMap<f64>,
}

impl Model {
    pub fn new<R: Rng>(vocab: TokenVocab, config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = init_params(&vocab, &config, rng)?;
        Ok(Model {
            config,
            vocab,
            params,
        })
    }

    /// Loss value and parameter gradients for one (support, query) pair.
    pub fn loss_and_grads(
        &self,
        support: &[SemanticFrame],
        queries: &[SemanticFrame],
    ) -> Result<(LossBreakdown, ParamMap<f64>)> {
        let mut g = Graph::new();
        let nodes = g.params_from(&self.params);
        let fwd = forward(&mut g, &nodes, &self.vocab, &self.config, support, queries)?;
        let breakdown = fwd.breakdown(&g);
        if !breakdown.is_finite() {
            return Ok((breakdown, ParamMap::new()));
        }
        let grads = g.backward(fwd.total)?;
        Ok((breakdown, grads.into_map()))
    }

    pub fn loss(
        &self,
        support: &[SemanticFrame],
        queries: &[SemanticFrame],
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let nodes = g.params_from(&self.params);
        Ok(forward(&mut g, &nodes, &self.vocab, &self.config, support, queries)?.breakdown(&g))
    }

    /// Label space of `support` and softmax distributions for every query.
    pub fn predict(
        &self,
        support: &[SemanticFrame],
        queries: &[SemanticFrame],
    ) -> Result<(LabelSpace, Vec<QueryPrediction>)> {
        let mut g: Graph<f64> = Graph::new();
        let nodes = g.params_from(&self.params);
        let enc = LookupEncoder::bind(&self.vocab, &nodes, self.config.encoder.dim)?;
        let labels = LabelSpace::from_frames(support);
        let protos = self.prototypes(&mut g, &nodes, support, &labels)?.1;
        let logits = query_logits(&mut g, &enc, queries, &protos)?;
        let il = g.value(logits.intents);
        let tl = g.value(logits.slots);
        let mut row = 0;
        let preds = queries
            .iter()
            .enumerate()
            .map(|(q, f)| {
                let tag_probs = (0..f.len())
                    .map(|k| softmax_slice(tl.row(row + k)))
                    .collect();
                row += f.len();
                QueryPrediction {
                    intent_probs: softmax_slice(il.row(q)),
                    tag_probs,
                }
            })
            .collect();
        Ok((labels, preds))
    }

    /// Original and classification-time prototypes of a support set.
    pub fn prototypes(
        &self,
        g: &mut Graph<f64>,
        nodes: &BTreeMap<String, NodeId>,
        support: &[SemanticFrame],
        labels: &LabelSpace,
    ) -> Result<(PrototypeSet, PrototypeSet)> {
        let enc = LookupEncoder::bind(&self.vocab, nodes, self.config.encoder.dim)?;
        let original = compute_prototypes(g, &enc, support, labels)?;
        if !self.config.merge.enabled {
            return Ok((original, original));
        }
        let handles = MergeHandles::bind(nodes)?;
        let att = merging::attention(
            g,
            &original,
            support,
            labels,
            handles,
            self.config.merge.lambda,
        )?;
        let merged =
            merging::merge_prototypes(g, &original, labels, att.a_final, self.config.merge.alpha)?;
        Ok((original, merged))
    }
}

/// Prototype vectors keyed by class name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    pub intents: BTreeMap<String, Vec<f64>>,
    pub slots: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeExport {
    pub original: PrototypeTable,
    pub merged: PrototypeTable,
}

fn table(g: &Graph<f64>, set: PrototypeSet, labels: &LabelSpace) -> PrototypeTable {
    let rows = |node: NodeId, names: &[String]| {
        let t = g.value(node);
        names
            .iter()
            .enumerate()
            .map(|(k, n)| (n.clone(), t.row(k).to_vec()))
            .collect()
    };
    PrototypeTable {
        intents: rows(set.intents, &labels.intents),
        slots: rows(set.slots, &labels.tags),
    }
}

impl Model {
    /// Original and merged prototypes of `support` as plain vectors.
    pub fn export_prototypes(&self, support: &[SemanticFrame]) -> Result<PrototypeExport> {
        let mut g: Graph<f64> = Graph::new();
        let nodes = g.params_from(&self.params);
        let labels = LabelSpace::from_frames(support);
        let (original, merged) = self.prototypes(&mut g, &nodes, support, &labels)?;
        Ok(PrototypeExport {
            original: table(&g, original, &labels),
            merged: table(&g, merged, &labels),
        })
    }
}

/// Support and query of the two-intent, three-tag gradient-check episode.
pub fn gradcheck_episode() -> (Vec<SemanticFrame>, Vec<SemanticFrame>) {
    let fr = SemanticFrame::new;
    let support = vec![
        fr(&["play", "jazz", "now"], "Play", &["O", "B-genre", "O"]),
        fr(&["book", "a", "table"], "Book", &["O", "O", "B-place"]),
    ];
    let query = vec![
        fr(&["play", "rock"], "Play", &["O", "B-genre"]),
        fr(&["book", "table", "now"], "Book", &["O", "B-place", "O"]),
    ];
    (support, query)
}

/// Central-difference check of the full objective, merging and CAL enabled,
/// against every parameter of a freshly initialized model.
pub fn full_objective_gradcheck(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let (support, query) = gradcheck_episode();
    let mut config = ModelConfig::default();
    config.encoder.dim = 4;
    config.encoder.init_scale = 1.0;
    let vocab = TokenVocab::from_frames(support.iter().chain(&query));
    let mut params = init_params::<f64, _>(&vocab, &config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    // keep attention gradients well above finite-difference noise
    for name in [merging::W, merging::U, merging::V] {
        let t = params
            .get_mut(name)
            .expect("merge parameters are always initialized");
        *t = t.map(|v| v * 5.0);
    }
    grad_check(
        |g, ps| {
            let nodes = g.params_from(ps);
            Ok(forward(g, &nodes, &vocab, &config, &support, &query)?.total)
        },
        &params,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tensor;

    fn fr(tokens: &[&str], intent: &str, tags: &[&str]) -> SemanticFrame {
        SemanticFrame::new(tokens, intent, tags)
    }

    fn episode() -> (Vec<SemanticFrame>, Vec<SemanticFrame>) {
        gradcheck_episode()
    }

    fn model(config: ModelConfig) -> Model {
        let (s, q) = episode();
        let vocab = TokenVocab::from_frames(s.iter().chain(&q));
        Model::new(vocab, config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn zero_params(m: &mut Model) {
        for t in m.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn uniform_predictions_give_log_class_counts() {
        let mut cfg = ModelConfig::default();
        cfg.merge.enabled = false;
        cfg.cal.enabled = false;
        cfg.encoder.context = false;
        let mut m = model(cfg);
        zero_params(&mut m);
        let (s, q) = episode();
        let b = m.loss(&s, &q).unwrap();
        // 2 intents, tags {B-genre, B-place, O}
        assert!((b.total - (2f64.ln() + 3f64.ln())).abs() < 1e-12);
        assert_eq!(b.intra, 0.0);
        assert_eq!(b.inter, 0.0);
    }

    #[test]
    fn cal_disabled_total_is_ce_sum_exactly() {
        let mut cfg = ModelConfig::default();
        cfg.cal.enabled = false;
        let m = model(cfg);
        let (s, q) = episode();
        let b = m.loss(&s, &q).unwrap();
        assert_eq!(b.total, b.ce_intent + b.ce_slot);
    }

    #[test]
    fn merge_disabled_keeps_originals() {
        let mut cfg = ModelConfig::default();
        cfg.merge.enabled = false;
        let m = model(cfg);
        let (s, q) = episode();
        let mut g = Graph::new();
        let nodes = g.params_from(&m.params);
        let fwd = forward(&mut g, &nodes, &m.vocab, &m.config, &s, &q).unwrap();
        assert_eq!(fwd.original, fwd.merged);
        assert!(fwd.attention.is_none());
    }

    #[test]
    fn reevaluation_is_pure() {
        let m = model(ModelConfig::default());
        let (s, q) = episode();
        let a = m.loss(&s, &q).unwrap();
        let (b, _) = m.loss_and_grads(&s, &q).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, m.loss(&s, &q).unwrap());
    }

    #[test]
    fn full_objective_gradients() {
        let report = full_objective_gradcheck(3, 1e-4).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
        assert!(report.coordinates > 40);
    }

    #[test]
    fn export_lists_every_class() {
        let m = model(ModelConfig::default());
        let (s, _) = episode();
        let e = m.export_prototypes(&s).unwrap();
        assert_eq!(
            e.merged.intents.keys().collect::<Vec<_>>(),
            ["Book", "Play"]
        );
        assert_eq!(e.original.slots.len(), 3);
        assert_eq!(e.original.slots["O"], e.merged.slots["O"]);
        assert_ne!(e.original.intents["Play"], e.merged.intents["Play"]);
        assert!(e
            .merged
            .slots
            .values()
            .all(|v| v.len() == m.config.encoder.dim));
    }

    #[test]
    fn predictions_are_distributions() {
        let m = model(ModelConfig::default());
        let (s, q) = episode();
        let (labels, preds) = m.predict(&s, &q).unwrap();
        assert_eq!(labels.tags, vec!["B-genre", "B-place", "O"]);
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[1].tag_probs.len(), 3);
        for p in &preds {
            assert!((p.intent_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for t in &p.tag_probs {
                assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predictions_use_merged_prototypes() {
        let (s, q) = episode();
        let on = model(ModelConfig::default());
        let mut off = on.clone();
        off.config.merge.enabled = false;
        let mut zero_alpha = on.clone();
        zero_alpha.config.merge.alpha = 0.0;
        let p_on = on.predict(&s, &q).unwrap().1;
        let p_off = off.predict(&s, &q).unwrap().1;
        let p_zero = zero_alpha.predict(&s, &q).unwrap().1;
        assert_ne!(p_on, p_off);
        for (a, b) in p_off.iter().zip(&p_zero) {
            for (x, y) in a.intent_probs.iter().zip(&b.intent_probs) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_query_label_is_reported() {
        let m = model(ModelConfig::default());
        let (s, _) = episode();
        let q = vec![fr(&["play"], "Stop", &["O"])];
        let err = m.loss(&s, &q).unwrap_err();
        assert!(err.to_string().contains("Stop"), "{err}");
    }

    #[test]
    fn layout_includes_merge_params() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.dim = 4;
        cfg.merge.hidden = 3;
        let m = model(cfg);
        assert_eq!(m.params[merging::W].shape(), &[3, 4]);
        assert_eq!(m.params[merging::V].shape(), &[3]);
        assert_eq!(
            m.params[encoder::CONTEXT],
            Tensor::matrix(
                4,
                4,
                vec![
                    1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0
                ]
            )
            .unwrap()
        );
    }
}
