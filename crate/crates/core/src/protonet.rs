//! Class prototypes and similarity-softmax classification for intents and
//! slot tags. Similarity is the dot product.

use std::collections::BTreeSet;

use crate::autodiff::{softmax_slice, Graph, NodeId, Tensor};
use crate::corpus::{SemanticFrame, OUTSIDE};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sorted intent and tag classes of one episode, taken from its support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    pub intents: Vec<String>,
    pub tags: Vec<String>,
}

impl LabelSpace {
    pub fn from_frames(frames: &[SemanticFrame]) -> Self {
        let intents: BTreeSet<&str> = frames.iter().map(|f| f.intent.as_str()).collect();
        let tags: BTreeSet<&str> = frames
            .iter()
            .flat_map(|f| f.slot_tags.iter().map(String::as_str))
            .collect();
        LabelSpace {
            intents: intents.into_iter().map(String::from).collect(),
            tags: tags.into_iter().map(String::from).collect(),
        }
    }

    pub fn intent_index(&self, intent: &str) -> Option<usize> {
        self.intents
            .binary_search_by(|s| s.as_str().cmp(intent))
            .ok()
    }

    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        self.tags.binary_search_by(|s| s.as_str().cmp(tag)).ok()
    }

    /// Positions of the non-"O" tags, in tag order.
    pub fn slot_tag_indices(&self) -> Vec<usize> {
        (0..self.tags.len())
            .filter(|&i| self.tags[i] != OUTSIDE)
            .collect()
    }

    pub fn outside_index(&self) -> Option<usize> {
        self.tag_index(OUTSIDE)
    }
}

/// Prototype matrices on a graph: intents `[N_I x d]`, tags `[N_T x d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrototypeSet {
    pub intents: NodeId,
    pub slots: NodeId,
}

/// Row `c` averages the rows of `members` whose class is `c`.
fn averaging_matrix<T: Scalar>(classes: &[usize], n_classes: usize) -> Tensor<T> {
    let mut counts = vec![0usize; n_classes];
    for &c in classes {
        counts[c] += 1;
    }
    let mut m = Tensor::zeros(&[n_classes, classes.len()]);
    let width = classes.len();
    for (k, &c) in classes.iter().enumerate() {
        m.data_mut()[c * width + k] = T::one() / T::of(counts[c] as f64);
    }
    m
}

fn missing(kind: &str, names: &[String], classes: &[usize]) -> Option<String> {
    let present: BTreeSet<usize> = classes.iter().copied().collect();
    (0..names.len())
        .find(|i| !present.contains(i))
        .map(|i| format!("{kind} `{}`", names[i]))
}

/// Intent prototype `i` is the mean sentence vector of support frames with
/// intent `i`; tag prototype `t` is the mean token vector over every support
/// token tagged `t`.
pub fn compute_prototypes<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &dyn Encoder<T>,
    support: &[SemanticFrame],
    labels: &LabelSpace,
) -> Result<PrototypeSet> {
    let encoded = support
        .iter()
        .map(|f| encoder.encode(g, &f.tokens))
        .collect::<Result<Vec<_>>>()?;
    let d = encoder.dim();

    let mut intent_of = Vec::with_capacity(support.len());
    let mut tag_of = Vec::new();
    for f in support {
        intent_of.push(
            labels
                .intent_index(&f.intent)
                .ok_or_else(|| Error::MissingPrototype(format!("intent `{}`", f.intent)))?,
        );
        for t in &f.slot_tags {
            tag_of.push(
                labels
                    .tag_index(t)
                    .ok_or_else(|| Error::MissingPrototype(format!("tag `{t}`")))?,
            );
        }
    }
    if let Some(name) = missing("intent", &labels.intents, &intent_of)
        .or_else(|| missing("tag", &labels.tags, &tag_of))
    {
        return Err(Error::MissingPrototype(name));
    }

    let sentence_rows = encoded
        .iter()
        .map(|e| g.reshape(e.sentence, &[1, d]))
        .collect::<Result<Vec<_>>>()?;
    let sentences = g.concat_rows(&sentence_rows)?;
    let avg_i = g.constant(averaging_matrix(&intent_of, labels.intents.len()));
    let intents = g.matmul(avg_i, sentences)?;

    let token_parts: Vec<NodeId> = encoded.iter().map(|e| e.tokens).collect();
    let tokens = g.concat_rows(&token_parts)?;
    let avg_t = g.constant(averaging_matrix(&tag_of, labels.tags.len()));
    let slots = g.matmul(avg_t, tokens)?;

    Ok(PrototypeSet { intents, slots })
}

/// Softmax over dot products of `query [d]` with each row of `protos [N x d]`.
pub fn classify<T: Scalar>(g: &mut Graph<T>, query: NodeId, protos: NodeId) -> Result<NodeId> {
    let d = g.value(query).len();
    if g.value(protos).rows() == 0 || g.value(protos).rank() != 2 {
        return Err(Error::InvalidArgument(
            "no prototypes to classify against".into(),
        ));
    }
    let n = g.value(protos).rows();
    let q = g.reshape(query, &[d, 1])?;
    let logits = g.matmul(protos, q)?;
    let logits = g.reshape(logits, &[n])?;
    g.row_softmax(logits)
}

/// Value-level twin of [`classify`].
pub fn classify_values<T: Scalar>(query: &[T], protos: &Tensor<T>) -> Vec<T> {
    let logits: Vec<T> = (0..protos.rows())
        .map(|i| {
            protos
                .row(i)
                .iter()
                .zip(query)
                .fold(T::zero(), |s, (&p, &q)| s + p * q)
        })
        .collect();
    softmax_slice(&logits)
}

/// Similarity logits for a batch of queries.
#[derive(Clone, Copy, Debug)]
pub struct QueryLogits {
    /// `[n_queries x N_I]`
    pub intents: NodeId,
    /// `[total query tokens x N_T]`
    pub slots: NodeId,
}

pub fn query_logits<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &dyn Encoder<T>,
    queries: &[SemanticFrame],
    protos: &PrototypeSet,
) -> Result<QueryLogits> {
    let d = encoder.dim();
    let encoded = queries
        .iter()
        .map(|f| encoder.encode(g, &f.tokens))
        .collect::<Result<Vec<_>>>()?;
    let rows = encoded
        .iter()
        .map(|e| g.reshape(e.sentence, &[1, d]))
        .collect::<Result<Vec<_>>>()?;
    let sentences = g.concat_rows(&rows)?;
    let tokens: Vec<NodeId> = encoded.iter().map(|e| e.tokens).collect();
    let tokens = g.concat_rows(&tokens)?;

    let it = g.transpose(protos.intents)?;
    let intents = g.matmul(sentences, it)?;
    let st = g.transpose(protos.slots)?;
    let slots = g.matmul(tokens, st)?;
    Ok(QueryLogits { intents, slots })
}

/// Gold class indices for the queries, failing on classes without prototypes.
pub fn gold_indices(
    queries: &[SemanticFrame],
    labels: &LabelSpace,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let intents = queries
        .iter()
        .map(|f| {
            labels
                .intent_index(&f.intent)
                .ok_or_else(|| Error::MissingPrototype(format!("intent `{}`", f.intent)))
        })
        .collect::<Result<_>>()?;
    let tags = queries
        .iter()
        .flat_map(|f| f.slot_tags.iter())
        .map(|t| {
            labels
                .tag_index(t)
                .ok_or_else(|| Error::MissingPrototype(format!("tag `{t}`")))
        })
        .collect::<Result<_>>()?;
    Ok((intents, tags))
}

/// `CE_intent` (mean over sentences) and `CE_slot` (mean over tokens).
pub fn task_cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: &QueryLogits,
    queries: &[SemanticFrame],
    labels: &LabelSpace,
) -> Result<(NodeId, NodeId)> {
    let (gold_i, gold_t) = gold_indices(queries, labels)?;
    let ce_i = g.cross_entropy(logits.intents, &gold_i)?;
    let ce_t = g.cross_entropy(logits.slots, &gold_t)?;
    Ok((ce_i, ce_t))
}
