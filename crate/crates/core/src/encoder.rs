//! Embedders for the intent (sentence) and slot (token) paths.
//!
//! [`Encoder`] is the pluggable interface: anything that places per-token
//! vectors and a sentence vector on the shared graph can stand in. The
//! reference [`LookupEncoder`] is a trainable embedding table with mean
//! pooling. Optionally the slot path adds learned projections of the
//! sentence mean and of the left neighbour to every token vector, so token
//! representations can see their utterance and their position in a span.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamMap, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const UNK: &str = "<UNK>";

pub const EMBEDDING: &str = "encoder.embedding";
pub const SLOT_EMBEDDING: &str = "encoder.slot_embedding";
pub const CONTEXT: &str = "encoder.context";
pub const LEFT: &str = "encoder.left";

/// Token strings with `<UNK>` at index 0; the rest sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| t != UNK)
            .collect();
        let tokens: Vec<String> = std::iter::once(UNK.to_string()).chain(sorted).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TokenVocab { tokens, index }
    }

    /// Vocabulary from every token of the given frames.
    pub fn from_frames<'a>(
        frames: impl IntoIterator<Item = &'a crate::corpus::SemanticFrame>,
    ) -> Self {
        Self::new(frames.into_iter().flat_map(|f| f.tokens.iter().cloned()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, or the `<UNK>` id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    /// One table for both paths; `false` gives separate intent/slot tables.
    pub shared: bool,
    /// Add projected sentence-mean and left-neighbour vectors on the slot path.
    pub context: bool,
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 32,
            shared: true,
            context: true,
            init_scale: 0.1,
        }
    }
}

/// Fresh parameters: embeddings uniform in `[-init_scale, init_scale]`,
/// the sentence projection starting at the identity and the neighbour
/// projection at zero.
pub fn init_params<T: Scalar, R: Rng>(
    vocab: &TokenVocab,
    config: &EncoderConfig,
    rng: &mut R,
) -> Result<ParamMap<T>> {
    if config.dim < 2 {
        return Err(Error::InvalidArgument(
            "embedding dim must be at least 2".into(),
        ));
    }
    let mut table = || {
        let data = (0..vocab.len() * config.dim)
            .map(|_| T::of(rng.gen_range(-config.init_scale..=config.init_scale)))
            .collect();
        Tensor::matrix(vocab.len(), config.dim, data)
    };
    let mut params = ParamMap::new();
    params.insert(EMBEDDING.to_string(), table()?);
    if !config.shared {
        params.insert(SLOT_EMBEDDING.to_string(), table()?);
    }
    if config.context {
        let d = config.dim;
        let data = (0..d * d)
            .map(|k| if k / d == k % d { T::one() } else { T::zero() })
            .collect();
        params.insert(CONTEXT.to_string(), Tensor::matrix(d, d, data)?);
        params.insert(LEFT.to_string(), Tensor::zeros(&[d, d]));
    }
    Ok(params)
}

/// Graph outputs for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[n x d]`, slot path.
    pub tokens: NodeId,
    /// `[d]`, intent path.
    pub sentence: NodeId,
}

pub trait Encoder<T: Scalar> {
    fn dim(&self) -> usize;

    fn encode(&self, g: &mut Graph<T>, tokens: &[String]) -> Result<Encoded>;
}

/// Row `k` is the table row of token `k` (`<UNK>` for unknown tokens).
pub fn embed_tokens<T: Scalar>(
    g: &mut Graph<T>,
    table: NodeId,
    vocab: &TokenVocab,
    tokens: &[String],
) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot embed an empty token sequence".into(),
        ));
    }
    let ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    g.gather_rows(table, &ids)
}

/// Mean over token rows.
pub fn embed_sentence<T: Scalar>(g: &mut Graph<T>, token_embeddings: NodeId) -> Result<NodeId> {
    if g.value(token_embeddings).rows() == 0 {
        return Err(Error::InvalidArgument("cannot pool zero tokens".into()));
    }
    g.mean_rows(token_embeddings)
}

/// `X + 1 (mean(X) P)`: every row gains the projected sentence mean.
pub fn contextualize<T: Scalar>(g: &mut Graph<T>, x: NodeId, projection: NodeId) -> Result<NodeId> {
    let (n, d) = g.value(x).dims2();
    let mean = g.mean_rows(x)?;
    let mean = g.reshape(mean, &[1, d])?;
    let ctx = g.matmul(mean, projection)?;
    let spread = g.gather_rows(ctx, &vec![0; n])?;
    g.add(x, spread)
}

/// `S X Q`, where row `k` of `S X` is row `k - 1` of `X` and row 0 is zero.
pub fn left_context<T: Scalar>(g: &mut Graph<T>, x: NodeId, projection: NodeId) -> Result<NodeId> {
    let (n, d) = g.value(x).dims2();
    let zero = g.constant(Tensor::zeros(&[1, d]));
    let padded = g.concat_rows(&[zero, x])?;
    let prev = g.gather_rows(padded, &(0..n).collect::<Vec<_>>())?;
    g.matmul(prev, projection)
}

/// Reference encoder with its parameters bound to one graph.
pub struct LookupEncoder<'a> {
    vocab: &'a TokenVocab,
    dim: usize,
    intent_table: NodeId,
    slot_table: NodeId,
    context: Option<NodeId>,
    left: Option<NodeId>,
}

impl<'a> LookupEncoder<'a> {
    /// Uses parameter nodes already registered on the graph.
    pub fn bind(
        vocab: &'a TokenVocab,
        nodes: &std::collections::BTreeMap<String, NodeId>,
        dim: usize,
    ) -> Result<Self> {
        let intent_table = *nodes
            .get(EMBEDDING)
            .ok_or_else(|| Error::UnknownParameter(EMBEDDING.into()))?;
        Ok(LookupEncoder {
            vocab,
            dim,
            intent_table,
            slot_table: nodes.get(SLOT_EMBEDDING).copied().unwrap_or(intent_table),
            context: nodes.get(CONTEXT).copied(),
            left: nodes.get(LEFT).copied(),
        })
    }
}

impl<T: Scalar> Encoder<T> for LookupEncoder<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, g: &mut Graph<T>, tokens: &[String]) -> Result<Encoded> {
        let intent_rows = embed_tokens(g, self.intent_table, self.vocab, tokens)?;
        let sentence = embed_sentence(g, intent_rows)?;
        let slot_rows = if self.slot_table == self.intent_table {
            intent_rows
        } else {
            embed_tokens(g, self.slot_table, self.vocab, tokens)?
        };
        let mut tokens = match self.context {
            Some(p) => contextualize(g, slot_rows, p)?,
            None => slot_rows,
        };
        if let Some(q) = self.left {
            let left = left_context(g, slot_rows, q)?;
            tokens = g.add(tokens, left)?;
        }
        Ok(Encoded { tokens, sentence })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    fn setup(config: &EncoderConfig) -> (TokenVocab, ParamMap<f64>) {
        let vocab = TokenVocab::new(["a", "b", "c"]);
        let params = init_params(&vocab, config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (vocab, params)
    }

    #[test]
    fn vocab_has_unk_first() {
        let v = TokenVocab::new(["b", "a", "b"]);
        assert_eq!(v.tokens(), &["<UNK>", "a", "b"]);
        assert_eq!(v.id("zzz"), 0);
        assert_eq!(v.id("b"), 2);
    }

    #[test]
    fn repeated_token_rows_match_and_oov_is_unk() {
        let (vocab, params) = setup(&EncoderConfig::default());
        let mut g = Graph::new();
        let table = g.param(EMBEDDING, params[EMBEDDING].clone());
        let x = embed_tokens(&mut g, table, &vocab, &toks(&["a", "a", "zzz"])).unwrap();
        let v = g.value(x);
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(2), params[EMBEDDING].row(0));
    }

    #[test]
    fn empty_tokens_rejected() {
        let (vocab, params) = setup(&EncoderConfig::default());
        let mut g = Graph::new();
        let table = g.param(EMBEDDING, params[EMBEDDING].clone());
        assert!(embed_tokens(&mut g, table, &vocab, &[]).is_err());
        let empty = g.constant(Tensor::matrix(0, 4, vec![]).unwrap());
        assert!(embed_sentence(&mut g, empty).is_err());
    }

    #[test]
    fn table_gradient_counts_tokens() {
        let (vocab, params) = setup(&EncoderConfig::default());
        let mut g = Graph::new();
        let table = g.param(EMBEDDING, params[EMBEDDING].clone());
        let x = embed_tokens(&mut g, table, &vocab, &toks(&["a", "c", "a"])).unwrap();
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        let gt = grads.get(EMBEDDING).unwrap();
        assert!(gt.row(vocab.id("a")).iter().all(|&v| v == 2.0));
        assert!(gt.row(vocab.id("c")).iter().all(|&v| v == 1.0));
        assert!(gt.row(vocab.id("b")).iter().all(|&v| v == 0.0));

        // same answer from central differences
        let report = grad_check(
            |g, ps| {
                let t = g.param(EMBEDDING, ps[EMBEDDING].clone());
                let x = embed_tokens(g, t, &vocab, &toks(&["a", "c", "a"]))?;
                Ok(g.sum(x))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-8);
    }

    #[test]
    fn sentence_mean_cases() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::matrix(1, 2, vec![0.3, -0.4]).unwrap());
        let s = embed_sentence(&mut g, one).unwrap();
        assert_eq!(g.value(s).data(), &[0.3, -0.4]);
        let two = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let s = embed_sentence(&mut g, two).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sentence_is_permutation_invariant_and_scale_equivariant() {
        let rows = vec![0.25, -1.0, 0.5, 2.0, -0.75, 0.125];
        let perm = vec![-0.75, 0.125, 0.25, -1.0, 0.5, 2.0];
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(3, 2, rows.clone()).unwrap());
        let b = g.constant(Tensor::matrix(3, 2, perm).unwrap());
        let sa = embed_sentence(&mut g, a).unwrap();
        let sb = embed_sentence(&mut g, b).unwrap();
        assert_eq!(g.value(sa), g.value(sb));
        let scaled = g.scale(a, 4.0);
        let ss = embed_sentence(&mut g, scaled).unwrap();
        for (x, y) in g.value(ss).data().iter().zip(g.value(sa).data()) {
            assert_eq!(*x, 4.0 * y);
        }
    }

    #[test]
    fn separate_tables_when_not_shared() {
        let cfg = EncoderConfig {
            shared: false,
            context: false,
            ..Default::default()
        };
        let (vocab, params) = setup(&cfg);
        assert!(params.contains_key(SLOT_EMBEDDING));
        let mut g = Graph::new();
        let nodes = g.params_from(&params);
        let enc = LookupEncoder::bind(&vocab, &nodes, cfg.dim).unwrap();
        let out = Encoder::<f64>::encode(&enc, &mut g, &toks(&["b"])).unwrap();
        assert_eq!(
            g.value(out.tokens).row(0),
            params[SLOT_EMBEDDING].row(vocab.id("b"))
        );
        assert_eq!(
            g.value(out.sentence).data(),
            params[EMBEDDING].row(vocab.id("b"))
        );
    }

    #[test]
    fn context_adds_projected_mean() {
        let cfg = EncoderConfig::default();
        let (vocab, params) = setup(&cfg);
        let mut g = Graph::new();
        let nodes = g.params_from(&params);
        let enc = LookupEncoder::bind(&vocab, &nodes, cfg.dim).unwrap();
        let out = Encoder::<f64>::encode(&enc, &mut g, &toks(&["a", "b"])).unwrap();
        // identity projection at init: row k = e_k + mean(e)
        let e = &params[EMBEDDING];
        let (ra, rb) = (e.row(vocab.id("a")), e.row(vocab.id("b")));
        for j in 0..cfg.dim {
            let mean = 0.5 * (ra[j] + rb[j]);
            assert!((g.value(out.tokens).at(0, j) - (ra[j] + mean)).abs() < 1e-15);
        }
    }

    #[test]
    fn left_context_shifts_rows() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let q = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 10.0]).unwrap());
        let l = left_context(&mut g, x, q).unwrap();
        assert_eq!(g.value(l).data(), &[0.0, 0.0, 1.0, 20.0, 3.0, 40.0]);
    }

    #[test]
    fn left_projection_separates_positions() {
        let cfg = EncoderConfig::default();
        let (vocab, mut params) = setup(&cfg);
        params.get_mut(LEFT).unwrap().data_mut()[0] = 1.0;
        let mut g = Graph::new();
        let nodes = g.params_from(&params);
        let enc = LookupEncoder::bind(&vocab, &nodes, cfg.dim).unwrap();
        let out = Encoder::<f64>::encode(&enc, &mut g, &toks(&["a", "a"])).unwrap();
        let t = g.value(out.tokens);
        assert_ne!(t.row(0), t.row(1));
        let e = params[EMBEDDING].row(vocab.id("a"));
        assert!((t.at(1, 0) - t.at(0, 0) - e[0]).abs() < 1e-15);
    }
}
