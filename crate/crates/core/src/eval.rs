//! Decoding, conlleval-style chunk scoring and metric aggregation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{SemanticFrame, Tag};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::{finetune, TrainConfig};

/// Index of the largest value; ties go to the lexicographically smallest name.
fn argmax_by_name(
    probs: &[f64],
    names: &[String],
    allowed: impl Fn(usize) -> bool,
) -> Option<usize> {
    let mut best: Option<usize> = None;
    for k in (0..probs.len()).filter(|&k| allowed(k)) {
        best = match best {
            None => Some(k),
            Some(b) if probs[k] > probs[b] || (probs[k] == probs[b] && names[k] < names[b]) => {
                Some(k)
            }
            keep => keep,
        };
    }
    best
}

/// Whether `tag` may follow `prev` (the previous output tag, `None` at the start).
pub fn transition_allowed(prev: Option<&str>, tag: &str) -> bool {
    match Tag::parse(tag) {
        Some(Tag::Inside(x)) => matches!(
            prev.and_then(Tag::parse),
            Some(Tag::Begin(y)) | Some(Tag::Inside(y)) if y == x
        ),
        _ => true,
    }
}

/// Per-token argmax, or greedy left-to-right argmax under the BIO legality
/// mask when `transition_rules` is set.
pub fn decode_slots(dists: &[Vec<f64>], tags: &[String], transition_rules: bool) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(dists.len());
    for probs in dists {
        assert_eq!(
            probs.len(),
            tags.len(),
            "distribution width must match the tag vocabulary"
        );
        let prev = out.last().map(String::as_str);
        let k = argmax_by_name(probs, tags, |k| {
            !transition_rules || transition_allowed(prev, &tags[k])
        })
        .expect("O and B- tags are never masked");
        out.push(tags[k].clone());
    }
    out
}

/// Number of `I-x` tags not preceded by `B-x` or `I-x`.
pub fn illegal_transitions<S: AsRef<str>>(tags: &[S]) -> usize {
    (0..tags.len())
        .filter(|&k| {
            let prev = if k == 0 {
                None
            } else {
                Some(tags[k - 1].as_ref())
            };
            !transition_allowed(prev, tags[k].as_ref())
        })
        .count()
}

/// Inclusive token span of one slot value.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Chunk {
    pub slot: String,
    pub start: usize,
    pub end: usize,
}

/// conlleval chunking: a chunk starts at `B-x` or at an `I-x` that does not
/// continue an `x` chunk, and ends before `O`, any `B-`, or `I-y` with `y != x`.
pub fn extract_chunks<S: AsRef<str>>(tags: &[S]) -> BTreeSet<Chunk> {
    let mut chunks = BTreeSet::new();
    let mut open: Option<(String, usize)> = None;
    for (k, t) in tags.iter().enumerate() {
        let tag = Tag::parse(t.as_ref());
        let continues = matches!((&open, tag), (Some((x, _)), Some(Tag::Inside(y))) if x == y);
        if continues {
            continue;
        }
        if let Some((slot, start)) = open.take() {
            chunks.insert(Chunk {
                slot,
                start,
                end: k - 1,
            });
        }
        if let Some(Tag::Begin(x)) | Some(Tag::Inside(x)) = tag {
            open = Some((x.to_string(), k));
        }
    }
    if let Some((slot, start)) = open {
        chunks.insert(Chunk {
            slot,
            start,
            end: tags.len() - 1,
        });
    }
    chunks
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChunkScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub n_pred: usize,
    pub n_gold: usize,
}

impl ChunkScore {
    fn from_counts(matched: usize, n_pred: usize, n_gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(matched, n_pred), ratio(matched, n_gold));
        ChunkScore {
            precision: p,
            recall: r,
            f1: if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            },
            matched,
            n_pred,
            n_gold,
        }
    }
}

/// Micro-averaged chunk precision, recall and F1 over all sentences.
pub fn slot_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<ChunkScore> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted sentences vs {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let (mut matched, mut n_pred, mut n_gold) = (0, 0, 0);
    for (k, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::InvalidArgument(format!(
                "sentence {k}: {} predicted tags vs {} gold",
                p.len(),
                g.len()
            )));
        }
        let (pc, gc) = (extract_chunks(p), extract_chunks(g));
        matched += pc.intersection(&gc).count();
        n_pred += pc.len();
        n_gold += gc.len();
    }
    Ok(ChunkScore::from_counts(matched, n_pred, n_gold))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub intent_accuracy: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub joint_accuracy: f64,
    pub sentence_slot_accuracy: f64,
    pub n_sentences: usize,
    pub n_gold_chunks: usize,
    pub n_pred_chunks: usize,
}

impl MetricsReport {
    fn rates(&self) -> [f64; 6] {
        [
            self.intent_accuracy,
            self.slot_precision,
            self.slot_recall,
            self.slot_f1,
            self.joint_accuracy,
            self.sentence_slot_accuracy,
        ]
    }

    fn with_rates(
        r: [f64; 6],
        n_sentences: usize,
        n_gold_chunks: usize,
        n_pred_chunks: usize,
    ) -> Self {
        MetricsReport {
            intent_accuracy: r[0],
            slot_precision: r[1],
            slot_recall: r[2],
            slot_f1: r[3],
            joint_accuracy: r[4],
            sentence_slot_accuracy: r[5],
            n_sentences,
            n_gold_chunks,
            n_pred_chunks,
        }
    }
}

/// Scores predicted intents and tag sequences against gold frames.
pub fn score_predictions(
    intents: &[String],
    tags: &[Vec<String>],
    gold: &[SemanticFrame],
) -> Result<MetricsReport> {
    if intents.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted intents vs {} gold frames",
            intents.len(),
            gold.len()
        )));
    }
    let gold_tags: Vec<Vec<String>> = gold.iter().map(|f| f.slot_tags.clone()).collect();
    let chunks = slot_f1(tags, &gold_tags)?;
    let n = gold.len();
    let (mut intent_ok, mut slots_ok, mut joint_ok) = (0, 0, 0);
    for ((pi, pt), f) in intents.iter().zip(tags).zip(gold) {
        let i = *pi == f.intent;
        let s = *pt == f.slot_tags;
        intent_ok += i as usize;
        slots_ok += s as usize;
        joint_ok += (i && s) as usize;
    }
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(MetricsReport {
        intent_accuracy: frac(intent_ok),
        slot_precision: chunks.precision,
        slot_recall: chunks.recall,
        slot_f1: chunks.f1,
        joint_accuracy: frac(joint_ok),
        sentence_slot_accuracy: frac(slots_ok),
        n_sentences: n,
        n_gold_chunks: chunks.n_gold,
        n_pred_chunks: chunks.n_pred,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub finetune: bool,
    pub tr: bool,
}

/// Decoded intents and tag sequences for the episode's queries.
pub fn predict_episode(
    model: &Model,
    episode: &Episode,
    tr: bool,
) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let (labels, preds) = model.predict(&episode.support.frames, &episode.query)?;
    let mut intents = Vec::with_capacity(preds.len());
    let mut tags = Vec::with_capacity(preds.len());
    for p in preds {
        let i = argmax_by_name(&p.intent_probs, &labels.intents, |_| true)
            .expect("at least one intent");
        intents.push(labels.intents[i].clone());
        tags.push(decode_slots(&p.tag_probs, &labels.tags, tr));
    }
    Ok((intents, tags))
}

/// Metrics of one episode; `+FT` adapts a copy of the model on the support
/// set first, using the fine-tuning settings of `train`.
pub fn evaluate_episode(
    model: &Model,
    episode: &Episode,
    options: EvalOptions,
    train: &TrainConfig,
) -> Result<MetricsReport> {
    let tuned;
    let model = if options.finetune {
        tuned = finetune(model, &episode.support.frames, train)?;
        &tuned
    } else {
        model
    };
    let (intents, tags) = predict_episode(model, episode, options.tr)?;
    score_predictions(&intents, &tags, &episode.query)
}

/// Unweighted mean of rates; counts are summed.
pub fn mean_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to average".into()));
    }
    let n = reports.len() as f64;
    let mut sums = [0.0; 6];
    for r in reports {
        for (s, v) in sums.iter_mut().zip(r.rates()) {
            *s += v;
        }
    }
    Ok(MetricsReport::with_rates(
        sums.map(|s| s / n),
        reports.iter().map(|r| r.n_sentences).sum(),
        reports.iter().map(|r| r.n_gold_chunks).sum(),
        reports.iter().map(|r| r.n_pred_chunks).sum(),
    ))
}

/// Population standard deviation of each rate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSpread {
    pub intent_accuracy: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub joint_accuracy: f64,
    pub sentence_slot_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub finetune: bool,
    pub tr: bool,
    pub seeds: usize,
    pub std: String,
}

/// Seed-level summary: per-seed episode means, their mean and spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_seed: Vec<MetricsReport>,
    pub mean: MetricsReport,
    pub std: MetricsSpread,
    pub options: ReportOptions,
}

impl AggregateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Averages episodes within each seed, then takes the mean and population
/// standard deviation across seeds.
pub fn aggregate(
    per_seed_episodes: &[Vec<MetricsReport>],
    options: EvalOptions,
) -> Result<AggregateReport> {
    if per_seed_episodes.is_empty() {
        return Err(Error::InvalidArgument("no seeds to aggregate".into()));
    }
    let per_seed = per_seed_episodes
        .iter()
        .map(|eps| mean_report(eps))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_report(&per_seed)?;
    let n = per_seed.len() as f64;
    let m = mean.rates();
    let mut var = [0.0; 6];
    for r in &per_seed {
        for (k, v) in r.rates().iter().enumerate() {
            var[k] += (v - m[k]).powi(2) / n;
        }
    }
    let sd = var.map(f64::sqrt);
    Ok(AggregateReport {
        mean,
        std: MetricsSpread {
            intent_accuracy: sd[0],
            slot_precision: sd[1],
            slot_recall: sd[2],
            slot_f1: sd[3],
            joint_accuracy: sd[4],
            sentence_slot_accuracy: sd[5],
        },
        options: ReportOptions {
            finetune: options.finetune,
            tr: options.tr,
            seeds: per_seed.len(),
            std: "population".into(),
        },
        per_seed,
    })
}
