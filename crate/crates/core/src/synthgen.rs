//! Deterministic synthetic corpora with a tunable intent-slot dependency.
//!
//! All domains draw from one token inventory: filler words (tagged `O`), cue
//! words per latent intent type (tagged `O`), value words per latent slot
//! type, and a pool of ambiguous words that can fill any slot. A domain picks
//! some latent intents and slots, names them afresh, and pairs every intent
//! with its own slot. Each sentence carries its intent's slot, sometimes
//! filled with an ambiguous word; with probability `dependency` that word is
//! tagged with the intent's slot, otherwise with a uniformly drawn slot of the
//! domain. Slots left unpaired appear as optional extras in any sentence.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Domain, SemanticFrame};
use crate::episodes::frame_labels;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub train_domains: usize,
    pub dev_domains: usize,
    pub test_domains: usize,
    pub intents_per_domain: usize,
    pub slots_per_domain: usize,
    pub dependency: f64,
    /// Size of the shared token inventory.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frames_per_intent: usize,
    pub latent_intents: usize,
    pub latent_slots: usize,
    /// Chance that an intent's own slot is filled with an ambiguous word.
    pub ambiguous_rate: f64,
    /// Chance that a sentence also carries an unpaired slot.
    pub extra_slot_rate: f64,
    /// Every label must occur in at least this many frames of its domain.
    pub min_label_frames: usize,
    /// Latent intent `t` always pairs with latent slot `t`; otherwise each
    /// domain pairs its intents with randomly drawn slots.
    pub global_pairing: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            train_domains: 20,
            dev_domains: 5,
            test_domains: 5,
            intents_per_domain: 3,
            slots_per_domain: 3,
            dependency: 0.9,
            vocab_size: 400,
            min_len: 4,
            max_len: 10,
            frames_per_intent: 40,
            latent_intents: 10,
            latent_slots: 12,
            ambiguous_rate: 0.5,
            extra_slot_rate: 0.5,
            min_label_frames: 6,
            global_pairing: true,
        }
    }
}

impl SynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("synth spec: {}", e.message())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (k, n) in [
            ("intents_per_domain", self.intents_per_domain),
            ("slots_per_domain", self.slots_per_domain),
            ("vocab_size", self.vocab_size),
            ("min_len", self.min_len),
            ("frames_per_intent", self.frames_per_intent),
        ] {
            if n == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.train_domains + self.dev_domains + self.test_domains == 0 {
            return bad("at least one domain is required".into());
        }
        for (k, p) in [
            ("dependency", self.dependency),
            ("ambiguous_rate", self.ambiguous_rate),
            ("extra_slot_rate", self.extra_slot_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{k} must lie in [0, 1], got {p}"));
            }
        }
        if self.slots_per_domain < self.intents_per_domain {
            return bad("slots_per_domain must be at least intents_per_domain".into());
        }
        if self.latent_intents < self.intents_per_domain
            || self.latent_slots < self.slots_per_domain
        {
            return bad("latent types must cover one domain".into());
        }
        if self.global_pairing && self.latent_slots < self.latent_intents {
            return bad("global pairing needs latent_slots >= latent_intents".into());
        }
        if self.max_len < self.min_len || self.min_len < 3 {
            return bad("sentence length range must satisfy 3 <= min_len <= max_len".into());
        }
        if self.vocab_size < 5 * (self.latent_intents + self.latent_slots) {
            return bad(format!(
                "vocab_size {} is too small for {} latent types",
                self.vocab_size,
                self.latent_intents + self.latent_slots
            ));
        }
        if self.min_label_frames > self.frames_per_intent {
            return bad("min_label_frames cannot exceed frames_per_intent".into());
        }
        Ok(())
    }
}

/// Token inventory shared by all domains.
#[derive(Clone, Debug)]
pub struct Inventory {
    pub fillers: Vec<String>,
    /// Per latent intent.
    pub cues: Vec<Vec<String>>,
    /// Per latent slot.
    pub values: Vec<Vec<String>>,
    pub ambiguous: Vec<String>,
}

impl Inventory {
    /// A fifth of the words are fillers, a fifth cues, a tenth ambiguous, the rest values.
    pub fn new(spec: &SynthSpec) -> Self {
        let v = spec.vocab_size;
        let per = |total: usize, groups: usize| (total / groups).max(1);
        let n_cue = per(v / 5, spec.latent_intents);
        let n_amb = (v / 10).max(1);
        let n_fill = (v / 5).max(1);
        let n_val = per(
            v - n_fill - n_cue * spec.latent_intents - n_amb,
            spec.latent_slots,
        );
        Inventory {
            fillers: (0..n_fill).map(|k| format!("w{k}")).collect(),
            cues: (0..spec.latent_intents)
                .map(|i| (0..n_cue).map(|k| format!("c{i}_{k}")).collect())
                .collect(),
            values: (0..spec.latent_slots)
                .map(|s| (0..n_val).map(|k| format!("v{s}_{k}")).collect())
                .collect(),
            ambiguous: (0..n_amb).map(|k| format!("a{k}")).collect(),
        }
    }
}

struct DomainPlan {
    name: String,
    /// Latent intent per domain intent.
    intents: Vec<usize>,
    /// Latent slot per domain slot.
    slots: Vec<usize>,
    intent_names: Vec<String>,
    slot_names: Vec<String>,
}

fn choose<'a, R: Rng>(xs: &'a [String], rng: &mut R) -> &'a str {
    &xs[rng.gen_range(0..xs.len())]
}

/// A slot span of one or two words.
fn span<R: Rng>(
    words: &mut dyn FnMut(&mut R) -> String,
    name: &str,
    rng: &mut R,
) -> Vec<(String, String)> {
    let len = if rng.gen_bool(0.5) { 1 } else { 2 };
    (0..len)
        .map(|k| {
            let tag = if k == 0 {
                format!("B-{name}")
            } else {
                format!("I-{name}")
            };
            (words(rng), tag)
        })
        .collect()
}

fn sentence<R: Rng>(
    spec: &SynthSpec,
    inv: &Inventory,
    plan: &DomainPlan,
    intent: usize,
    rng: &mut R,
) -> SemanticFrame {
    let n_slots = plan.slots.len();
    let n_intents = plan.intents.len();
    let mut segments: Vec<Vec<(String, String)>> = Vec::new();
    segments.push(vec![(
        choose(&inv.cues[plan.intents[intent]], rng).to_string(),
        "O".into(),
    )]);

    // the intent's own slot, possibly with an ambiguous filler
    if rng.gen_bool(spec.ambiguous_rate) {
        let word = choose(&inv.ambiguous, rng).to_string();
        let slot = if rng.gen_bool(spec.dependency) {
            intent
        } else {
            rng.gen_range(0..n_slots)
        };
        segments.push(vec![(word, format!("B-{}", plan.slot_names[slot]))]);
    } else {
        let values = &inv.values[plan.slots[intent]];
        let mut pick = |r: &mut R| choose(values, r).to_string();
        segments.push(span(&mut pick, &plan.slot_names[intent], rng));
    }
    if n_slots > n_intents && rng.gen_bool(spec.extra_slot_rate) {
        let s = rng.gen_range(n_intents..n_slots);
        let values = &inv.values[plan.slots[s]];
        let mut pick = |r: &mut R| choose(values, r).to_string();
        segments.push(span(&mut pick, &plan.slot_names[s], rng));
    }

    let target = rng.gen_range(spec.min_len..=spec.max_len);
    let mut len: usize = segments.iter().map(Vec::len).sum();
    while len < target {
        segments.push(vec![(choose(&inv.fillers, rng).to_string(), "O".into())]);
        len += 1;
    }
    segments.shuffle(rng);
    let (tokens, tags): (Vec<String>, Vec<String>) = segments.into_iter().flatten().unzip();
    SemanticFrame {
        tokens,
        intent: plan.intent_names[intent].clone(),
        slot_tags: tags,
    }
}

fn label_frame_counts(frames: &[SemanticFrame]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for f in frames {
        for l in frame_labels(f) {
            *counts.entry(l.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

fn build_domain<R: Rng>(
    spec: &SynthSpec,
    inv: &Inventory,
    plan: &DomainPlan,
    rng: &mut R,
) -> Result<Domain> {
    for _ in 0..100 {
        let mut frames = Vec::new();
        for i in 0..plan.intents.len() {
            for _ in 0..spec.frames_per_intent {
                frames.push(sentence(spec, inv, plan, i, rng));
            }
        }
        frames.shuffle(rng);
        let counts = label_frame_counts(&frames);
        let expected = plan.intents.len() + 2 * plan.slots.len();
        if counts.len() == expected && counts.values().all(|&c| c >= spec.min_label_frames) {
            return Domain::new(plan.name.clone(), frames);
        }
    }
    Err(Error::InvalidArgument(format!(
        "domain `{}` could not reach {} frames per label; raise frames_per_intent",
        plan.name, spec.min_label_frames
    )))
}

/// Generates the train, dev and test splits.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let inv = Inventory::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let make = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Domain>> {
        (0..n)
            .map(|d| {
                let name = format!("{prefix}{d}");
                let mut li: Vec<usize> = (0..spec.latent_intents).collect();
                li.shuffle(rng);
                li.truncate(spec.intents_per_domain);
                let mut ls: Vec<usize> = (0..spec.latent_slots).collect();
                ls.shuffle(rng);
                if spec.global_pairing {
                    let mut paired = li.clone();
                    paired.extend(ls.into_iter().filter(|s| !li.contains(s)));
                    ls = paired;
                }
                ls.truncate(spec.slots_per_domain);
                let plan = DomainPlan {
                    intent_names: (0..li.len()).map(|k| format!("{name}_intent{k}")).collect(),
                    slot_names: (0..ls.len()).map(|k| format!("{name}_slot{k}")).collect(),
                    name,
                    intents: li,
                    slots: ls,
                };
                build_domain(spec, &inv, &plan, rng)
            })
            .collect()
    };
    Ok(Dataset {
        train_domains: make("train", spec.train_domains, &mut rng)?,
        dev_domains: make("dev", spec.dev_domains, &mut rng)?,
        test_domains: make("test", spec.test_domains, &mut rng)?,
    })
}
