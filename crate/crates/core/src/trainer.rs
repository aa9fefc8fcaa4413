//! Episodic Adam training, support-set fine-tuning and checkpoints.
//!
//! A checkpoint is a directory holding `checkpoint.json` (format tag, step,
//! training config, vocabulary, parameter names and shapes, Adam settings,
//! RNG state) and `params.bin`: every parameter tensor in name order as
//! little-endian f64, followed by the Adam first moments and then the second
//! moments in the same order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamMap, Tensor};
use crate::corpus::{Dataset, Domain, SemanticFrame};
use crate::encoder::TokenVocab;
use crate::episodes::{build_episodes, sample_episode, Episode};
use crate::error::{Error, Result};
use crate::eval::{evaluate_episode, mean_report, EvalOptions};
use crate::model::{LossBreakdown, Model, ModelConfig};

const FORMAT: &str = "conprom-checkpoint-1";
const HEADER: &str = "checkpoint.json";
const PARAMS: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_steps: usize,
    pub episodes_per_batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Steps between dev evaluations; 0 keeps the final parameters.
    pub eval_interval: usize,
    pub dev_episodes: usize,
    /// Shots and query size for online sampling and dev episodes.
    pub k: usize,
    pub query_size: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            max_steps: 1000,
            episodes_per_batch: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            finetune_steps: 50,
            finetune_lr: 1e-3,
            eval_interval: 100,
            dev_episodes: 20,
            k: 1,
            query_size: 10,
            model: ModelConfig::default(),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl TrainConfig {
    /// Reads `key = value` lines (dotted keys or TOML tables) over the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::InvalidArgument(format!("config: {}", e.message()))
        })?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs);
        let mut cfg = TrainConfig::default();
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        let bad = || Error::InvalidArgument(format!("config key `{key}` cannot take `{v}`"));
        let float = || {
            v.as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .ok_or_else(bad)
        };
        let count = || {
            v.as_integer()
                .filter(|i| *i >= 0)
                .map(|i| i as usize)
                .ok_or_else(bad)
        };
        let flag = || v.as_bool().ok_or_else(bad);
        let m = &mut self.model;
        match key {
            "seed" => self.seed = count()? as u64,
            "max_steps" => self.max_steps = count()?,
            "episodes_per_batch" => self.episodes_per_batch = count()?,
            "learning_rate" => self.learning_rate = float()?,
            "adam.beta1" => self.beta1 = float()?,
            "adam.beta2" => self.beta2 = float()?,
            "adam.eps" => self.adam_eps = float()?,
            "finetune_steps" => self.finetune_steps = count()?,
            "finetune_lr" => self.finetune_lr = float()?,
            "eval_interval" => self.eval_interval = count()?,
            "dev_episodes" => self.dev_episodes = count()?,
            "k" => self.k = count()?,
            "query_size" => self.query_size = count()?,
            "encoder.dim" => m.encoder.dim = count()?,
            "encoder.shared" => m.encoder.shared = flag()?,
            "encoder.context" => m.encoder.context = flag()?,
            "encoder.init_scale" => m.encoder.init_scale = float()?,
            "merge.enabled" => m.merge.enabled = flag()?,
            "merge.lambda" => m.merge.lambda = float()?,
            "merge.alpha" => m.merge.alpha = float()?,
            "merge.hidden" => m.merge.hidden = count()?,
            "cal.enabled" => m.cal.enabled = flag()?,
            "cal.margin" => m.cal.margin = float()?,
            "cal.space" => m.cal.space = v.as_str().ok_or_else(bad)?.parse()?,
            _ => return Err(Error::UnknownParameter(format!("config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("finetune_lr", self.finetune_lr),
            ("adam.eps", self.adam_eps),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "{k} must be positive, got {v}"
            )));
        }
        for (k, b) in [("adam.beta1", self.beta1), ("adam.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!(
                    "{k} must lie in [0, 1), got {b}"
                )));
            }
        }
        for (k, n) in [
            ("max_steps", self.max_steps),
            ("episodes_per_batch", self.episodes_per_batch),
            ("k", self.k),
            ("query_size", self.query_size),
        ] {
            if n == 0 {
                return Err(Error::InvalidArgument(format!("{k} must be positive")));
            }
        }
        self.model.validate()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: ParamMap<f64>,
    #[serde(skip)]
    pub v: ParamMap<f64>,
}

impl Adam {
    pub fn new(params: &ParamMap<f64>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &ParamMap<f64>| {
            p.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn update(
        &mut self,
        params: &mut ParamMap<f64>,
        grads: &ParamMap<f64>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("{name}: param {:?} grad {:?}", p.shape(), g.shape()),
                ));
            }
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let v = self
                .v
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            for (((pk, &gk), mk), vk) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                *pk -= lr * (*mk / c1) / ((*vk / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Where training episodes come from.
#[derive(Clone, Copy, Debug)]
pub enum EpisodeSource<'a> {
    /// Pre-built episodes, visited in a seeded shuffled order each pass.
    Fixed(&'a [Episode]),
    /// Fresh episodes sampled from these domains with the state's RNG.
    Online(&'a [Domain]),
}

/// One row of the loss log: batch means of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("step,L_all,CE_intent,CE_slot,L_intra,L_inter\n");
    for r in log {
        let l = r.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, l.total, l.ce_intent, l.ce_slot, l.intra, l.inter
        ));
    }
    out
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Completed optimizer steps.
    pub step: usize,
}

fn fixed_order(seed: u64, pass: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pass as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut m = LossBreakdown::default();
    for p in parts {
        m.total += p.total / n;
        m.ce_intent += p.ce_intent / n;
        m.ce_slot += p.ce_slot / n;
        m.intra += p.intra / n;
        m.inter += p.inter / n;
    }
    m
}

fn accumulate(sum: &mut ParamMap<f64>, grads: ParamMap<f64>, weight: f64) {
    for (name, g) in grads {
        let g = g.map(|v| v * weight);
        match sum.get_mut(&name) {
            Some(s) => s.add_assign(&g),
            None => {
                sum.insert(name, g);
            }
        }
    }
}

impl Checkpoint {
    /// Fresh parameters drawn from the config seed.
    pub fn init(vocab: TokenVocab, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(vocab, config.model.clone(), &mut rng)?;
        let adam = Adam::new(&model.params, config.beta1, config.beta2, config.adam_eps);
        Ok(Checkpoint {
            model,
            config,
            adam,
            rng,
            step: 0,
        })
    }

    /// The episodes of the next batch.
    fn next_batch(&mut self, source: EpisodeSource) -> Result<Vec<Episode>> {
        let b = self.config.episodes_per_batch;
        match source {
            EpisodeSource::Fixed(eps) => {
                if eps.is_empty() {
                    return Err(Error::InvalidArgument("no training episodes".into()));
                }
                let n = eps.len();
                let mut out = Vec::with_capacity(b);
                let mut cached: Option<(usize, Vec<usize>)> = None;
                for pos in self.step * b..(self.step + 1) * b {
                    let pass = pos / n;
                    if cached.as_ref().map(|c| c.0) != Some(pass) {
                        cached = Some((pass, fixed_order(self.config.seed, pass, n)));
                    }
                    out.push(eps[cached.as_ref().unwrap().1[pos % n]].clone());
                }
                Ok(out)
            }
            EpisodeSource::Online(domains) => {
                if domains.is_empty() {
                    return Err(Error::InvalidArgument("no training domains".into()));
                }
                let (k, q) = (self.config.k, self.config.query_size);
                (0..b)
                    .map(|i| {
                        let d = &domains[(self.step * b + i) % domains.len()];
                        sample_episode(d, k, q, &mut self.rng)
                    })
                    .collect()
            }
        }
    }

    /// One Adam update on the mean loss of a batch.
    pub fn train_step(&mut self, source: EpisodeSource) -> Result<LossRecord> {
        let batch = self.next_batch(source)?;
        let weight = 1.0 / batch.len() as f64;
        let mut parts = Vec::with_capacity(batch.len());
        let mut grads = ParamMap::new();
        for ep in &batch {
            let (loss, g) = self.model.loss_and_grads(&ep.support.frames, &ep.query)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("step {}: {loss}", self.step)));
            }
            accumulate(&mut grads, g, weight);
            parts.push(loss);
        }
        let record = LossRecord {
            step: self.step,
            loss: mean_breakdown(&parts),
        };
        self.adam
            .update(&mut self.model.params, &grads, self.config.learning_rate)?;
        self.step += 1;
        Ok(record)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let shapes: Vec<(String, Vec<usize>)> = self
            .model
            .params
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec()))
            .collect();
        let header = serde_json::json!({
            "format": FORMAT,
            "step": self.step,
            "config": self.config,
            "vocab": self.model.vocab.tokens(),
            "dim": self.model.config.encoder.dim,
            "params": shapes,
            "adam": self.adam,
            "rng": self.rng,
        });
        fs::write(dir.join(HEADER), serde_json::to_string_pretty(&header)?)?;
        let mut bin = Vec::new();
        for map in [&self.model.params, &self.adam.m, &self.adam.v] {
            for t in map.values() {
                for v in t.data() {
                    bin.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::File::create(dir.join(PARAMS))?.write_all(&bin)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        #[derive(Deserialize)]
        struct Header {
            format: String,
            step: usize,
            config: TrainConfig,
            vocab: Vec<String>,
            params: Vec<(String, Vec<usize>)>,
            adam: Adam,
            rng: ChaCha8Rng,
        }
        let h: Header = serde_json::from_str(&fs::read_to_string(dir.join(HEADER))?)?;
        if h.format != FORMAT {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format `{}`",
                h.format
            )));
        }
        let vocab = TokenVocab::new(h.vocab.iter().skip(1));
        if vocab.tokens() != h.vocab.as_slice() {
            return Err(Error::Validation(
                "checkpoint vocabulary is not in canonical order".into(),
            ));
        }
        let bytes = fs::read(dir.join(PARAMS))?;
        let total: usize = h
            .params
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        if bytes.len() != 3 * total * 8 {
            return Err(Error::Validation(format!(
                "{PARAMS} holds {} bytes, expected {}",
                bytes.len(),
                3 * total * 8
            )));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut read_map = || -> Result<ParamMap<f64>> {
            let mut m = BTreeMap::new();
            for (name, shape) in &h.params {
                let n = shape.iter().product();
                m.insert(
                    name.clone(),
                    Tensor::new(shape.clone(), values.by_ref().take(n).collect())?,
                );
            }
            Ok(m)
        };
        let params = read_map()?;
        let mut adam = h.adam;
        adam.m = read_map()?;
        adam.v = read_map()?;
        Ok(Checkpoint {
            model: Model {
                config: h.config.model.clone(),
                vocab,
                params,
            },
            config: h.config,
            adam,
            rng: h.rng,
            step: h.step,
        })
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best dev joint accuracy (the last ones without dev evaluation).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LossRecord>,
    /// `(completed steps, dev joint accuracy)` per evaluation.
    pub dev_history: Vec<(usize, f64)>,
}

/// Every token of every split and of the given episodes.
pub fn dataset_vocab(dataset: &Dataset, episodes: &[Episode]) -> TokenVocab {
    let frames = [
        &dataset.train_domains,
        &dataset.dev_domains,
        &dataset.test_domains,
    ]
    .into_iter()
    .flatten()
    .flat_map(|d| &d.frames)
    .chain(
        episodes
            .iter()
            .flat_map(|e| e.support.frames.iter().chain(&e.query)),
    );
    TokenVocab::from_frames(frames)
}

/// Mean joint accuracy of `model` over `episodes` without fine-tuning or rules.
pub fn dev_joint_accuracy(
    model: &Model,
    episodes: &[Episode],
    config: &TrainConfig,
) -> Result<f64> {
    let reports = episodes
        .iter()
        .map(|e| evaluate_episode(model, e, EvalOptions::default(), config))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_report(&reports)?.joint_accuracy)
}

/// Trains on `episodes` when given, otherwise on episodes sampled online from
/// the train split; keeps the parameters with the best dev joint accuracy.
pub fn train(
    dataset: &Dataset,
    episodes: Option<&[Episode]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.train_domains.is_empty() && episodes.is_none_or(|e| e.is_empty()) {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let source = match episodes {
        Some(e) => EpisodeSource::Fixed(e),
        None => EpisodeSource::Online(&dataset.train_domains),
    };
    let vocab = dataset_vocab(dataset, episodes.unwrap_or(&[]));
    let mut state = Checkpoint::init(vocab, config.clone())?;

    let dev =
        if config.eval_interval > 0 && !dataset.dev_domains.is_empty() && config.dev_episodes > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(u64::MAX);
            build_episodes(
                &dataset.dev_domains,
                config.k,
                config.query_size,
                config.dev_episodes,
                &mut rng,
            )?
        } else {
            Vec::new()
        };

    let mut log = Vec::with_capacity(config.max_steps);
    let mut dev_history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    while state.step < config.max_steps {
        log.push(state.train_step(source)?);
        let done = state.step == config.max_steps;
        if !dev.is_empty() && (state.step % config.eval_interval == 0 || done) {
            let acc = dev_joint_accuracy(&state.model, &dev, config)?;
            dev_history.push((state.step, acc));
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, state.clone()));
            }
        }
    }
    Ok(TrainOutcome {
        best: best.map(|b| b.1).unwrap_or_else(|| state.clone()),
        last: state,
        log,
        dev_history,
    })
}

/// A copy of `model` trained for `finetune_steps` on `support`, which serves
/// as its own query set.
pub fn finetune(model: &Model, support: &[SemanticFrame], config: &TrainConfig) -> Result<Model> {
    let mut tuned = model.clone();
    let mut adam = Adam::new(&tuned.params, config.beta1, config.beta2, config.adam_eps);
    for step in 0..config.finetune_steps {
        let (loss, grads) = tuned.loss_and_grads(support, support)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("finetune step {step}: {loss}")));
        }
        adam.update(&mut tuned.params, &grads, config.finetune_lr)?;
    }
    Ok(tuned)
}
