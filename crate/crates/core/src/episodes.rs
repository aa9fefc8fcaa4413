//! K-shot support construction under the Mini-Including criteria, and
//! episode sampling.
//!
//! A frame's labels are its intent plus each distinct non-"O" tag symbol it
//! contains (`B-x` and `I-x` are separate labels). Label occurrence is
//! counted once per frame. A label that occurs in fewer than `K` frames of
//! the domain has its target clamped to its domain count.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{json_error, Domain, SemanticFrame};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Intent(String),
    Tag(String),
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Intent(s) => write!(f, "intent:{s}"),
            Label::Tag(s) => write!(f, "tag:{s}"),
        }
    }
}

/// Labels carried by one frame, each counted once.
pub fn frame_labels(frame: &SemanticFrame) -> BTreeSet<Label> {
    let mut out: BTreeSet<Label> = frame
        .slot_tag_set()
        .into_iter()
        .map(|t| Label::Tag(t.to_string()))
        .collect();
    out.insert(Label::Intent(frame.intent.clone()));
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportSet {
    pub frames: Vec<SemanticFrame>,
    pub shot_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub domain_name: String,
    pub support: SupportSet,
    pub query: Vec<SemanticFrame>,
}

/// Per-label coverage targets: `min(K, frames containing the label)` for
/// every intent and non-"O" tag in the domain vocabularies.
fn coverage_targets(domain: &Domain, k: usize) -> BTreeMap<Label, usize> {
    let mut occurrences: BTreeMap<Label, usize> = domain
        .intent_vocab
        .iter()
        .map(|i| Label::Intent(i.clone()))
        .chain(
            domain
                .tag_vocab
                .iter()
                .filter(|t| *t != crate::corpus::OUTSIDE)
                .map(|t| Label::Tag(t.clone())),
        )
        .map(|l| (l, 0))
        .collect();
    for f in &domain.frames {
        for l in frame_labels(f) {
            *occurrences.entry(l).or_default() += 1;
        }
    }
    occurrences
        .into_iter()
        .map(|(l, c)| (l, c.min(k)))
        .collect()
}

fn count_labels<'a>(frames: impl Iterator<Item = &'a SemanticFrame>) -> BTreeMap<Label, usize> {
    let mut counts = BTreeMap::new();
    for f in frames {
        for l in frame_labels(f) {
            *counts.entry(l).or_default() += 1;
        }
    }
    counts
}

/// Greedy Mini-Including: add frames for the scarcest deficient label until
/// every target is met, then drop any frame whose removal keeps all targets.
pub fn build_support_set<R: Rng>(domain: &Domain, k: usize, rng: &mut R) -> Result<SupportSet> {
    Ok(SupportSet {
        frames: select_support(domain, k, rng)?
            .into_iter()
            .map(|i| domain.frames[i].clone())
            .collect(),
        shot_count: k,
    })
}

/// Indices into `domain.frames` of the selected support, ascending.
fn select_support<R: Rng>(domain: &Domain, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    if domain.frames.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "domain `{}` is empty",
            domain.name
        )));
    }
    let targets = coverage_targets(domain, k);
    let labels: Vec<BTreeSet<Label>> = domain.frames.iter().map(frame_labels).collect();

    let mut order: Vec<usize> = (0..domain.frames.len()).collect();
    order.shuffle(rng);

    let mut frequency: BTreeMap<&Label, usize> = BTreeMap::new();
    for ls in &labels {
        for l in ls {
            *frequency.entry(l).or_default() += 1;
        }
    }
    let mut by_scarcity: Vec<&Label> = targets.keys().collect();
    by_scarcity.sort_by_key(|l| (frequency.get(l).copied().unwrap_or(0), *l));

    let mut chosen = vec![false; domain.frames.len()];
    let mut counts: BTreeMap<&Label, usize> = BTreeMap::new();
    for label in by_scarcity {
        let target = targets[label];
        for &i in &order {
            if counts.get(label).copied().unwrap_or(0) >= target {
                break;
            }
            if chosen[i] || !labels[i].contains(label) {
                continue;
            }
            chosen[i] = true;
            for l in &labels[i] {
                *counts.entry(l).or_default() += 1;
            }
        }
    }

    let mut selected: Vec<usize> = (0..chosen.len()).filter(|&i| chosen[i]).collect();
    selected.shuffle(rng);
    for i in selected {
        let removable = labels[i]
            .iter()
            .all(|l| counts[l] > targets.get(l).copied().unwrap_or(0));
        if removable {
            chosen[i] = false;
            for l in &labels[i] {
                *counts.get_mut(l).unwrap() -= 1;
            }
        }
    }
    Ok((0..chosen.len()).filter(|&i| chosen[i]).collect())
}

/// Coverage of one label in a checked support set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelCoverage {
    pub label: Label,
    pub count: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniIncludingReport {
    pub labels: Vec<LabelCoverage>,
    /// Support positions whose removal would still satisfy every target.
    pub removable: Vec<usize>,
    /// Support positions not found among the domain's frames.
    pub foreign: Vec<usize>,
}

impl MiniIncludingReport {
    pub fn all_covered(&self) -> bool {
        self.labels.iter().all(|c| c.count >= c.target)
    }

    pub fn passed(&self) -> bool {
        self.all_covered() && self.removable.is_empty() && self.foreign.is_empty()
    }
}

/// Checks both criteria by brute force: coverage of every clamped target,
/// and that no single frame can be dropped.
pub fn verify_mini_including(
    support: &SupportSet,
    domain: &Domain,
    k: usize,
) -> (bool, MiniIncludingReport) {
    let targets = coverage_targets(domain, k);
    let counts = count_labels(support.frames.iter());
    let labels = targets
        .iter()
        .map(|(l, &target)| LabelCoverage {
            label: l.clone(),
            count: counts.get(l).copied().unwrap_or(0),
            target,
        })
        .collect();
    let removable = (0..support.frames.len())
        .filter(|&skip| {
            let rest = count_labels(
                support
                    .frames
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != skip)
                    .map(|(_, f)| f),
            );
            targets
                .iter()
                .all(|(l, &t)| rest.get(l).copied().unwrap_or(0) >= t)
        })
        .collect();
    let foreign = support
        .frames
        .iter()
        .enumerate()
        .filter(|(_, f)| !domain.frames.contains(f))
        .map(|(i, _)| i)
        .collect();
    let report = MiniIncludingReport {
        labels,
        removable,
        foreign,
    };
    (report.passed(), report)
}

/// Support via [`build_support_set`]; the query is a uniform sample without
/// replacement from the remaining frames, truncated to what is available.
pub fn sample_episode<R: Rng>(
    domain: &Domain,
    k: usize,
    query_size: usize,
    rng: &mut R,
) -> Result<Episode> {
    if query_size == 0 {
        return Err(Error::InvalidArgument("query size must be positive".into()));
    }
    let support_idx = select_support(domain, k, rng)?;
    let mut rest: Vec<usize> = (0..domain.frames.len())
        .filter(|i| support_idx.binary_search(i).is_err())
        .collect();
    if rest.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "domain `{}` has no frames left for a query set",
            domain.name
        )));
    }
    rest.shuffle(rng);
    rest.truncate(query_size);
    Ok(Episode {
        domain_name: domain.name.clone(),
        support: SupportSet {
            frames: support_idx
                .iter()
                .map(|&i| domain.frames[i].clone())
                .collect(),
            shot_count: k,
        },
        query: rest.iter().map(|&i| domain.frames[i].clone()).collect(),
    })
}

/// `n` episodes, visiting the domains round-robin.
pub fn build_episodes<R: Rng>(
    domains: &[Domain],
    k: usize,
    query_size: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Episode>> {
    if domains.is_empty() {
        return Err(Error::InvalidArgument("no domains to sample from".into()));
    }
    (0..n)
        .map(|i| sample_episode(&domains[i % domains.len()], k, query_size, rng))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct EpisodeObj {
    domain: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    shots: usize,
    support: Vec<SemanticFrame>,
    query: Vec<SemanticFrame>,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

pub fn episodes_to_json(episodes: &[Episode]) -> String {
    let objs: Vec<EpisodeObj> = episodes
        .iter()
        .map(|e| EpisodeObj {
            domain: e.domain_name.clone(),
            shots: e.support.shot_count,
            support: e.support.frames.clone(),
            query: e.query.clone(),
        })
        .collect();
    serde_json::to_string(&objs).expect("episodes serialize")
}

pub fn parse_episodes(text: &str) -> Result<Vec<Episode>> {
    let objs: Vec<EpisodeObj> = serde_json::from_str(text).map_err(json_error)?;
    objs.into_iter()
        .enumerate()
        .map(|(n, o)| {
            // reuse frame validation
            Domain::new(
                &o.domain,
                o.support.iter().chain(&o.query).cloned().collect(),
            )
            .map_err(|e| Error::Validation(format!("episode {n}: {e}")))?;
            Ok(Episode {
                domain_name: o.domain,
                support: SupportSet {
                    frames: o.support,
                    shot_count: o.shots,
                },
                query: o.query,
            })
        })
        .collect()
}

pub fn load_episodes(path: impl AsRef<std::path::Path>) -> Result<Vec<Episode>> {
    parse_episodes(&std::fs::read_to_string(path)?)
}
