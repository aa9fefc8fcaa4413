//! Utterances, semantic frames, per-domain label vocabularies and the JSON
//! dataset format.
//!
//! ```json
//! {"train": [{"name": "music", "frames": [
//!     {"tokens": ["play", "jazz"], "intent": "PlayMusic", "slot_tags": ["O", "B-genre"]}
//! ]}], "dev": [], "test": []}
//! ```
//!
//! A domain may carry `"intent_vocab"` / `"tag_vocab"` arrays; otherwise they
//! are derived from its frames. Vocabularies are always sorted so class
//! indices do not depend on input order.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

/// A parsed BIO tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Tag<'a> {
    pub fn parse(s: &'a str) -> Option<Tag<'a>> {
        if s == OUTSIDE {
            return Some(Tag::Outside);
        }
        let (prefix, name) = s.split_once('-')?;
        if name.is_empty() {
            return None;
        }
        match prefix {
            "B" => Some(Tag::Begin(name)),
            "I" => Some(Tag::Inside(name)),
            _ => None,
        }
    }

    /// Slot name for `B-x` / `I-x`.
    pub fn slot(self) -> Option<&'a str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(n) | Tag::Inside(n) => Some(n),
        }
    }
}

/// One utterance with its intent and aligned BIO tags.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticFrame {
    pub tokens: Vec<String>,
    pub intent: String,
    pub slot_tags: Vec<String>,
}

impl SemanticFrame {
    pub fn new(tokens: &[&str], intent: &str, slot_tags: &[&str]) -> Self {
        SemanticFrame {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            intent: intent.to_string(),
            slot_tags: slot_tags.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Distinct non-"O" tag symbols in this frame, sorted.
    pub fn slot_tag_set(&self) -> BTreeSet<&str> {
        self.slot_tags
            .iter()
            .map(String::as_str)
            .filter(|t| *t != OUTSIDE)
            .collect()
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.tokens.len() != self.slot_tags.len() {
            return Err(format!(
                "length mismatch: {} tokens, {} tags",
                self.tokens.len(),
                self.slot_tags.len()
            ));
        }
        if let Some(bad) = self.slot_tags.iter().find(|t| Tag::parse(t).is_none()) {
            return Err(format!("unknown tag syntax `{bad}`"));
        }
        Ok(())
    }
}

/// Suspicious but legal content: currently only orphan `I-x` tags.
pub fn validate_frame(frame: &SemanticFrame) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut prev: Option<&str> = None;
    for (k, raw) in frame.slot_tags.iter().enumerate() {
        let tag = Tag::parse(raw);
        if let Some(Tag::Inside(name)) = tag {
            if prev != Some(name) {
                warnings.push(format!("orphan {raw} at index {k}"));
            }
        }
        prev = tag.and_then(Tag::slot);
    }
    warnings
}

/// One named domain with its sorted label vocabularies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Domain {
    pub name: String,
    pub frames: Vec<SemanticFrame>,
    pub intent_vocab: Vec<String>,
    pub tag_vocab: Vec<String>,
}

impl Domain {
    /// Builds a domain, deriving both vocabularies from the frames.
    pub fn new(name: impl Into<String>, frames: Vec<SemanticFrame>) -> Result<Self> {
        Self::with_vocab(name.into(), frames, None, None)
    }

    fn with_vocab(
        name: String,
        frames: Vec<SemanticFrame>,
        intent_override: Option<Vec<String>>,
        tag_override: Option<Vec<String>>,
    ) -> Result<Self> {
        for (i, f) in frames.iter().enumerate() {
            f.check()
                .map_err(|m| Error::Validation(format!("domain `{name}`, frame {i}: {m}")))?;
        }
        let seen_intents: BTreeSet<&str> = frames.iter().map(|f| f.intent.as_str()).collect();
        let mut seen_tags: BTreeSet<&str> = frames
            .iter()
            .flat_map(|f| f.slot_tags.iter().map(String::as_str))
            .collect();
        seen_tags.insert(OUTSIDE);

        let intent_vocab = match intent_override {
            None => seen_intents.iter().map(|s| s.to_string()).collect(),
            Some(v) => {
                let set: BTreeSet<String> = v.into_iter().collect();
                if let Some(miss) = seen_intents.iter().find(|i| !set.contains(**i)) {
                    return Err(Error::Validation(format!(
                        "domain `{name}`: intent `{miss}` missing from intent_vocab"
                    )));
                }
                set.into_iter().collect()
            }
        };
        let tag_vocab = match tag_override {
            None => seen_tags.iter().map(|s| s.to_string()).collect(),
            Some(v) => {
                let mut set: BTreeSet<String> = v.into_iter().collect();
                set.insert(OUTSIDE.to_string());
                if let Some(bad) = set.iter().find(|t| Tag::parse(t).is_none()) {
                    return Err(Error::Validation(format!(
                        "domain `{name}`: unknown tag syntax `{bad}` in tag_vocab"
                    )));
                }
                if let Some(miss) = seen_tags.iter().find(|t| !set.contains(**t)) {
                    return Err(Error::Validation(format!(
                        "domain `{name}`: tag `{miss}` missing from tag_vocab"
                    )));
                }
                set.into_iter().collect()
            }
        };
        Ok(Domain {
            name,
            frames,
            intent_vocab,
            tag_vocab,
        })
    }

    /// Warnings from [`validate_frame`] for every frame, prefixed by index.
    pub fn warnings(&self) -> Vec<String> {
        self.frames
            .iter()
            .enumerate()
            .flat_map(|(i, f)| {
                validate_frame(f)
                    .into_iter()
                    .map(move |w| format!("{}[{i}]: {w}", self.name))
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub train_domains: Vec<Domain>,
    pub dev_domains: Vec<Domain>,
    pub test_domains: Vec<Domain>,
}

/// Which part of a [`Dataset`] to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Domain] {
        match split {
            Split::Train => &self.train_domains,
            Split::Dev => &self.dev_domains,
            Split::Test => &self.test_domains,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DomainObj {
    name: String,
    frames: Vec<SemanticFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intent_vocab: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag_vocab: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetObj {
    #[serde(default)]
    train: Vec<DomainObj>,
    #[serde(default)]
    dev: Vec<DomainObj>,
    #[serde(default)]
    test: Vec<DomainObj>,
}

pub(crate) fn json_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

fn build_split(label: &str, objs: Vec<DomainObj>) -> Result<Vec<Domain>> {
    let mut names = HashSet::new();
    objs.into_iter()
        .map(|o| {
            if !names.insert(o.name.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate domain `{}` in {label} split",
                    o.name
                )));
            }
            Domain::with_vocab(o.name, o.frames, o.intent_vocab, o.tag_vocab)
        })
        .collect()
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let obj: DatasetObj = serde_json::from_str(text).map_err(json_error)?;
    Ok(Dataset {
        train_domains: build_split("train", obj.train)?,
        dev_domains: build_split("dev", obj.dev)?,
        test_domains: build_split("test", obj.test)?,
    })
}

fn to_obj(d: &Domain) -> DomainObj {
    DomainObj {
        name: d.name.clone(),
        frames: d.frames.clone(),
        intent_vocab: Some(d.intent_vocab.clone()),
        tag_vocab: Some(d.tag_vocab.clone()),
    }
}

pub fn serialize_dataset(ds: &Dataset) -> String {
    let obj = DatasetObj {
        train: ds.train_domains.iter().map(to_obj).collect(),
        dev: ds.dev_domains.iter().map(to_obj).collect(),
        test: ds.test_domains.iter().map(to_obj).collect(),
    };
    serde_json::to_string(&obj).expect("dataset serializes")
}

pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<Dataset> {
    parse_dataset(&std::fs::read_to_string(path)?)
}
