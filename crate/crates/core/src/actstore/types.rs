use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

/// A monitored passage: either raw text or a (possibly fragmentary) chat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Passage {
    Text(String),
    Chat(Vec<ChatMessage>),
}

impl Passage {
    pub fn is_chat(&self) -> bool {
        matches!(self, Passage::Chat(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    None,
    SuffixOnly,
    PrefixSuffix,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::None => "none",
            PromptMode::SuffixOnly => "suffix_only",
            PromptMode::PrefixSuffix => "prefix_suffix",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PromptMode::None),
            "suffix_only" => Ok(PromptMode::SuffixOnly),
            "prefix_suffix" => Ok(PromptMode::PrefixSuffix),
            other => Err(Error::Invalid(format!("unknown prompt mode {other:?}"))),
        }
    }
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledExample {
    pub id: String,
    pub passage: Passage,
    pub label: u8,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    pub split: Split,
    /// Grouping key (e.g. the question of a QA pair); groups never straddle splits.
    #[serde(default)]
    pub group: Option<String>,
}

impl LabeledExample {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub task_concept: String,
    pub class_names: (String, String),
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        task_concept: impl Into<String>,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        let concept = task_concept.into();
        let dataset = Self {
            name: name.into(),
            class_names: (concept.clone(), format!("no_{concept}")),
            task_concept: concept,
            examples,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.examples.len());
        let mut group_split: HashMap<&str, Split> = HashMap::new();
        for ex in &self.examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::Invariant(format!("duplicate example id {:?}", ex.id)));
            }
            if ex.label > 1 {
                return Err(Error::Invariant(format!(
                    "example {:?} has label {} (expected 0 or 1)",
                    ex.id, ex.label
                )));
            }
            if let Some(group) = &ex.group {
                match group_split.get(group.as_str()) {
                    Some(&split) if split != ex.split => {
                        return Err(Error::Invariant(format!(
                            "group {group:?} appears in both train and test splits"
                        )))
                    }
                    Some(_) => {}
                    None => {
                        group_split.insert(group, ex.split);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&LabeledExample> {
        self.examples.iter().find(|ex| ex.id == id)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, ex)| (ex.id.as_str(), i))
            .collect()
    }

    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.examples
            .iter()
            .filter(|ex| ex.split == split)
            .map(|ex| ex.id.clone())
            .collect()
    }

    pub fn labels_for(&self, ids: &[String]) -> Result<Vec<u8>> {
        let index = self.index();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.examples[i].label)
                    .ok_or_else(|| Error::UnknownExample(id.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YesNoLogits {
    pub example_id: String,
    pub yes_logit: f64,
    pub no_logit: f64,
    pub prompt_mode: PromptMode,
    pub num_few_shot: usize,
}

impl YesNoLogits {
    pub fn validate(&self) -> Result<()> {
        if !self.yes_logit.is_finite() || !self.no_logit.is_finite() {
            return Err(Error::Invariant(format!("non-finite logits for {:?}", self.example_id)));
        }
        if self.num_few_shot > crate::MAX_FEW_SHOT {
            return Err(Error::Invariant(format!(
                "num_few_shot {} exceeds {}",
                self.num_few_shot,
                crate::MAX_FEW_SHOT
            )));
        }
        Ok(())
    }

    pub fn diff(&self) -> f64 {
        self.yes_logit - self.no_logit
    }
}
