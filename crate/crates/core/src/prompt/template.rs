use serde::{Deserialize, Serialize};

use crate::actstore::{ChatMessage, Passage, PromptMode, Role};
use crate::error::{Error, Result};
use crate::MAX_FEW_SHOT;

pub const DEFAULT_ORGANIZATION: &str = "<Organization>";

/// Rendering options shared by every template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Substituted into the standard system message.
    pub organization: String,
    /// Replaces the standard system message entirely when set.
    pub system_message: Option<String>,
    /// Whether prompted templates open with the system message.
    pub system_in_prompted: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            organization: DEFAULT_ORGANIZATION.to_string(),
            system_message: None,
            system_in_prompted: true,
        }
    }
}

impl PromptConfig {
    pub fn system_message(&self) -> String {
        self.system_message.clone().unwrap_or_else(|| {
            format!(
                "You are ChatGPT, a large language model trained by {}.",
                self.organization
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub mode: PromptMode,
    pub concept: String,
    /// Filled-in demonstrations, rendered before the query in this order.
    pub few_shot_examples: Vec<(Passage, u8)>,
}

impl PromptTemplate {
    pub fn new(mode: PromptMode, concept: impl Into<String>) -> Self {
        Self {
            mode,
            concept: concept.into(),
            few_shot_examples: Vec::new(),
        }
    }

    pub fn with_few_shot(mut self, examples: Vec<(Passage, u8)>) -> Self {
        self.few_shot_examples = examples;
        self
    }

    pub fn num_few_shot(&self) -> usize {
        self.few_shot_examples.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == PromptMode::None {
            if !self.few_shot_examples.is_empty() {
                return Err(Error::Template("few-shot examples require a prompted template".into()));
            }
            return Ok(());
        }
        if self.concept.trim().is_empty() {
            return Err(Error::Template("prompted templates need a concept".into()));
        }
        if self.few_shot_examples.len() > MAX_FEW_SHOT {
            return Err(Error::Template(format!(
                "{} few-shot examples exceed the maximum of {MAX_FEW_SHOT}",
                self.few_shot_examples.len()
            )));
        }
        if let Some((_, label)) = self.few_shot_examples.iter().find(|(_, l)| *l > 1) {
            return Err(Error::Template(format!("few-shot label {label} is not binary")));
        }
        Ok(())
    }

    fn block(&self, passage_text: &str) -> String {
        let c = &self.concept;
        match self.mode {
            PromptMode::None => passage_text.to_string(),
            PromptMode::SuffixOnly => format!(
                "{passage_text}</passage>\nPlease evaluate whether the preceding passage \
                 (all text prior to '</passage>') contains {c}. Answer with 'Yes' or 'No'. \
                 Does the passage contain {c}?"
            ),
            PromptMode::PrefixSuffix => format!(
                "Please evaluate whether the following passage contains {c}. \
                 Answer with 'Yes' or 'No'.\n<passage>\n{passage_text}</passage>\n\
                 Does the passage contain {c}?"
            ),
        }
    }
}

/// A prompt ready to send to an inference service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub messages: Vec<ChatMessage>,
    /// Index of the probed token; known once the service reports token boundaries.
    #[serde(default)]
    pub probe_token_index: Option<usize>,
}

impl RenderedPrompt {
    /// One `role: content` line per message.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| format!("{}: {}", m.role.as_str(), m.content))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// True when the prompt ends in an empty assistant turn awaiting the model.
    pub fn awaits_assistant(&self) -> bool {
        matches!(self.messages.last(), Some(m) if m.role == Role::Assistant && m.content.is_empty())
    }
}

/// Plaintext `User: ...` / `Assistant: ...` rendering of a chat; system turns are dropped.
pub fn to_plaintext_transcript(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .filter_map(|m| match m.role {
            Role::System => None,
            Role::User => Some(format!("User: {}", m.content)),
            Role::Assistant => Some(format!("Assistant: {}", m.content)),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn passage_text(passage: &Passage) -> String {
    match passage {
        Passage::Text(t) => t.clone(),
        Passage::Chat(messages) => to_plaintext_transcript(messages),
    }
}

pub fn render(template: &PromptTemplate, passage: &Passage, config: &PromptConfig) -> Result<RenderedPrompt> {
    template.validate()?;
    let messages = match template.mode {
        PromptMode::None => match passage {
            Passage::Text(t) => vec![
                ChatMessage::system(config.system_message()),
                ChatMessage::user(t.clone()),
            ],
            Passage::Chat(m) => m.clone(),
        },
        PromptMode::SuffixOnly | PromptMode::PrefixSuffix => {
            let mut messages = Vec::with_capacity(2 * template.num_few_shot() + 3);
            if config.system_in_prompted {
                messages.push(ChatMessage::system(config.system_message()));
            }
            for (shot, label) in &template.few_shot_examples {
                messages.push(ChatMessage::user(template.block(&passage_text(shot))));
                messages.push(ChatMessage::assistant(if *label == 1 { "Yes" } else { "No" }));
            }
            messages.push(ChatMessage::user(template.block(&passage_text(passage))));
            messages.push(ChatMessage::assistant(""));
            messages
        }
    };
    Ok(RenderedPrompt {
        messages,
        probe_token_index: None,
    })
}
