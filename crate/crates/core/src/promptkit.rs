//! Conversational prompt construction.
//!
//! Each retrieved exemplar becomes one completed dialogue round: a user turn
//! carrying the exemplar's images and text, then an assistant turn whose only
//! content is the exemplar's canonical label. The real query is the final
//! user turn, so the model only has to continue the pattern.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelSet, Sample};

pub const LABELS_PLACEHOLDER: &str = "{labels}";
pub const TEXT_PLACEHOLDER: &str = "{text}";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template field {field}: placeholder {placeholder} must appear exactly once (found {count})")]
    Placeholder {
        field: &'static str,
        placeholder: &'static str,
        count: usize,
    },
    #[error("demonstration {sample_id:?} has label {label:?} outside the label set")]
    DemoLabel { sample_id: String, label: String },
    #[error("demonstration {0:?} does not carry exactly one label")]
    DemoUnlabeled(String),
    #[error("query {0:?} has no image")]
    QueryMissingImage(String),
    #[error("query {0:?} has no text")]
    QueryMissingText(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ContentPart {
    Text { text: String },
    Image { image_ref: PathBuf },
}

impl ContentPart {
    pub fn text(s: impl Into<String>) -> Self {
        ContentPart::Text { text: s.into() }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ContentPart::Text { text } => Some(text),
            ContentPart::Image { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl Message {
    fn text(role: Role, text: String) -> Self {
        Self {
            role,
            parts: vec![ContentPart::Text { text }],
        }
    }

    /// Concatenated text parts.
    pub fn text_content(&self) -> String {
        self.parts.iter().filter_map(ContentPart::as_text).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTranscript {
    pub messages: Vec<Message>,
}

impl ChatTranscript {
    /// Assistant replies in transcript order.
    pub fn demo_labels(&self) -> Vec<&str> {
        self.messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .filter_map(|m| m.parts.first().and_then(ContentPart::as_text))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("transcript serializes")
    }

    /// Checks the shape invariants: optional leading system message, then
    /// strict user/assistant alternation ending on a user turn, with
    /// single-text assistant turns.
    pub fn check_shape(&self) -> Result<(), String> {
        let body = match self.messages.first() {
            Some(m) if m.role == Role::System => &self.messages[1..],
            _ => &self.messages[..],
        };
        if body.is_empty() {
            return Err("transcript has no user message".into());
        }
        for (i, m) in body.iter().enumerate() {
            let expected = if i % 2 == 0 {
                Role::User
            } else {
                Role::Assistant
            };
            if m.role != expected {
                return Err(format!(
                    "message {i} has role {:?}, expected {expected:?}",
                    m.role
                ));
            }
            if m.parts.is_empty() {
                return Err(format!("message {i} has no parts"));
            }
            if m.role == Role::Assistant && !(m.parts.len() == 1 && m.parts[0].as_text().is_some())
            {
                return Err(format!("assistant message {i} must be a single text part"));
            }
        }
        if body.len() % 2 == 0 {
            return Err("transcript must end with a user message".into());
        }
        Ok(())
    }
}

/// Wording of the prompt. `{labels}` is replaced by the comma-separated label
/// list; `{text}` by the sample's clinical text. An empty system instruction
/// omits the system message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub system_instruction: String,
    pub demo_question: String,
    pub query_question: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system_instruction: "You are a medical assistant. Classify the case into exactly one of: {labels}. Reply with the label only.".into(),
            demo_question: "Findings: {text}\nWhat is the diagnosis?".into(),
            query_question: "Findings: {text}\nWhat is the diagnosis?".into(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), PromptError> {
        let check = |field, host: &str, placeholder| {
            let count = host.matches(placeholder).count();
            if count == 1 {
                Ok(())
            } else {
                Err(PromptError::Placeholder {
                    field,
                    placeholder,
                    count,
                })
            }
        };
        if !self.system_instruction.is_empty() {
            check(
                "system_instruction",
                &self.system_instruction,
                LABELS_PLACEHOLDER,
            )?;
        }
        check("demo_question", &self.demo_question, TEXT_PLACEHOLDER)?;
        check("query_question", &self.query_question, TEXT_PLACEHOLDER)
    }
}

/// Where the nearest neighbour sits among the demonstration rounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    NearestFirst,
    /// Nearest neighbour is the last round, adjacent to the query.
    #[default]
    NearestLast,
}

impl DemoOrder {
    /// Reorders a best-first neighbour list into transcript order.
    pub fn arrange<T>(self, mut best_first: Vec<T>) -> Vec<T> {
        if self == DemoOrder::NearestLast {
            best_first.reverse();
        }
        best_first
    }
}

fn user_turn(sample: &Sample, question: &str) -> Message {
    let mut parts: Vec<ContentPart> = sample
        .image_refs
        .iter()
        .map(|p| ContentPart::Image {
            image_ref: p.clone(),
        })
        .collect();
    parts.push(ContentPart::Text {
        text: question.replacen(TEXT_PLACEHOLDER, &sample.text, 1),
    });
    Message {
        role: Role::User,
        parts,
    }
}

/// Builds the transcript. `demos` are already in transcript order; each
/// demo's gold label becomes its verbatim assistant reply. The query's own
/// label is never read.
pub fn build_transcript(
    query: &Sample,
    demos: &[&Sample],
    template: &PromptTemplate,
    label_set: &LabelSet,
) -> Result<ChatTranscript, PromptError> {
    template.validate()?;
    if query.image_refs.is_empty() {
        return Err(PromptError::QueryMissingImage(query.id.clone()));
    }
    if !query.has_text() {
        return Err(PromptError::QueryMissingText(query.id.clone()));
    }

    let mut messages = Vec::with_capacity(2 * demos.len() + 2);
    if !template.system_instruction.is_empty() {
        let labels = label_set.names().join(", ");
        messages.push(Message::text(
            Role::System,
            template
                .system_instruction
                .replacen(LABELS_PLACEHOLDER, &labels, 1),
        ));
    }
    for demo in demos {
        let label = demo
            .label()
            .ok_or_else(|| PromptError::DemoUnlabeled(demo.id.clone()))?;
        if !label_set.contains(label) {
            return Err(PromptError::DemoLabel {
                sample_id: demo.id.clone(),
                label: label.to_owned(),
            });
        }
        messages.push(user_turn(demo, &template.demo_question));
        messages.push(Message::text(Role::Assistant, label.to_owned()));
    }
    messages.push(user_turn(query, &template.query_question));
    Ok(ChatTranscript { messages })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TranscriptStats {
    pub messages: usize,
    pub demo_rounds: usize,
    pub image_parts: usize,
    /// Characters across all text parts.
    pub text_chars: usize,
}

pub fn transcript_stats(t: &ChatTranscript) -> TranscriptStats {
    let users = t.messages.iter().filter(|m| m.role == Role::User).count();
    let parts = t.messages.iter().flat_map(|m| m.parts.iter());
    TranscriptStats {
        messages: t.messages.len(),
        demo_rounds: users.saturating_sub(1),
        image_parts: parts
            .clone()
            .filter(|p| matches!(p, ContentPart::Image { .. }))
            .count(),
        text_chars: parts
            .filter_map(ContentPart::as_text)
            .map(|s| s.chars().count())
            .sum(),
    }
}
