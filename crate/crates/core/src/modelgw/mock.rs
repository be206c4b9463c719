use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ChatModel, ModelError, ModelReply};
use crate::promptkit::ChatTranscript;

/// Reply policy of the offline mock model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockPolicy {
    /// Echo the label of the demonstration round adjacent to the query.
    FirstDemoLabel,
    /// Most frequent demonstration label; ties go to the label closest to
    /// the query.
    MajorityDemoLabel,
    FixedReply(String),
}

impl MockPolicy {
    fn needs_demos(&self) -> bool {
        !matches!(self, MockPolicy::FixedReply(_))
    }
}

pub fn mock_complete(
    transcript: &ChatTranscript,
    policy: &MockPolicy,
) -> Result<ModelReply, ModelError> {
    let labels = transcript.demo_labels();
    if policy.needs_demos() && labels.is_empty() {
        return Err(ModelError::MockUsage(format!(
            "{policy:?} needs at least one demonstration round"
        )));
    }
    let text = match policy {
        MockPolicy::FixedReply(text) => text.clone(),
        MockPolicy::FirstDemoLabel => labels[labels.len() - 1].to_owned(),
        MockPolicy::MajorityDemoLabel => {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for l in &labels {
                *counts.entry(l).or_default() += 1;
            }
            let top = counts.values().copied().max().unwrap_or(0);
            labels
                .iter()
                .rev()
                .find(|l| counts[*l] == top)
                .map(|l| (*l).to_owned())
                .unwrap_or_default()
        }
    };
    Ok(ModelReply::immediate(text))
}

#[derive(Debug, Clone)]
pub struct MockModel {
    pub policy: MockPolicy,
}

impl MockModel {
    pub fn new(policy: MockPolicy) -> Self {
        Self { policy }
    }
}

impl ChatModel for MockModel {
    fn complete(&self, transcript: &ChatTranscript) -> Result<ModelReply, ModelError> {
        mock_complete(transcript, &self.policy)
    }

    fn cacheable(&self) -> bool {
        false
    }
}
