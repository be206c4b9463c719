//! Mapping free-text model replies onto canonical labels.
//!
//! Parsing is a fixed pipeline:
//!
//! 1. trim whitespace, case-fold and strip surrounding punctuation/quotes;
//! 2. exact match against canonical labels and aliases;
//! 3. otherwise scan the reply for labels/aliases as whole tokens and take the
//!    earliest mention (longest on a tie);
//! 4. otherwise `Unparsed`.
//!
//! Strict mode stops after step 2.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelSet;

#[derive(Debug, Error)]
pub enum AliasError {
    #[error("failed to read alias table {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed alias table: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("alias {alias:?} points at {target:?}, which is not a canonical label")]
    UnknownTarget { alias: String, target: String },
}

/// User-supplied alias → canonical label table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Aliases(pub BTreeMap<String, String>);

impl Aliases {
    pub fn from_json(json: &str, label_set: &LabelSet) -> Result<Self, AliasError> {
        let aliases = Aliases(serde_json::from_str(json)?);
        aliases.validate(label_set)?;
        Ok(aliases)
    }

    pub fn load(path: impl AsRef<Path>, label_set: &LabelSet) -> Result<Self, AliasError> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|source| AliasError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&json, label_set)
    }

    pub fn validate(&self, label_set: &LabelSet) -> Result<(), AliasError> {
        for (alias, target) in &self.0 {
            if !label_set.contains(target) {
                return Err(AliasError::UnknownTarget {
                    alias: alias.clone(),
                    target: target.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Outcome {
    Canonical(String),
    Unparsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Substring,
    None,
}

/// Result of parsing one reply. `matched_span` is `(byte_start, byte_len)`
/// in the raw reply.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "ParsedRepr", from = "ParsedRepr")]
pub struct ParsedLabel {
    pub outcome: Outcome,
    pub match_kind: MatchKind,
    pub matched_span: Option<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct ParsedRepr {
    label: Option<String>,
    match_kind: MatchKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    matched_span: Option<(usize, usize)>,
}

impl From<ParsedLabel> for ParsedRepr {
    fn from(p: ParsedLabel) -> Self {
        ParsedRepr {
            label: match p.outcome {
                Outcome::Canonical(l) => Some(l),
                Outcome::Unparsed => None,
            },
            match_kind: p.match_kind,
            matched_span: p.matched_span,
        }
    }
}

impl From<ParsedRepr> for ParsedLabel {
    fn from(r: ParsedRepr) -> Self {
        match r.label {
            Some(l) => ParsedLabel {
                outcome: Outcome::Canonical(l),
                match_kind: r.match_kind,
                matched_span: r.matched_span,
            },
            None => ParsedLabel::unparsed(),
        }
    }
}

impl ParsedLabel {
    pub fn unparsed() -> Self {
        ParsedLabel {
            outcome: Outcome::Unparsed,
            match_kind: MatchKind::None,
            matched_span: None,
        }
    }

    pub fn canonical(label: impl Into<String>, kind: MatchKind) -> Self {
        ParsedLabel {
            outcome: Outcome::Canonical(label.into()),
            match_kind: kind,
            matched_span: None,
        }
    }

    pub fn label(&self) -> Option<&str> {
        match &self.outcome {
            Outcome::Canonical(l) => Some(l),
            Outcome::Unparsed => None,
        }
    }

    pub fn is_unparsed(&self) -> bool {
        self.outcome == Outcome::Unparsed
    }
}

fn is_wrapper(c: char) -> bool {
    c.is_whitespace()
        || c.is_ascii_punctuation()
        || matches!(c, '“' | '”' | '‘' | '’' | '«' | '»' | '。' | '…')
}

/// Lower-cased text plus a map from each folded byte back to the byte offset
/// of the raw character it came from.
struct Folded {
    text: String,
    raw_offset: Vec<usize>,
    raw_len: usize,
}

impl Folded {
    fn new(raw: &str) -> Self {
        let mut text = String::with_capacity(raw.len());
        let mut raw_offset = Vec::with_capacity(raw.len() + 1);
        for (offset, ch) in raw.char_indices() {
            for lower in ch.to_lowercase() {
                let before = text.len();
                text.push(lower);
                raw_offset.extend(std::iter::repeat_n(offset, text.len() - before));
            }
        }
        raw_offset.push(raw.len());
        Folded {
            text,
            raw_offset,
            raw_len: raw.len(),
        }
    }

    fn raw_span(&self, start: usize, end: usize) -> (usize, usize) {
        let raw_start = self.raw_offset[start];
        let raw_end = if end >= self.text.len() {
            self.raw_len
        } else {
            self.raw_offset[end]
        };
        (raw_start, raw_end - raw_start)
    }
}

fn fold_key(s: &str) -> String {
    s.to_lowercase().trim_matches(is_wrapper).to_owned()
}

/// Reusable parser for one label set and alias table.
#[derive(Debug, Clone)]
pub struct LabelParser {
    /// (folded surface form, canonical label); labels first, then aliases.
    candidates: Vec<(String, String)>,
    strict: bool,
}

impl LabelParser {
    pub fn new(label_set: &LabelSet, aliases: Option<&Aliases>) -> Self {
        let mut candidates: Vec<(String, String)> = label_set
            .iter()
            .map(|l| (fold_key(l), l.to_owned()))
            .collect();
        if let Some(aliases) = aliases {
            candidates.extend(
                aliases
                    .0
                    .iter()
                    .map(|(alias, target)| (fold_key(alias), target.clone())),
            );
        }
        candidates.retain(|(key, _)| !key.is_empty());
        LabelParser {
            candidates,
            strict: false,
        }
    }

    /// Disables the substring fallback.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn parse(&self, raw: &str) -> ParsedLabel {
        let folded = Folded::new(raw);
        let text = folded.text.as_str();

        let core_start = text.len() - text.trim_start_matches(is_wrapper).len();
        let core = text.trim_matches(is_wrapper);
        if let Some((_, label)) = self.candidates.iter().find(|(key, _)| key == core) {
            return ParsedLabel {
                outcome: Outcome::Canonical(label.clone()),
                match_kind: MatchKind::Exact,
                matched_span: Some(folded.raw_span(core_start, core_start + core.len())),
            };
        }
        if self.strict {
            return ParsedLabel::unparsed();
        }

        let mut best: Option<(usize, usize, &str)> = None;
        for (key, label) in &self.candidates {
            let Some(start) = first_token_match(text, key) else {
                continue;
            };
            let better = match best {
                None => true,
                Some((s, len, _)) => start < s || (start == s && key.len() > len),
            };
            if better {
                best = Some((start, key.len(), label));
            }
        }
        match best {
            Some((start, len, label)) => ParsedLabel {
                outcome: Outcome::Canonical(label.to_owned()),
                match_kind: MatchKind::Substring,
                matched_span: Some(folded.raw_span(start, start + len)),
            },
            None => ParsedLabel::unparsed(),
        }
    }
}

/// Earliest occurrence of `needle` in `haystack` that is not glued to an
/// alphanumeric character on either side.
fn first_token_match(haystack: &str, needle: &str) -> Option<usize> {
    haystack.match_indices(needle).map(|(i, _)| i).find(|&i| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// One-shot convenience around [`LabelParser`].
pub fn parse_label(raw: &str, label_set: &LabelSet, aliases: Option<&Aliases>) -> ParsedLabel {
    LabelParser::new(label_set, aliases).parse(raw)
}
