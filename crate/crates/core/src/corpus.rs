//! Dataset manifests: loading, validation, completeness filtering and class
//! histograms.
//!
//! A manifest is a JSON file:
//!
//! ```json
//! {
//!   "name": "tcga",
//!   "labels": ["BRCA", "LUAD"],
//!   "samples": [
//!     {"id": "p1", "images": ["img/p1.png"], "text": "...", "labels": ["BRCA"]}
//!   ]
//! }
//! ```
//!
//! Image paths are relative to the manifest's directory. Samples carry a
//! list of labels so multi-disease records can be represented and then
//! filtered out; after [`filter_complete`] every sample has exactly one.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: malformed manifest: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid label set: {0}")]
    LabelSet(String),
    #[error("duplicate sample id(s): {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("sample #{index} has an empty id")]
    EmptyId { index: usize },
    #[error("label(s) not in the label set: {}", .0.join(", "))]
    UnknownLabels(Vec<String>),
}

/// Ordered set of canonical label names.
///
/// Names are distinct under case-insensitive comparison and never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(names: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(CorpusError::LabelSet("empty label name".into()));
            }
            if !seen.insert(name.to_lowercase()) {
                return Err(CorpusError::LabelSet(format!(
                    "duplicate label {name:?} (case-insensitive)"
                )));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Exact (case-sensitive) membership.
    pub fn contains(&self, label: &str) -> bool {
        self.names.iter().any(|n| n == label)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n == label)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = CorpusError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        LabelSet::new(names)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.names
    }
}

/// One patient record: image references, clinical text, and gold label(s).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image_refs: Vec<PathBuf>,
    pub text: String,
    pub labels: Vec<String>,
}

impl Sample {
    /// The gold label, if the sample carries exactly one.
    pub fn label(&self) -> Option<&str> {
        match self.labels.as_slice() {
            [only] => Some(only),
            _ => None,
        }
    }

    pub fn has_text(&self) -> bool {
        !self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub label_set: LabelSet,
    pub samples: Vec<Sample>,
}

#[derive(Deserialize, Serialize)]
struct ManifestFile {
    name: String,
    labels: Vec<String>,
    samples: Vec<SampleFile>,
}

#[derive(Deserialize, Serialize)]
struct SampleFile {
    id: String,
    #[serde(default)]
    images: Vec<String>,
    #[serde(default)]
    text: String,
    #[serde(default)]
    labels: Vec<String>,
}

/// Parses a manifest file and resolves image paths against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, CorpusError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&raw, base_dir).map_err(|err| match err {
        CorpusError::Parse {
            line,
            column,
            message,
            ..
        } => CorpusError::Parse {
            path: path.to_path_buf(),
            line,
            column,
            message,
        },
        other => other,
    })
}

/// Parses manifest JSON; relative image paths are joined onto `base_dir`.
pub fn parse_manifest(json: &str, base_dir: &Path) -> Result<DatasetManifest, CorpusError> {
    let file: ManifestFile = serde_json::from_str(json).map_err(|e| CorpusError::Parse {
        path: PathBuf::new(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let label_set = LabelSet::new(file.labels)?;

    let mut seen = HashSet::new();
    let mut duplicates = BTreeSet::new();
    let mut samples = Vec::with_capacity(file.samples.len());
    for (index, s) in file.samples.into_iter().enumerate() {
        if s.id.is_empty() {
            return Err(CorpusError::EmptyId { index });
        }
        if !seen.insert(s.id.clone()) {
            duplicates.insert(s.id.clone());
        }
        samples.push(Sample {
            image_refs: s.images.iter().map(|p| base_dir.join(p)).collect(),
            id: s.id,
            text: s.text,
            labels: s.labels,
        });
    }
    if !duplicates.is_empty() {
        return Err(CorpusError::DuplicateIds(duplicates.into_iter().collect()));
    }
    Ok(DatasetManifest {
        name: file.name,
        label_set,
        samples,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Fails if any sample mentions a label outside the label set.
    pub fn validate_labels(&self) -> Result<(), CorpusError> {
        let unknown: BTreeSet<&str> = self
            .samples
            .iter()
            .flat_map(|s| s.labels.iter())
            .filter(|l| !self.label_set.contains(l))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CorpusError::UnknownLabels(
                unknown.into_iter().map(str::to_owned).collect(),
            ))
        }
    }

    /// Serializes the manifest, writing image paths relative to `base_dir`
    /// where possible.
    pub fn to_json(&self, base_dir: &Path) -> String {
        let file = ManifestFile {
            name: self.name.clone(),
            labels: self.label_set.names().to_vec(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleFile {
                    id: s.id.clone(),
                    images: s
                        .image_refs
                        .iter()
                        .map(|p| {
                            p.strip_prefix(base_dir)
                                .unwrap_or(p)
                                .to_string_lossy()
                                .into_owned()
                        })
                        .collect(),
                    text: s.text.clone(),
                    labels: s.labels.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    MissingImage,
    MissingText,
    NoLabel,
    MultipleDiseases,
    UnknownLabel,
}

impl fmt::Display for RemovalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RemovalReason::MissingImage => "missing image",
            RemovalReason::MissingText => "missing text",
            RemovalReason::NoLabel => "no label",
            RemovalReason::MultipleDiseases => "multiple diseases",
            RemovalReason::UnknownLabel => "unknown label",
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FilterOptions {
    /// Treat a sample as missing its image if any referenced file does not
    /// exist right now.
    pub check_files: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterReport {
    pub kept: usize,
    pub removed: BTreeMap<RemovalReason, usize>,
}

impl FilterReport {
    pub fn total_removed(&self) -> usize {
        self.removed.values().sum()
    }

    pub fn count(&self, reason: RemovalReason) -> usize {
        self.removed.get(&reason).copied().unwrap_or(0)
    }
}

/// Why a sample fails the completeness rules, checked in a fixed order.
pub fn removal_reason(
    sample: &Sample,
    label_set: &LabelSet,
    opts: FilterOptions,
) -> Option<RemovalReason> {
    if sample.image_refs.is_empty()
        || (opts.check_files && sample.image_refs.iter().any(|p| !p.exists()))
    {
        return Some(RemovalReason::MissingImage);
    }
    if !sample.has_text() {
        return Some(RemovalReason::MissingText);
    }
    match sample.labels.as_slice() {
        [] => Some(RemovalReason::NoLabel),
        [one] if !label_set.contains(one) => Some(RemovalReason::UnknownLabel),
        [_] => None,
        _ => Some(RemovalReason::MultipleDiseases),
    }
}

/// Keeps samples with at least one image, non-blank text and exactly one
/// known label. Order is preserved.
pub fn filter_complete(manifest: &DatasetManifest) -> (DatasetManifest, FilterReport) {
    filter_complete_with(manifest, FilterOptions::default())
}

pub fn filter_complete_with(
    manifest: &DatasetManifest,
    opts: FilterOptions,
) -> (DatasetManifest, FilterReport) {
    let mut report = FilterReport::default();
    let samples: Vec<Sample> = manifest
        .samples
        .iter()
        .filter(|s| match removal_reason(s, &manifest.label_set, opts) {
            Some(reason) => {
                *report.removed.entry(reason).or_default() += 1;
                false
            }
            None => true,
        })
        .cloned()
        .collect();
    report.kept = samples.len();
    (
        DatasetManifest {
            name: manifest.name.clone(),
            label_set: manifest.label_set.clone(),
            samples,
        },
        report,
    )
}

/// Per-label sample counts, in label-set order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassHistogram {
    pub counts: Vec<(String, usize)>,
}

impl ClassHistogram {
    pub fn get(&self, label: &str) -> Option<usize> {
        self.counts
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, c)| *c)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|(_, c)| c).sum()
    }
}

impl fmt::Display for ClassHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .counts
            .iter()
            .map(|(l, _)| l.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(f, "{:<width$}  Number of Samples", "Class")?;
        for (label, count) in &self.counts {
            writeln!(f, "{label:<width$}  {count}")?;
        }
        Ok(())
    }
}

pub fn class_histogram(manifest: &DatasetManifest) -> ClassHistogram {
    let mut counts: Vec<(String, usize)> = manifest
        .label_set
        .iter()
        .map(|l| (l.to_owned(), 0))
        .collect();
    for sample in &manifest.samples {
        if let Some(idx) = sample.label().and_then(|l| manifest.label_set.index_of(l)) {
            counts[idx].1 += 1;
        }
    }
    ClassHistogram { counts }
}
