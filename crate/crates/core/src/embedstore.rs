//! Embedding interchange files and the in-memory store served to the
//! retriever.
//!
//! The interchange format is JSON Lines, one record per sample:
//!
//! ```json
//! {"sample_id":"p1","encoder":"resnet18","modality":"image","dim":3,"vector":[0.6,0.8,0.0]}
//! ```
//!
//! All records in a file share encoder, modality and dim. Vectors are
//! written with 9 significant digits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DatasetManifest;
use crate::num::Scalar;

/// Norms within this distance of 1 count as already normalized.
pub const NORM_TOLERANCE: f64 = 1e-6;
/// Vectors with a smaller norm cannot be normalized.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed embedding record: {message}")]
    Parse { line: usize, message: String },
    #[error("degenerate (zero) vector{}", .sample_id.as_ref().map(|id| format!(" for sample {id:?}")).unwrap_or_default())]
    Degenerate { sample_id: Option<String> },
    #[error("sample {sample_id:?}: declared dim {declared} but vector has {actual} components")]
    LengthMismatch {
        sample_id: String,
        declared: usize,
        actual: usize,
    },
    #[error("sample {sample_id:?}: dimension {found} differs from store dimension {expected}")]
    DimMismatch {
        sample_id: String,
        expected: usize,
        found: usize,
    },
    #[error("sample {sample_id:?}: encoder {found:?} differs from {expected:?}")]
    EncoderMismatch {
        sample_id: String,
        expected: String,
        found: String,
    },
    #[error("sample {sample_id:?}: modality {found} differs from {expected}")]
    ModalityMismatch {
        sample_id: String,
        expected: Modality,
        found: Modality,
    },
    #[error("sample {sample_id:?}: non-finite vector component")]
    NonFinite { sample_id: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("embedding file contains no records")]
    Empty,
    #[error("dimension must be positive")]
    ZeroDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

/// One line of the interchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord<T> {
    pub sample_id: String,
    #[serde(rename = "encoder")]
    pub encoder_id: String,
    pub modality: Modality,
    pub dim: usize,
    pub vector: Vec<T>,
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// Scales `v` onto the unit sphere.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>, StoreError> {
    let norm = l2_norm(v);
    if v.is_empty()
        || norm
            .to_f64()
            .is_none_or(|n| n.is_nan() || n < DEGENERATE_NORM)
    {
        return Err(StoreError::Degenerate { sample_id: None });
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

fn is_unit<T: Scalar>(v: &[T]) -> bool {
    l2_norm(v)
        .to_f64()
        .is_some_and(|n| (n - 1.0).abs() <= NORM_TOLERANCE)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LoadMode {
    /// Normalize every vector to unit length.
    #[default]
    Normalize,
    /// Keep vectors exactly as stored.
    Raw,
}

/// Vectors for one encoder and modality, keyed by sample id.
///
/// Rows are kept contiguous and sorted by ascending sample id, so row order is
/// also the retrieval tie-break order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore<T> {
    encoder_id: String,
    modality: Modality,
    dim: usize,
    ids: Vec<String>,
    data: Vec<T>,
    index: HashMap<String, usize>,
    normalized: bool,
    renormalized: bool,
}

impl<T: Scalar> EmbeddingStore<T> {
    /// Builds a store; records must agree on encoder, modality and dim.
    pub fn from_records(
        records: impl IntoIterator<Item = EmbeddingRecord<T>>,
        mode: LoadMode,
    ) -> Result<Self, StoreError> {
        let mut rows: BTreeMap<String, Vec<T>> = BTreeMap::new();
        let mut header: Option<(String, Modality, usize)> = None;
        for rec in records {
            check_record(&rec)?;
            match &header {
                None => header = Some((rec.encoder_id.clone(), rec.modality, rec.dim)),
                Some((encoder, modality, dim)) => {
                    if rec.dim != *dim {
                        return Err(StoreError::DimMismatch {
                            sample_id: rec.sample_id,
                            expected: *dim,
                            found: rec.dim,
                        });
                    }
                    if &rec.encoder_id != encoder {
                        return Err(StoreError::EncoderMismatch {
                            sample_id: rec.sample_id,
                            expected: encoder.clone(),
                            found: rec.encoder_id,
                        });
                    }
                    if rec.modality != *modality {
                        return Err(StoreError::ModalityMismatch {
                            sample_id: rec.sample_id,
                            expected: *modality,
                            found: rec.modality,
                        });
                    }
                }
            }
            if rows.contains_key(&rec.sample_id) {
                return Err(StoreError::DuplicateId(rec.sample_id));
            }
            rows.insert(rec.sample_id, rec.vector);
        }
        let (encoder_id, modality, dim) = header.ok_or(StoreError::Empty)?;

        let all_unit = rows.values().all(|v| is_unit(v));
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, v) in rows {
            match mode {
                LoadMode::Raw => data.extend_from_slice(&v),
                LoadMode::Normalize => {
                    let unit = l2_normalize(&v).map_err(|_| StoreError::Degenerate {
                        sample_id: Some(id.clone()),
                    })?;
                    data.extend(unit);
                }
            }
            ids.push(id);
        }
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            encoder_id,
            modality,
            dim,
            ids,
            data,
            index,
            normalized: mode == LoadMode::Normalize || all_unit,
            renormalized: mode == LoadMode::Normalize && !all_unit,
        })
    }

    /// Parses interchange JSON Lines. Blank lines are ignored.
    pub fn from_jsonl(
        text: &str,
        expected_encoder: Option<&str>,
        mode: LoadMode,
    ) -> Result<Self, StoreError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord<f64> =
                serde_json::from_str(line).map_err(|e| StoreError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if let Some(expected) = expected_encoder {
                if rec.encoder_id != expected {
                    return Err(StoreError::EncoderMismatch {
                        sample_id: rec.sample_id,
                        expected: expected.to_owned(),
                        found: rec.encoder_id,
                    });
                }
            }
            let vector = rec
                .vector
                .iter()
                .map(|&x| T::from_f64(x).filter(|v| v.is_finite()))
                .collect::<Option<Vec<T>>>()
                .ok_or_else(|| StoreError::NonFinite {
                    sample_id: rec.sample_id.clone(),
                })?;
            records.push(EmbeddingRecord {
                sample_id: rec.sample_id,
                encoder_id: rec.encoder_id,
                modality: rec.modality,
                dim: rec.dim,
                vector,
            });
        }
        Self::from_records(records, mode)
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Whether every vector is unit-norm within [`NORM_TOLERANCE`].
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Whether loading had to rescale vectors that were not unit-norm.
    pub fn was_renormalized(&self) -> bool {
        self.renormalized
    }

    /// Sample ids in ascending order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[T]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim))
    }

    /// A store restricted to the given ids (unknown ids are ignored).
    pub fn subset<'a>(&self, keep: impl IntoIterator<Item = &'a str>) -> Self {
        let keep: BTreeSet<&str> = keep.into_iter().filter(|id| self.contains(id)).collect();
        let mut ids = Vec::with_capacity(keep.len());
        let mut data = Vec::with_capacity(keep.len() * self.dim);
        for id in keep {
            data.extend_from_slice(self.get(id).expect("checked above"));
            ids.push(id.to_owned());
        }
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self {
            encoder_id: self.encoder_id.clone(),
            modality: self.modality,
            dim: self.dim,
            ids,
            data,
            index,
            normalized: self.normalized,
            renormalized: self.renormalized,
        }
    }

    pub fn records(&self) -> impl Iterator<Item = EmbeddingRecord<T>> + '_ {
        self.iter().map(|(id, v)| EmbeddingRecord {
            sample_id: id.to_owned(),
            encoder_id: self.encoder_id.clone(),
            modality: self.modality,
            dim: self.dim,
            vector: v.to_vec(),
        })
    }

    /// Serializes to interchange JSON Lines at 9 significant digits.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, v) in self.iter() {
            let rec = EmbeddingRecord {
                sample_id: id.to_owned(),
                encoder_id: self.encoder_id.clone(),
                modality: self.modality,
                dim: self.dim,
                vector: v
                    .iter()
                    .map(|x| round_significant(x.to_f64().unwrap_or(f64::NAN)))
                    .collect::<Vec<f64>>(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        let io_err = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(self.to_jsonl().as_bytes()).map_err(io_err)
    }
}

fn check_record<T: Scalar>(rec: &EmbeddingRecord<T>) -> Result<(), StoreError> {
    if rec.dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    if rec.vector.len() != rec.dim {
        return Err(StoreError::LengthMismatch {
            sample_id: rec.sample_id.clone(),
            declared: rec.dim,
            actual: rec.vector.len(),
        });
    }
    if rec.vector.iter().any(|x| !x.is_finite()) {
        return Err(StoreError::NonFinite {
            sample_id: rec.sample_id.clone(),
        });
    }
    Ok(())
}

/// Rounds to 9 significant decimal digits.
fn round_significant(x: f64) -> f64 {
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Reads an interchange file. `expected_encoder`, when given, must match
/// every record.
pub fn load_store<T: Scalar>(
    path: impl AsRef<Path>,
    expected_encoder: Option<&str>,
    mode: LoadMode,
) -> Result<EmbeddingStore<T>, StoreError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    EmbeddingStore::from_jsonl(&text, expected_encoder, mode)
}

/// How well a store covers a manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub manifest_size: usize,
    pub covered: usize,
    /// Manifest ids with no vector, in manifest order.
    pub missing_from_store: Vec<String>,
    /// Store ids that are not in the manifest, ascending.
    pub extra_in_store: Vec<String>,
}

impl CoverageReport {
    /// `covered / manifest_size`; 1.0 for an empty manifest.
    pub fn coverage(&self) -> f64 {
        if self.manifest_size == 0 {
            1.0
        } else {
            self.covered as f64 / self.manifest_size as f64
        }
    }

    pub fn is_complete(&self) -> bool {
        self.missing_from_store.is_empty()
    }
}

pub fn validate_against<T: Scalar>(
    store: &EmbeddingStore<T>,
    manifest: &DatasetManifest,
) -> CoverageReport {
    let missing: Vec<String> = manifest
        .samples
        .iter()
        .filter(|s| !store.contains(&s.id))
        .map(|s| s.id.clone())
        .collect();
    let in_manifest: BTreeSet<&str> = manifest.samples.iter().map(|s| s.id.as_str()).collect();
    let extra = store
        .ids()
        .iter()
        .filter(|id| !in_manifest.contains(id.as_str()))
        .cloned()
        .collect();
    CoverageReport {
        manifest_size: manifest.len(),
        covered: manifest.len() - missing.len(),
        missing_from_store: missing,
        extra_in_store: extra,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelSet, Sample};
    use proptest::prelude::*;

    fn rec(id: &str, encoder: &str, vector: Vec<f64>) -> EmbeddingRecord<f64> {
        EmbeddingRecord {
            sample_id: id.into(),
            encoder_id: encoder.into(),
            modality: Modality::Image,
            dim: vector.len(),
            vector,
        }
    }

    #[test]
    fn normalize_3_4() {
        let u = l2_normalize(&[3.0_f64, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_zero_is_degenerate() {
        assert!(matches!(
            l2_normalize(&[0.0_f64, 0.0, 0.0]),
            Err(StoreError::Degenerate { sample_id: None })
        ));
        let err =
            EmbeddingStore::from_records(vec![rec("z", "e", vec![0.0, 0.0])], LoadMode::Normalize)
                .unwrap_err();
        assert!(err.to_string().contains("\"z\""), "{err}");
    }

    #[test]
    fn loads_512_dim_resnet18() {
        let mut text = String::new();
        for i in 0..10 {
            let v: Vec<f64> = (0..512)
                .map(|j| ((i * 512 + j) as f64 * 0.37).sin())
                .collect();
            text.push_str(&serde_json::to_string(&rec(&format!("s{i}"), "resnet18", v)).unwrap());
            text.push('\n');
        }
        let store: EmbeddingStore<f64> =
            EmbeddingStore::from_jsonl(&text, Some("resnet18"), LoadMode::Normalize).unwrap();
        assert_eq!(store.len(), 10);
        assert_eq!(store.dim(), 512);
        assert!(store.is_normalized() && store.was_renormalized());
        for (_, v) in store.iter() {
            assert!((l2_norm(v) - 1.0).abs() <= 1e-6);
        }
        assert!(matches!(
            EmbeddingStore::<f64>::from_jsonl(&text, Some("biobert"), LoadMode::Normalize),
            Err(StoreError::EncoderMismatch { .. })
        ));
    }

    #[test]
    fn mixed_dims_rejected() {
        let recs = vec![rec("a", "e", vec![1.0; 512]), rec("b", "e", vec![1.0; 768])];
        assert!(matches!(
            EmbeddingStore::from_records(recs, LoadMode::Normalize),
            Err(StoreError::DimMismatch {
                expected: 512,
                found: 768,
                ..
            })
        ));
    }

    #[test]
    fn structural_errors() {
        let dup = vec![rec("a", "e", vec![1.0]), rec("a", "e", vec![2.0])];
        assert!(matches!(
            EmbeddingStore::from_records(dup, LoadMode::Normalize),
            Err(StoreError::DuplicateId(id)) if id == "a"
        ));
        let mut bad = rec("a", "e", vec![1.0, 2.0]);
        bad.dim = 3;
        assert!(matches!(
            EmbeddingStore::from_records(vec![bad], LoadMode::Normalize),
            Err(StoreError::LengthMismatch { .. })
        ));
        let mixed = vec![rec("a", "e", vec![1.0]), rec("b", "f", vec![1.0])];
        assert!(matches!(
            EmbeddingStore::from_records(mixed, LoadMode::Normalize),
            Err(StoreError::EncoderMismatch { .. })
        ));
        assert!(matches!(
            EmbeddingStore::<f64>::from_jsonl("{\"sample_id\":1}\n", None, LoadMode::Normalize),
            Err(StoreError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            EmbeddingStore::<f64>::from_jsonl("\n", None, LoadMode::Normalize),
            Err(StoreError::Empty)
        ));
    }

    #[test]
    fn raw_mode_keeps_vectors() {
        let store =
            EmbeddingStore::from_records(vec![rec("a", "e", vec![3.0, 4.0])], LoadMode::Raw)
                .unwrap();
        assert_eq!(store.get("a").unwrap(), &[3.0, 4.0]);
        assert!(!store.is_normalized());
        let unit = EmbeddingStore::from_records(vec![rec("a", "e", vec![0.6, 0.8])], LoadMode::Raw)
            .unwrap();
        assert!(unit.is_normalized() && !unit.was_renormalized());
    }

    #[test]
    fn f32_store() {
        let recs = vec![EmbeddingRecord {
            sample_id: "a".to_string(),
            encoder_id: "e".to_string(),
            modality: Modality::Text,
            dim: 2,
            vector: vec![3.0_f32, 4.0],
        }];
        let store = EmbeddingStore::from_records(recs, LoadMode::Normalize).unwrap();
        assert!((store.get("a").unwrap()[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn coverage() {
        let samples = (0..10)
            .map(|i| Sample {
                id: format!("s{i}"),
                image_refs: vec![],
                text: "t".into(),
                labels: vec!["A".into()],
            })
            .collect();
        let manifest = DatasetManifest {
            name: "m".into(),
            label_set: LabelSet::new(["A"]).unwrap(),
            samples,
        };
        let full: Vec<_> = (0..10)
            .map(|i| rec(&format!("s{i}"), "e", vec![1.0, 0.0]))
            .collect();
        let store = EmbeddingStore::from_records(full.clone(), LoadMode::Normalize).unwrap();
        let r = validate_against(&store, &manifest);
        assert_eq!(r.coverage(), 1.0);
        assert!(r.missing_from_store.is_empty() && r.extra_in_store.is_empty());

        let partial =
            EmbeddingStore::from_records(full[2..].to_vec(), LoadMode::Normalize).unwrap();
        let r = validate_against(&partial, &manifest);
        assert!((r.coverage() - 0.8).abs() < 1e-15);
        assert_eq!(r.missing_from_store, ["s0", "s1"]);

        let mut extra = full.clone();
        extra.push(rec("zz", "e", vec![0.0, 1.0]));
        let r = validate_against(
            &EmbeddingStore::from_records(extra, LoadMode::Normalize).unwrap(),
            &manifest,
        );
        assert_eq!(r.coverage(), 1.0);
        assert_eq!(r.extra_in_store, ["zz"]);
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        (1usize..32).prop_flat_map(|d| prop::collection::vec(-100.0..100.0f64, d))
    }

    proptest! {
        #[test]
        fn normalized_has_unit_norm(v in vec_strategy()) {
            prop_assume!(l2_norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            prop_assert!((l2_norm(&u) - 1.0).abs() <= 1e-9);
            let again = l2_normalize(&u).unwrap();
            for (a, b) in u.iter().zip(&again) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn normalize_scale_invariant(v in vec_strategy(), c in 1e-3..1e3f64) {
            prop_assume!(l2_norm(&v) > 1e-6);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let a = l2_normalize(&v).unwrap();
            let b = l2_normalize(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn serialization_round_trip(rows in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 6), 1..20)) {
            prop_assume!(rows.iter().all(|r| l2_norm(r) > 1e-3));
            let recs = rows.into_iter().enumerate().map(|(i, v)| rec(&format!("id{i:03}"), "enc", v));
            let store = EmbeddingStore::from_records(recs, LoadMode::Normalize).unwrap();
            let reloaded = EmbeddingStore::<f64>::from_jsonl(&store.to_jsonl(), Some("enc"), LoadMode::Normalize).unwrap();
            prop_assert_eq!(store.ids(), reloaded.ids());
            for ((_, a), (_, b)) in store.iter().zip(reloaded.iter()) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y).abs() <= 1e-7);
                }
                prop_assert!((l2_norm(b) - 1.0).abs() <= 1e-6);
            }
        }
    }
}
