//! Synthetic labeled datasets with class-structured embeddings.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::RunError;
use crate::corpus::{DatasetManifest, LabelSet, Sample};
use crate::embedstore::{l2_normalize, EmbeddingRecord, LoadMode, Modality};
use crate::Store;

/// A 1x1 mid-gray PNG used as the placeholder image of every synthetic case.
pub const PLACEHOLDER_PNG: [u8; 69] = [
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52,
    0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x02, 0x00, 0x00, 0x00, 0x90, 0x77, 0x53,
    0xde, 0x00, 0x00, 0x00, 0x0c, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0x68, 0x68, 0x68, 0x00,
    0x00, 0x03, 0x04, 0x01, 0x81, 0x4b, 0xd3, 0xd2, 0x10, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e,
    0x44, 0xae, 0x42, 0x60, 0x82,
];

pub const SYNTH_ENCODER: &str = "synthetic";

pub fn class_label(c: usize) -> String {
    format!("class_{c}")
}

/// Builds `n_classes * per_class` samples. Class `c` is centred on the `c`-th
/// standard basis vector; each vector is `normalize(center + N(0, sigma^2 I))`.
/// Sample `i` belongs to class `i % n_classes`. Deterministic in `seed`.
pub fn generate_synthetic(
    n_classes: usize,
    per_class: usize,
    dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(DatasetManifest, Store), RunError> {
    if n_classes == 0 || n_classes > dim {
        return Err(RunError::Config(format!(
            "need 1 <= classes <= dim, got {n_classes} classes in dim {dim}"
        )));
    }
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(RunError::Config(
            "noise sigma must be finite and >= 0".into(),
        ));
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| RunError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n = n_classes * per_class;
    let mut samples = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % n_classes;
        let id = format!("s{i:05}");
        let mut v = vec![0.0_f64; dim];
        v[class] = 1.0;
        if noise_sigma > 0.0 {
            for x in v.iter_mut() {
                *x += normal.sample(&mut rng);
            }
        }
        let v = l2_normalize(&v)
            .map_err(|_| RunError::Config(format!("degenerate synthetic vector for {id}")))?;
        samples.push(Sample {
            image_refs: vec![PathBuf::from(format!("images/{id}.png"))],
            text: format!("Synthetic findings for case {id}."),
            labels: vec![class_label(class)],
            id: id.clone(),
        });
        records.push(EmbeddingRecord {
            sample_id: id,
            encoder_id: SYNTH_ENCODER.into(),
            modality: Modality::Text,
            dim,
            vector: v,
        });
    }
    let label_set = LabelSet::new((0..n_classes).map(class_label))?;
    let manifest = DatasetManifest {
        name: format!("synthetic-c{n_classes}-n{per_class}-d{dim}-s{seed}"),
        label_set,
        samples,
    };
    let store = Store::from_records(records, LoadMode::Normalize)?;
    Ok((manifest, store))
}

#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub manifest: PathBuf,
    pub embeddings: PathBuf,
}

/// Writes `manifest.json`, `embeddings.jsonl` and placeholder images under
/// `dir`. Image refs must be relative to `dir`.
pub fn write_synthetic(
    dir: &Path,
    manifest: &DatasetManifest,
    store: &Store,
) -> Result<SynthPaths, RunError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| RunError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for sample in &manifest.samples {
        for img in &sample.image_refs {
            let path = dir.join(img);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io(parent))?;
            }
            fs::write(&path, PLACEHOLDER_PNG).map_err(io(&path))?;
        }
    }
    let paths = SynthPaths {
        manifest: dir.join("manifest.json"),
        embeddings: dir.join("embeddings.jsonl"),
    };
    fs::write(&paths.manifest, manifest.to_json(dir)).map_err(io(&paths.manifest))?;
    store.write_jsonl(&paths.embeddings)?;
    Ok(paths)
}
