use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{write_embedding_file, Dataset, DatasetManifest, EmbeddingRecord, Split, SplitTag, StoreError};

pub const SYNTHETIC_FILE: &str = "synthetic.ocle";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Parameters of the isotropic Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// Per-coordinate standard deviation around each class center.
    pub cluster_spread: f64,
    /// Norm of every class center.
    pub mean_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 100 classes, 16 dimensions, 50 train / 20 test per class, spread 0.05,
    /// unit-norm centers, seed 7.
    pub fn standard() -> Self {
        Self {
            num_classes: 100,
            dim: 16,
            per_class_train: 50,
            per_class_test: 20,
            cluster_spread: 0.05,
            mean_scale: 1.0,
            seed: 7,
        }
    }

    fn validate(&self) -> Result<(), StoreError> {
        let bad = |what: &str| Err(StoreError::InvalidParameter(what.to_string()));
        if self.num_classes == 0 || self.dim == 0 || self.per_class_train == 0 || self.per_class_test == 0 {
            return bad("class count, dimension and per-class counts must be positive");
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return bad("cluster spread must be finite and non-negative");
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return bad("mean scale must be finite and positive");
        }
        if self.num_classes > i32::MAX as usize {
            return bad("too many classes");
        }
        Ok(())
    }

    /// Draws the dataset in memory. Records are laid out class by class,
    /// each class's train records followed by its test records.
    pub fn generate(&self) -> Result<SyntheticDataset, StoreError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let centers: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| {
                let mut c: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                c.iter_mut().for_each(|v| *v *= self.mean_scale / norm);
                c
            })
            .collect();

        let per_class = self.per_class_train + self.per_class_test;
        let mut records = Vec::with_capacity(self.num_classes * per_class);
        let mut split = Vec::with_capacity(self.num_classes * per_class);
        for (label, center) in centers.iter().enumerate() {
            for j in 0..per_class {
                let vector = center
                    .iter()
                    .map(|&m| {
                        let z: f64 = rng.sample(StandardNormal);
                        (m + self.cluster_spread * z) as f32
                    })
                    .collect();
                records.push(EmbeddingRecord { vector, label: label as u32 });
                split.push(if j < self.per_class_train { SplitTag::Train } else { SplitTag::Test });
            }
        }
        Ok(SyntheticDataset { spec: self.clone(), centers, records, split })
    }
}

/// Output of the generator, including the true class centers.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub centers: Vec<Vec<f64>>,
    pub records: Vec<EmbeddingRecord>,
    pub split: Vec<SplitTag>,
}

impl SyntheticDataset {
    pub fn manifest(&self) -> DatasetManifest {
        let mut extra = serde_json::Map::new();
        extra.insert("generator".into(), serde_json::to_value(&self.spec).expect("spec serializes"));
        DatasetManifest {
            file: SYNTHETIC_FILE.into(),
            dim: self.spec.dim,
            num_classes: self.spec.num_classes,
            num_records: self.records.len() as u64,
            split: Split::PerClass {
                train: self.spec.per_class_train as u64,
                test: self.spec.per_class_test as u64,
            },
            class_names: None,
            extra,
        }
    }

    pub fn into_dataset(self) -> Dataset {
        Dataset { manifest: self.manifest(), records: self.records, split: self.split }
    }
}

/// Generates a dataset and writes `synthetic.ocle` and `manifest.json` into
/// `out_dir`. Returns the manifest and the manifest's path.
pub fn generate_synthetic_tasks(
    spec: &SyntheticSpec,
    out_dir: impl AsRef<Path>,
) -> Result<(DatasetManifest, PathBuf), StoreError> {
    let out_dir = out_dir.as_ref();
    let data = spec.generate()?;
    fs::create_dir_all(out_dir)?;
    write_embedding_file(&data.records, out_dir.join(SYNTHETIC_FILE))?;
    let manifest = data.manifest();
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    Ok((manifest, manifest_path))
}
