use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_embedding_stream, EmbeddingRecord, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// Train/test assignment, either one tag per record or uniform per-class
/// counts (the first `train` records of each class in file order are train,
/// the next `test` are test).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Split {
    PerRecord(Vec<SplitTag>),
    PerClass { train: u64, test: u64 },
}

/// JSON description of an embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Embedding file, relative to the manifest's directory unless absolute.
    pub file: PathBuf,
    pub dim: usize,
    pub num_classes: usize,
    pub num_records: u64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    /// Producer metadata (backbone hash, class mapping, ...) carried through untouched.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl DatasetManifest {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Embedding file path resolved against the manifest's directory.
    pub fn resolve_file(&self, manifest_dir: &Path) -> PathBuf {
        if self.file.is_absolute() {
            self.file.clone()
        } else {
            manifest_dir.join(&self.file)
        }
    }

    /// Streams the embedding file once, checking every declared count, and
    /// hands each record with its split tag to `sink`.
    pub fn scan(
        &self,
        manifest_dir: &Path,
        mut sink: impl FnMut(EmbeddingRecord, SplitTag),
    ) -> Result<(), StoreError> {
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(StoreError::ManifestMismatch(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.num_classes
                )));
            }
        }
        let reader = read_embedding_stream(self.resolve_file(manifest_dir))?;
        if reader.dim() != self.dim {
            return Err(StoreError::ManifestMismatch(format!(
                "manifest dim {} but file dim {}",
                self.dim,
                reader.dim()
            )));
        }
        if reader.len() != self.num_records {
            return Err(StoreError::ManifestMismatch(format!(
                "manifest declares {} records but file holds {}",
                self.num_records,
                reader.len()
            )));
        }
        if let Split::PerRecord(tags) = &self.split {
            if tags.len() as u64 != self.num_records {
                return Err(StoreError::ManifestMismatch(format!(
                    "split has {} entries for {} records",
                    tags.len(),
                    self.num_records
                )));
            }
        }

        let mut per_class = vec![0u64; self.num_classes];
        for (i, rec) in reader.enumerate() {
            let rec = rec?;
            let label = rec.label as usize;
            if label >= self.num_classes {
                return Err(StoreError::LabelOutOfRange {
                    record: i as u64,
                    label: rec.label,
                    num_classes: self.num_classes,
                });
            }
            let seen = per_class[label];
            per_class[label] += 1;
            let tag = match &self.split {
                Split::PerRecord(tags) => tags[i],
                Split::PerClass { train, test } => {
                    if seen < *train {
                        SplitTag::Train
                    } else if seen < train + test {
                        SplitTag::Test
                    } else {
                        return Err(StoreError::ManifestMismatch(format!(
                            "class {label} has more than {} records",
                            train + test
                        )));
                    }
                }
            };
            sink(rec, tag);
        }
        if let Split::PerClass { train, test } = &self.split {
            if let Some((c, n)) = per_class.iter().enumerate().find(|(_, n)| **n != train + test) {
                return Err(StoreError::ManifestMismatch(format!(
                    "class {c} has {n} records, expected {}",
                    train + test
                )));
            }
        }
        Ok(())
    }
}

/// A manifest together with its records, held by the benchmark driver.
/// Learners only ever see these through single-pass streams.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<EmbeddingRecord>,
    pub split: Vec<SplitTag>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::from_path(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        Self::load_with(manifest, dir)
    }

    pub fn load_with(manifest: DatasetManifest, manifest_dir: &Path) -> Result<Self, StoreError> {
        let mut records = Vec::with_capacity(manifest.num_records as usize);
        let mut split = Vec::with_capacity(manifest.num_records as usize);
        manifest.scan(manifest_dir, |r, t| {
            records.push(r);
            split.push(t);
        })?;
        Ok(Self { manifest, records, split })
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.records.iter().map(|r| r.label)
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::write_embedding_file;

    fn fixture(dir: &Path, split: Split) -> DatasetManifest {
        let records: Vec<_> = (0..6).map(|i| EmbeddingRecord::new(vec![i as f32], (i % 2) as u32)).collect();
        write_embedding_file(&records, dir.join("d.ocle")).unwrap();
        DatasetManifest {
            file: "d.ocle".into(),
            dim: 1,
            num_classes: 2,
            num_records: 6,
            split,
            class_names: None,
            extra: Default::default(),
        }
    }

    #[test]
    fn per_class_split_assigns_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), Split::PerClass { train: 2, test: 1 });
        m.write(dir.path().join("m.json")).unwrap();
        let ds = Dataset::load(dir.path().join("m.json")).unwrap();
        use SplitTag::*;
        assert_eq!(ds.split, vec![Train, Train, Train, Train, Test, Test]);
    }

    #[test]
    fn split_json_shapes() {
        let per_record: Split = serde_json::from_str(r#"["train","test"]"#).unwrap();
        assert_eq!(per_record, Split::PerRecord(vec![SplitTag::Train, SplitTag::Test]));
        let per_class: Split = serde_json::from_str(r#"{"train":5,"test":2}"#).unwrap();
        assert_eq!(per_class, Split::PerClass { train: 5, test: 2 });
    }

    #[test]
    fn declared_counts_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = fixture(dir.path(), Split::PerClass { train: 2, test: 2 });
        assert!(matches!(m.scan(dir.path(), |_, _| {}), Err(StoreError::ManifestMismatch(_))));
        m.split = Split::PerClass { train: 2, test: 1 };
        m.num_records = 7;
        assert!(matches!(m.scan(dir.path(), |_, _| {}), Err(StoreError::ManifestMismatch(_))));
        m.num_records = 6;
        m.num_classes = 1;
        assert!(matches!(m.scan(dir.path(), |_, _| {}), Err(StoreError::LabelOutOfRange { .. })));
        m.num_classes = 2;
        m.split = Split::PerRecord(vec![SplitTag::Train; 5]);
        assert!(matches!(m.scan(dir.path(), |_, _| {}), Err(StoreError::ManifestMismatch(_))));
    }

    #[test]
    fn unknown_keys_are_preserved() {
        let text = r#"{"file":"x","dim":2,"num_classes":3,"num_records":0,"split":[],"backbone_sha256":"ab"}"#;
        let m: DatasetManifest = serde_json::from_str(text).unwrap();
        assert_eq!(m.extra["backbone_sha256"], "ab");
        let again = serde_json::to_string(&m).unwrap();
        assert!(again.contains("backbone_sha256"));
    }
}
