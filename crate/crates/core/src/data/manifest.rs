use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::{read_feature_file, FeatureDims, FeatureRecord, LabelScale};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Where a record stands in the explanation pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplanationState {
    /// Explanation tensors are already inside the TXF1 file.
    #[default]
    Embedded,
    Missing,
    Raw,
    Refined,
    PendingEmbedding,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub explanations: ExplanationState,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub explanation_trail: Vec<ExplanationState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation_error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scale: LabelScale,
    pub dims: FeatureDims,
    pub splits: Splits,
    pub records: Vec<RecordEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn entry(&self, id: &str) -> Option<&RecordEntry> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn resolve(&self, entry: &RecordEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Structural checks that need no file access.
    pub fn validate_structure(&self) -> Result<()> {
        let s = &self.splits;
        if s.train.is_empty() && s.val.is_empty() && s.test.is_empty() {
            return Err(Error::Data("manifest has no split assignments".into()));
        }
        let mut known = HashSet::new();
        for r in &self.records {
            if !known.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate record id `{}`", r.id)));
            }
        }
        let mut seen = HashSet::new();
        for id in s.train.iter().chain(&s.val).chain(&s.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("record `{id}` appears in more than one split slot")));
            }
            if !known.contains(id.as_str()) {
                return Err(Error::MissingRecord {
                    id: id.clone(),
                    reason: "listed in a split but has no record entry".into(),
                });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        for r in &self.records {
            let p = self.resolve(r);
            if !p.is_file() {
                return Err(Error::MissingRecord {
                    id: r.id.clone(),
                    reason: format!("file {} does not exist", p.display()),
                });
            }
        }
        Ok(())
    }

    pub fn load_record(&self, id: &str) -> Result<FeatureRecord> {
        let entry = self.entry(id).ok_or_else(|| Error::MissingRecord {
            id: id.to_string(),
            reason: "not in manifest".into(),
        })?;
        let path = self.resolve(entry);
        let buf = fs::read(&path).map_err(|e| Error::MissingRecord {
            id: id.to_string(),
            reason: format!("{}: {e}", path.display()),
        })?;
        let rec = FeatureRecord::from_bytes_checked(&buf, &self.dims)?;
        if rec.label_scale != self.scale {
            return Err(Error::Data(format!(
                "record `{id}` uses scale {:?}, manifest declares {:?}",
                rec.label_scale, self.scale
            )));
        }
        if rec.id != id {
            return Err(Error::Data(format!("file for `{id}` holds record `{}`", rec.id)));
        }
        Ok(rec)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<FeatureRecord>> {
        self.splits.get(split).iter().map(|id| self.load_record(id)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(Error::at_path(path))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(Error::at_path(path))?;
    let mut m: Manifest = serde_json::from_str(&text)?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate()?;
    Ok(m)
}

/// Reads a single record without a manifest.
pub fn load_record_file(path: impl AsRef<Path>) -> Result<FeatureRecord> {
    read_feature_file(path)
}
