//! On-disk model catalogue.
//!
//! ```text
//! <dir>/
//!   manifest.json            version, schema, fingerprint, entry index, CRC32 per file
//!   encoder.json             categorical encoder state
//!   groupby_catalogue.json   cached DISTINCT tuples per GROUP-BY key
//!   drift.json               training answer samples and workload moments (optional)
//!   models/<nnn>-<slug>.json one file per aggregate: point, interval, ensemble
//! ```
//!
//! `save` writes a sibling temporary directory and renames it into place.
//! `load` verifies every checksum before parsing anything.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterEnsemble;
use crate::drift::{AnswerEcdf, WorkloadStats};
use crate::gbdt::GbdtModel;
use crate::quantile::IntervalModel;
use crate::schema::DatasetSchema;
use crate::vectorize::{CategoricalEncoder, GroupByCatalogue};

pub const CATALOGUE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const ENCODER_FILE: &str = "encoder.json";
pub const GROUPBY_FILE: &str = "groupby_catalogue.json";
pub const DRIFT_FILE: &str = "drift.json";
pub const MODELS_DIR: &str = "models";

#[derive(Debug, Error)]
pub enum CatalogueError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("no manifest.json in {0}")]
    MissingManifest(PathBuf),
    #[error("catalogue format {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("catalogue file `{0}` is corrupt or does not match its checksum")]
    CorruptEntry(String),
    #[error("schema fingerprint mismatch")]
    FingerprintMismatch,
    #[error("entry `{entry}` expects width {got}, encoder width is {expected}")]
    WidthMismatch { entry: String, expected: usize, got: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Models for one aggregate function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogueEntry {
    pub point: GbdtModel<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<IntervalModel<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<ClusterEnsemble<f64>>,
}

impl CatalogueEntry {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.point.feature_width];
        if let Some(iv) = &self.interval {
            w.push(iv.lo.feature_width);
            w.push(iv.hi.feature_width);
        }
        if let Some(e) = &self.ensemble {
            w.push(e.clusters.width());
            w.extend(e.local_models.iter().map(|m| m.feature_width));
        }
        w
    }
}

/// Reference distributions for the drift monitors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSnapshot {
    /// Training answers per `AF(attr)` key.
    pub answers: BTreeMap<String, AnswerEcdf<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadStats<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCatalogue {
    pub schema: DatasetSchema,
    pub encoder: CategoricalEncoder,
    pub groupby: GroupByCatalogue,
    /// Keyed by `AF(attr)`, e.g. `SUM(a1)` or `COUNT(*)`.
    pub entries: BTreeMap<String, CatalogueEntry>,
    pub drift: Option<DriftSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: String,
    pub file: String,
    pub crc32: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub crc32: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub schema_fingerprint: String,
    pub schema: DatasetSchema,
    pub feature_width: usize,
    pub entries: Vec<ManifestEntry>,
    /// Checksums of the non-model files that exist.
    pub files: BTreeMap<String, FileChecksum>,
}

fn slug(key: &str) -> String {
    let mut s: String = key
        .chars()
        .map(|c| match c {
            '*' => 's',
            c if c.is_ascii_alphanumeric() => c.to_ascii_lowercase(),
            _ => '_',
        })
        .collect();
    while s.ends_with('_') {
        s.pop();
    }
    s
}

fn write_checked(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileChecksum, CatalogueError> {
    fs::write(dir.join(name), bytes)?;
    Ok(FileChecksum {
        crc32: crc32fast::hash(bytes),
        bytes: bytes.len() as u64,
    })
}

fn read_checked(dir: &Path, name: &str, sum: &FileChecksum) -> Result<Vec<u8>, CatalogueError> {
    let bytes = fs::read(dir.join(name)).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CatalogueError::CorruptEntry(name.to_string()),
        _ => CatalogueError::Io(e),
    })?;
    if bytes.len() as u64 != sum.bytes || crc32fast::hash(&bytes) != sum.crc32 {
        return Err(CatalogueError::CorruptEntry(name.to_string()));
    }
    Ok(bytes)
}

impl ModelCatalogue {
    pub fn new(schema: DatasetSchema, encoder: CategoricalEncoder) -> Self {
        ModelCatalogue {
            schema,
            encoder,
            groupby: GroupByCatalogue::default(),
            entries: BTreeMap::new(),
            drift: None,
        }
    }

    pub fn entry(&self, key: &str) -> Option<&CatalogueEntry> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn feature_width(&self) -> usize {
        self.encoder.width()
    }

    /// Every model's width equals the encoder's.
    pub fn check_widths(&self) -> Result<(), CatalogueError> {
        let expected = self.feature_width();
        for (key, e) in &self.entries {
            if let Some(&got) = e.widths().iter().find(|&&w| w != expected) {
                return Err(CatalogueError::WidthMismatch {
                    entry: key.clone(),
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    fn write_into(&self, dir: &Path) -> Result<Manifest, CatalogueError> {
        fs::create_dir_all(dir.join(MODELS_DIR))?;
        let mut files = BTreeMap::new();
        files.insert(
            ENCODER_FILE.to_string(),
            write_checked(dir, ENCODER_FILE, &serde_json::to_vec_pretty(&self.encoder)?)?,
        );
        files.insert(
            GROUPBY_FILE.to_string(),
            write_checked(dir, GROUPBY_FILE, &serde_json::to_vec_pretty(&self.groupby)?)?,
        );
        if let Some(drift) = &self.drift {
            files.insert(
                DRIFT_FILE.to_string(),
                write_checked(dir, DRIFT_FILE, &serde_json::to_vec(drift)?)?,
            );
        }
        let mut entries = Vec::with_capacity(self.entries.len());
        for (i, (key, entry)) in self.entries.iter().enumerate() {
            let file = format!("{MODELS_DIR}/{i:03}-{}.json", slug(key));
            let sum = write_checked(dir, &file, &serde_json::to_vec(entry)?)?;
            entries.push(ManifestEntry {
                key: key.clone(),
                file,
                crc32: sum.crc32,
                bytes: sum.bytes,
            });
        }
        let manifest = Manifest {
            format_version: CATALOGUE_FORMAT_VERSION,
            schema_fingerprint: self.schema.fingerprint(),
            schema: self.schema.clone(),
            feature_width: self.feature_width(),
            entries,
            files,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Writes the catalogue to `dir`, replacing any previous catalogue there.
    pub fn save(&self, dir: &Path) -> Result<Manifest, CatalogueError> {
        self.check_widths()?;
        let parent = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let name = dir
            .file_name()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "catalogue path has no file name"))?
            .to_string_lossy()
            .into_owned();
        let pid = std::process::id();
        let tmp = parent.join(format!(".{name}.tmp-{pid}"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        let manifest = match self.write_into(&tmp) {
            Ok(m) => m,
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                return Err(e);
            }
        };
        if dir.exists() {
            let old = parent.join(format!(".{name}.old-{pid}"));
            fs::rename(dir, &old)?;
            if let Err(e) = fs::rename(&tmp, dir) {
                let _ = fs::rename(&old, dir);
                return Err(e.into());
            }
            fs::remove_dir_all(&old)?;
        } else {
            fs::rename(&tmp, dir)?;
        }
        Ok(manifest)
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest, CatalogueError> {
        let bytes = match fs::read(dir.join(MANIFEST)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(CatalogueError::MissingManifest(dir.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_slice(&bytes).map_err(|_| CatalogueError::CorruptEntry(MANIFEST.into()))?;
        if v.format_version != CATALOGUE_FORMAT_VERSION {
            return Err(CatalogueError::VersionMismatch {
                found: v.format_version,
                expected: CATALOGUE_FORMAT_VERSION,
            });
        }
        serde_json::from_slice(&bytes).map_err(|_| CatalogueError::CorruptEntry(MANIFEST.into()))
    }

    pub fn load(dir: &Path) -> Result<Self, CatalogueError> {
        let manifest = Self::read_manifest(dir)?;
        if manifest.schema.fingerprint() != manifest.schema_fingerprint {
            return Err(CatalogueError::FingerprintMismatch);
        }
        let required = |name: &str| {
            manifest
                .files
                .get(name)
                .ok_or_else(|| CatalogueError::CorruptEntry(name.to_string()))
        };
        // verify everything before materializing anything
        let encoder_bytes = read_checked(dir, ENCODER_FILE, required(ENCODER_FILE)?)?;
        let groupby_bytes = read_checked(dir, GROUPBY_FILE, required(GROUPBY_FILE)?)?;
        let drift_bytes = match manifest.files.get(DRIFT_FILE) {
            Some(sum) => Some(read_checked(dir, DRIFT_FILE, sum)?),
            None => None,
        };
        let mut entry_bytes = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let sum = FileChecksum {
                crc32: e.crc32,
                bytes: e.bytes,
            };
            entry_bytes.push(read_checked(dir, &e.file, &sum)?);
        }

        let corrupt = |name: &str| {
            let name = name.to_string();
            move |_| CatalogueError::CorruptEntry(name)
        };
        let mut encoder: CategoricalEncoder = serde_json::from_slice(&encoder_bytes).map_err(corrupt(ENCODER_FILE))?;
        encoder
            .attach(&manifest.schema)
            .map_err(|_| CatalogueError::FingerprintMismatch)?;
        let groupby = serde_json::from_slice(&groupby_bytes).map_err(corrupt(GROUPBY_FILE))?;
        let drift = match drift_bytes {
            Some(b) => Some(serde_json::from_slice(&b).map_err(corrupt(DRIFT_FILE))?),
            None => None,
        };
        let mut entries = BTreeMap::new();
        for (e, bytes) in manifest.entries.iter().zip(entry_bytes) {
            let entry: CatalogueEntry = serde_json::from_slice(&bytes).map_err(corrupt(&e.file))?;
            entries.insert(e.key.clone(), entry);
        }
        let cat = ModelCatalogue {
            schema: manifest.schema,
            encoder,
            groupby,
            entries,
            drift,
        };
        cat.check_widths()?;
        Ok(cat)
    }
}

/// Total bytes of all files under `dir`.
pub fn disk_size(dir: &Path) -> io::Result<u64> {
    let mut total = 0;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let meta = entry.metadata()?;
        total += if meta.is_dir() { disk_size(&entry.path())? } else { meta.len() };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::Loss;

    fn tiny() -> ModelCatalogue {
        let schema = DatasetSchema::numeric("t", 2).unwrap();
        let enc = CategoricalEncoder::hashed_only(&schema);
        let mut cat = ModelCatalogue::new(schema, enc);
        cat.entries.insert(
            "COUNT(*)".into(),
            CatalogueEntry {
                point: GbdtModel::constant(3.5, Loss::Squared, 4),
                interval: None,
                ensemble: None,
            },
        );
        cat
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("COUNT(*)"), "count_s");
        assert_eq!(slug("SUM(a1)"), "sum_a1");
    }

    #[test]
    fn round_trip_and_overwrite() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("cat");
        let cat = tiny();
        cat.save(&dir).unwrap();
        cat.save(&dir).unwrap();
        assert_eq!(ModelCatalogue::load(&dir).unwrap(), cat);
    }

    #[test]
    fn missing_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            ModelCatalogue::load(tmp.path()),
            Err(CatalogueError::MissingManifest(_))
        ));
    }

    #[test]
    fn width_checked_on_save() {
        let mut cat = tiny();
        cat.entries.get_mut("COUNT(*)").unwrap().point.feature_width = 3;
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            cat.save(&tmp.path().join("c")),
            Err(CatalogueError::WidthMismatch { .. })
        ));
    }
}
