//! Checkpoint persistence and per-timestep model resolution.
//!
//! On-disk layout of a run directory:
//!
//! ```text
//! <run>/manifest.json            run-level provenance
//! <run>/all.manifest.json        monolithic model (baseline / subsequence regimes)
//! <run>/all.weights.bin
//! <run>/t<tau>.manifest.json     one per latent state (per-timestep regime)
//! <run>/t<tau>.weights.bin
//! ```
//!
//! Weight blobs are flat little-endian IEEE-754 f64 in layer order (weights
//! row-major, then biases, per layer), so a roundtrip is bitwise and the
//! format is identical on every platform. Writes go through a temp file and
//! a rename. Every manifest carries the schedule fingerprint of the run that
//! produced it; loading against a different schedule is refused unless the
//! caller explicitly overrides.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use once_cell::sync::OnceCell;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::denoiser::{Activation, DenoiserModel, ModelError};
use crate::seeds::fnv1a;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse failure at {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    FormatVersion { found: u32, supported: u32 },
    #[error("weight blob length mismatch: manifest says {expected} bytes, found {actual}")]
    BlobLength { expected: u64, actual: u64 },
    #[error("weight blob checksum mismatch: manifest says {expected:#018x}, computed {actual:#018x}")]
    Checksum { expected: u64, actual: u64 },
    #[error("non-finite weight at parameter index {index}; refusing to serialize")]
    NonFiniteWeight { index: usize },
    #[error("schedule fingerprint mismatch: expected {expected:#018x}, checkpoint has {found:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("registry already contains a model for timestep {0}")]
    DuplicateTau(usize),
    #[error("registry has no model for timestep {0}")]
    MissingTau(usize),
    #[error("model reconstruction failed: {0}")]
    Model(#[from] ModelError),
}

/// Training regime that produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Baseline,
    Fewer,
    Disentangled,
}

/// Which state a checkpoint covers: one latent state, or all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointTau {
    All,
    At(usize),
}

impl CheckpointTau {
    pub fn file_stem(&self) -> String {
        match self {
            CheckpointTau::All => "all".to_string(),
            CheckpointTau::At(t) => format!("t{t}"),
        }
    }
}

impl Serialize for CheckpointTau {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            CheckpointTau::All => serializer.serialize_str("all"),
            CheckpointTau::At(t) => serializer.serialize_u64(*t as u64),
        }
    }
}

impl<'de> Deserialize<'de> for CheckpointTau {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct TauVisitor;
        impl<'de> Visitor<'de> for TauVisitor {
            type Value = CheckpointTau;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a timestep integer or the string \"all\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<CheckpointTau, E> {
                Ok(CheckpointTau::At(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<CheckpointTau, E> {
                if v < 0 {
                    Err(E::custom("timestep must be non-negative"))
                } else {
                    Ok(CheckpointTau::At(v as usize))
                }
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<CheckpointTau, E> {
                if v == "all" {
                    Ok(CheckpointTau::All)
                } else {
                    Err(E::custom(format!("expected \"all\", got {v:?}")))
                }
            }
        }
        deserializer.deserialize_any(TauVisitor)
    }
}

/// Everything needed to rebuild a model and trust its weight blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub schedule_fingerprint: u64,
    pub regime: Regime,
    pub tau: CheckpointTau,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    pub label_dim: usize,
    pub t_count: usize,
    pub iterations_completed: u64,
    pub init_seed: u64,
    pub run_seed: u64,
    pub weight_blob_len: u64,
    pub weight_blob_checksum: u64,
}

/// Provenance fields supplied by the trainer when saving.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointMeta {
    pub schedule_fingerprint: u64,
    pub regime: Regime,
    pub tau: CheckpointTau,
    pub iterations_completed: u64,
    pub run_seed: u64,
}

fn weight_blob(model: &DenoiserModel) -> Result<Vec<u8>, RegistryError> {
    let params = model.flat_params();
    let mut blob = Vec::with_capacity(params.len() * 8);
    for (index, p) in params.iter().enumerate() {
        if !p.is_finite() {
            return Err(RegistryError::NonFiniteWeight { index });
        }
        blob.extend_from_slice(&p.to_le_bytes());
    }
    Ok(blob)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), RegistryError> {
    let tmp = path.with_extension("tmp");
    let io_err = |source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

/// Persist a model under `dir` with the stem derived from `meta.tau`.
pub fn save_checkpoint(
    model: &DenoiserModel,
    meta: &CheckpointMeta,
    dir: &Path,
) -> Result<CheckpointManifest, RegistryError> {
    let blob = weight_blob(model)?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        schedule_fingerprint: meta.schedule_fingerprint,
        regime: meta.regime,
        tau: meta.tau,
        layer_sizes: model.layer_sizes(),
        activation: model.activation(),
        time_embed_dim: model.time_embed_dim(),
        label_dim: model.label_dim(),
        t_count: model.t_count(),
        iterations_completed: meta.iterations_completed,
        init_seed: model.init_seed(),
        run_seed: meta.run_seed,
        weight_blob_len: blob.len() as u64,
        weight_blob_checksum: fnv1a(&blob),
    };

    let stem = meta.tau.file_stem();
    fs::create_dir_all(dir).map_err(|source| RegistryError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    atomic_write(&dir.join(format!("{stem}.weights.bin")), &blob)?;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    atomic_write(&dir.join(format!("{stem}.manifest.json")), &json)?;
    Ok(manifest)
}

fn read_manifest(path: &Path) -> Result<CheckpointManifest, RegistryError> {
    let bytes = fs::read(path).map_err(|source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes).map_err(|source| RegistryError::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(RegistryError::FormatVersion {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

fn blob_path_for(manifest_path: &Path) -> PathBuf {
    let name = manifest_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let stem = name.strip_suffix(".manifest.json").unwrap_or(name);
    manifest_path.with_file_name(format!("{stem}.weights.bin"))
}

fn load_blob(manifest: &CheckpointManifest, blob_path: &Path) -> Result<Vec<f64>, RegistryError> {
    let bytes = fs::read(blob_path).map_err(|source| RegistryError::Io {
        path: blob_path.to_path_buf(),
        source,
    })?;
    if bytes.len() as u64 != manifest.weight_blob_len {
        return Err(RegistryError::BlobLength {
            expected: manifest.weight_blob_len,
            actual: bytes.len() as u64,
        });
    }
    let checksum = fnv1a(&bytes);
    if checksum != manifest.weight_blob_checksum {
        return Err(RegistryError::Checksum {
            expected: manifest.weight_blob_checksum,
            actual: checksum,
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect())
}

fn model_from_manifest(
    manifest: &CheckpointManifest,
    params: &[f64],
) -> Result<DenoiserModel, RegistryError> {
    Ok(DenoiserModel::from_parts(
        &manifest.layer_sizes,
        manifest.activation,
        manifest.time_embed_dim,
        manifest.label_dim,
        manifest.t_count,
        manifest.init_seed,
        params,
    )?)
}

/// Load a single checkpoint from its manifest path, verifying length and checksum.
pub fn load_checkpoint(
    manifest_path: &Path,
) -> Result<(CheckpointManifest, DenoiserModel), RegistryError> {
    let manifest = read_manifest(manifest_path)?;
    let params = load_blob(&manifest, &blob_path_for(manifest_path))?;
    let model = model_from_manifest(&manifest, &params)?;
    Ok((manifest, model))
}

struct RegistryEntry {
    manifest: Option<CheckpointManifest>,
    blob_path: Option<PathBuf>,
    model: OnceCell<DenoiserModel>,
}

/// Map from timestep to a (lazily loaded) frozen model.
pub struct ModelRegistry {
    fingerprint: u64,
    entries: HashMap<usize, RegistryEntry>,
}

impl fmt::Debug for ModelRegistry {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        let mut taus = self.taus();
        taus.sort_unstable();
        f.debug_struct("ModelRegistry")
            .field("fingerprint", &self.fingerprint)
            .field("taus", &taus)
            .finish()
    }
}

impl ModelRegistry {
    /// Build an in-memory registry from already-trained models.
    pub fn from_models(
        fingerprint: u64,
        models: Vec<(usize, DenoiserModel)>,
    ) -> Result<Self, RegistryError> {
        let mut entries = HashMap::with_capacity(models.len());
        for (tau, model) in models {
            let cell = OnceCell::new();
            cell.set(model).expect("fresh cell");
            if entries
                .insert(
                    tau,
                    RegistryEntry {
                        manifest: None,
                        blob_path: None,
                        model: cell,
                    },
                )
                .is_some()
            {
                return Err(RegistryError::DuplicateTau(tau));
            }
        }
        Ok(Self {
            fingerprint,
            entries,
        })
    }

    /// Index the per-timestep checkpoints under `dir`.
    ///
    /// Manifests are read and verified eagerly (format, fingerprint,
    /// duplicate timesteps, blob length via file metadata); weight blobs are
    /// read and checksummed on first [`ModelRegistry::resolve`].
    pub fn open(dir: &Path, expected_fingerprint: Option<u64>) -> Result<Self, RegistryError> {
        let mut entries = HashMap::new();
        let mut fingerprint = expected_fingerprint;
        let read_dir = fs::read_dir(dir).map_err(|source| RegistryError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for entry in read_dir {
            let entry = entry.map_err(|source| RegistryError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            let Some(stem) = name.strip_suffix(".manifest.json") else {
                continue;
            };
            // Per-timestep checkpoints only; "all"/run-level manifests are
            // monolithic-model concerns.
            if !stem.starts_with('t') || stem[1..].parse::<usize>().is_err() {
                continue;
            }
            let manifest_path = entry.path();
            let manifest = read_manifest(&manifest_path)?;
            let CheckpointTau::At(tau) = manifest.tau else {
                continue;
            };
            match fingerprint {
                None => fingerprint = Some(manifest.schedule_fingerprint),
                Some(expected) if manifest.schedule_fingerprint != expected => {
                    return Err(RegistryError::FingerprintMismatch {
                        expected,
                        found: manifest.schedule_fingerprint,
                    });
                }
                Some(_) => {}
            }
            let blob_path = blob_path_for(&manifest_path);
            let blob_len = fs::metadata(&blob_path)
                .map_err(|source| RegistryError::Io {
                    path: blob_path.clone(),
                    source,
                })?
                .len();
            if blob_len != manifest.weight_blob_len {
                return Err(RegistryError::BlobLength {
                    expected: manifest.weight_blob_len,
                    actual: blob_len,
                });
            }
            if entries
                .insert(
                    tau,
                    RegistryEntry {
                        manifest: Some(manifest),
                        blob_path: Some(blob_path),
                        model: OnceCell::new(),
                    },
                )
                .is_some()
            {
                return Err(RegistryError::DuplicateTau(tau));
            }
        }
        Ok(Self {
            fingerprint: fingerprint.unwrap_or(0),
            entries,
        })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn taus(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn contains(&self, tau: usize) -> bool {
        self.entries.contains_key(&tau)
    }

    pub fn manifest(&self, tau: usize) -> Option<&CheckpointManifest> {
        self.entries.get(&tau).and_then(|e| e.manifest.as_ref())
    }

    /// Constant-time lookup; loads the weight blob on first touch.
    pub fn resolve(&self, tau: usize) -> Result<&DenoiserModel, RegistryError> {
        let entry = self
            .entries
            .get(&tau)
            .ok_or(RegistryError::MissingTau(tau))?;
        entry.model.get_or_try_init(|| {
            let manifest = entry
                .manifest
                .as_ref()
                .expect("lazy entries carry a manifest");
            let blob_path = entry.blob_path.as_ref().expect("lazy entries carry a path");
            let params = load_blob(manifest, blob_path)?;
            model_from_manifest(manifest, &params)
        })
    }
}
