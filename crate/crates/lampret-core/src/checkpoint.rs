//! Checkpoint lifecycle: a JSON manifest (format version, config hash, step,
//! seed, named-shape table) plus raw little-endian f32 blobs for parameters
//! and optimizer state, and the training lock file.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnet::{Adam, ParamStore};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const LOCK_FILE: &str = "lampret.lock";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    FormatVersion(u32),
    #[error("config hash mismatch: checkpoint {found}, current run {expected}")]
    CheckpointMismatch { expected: String, found: String },
    #[error("no checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("tensor {name}: blob holds {got} values, shape table says {want}")]
    BlobSize { name: String, got: usize, want: usize },
    #[error("checkpoint directory locked by {0}")]
    Locked(PathBuf),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// stable hash of the canonical config dump, checked on resume
    pub config_hash: String,
    /// the canonical config itself, so any number is re-derivable
    pub config: String,
    pub step: usize,
    pub seed: u64,
    pub tensors: Vec<TensorInfo>,
    /// optimizer tensors, present when Adam state was saved
    pub optimizer_tensors: Vec<TensorInfo>,
    pub adam_step: usize,
}

/// FNV-1a 64-bit over the canonical config string, hex-encoded.
pub fn config_hash(canonical: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in canonical.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

fn write_blob(path: &Path, tensors: &[(&str, &ArrayD<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    for (_, t) in tensors {
        for &v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

fn read_blob(path: &Path, table: &[TensorInfo]) -> Result<Vec<ArrayD<f32>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let total: usize = table.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(CheckpointError::BlobSize {
            name: path.display().to_string(),
            got: bytes.len() / 4,
            want: total,
        });
    }
    let mut out = Vec::with_capacity(table.len());
    let mut off = 0usize;
    for info in table {
        let n: usize = info.shape.iter().product();
        let vals: Vec<f32> = (0..n)
            .map(|i| {
                let s = (off + i) * 4;
                f32::from_le_bytes(bytes[s..s + 4].try_into().unwrap())
            })
            .collect();
        off += n;
        out.push(ArrayD::from_shape_vec(info.shape.clone(), vals).unwrap());
    }
    Ok(out)
}

/// Write a checkpoint directory: manifest + parameter blob (+ optimizer blob
/// when Adam state is supplied).
pub fn save_checkpoint(
    dir: &Path,
    config: &str,
    step: usize,
    seed: u64,
    store: &ParamStore<f32>,
    adam: Option<&Adam<f32>>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let params: Vec<(&str, &ArrayD<f32>)> = store.iter().collect();
    let tensors = params
        .iter()
        .map(|(n, t)| TensorInfo { name: n.to_string(), shape: t.shape().to_vec() })
        .collect();

    let mut opt: Vec<(&str, &ArrayD<f32>)> = Vec::new();
    let mut optimizer_tensors = Vec::new();
    let mut adam_step = 0;
    if let Some(a) = adam {
        adam_step = a.step;
        for (prefix, map) in [("m", &a.m), ("v", &a.v)] {
            for (n, t) in map {
                optimizer_tensors.push(TensorInfo {
                    name: format!("{prefix}.{n}"),
                    shape: t.shape().to_vec(),
                });
                opt.push((n.as_str(), t));
            }
        }
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(config),
        config: config.to_string(),
        step,
        seed,
        tensors,
        optimizer_tensors,
        adam_step,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    write_blob(&dir.join(PARAMS_FILE), &params)?;
    if adam.is_some() {
        write_blob(&dir.join(OPTIMIZER_FILE), &opt)?;
    }
    Ok(())
}

/// Load a checkpoint directory back into a parameter store and optional Adam
/// state. Fails with [`CheckpointError::CheckpointMismatch`] when
/// `expect_config` is given and hashes to something else.
pub fn load_checkpoint(
    dir: &Path,
    expect_config: Option<&str>,
) -> Result<(Manifest, ParamStore<f32>, Option<Adam<f32>>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(CheckpointError::MissingCheckpoint(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::FormatVersion(manifest.format_version));
    }
    if let Some(cfg) = expect_config {
        let expected = config_hash(cfg);
        if expected != manifest.config_hash {
            return Err(CheckpointError::CheckpointMismatch {
                expected,
                found: manifest.config_hash.clone(),
            });
        }
    }

    let mut store = ParamStore::new();
    for (info, arr) in manifest
        .tensors
        .iter()
        .zip(read_blob(&dir.join(PARAMS_FILE), &manifest.tensors)?)
    {
        store.insert(&info.name, arr);
    }

    let adam = if manifest.optimizer_tensors.is_empty() {
        None
    } else {
        let blobs = read_blob(&dir.join(OPTIMIZER_FILE), &manifest.optimizer_tensors)?;
        let mut a = Adam::new(&store);
        a.step = manifest.adam_step;
        for (info, arr) in manifest.optimizer_tensors.iter().zip(blobs) {
            let (prefix, name) = info.name.split_once('.').unwrap();
            match prefix {
                "m" => a.m.insert(name.to_string(), arr),
                "v" => a.v.insert(name.to_string(), arr),
                other => panic!("unknown optimizer tensor prefix {other}"),
            };
        }
        Some(a)
    };
    Ok((manifest, store, adam))
}

/// Exclusive ownership of a checkpoint directory via a lock file; released on
/// drop. A stale file from a crashed run must be removed manually — the error
/// names the path.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

pub fn acquire_lock(dir: &Path) -> Result<DirLock> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(LOCK_FILE);
    match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
        Ok(mut f) => {
            let _ = writeln!(f, "{}", std::process::id());
            Ok(DirLock { path })
        }
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            Err(CheckpointError::Locked(path))
        }
        Err(e) => Err(CheckpointError::Io { path, source: e }),
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Human-readable checkpoint summary for `inspect-checkpoint`.
pub fn inspect(dir: &Path) -> Result<String> {
    let (manifest, store, adam) = load_checkpoint(dir, None)?;
    let mut out = String::new();
    out.push_str(&format!(
        "checkpoint at {}\n  format v{}  step {}  seed {}  config hash {}\n",
        dir.display(),
        manifest.format_version,
        manifest.step,
        manifest.seed,
        manifest.config_hash
    ));
    out.push_str(&format!(
        "  {} tensors, {} coordinates, optimizer state: {}\n",
        manifest.tensors.len(),
        store.n_coords(),
        if adam.is_some() { format!("adam @ step {}", manifest.adam_step) } else { "none".into() }
    ));
    for info in &manifest.tensors {
        let t = store.get(&info.name);
        let norm = t.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        out.push_str(&format!("  {:40} {:?}  l2 {:.6}\n", info.name, info.shape, norm));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{init_params, ModelConfig};
    use tempfile::tempdir;

    fn small_store() -> ParamStore<f32> {
        let cfg = ModelConfig {
            d: 8,
            n_heads: 2,
            ff_mult: 2,
            lower_layers: 1,
            higher_layers: 1,
            vocab_size: 16,
            max_tokens: 64,
            max_blocks: 8,
            image_size: 8,
            n_candidates: 4,
            dropout: 0.0,
            grid_rows: 4,
            grid_cols: 4,
        };
        init_params(&cfg, 3)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let store = small_store();
        let mut adam = Adam::new(&store);
        adam.step = 17;
        adam.m.get_mut("embed.word").unwrap().fill(0.125);
        adam.v.get_mut("embed.word").unwrap().fill(1e-30); // subnormal-ish survives
        save_checkpoint(dir.path(), "cfg-a", 42, 7, &store, Some(&adam)).unwrap();

        let (manifest, loaded, loaded_adam) =
            load_checkpoint(dir.path(), Some("cfg-a")).unwrap();
        assert_eq!(manifest.step, 42);
        assert_eq!(manifest.seed, 7);
        let loaded_adam = loaded_adam.unwrap();
        assert_eq!(loaded_adam.step, 17);
        for (name, t) in store.iter() {
            let l = loaded.get(name);
            assert_eq!(t.shape(), l.shape());
            for (a, b) in t.iter().zip(l.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        for (name, t) in &adam.m {
            let l = &loaded_adam.m[name];
            for (a, b) in t.iter().zip(l.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "m.{name}");
            }
        }
        for (name, t) in &adam.v {
            let l = &loaded_adam.v[name];
            for (a, b) in t.iter().zip(l.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "v.{name}");
            }
        }
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let store = small_store();
        save_checkpoint(dir.path(), "cfg-a", 1, 1, &store, None).unwrap();
        assert!(load_checkpoint(dir.path(), Some("cfg-a")).is_ok());
        let err = load_checkpoint(dir.path(), Some("cfg-b")).unwrap_err();
        assert!(matches!(err, CheckpointError::CheckpointMismatch { .. }));
        // no expectation → loads fine
        assert!(load_checkpoint(dir.path(), None).is_ok());
    }

    #[test]
    fn missing_and_version_errors() {
        let dir = tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), None).unwrap_err(),
            CheckpointError::MissingCheckpoint(_)
        ));
        let store = small_store();
        save_checkpoint(dir.path(), "c", 0, 0, &store, None).unwrap();
        // corrupt the version field
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replace("\"format_version\": 1", "\"format_version\": 9"))
            .unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), None).unwrap_err(),
            CheckpointError::FormatVersion(9)
        ));
    }

    #[test]
    fn truncated_blob_is_detected() {
        let dir = tempdir().unwrap();
        let store = small_store();
        save_checkpoint(dir.path(), "c", 0, 0, &store, None).unwrap();
        let bpath = dir.path().join(PARAMS_FILE);
        let bytes = fs::read(&bpath).unwrap();
        fs::write(&bpath, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), None).unwrap_err(),
            CheckpointError::BlobSize { .. }
        ));
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let dir = tempdir().unwrap();
        let lock = acquire_lock(dir.path()).unwrap();
        assert!(matches!(
            acquire_lock(dir.path()).unwrap_err(),
            CheckpointError::Locked(_)
        ));
        drop(lock);
        let _relock = acquire_lock(dir.path()).unwrap();
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash("profile=desk\nseed=1\n");
        assert_eq!(a, config_hash("profile=desk\nseed=1\n"));
        assert_ne!(a, config_hash("profile=desk\nseed=2\n"));
        // FNV-1a reference value for the empty string
        assert_eq!(config_hash(""), "cbf29ce484222325");
    }

    #[test]
    fn inspect_lists_every_tensor() {
        let dir = tempdir().unwrap();
        let store = small_store();
        save_checkpoint(dir.path(), "c", 3, 9, &store, None).unwrap();
        let report = inspect(dir.path()).unwrap();
        assert!(report.contains("step 3"));
        for (name, _) in store.iter() {
            assert!(report.contains(name), "{name} missing from report");
        }
    }
}
