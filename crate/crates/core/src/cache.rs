//! On-disk cache of cell solutions.
//!
//! Each entry is a directory named by a SHA-256 key holding one nodal binary
//! file per stored function and a `manifest.toml` listing which slots are
//! present and when the entry was written. Unreadable entries are treated as
//! misses and recomputed.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fem::FineFunction;
use crate::mesh::ShiftedPartition;

/// Environment variable overriding the cache directory.
pub const CACHE_ENV: &str = "MCHOM_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub kind: &'static str,
    pub hex: String,
}

fn partition_bytes(h: &mut Sha256, p: &ShiftedPartition) {
    h.update((p.grid().n_per_side() as u64).to_le_bytes());
    h.update((p.scale_cells() as u64).to_le_bytes());
    for s in p.shift_cells() {
        h.update((s as u64).to_le_bytes());
    }
}

fn finish(kind: &'static str, h: Sha256) -> CacheKey {
    CacheKey {
        kind,
        hex: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
    }
}

impl CacheKey {
    pub fn cell_set(
        medium: &str,
        sub: &ShiftedPartition,
        target: &[Range<usize>; 2],
        center: [f64; 2],
        k: usize,
        tol: f64,
    ) -> Self {
        let mut h = Sha256::new();
        h.update(b"cell-set-v1");
        h.update(medium.as_bytes());
        partition_bytes(&mut h, sub);
        for r in target {
            h.update((r.start as u64).to_le_bytes());
            h.update((r.end as u64).to_le_bytes());
        }
        for c in center {
            h.update(c.to_bits().to_le_bytes());
        }
        h.update((k as u64).to_le_bytes());
        h.update(tol.to_bits().to_le_bytes());
        finish("cells", h)
    }

    pub fn nlmc(medium: &str, sub: &ShiftedPartition, subcell: usize, k: usize, tol: f64) -> Self {
        let mut h = Sha256::new();
        h.update(b"nlmc-v1");
        h.update(medium.as_bytes());
        partition_bytes(&mut h, sub);
        h.update((subcell as u64).to_le_bytes());
        h.update((k as u64).to_le_bytes());
        h.update(tol.to_bits().to_le_bytes());
        finish("nlmc", h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub key: String,
    pub kind: String,
    pub created_unix_ms: u128,
    /// Which slots hold a function.
    pub present: Vec<bool>,
}

/// Directory-backed cache with hit/miss counters.
#[derive(Debug)]
pub struct Cache {
    root: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    /// Uses `MCHOM_CACHE_DIR` when set, otherwise `fallback`.
    pub fn from_env_or(fallback: Option<&Path>) -> Result<Option<Self>> {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => Ok(Some(Self::new(PathBuf::from(dir))?)),
            _ => fallback.map(Self::new).transpose(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn dir(&self, key: &CacheKey) -> PathBuf {
        self.root.join(key.kind).join(&key.hex)
    }

    pub fn manifest(&self, key: &CacheKey) -> Option<Manifest> {
        let text = fs::read_to_string(self.dir(key).join("manifest.toml")).ok()?;
        toml::from_str(&text).ok()
    }

    pub fn load(&self, key: &CacheKey) -> Option<Vec<Option<FineFunction>>> {
        let out = self.try_load(key);
        match out {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        out
    }

    fn try_load(&self, key: &CacheKey) -> Option<Vec<Option<FineFunction>>> {
        let m = self.manifest(key)?;
        if m.key != key.hex {
            return None;
        }
        let dir = self.dir(key);
        m.present
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                if p {
                    FineFunction::load(&dir.join(format!("f{k}.bin"))).ok().map(Some)
                } else {
                    Some(None)
                }
            })
            .collect()
    }

    /// Writes an entry atomically: files go to a staging directory that is
    /// renamed into place.
    pub fn store(&self, key: &CacheKey, funcs: &[Option<FineFunction>]) -> Result<()> {
        let final_dir = self.dir(key);
        let parent = final_dir.parent().expect("kind directory");
        fs::create_dir_all(parent)?;
        let staging = tempdir_in(parent)?;
        for (k, f) in funcs.iter().enumerate() {
            if let Some(f) = f {
                f.save(&staging.join(format!("f{k}.bin")))?;
            }
        }
        let manifest = Manifest {
            key: key.hex.clone(),
            kind: key.kind.to_string(),
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            present: funcs.iter().map(Option::is_some).collect(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(staging.join("manifest.toml"), text)?;
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).ok();
        }
        match fs::rename(&staging, &final_dir) {
            Ok(()) => Ok(()),
            Err(_) if final_dir.exists() => {
                fs::remove_dir_all(&staging).ok();
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }
}

fn tempdir_in(parent: &Path) -> Result<PathBuf> {
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let nonce = COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = parent.join(format!(".staging-{}-{nonce}", std::process::id()));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}
