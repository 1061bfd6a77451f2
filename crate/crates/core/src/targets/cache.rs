use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TargetModel;
use crate::error::{Error, Result};
use crate::util::{read_json, sha256_hex, write_atomic, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// Canonical key of a class set: sorted ids joined by `-`.
pub fn cache_key(class_ids: &[usize]) -> String {
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u32,
    pub config_hash: String,
    pub entries: BTreeMap<String, ManifestEntry>,
}

/// Target models keyed by class set, held in memory and optionally mirrored
/// to a directory with one JSON file per key plus a manifest.
#[derive(Debug)]
pub struct TargetCache {
    dir: Option<PathBuf>,
    manifest: CacheManifest,
    loaded: BTreeMap<String, TargetModel>,
    builds: usize,
    hits: usize,
}

impl TargetCache {
    pub fn in_memory(config_hash: &str) -> Self {
        TargetCache {
            dir: None,
            manifest: CacheManifest {
                version: MANIFEST_VERSION,
                config_hash: config_hash.to_string(),
                entries: BTreeMap::new(),
            },
            loaded: BTreeMap::new(),
            builds: 0,
            hits: 0,
        }
    }

    /// Opens a cache directory. An existing manifest built under a different
    /// configuration is rejected rather than silently mixed.
    pub fn open(dir: &Path, config_hash: &str) -> Result<Self> {
        let mut cache = Self::in_memory(config_hash);
        cache.dir = Some(dir.to_path_buf());
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let manifest: CacheManifest = read_json(&path)?;
            if manifest.config_hash != config_hash {
                return Err(Error::CacheInvalidated {
                    found: manifest.config_hash,
                    expected: config_hash.to_string(),
                });
            }
            cache.manifest = manifest;
        }
        Ok(cache)
    }

    /// Drops every entry of the directory cache and starts afresh.
    pub fn reset(dir: &Path, config_hash: &str) -> Result<Self> {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let cache = Self::open(dir, config_hash)?;
        cache.flush()?;
        Ok(cache)
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len().max(self.loaded.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, class_ids: &[usize]) -> bool {
        let key = cache_key(class_ids);
        self.loaded.contains_key(&key) || self.manifest.entries.contains_key(&key)
    }

    pub fn keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self.manifest.entries.keys().cloned().collect();
        keys.extend(self.loaded.keys().filter(|k| !self.manifest.entries.contains_key(*k)).cloned());
        keys.sort();
        keys
    }

    /// Number of targets built through [`TargetCache::get_or_build`].
    pub fn builds(&self) -> usize {
        self.builds
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn store(&mut self, target: TargetModel) -> Result<()> {
        let ids = target
            .class_ids()
            .ok_or_else(|| Error::Config("only class-set targets are cached".into()))?;
        let key = cache_key(ids);
        if let Some(dir) = &self.dir {
            let file = format!("{key}.json");
            let bytes = serde_json::to_vec(&target)?;
            write_atomic(&dir.join(&file), &bytes)?;
            self.manifest.entries.insert(
                key.clone(),
                ManifestEntry {
                    file,
                    sha256: sha256_hex(&bytes),
                },
            );
        }
        self.loaded.insert(key, target);
        Ok(())
    }

    pub fn load(&mut self, class_ids: &[usize]) -> Result<&TargetModel> {
        let key = cache_key(class_ids);
        if !self.loaded.contains_key(&key) {
            let (Some(dir), Some(entry)) = (&self.dir, self.manifest.entries.get(&key)) else {
                return Err(Error::CacheMiss(key));
            };
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(Error::Checksum { path });
            }
            let target: TargetModel = serde_json::from_slice(&bytes)?;
            self.loaded.insert(key.clone(), target);
        }
        Ok(&self.loaded[&key])
    }

    /// Returns the cached target for the class set, building and storing it on
    /// a miss. `build` receives the sorted class ids.
    pub fn get_or_build(
        &mut self,
        class_ids: &[usize],
        build: impl FnOnce(&[usize]) -> Result<TargetModel>,
    ) -> Result<&TargetModel> {
        if self.contains(class_ids) {
            self.hits += 1;
        } else {
            let mut ids = class_ids.to_vec();
            ids.sort_unstable();
            let target = build(&ids)?;
            self.builds += 1;
            self.store(target)?;
        }
        self.load(class_ids)
    }

    /// Writes the manifest (directory caches only).
    pub fn flush(&self) -> Result<()> {
        if let Some(dir) = &self.dir {
            write_json(&dir.join(MANIFEST_FILE), &self.manifest)?;
        }
        Ok(())
    }
}
