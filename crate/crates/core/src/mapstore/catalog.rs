use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{precompute_region, PrecomputeOptions, RegionStatus, RegionStore, StoreManifest};
use crate::encoders::CrossViewModel;
use crate::error::{Error, Result};
use crate::geodata::TileProvider;

/// Directory of region stores, one sub-directory per region id.
pub struct Catalog {
    root: PathBuf,
    mutations: Mutex<()>,
}

impl Catalog {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Catalog {
            root,
            mutations: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn region_dir(&self, id: &str) -> Result<PathBuf> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::NotFound(format!("no region {id:?}")));
        }
        Ok(self.root.join(id))
    }

    /// Manifests of every region, sorted by id.
    pub fn list(&self) -> Result<Vec<StoreManifest>> {
        let entries = std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            if entry.path().is_dir() {
                match StoreManifest::read(&entry.path()) {
                    Ok(m) => out.push(m),
                    Err(e) => tracing::warn!(dir = %entry.path().display(), "skipping unreadable region: {e}"),
                }
            }
        }
        out.sort_by(|a, b| a.region_id.cmp(&b.region_id));
        Ok(out)
    }

    pub fn get(&self, id: &str) -> Result<StoreManifest> {
        StoreManifest::read(&self.region_dir(id)?).map_err(|e| match e {
            Error::NotFound(_) => Error::NotFound(format!("no region {id:?}")),
            other => other,
        })
    }

    /// A ready store; `Conflict` while pending or failed.
    pub fn load(&self, id: &str) -> Result<RegionStore> {
        self.get(id)?;
        RegionStore::load(&self.region_dir(id)?)
    }

    pub fn delete(&self, id: &str) -> Result<()> {
        let _guard = self.mutations.lock().expect("catalog lock poisoned");
        let dir = self.region_dir(id)?;
        self.get(id)?;
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))
    }

    /// Records a pending region unless one with this id already exists;
    /// returns the stored manifest either way.
    pub fn register(&self, manifest: StoreManifest) -> Result<StoreManifest> {
        let _guard = self.mutations.lock().expect("catalog lock poisoned");
        let dir = self.region_dir(&manifest.region_id)?;
        if let Ok(existing) = StoreManifest::read(&dir) {
            return Ok(existing);
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        manifest.write(&dir)?;
        Ok(manifest)
    }

    /// Marks a region failed with a single region-level error.
    pub fn mark_failed(&self, id: &str, message: &str) -> Result<()> {
        let _guard = self.mutations.lock().expect("catalog lock poisoned");
        let dir = self.region_dir(id)?;
        let mut m = StoreManifest::read(&dir)?;
        m.status = RegionStatus::Failed;
        m.errors.push(super::CellError {
            row: 0,
            col: 0,
            message: message.to_string(),
        });
        m.write(&dir)
    }

    /// Registers and precomputes a region in one call.
    pub fn ingest(
        &self,
        manifest: StoreManifest,
        model: &CrossViewModel,
        provider: &dyn TileProvider,
        opts: &PrecomputeOptions,
    ) -> Result<RegionStore> {
        let id = manifest.region_id.clone();
        self.register(manifest.clone())?;
        precompute_region(&self.region_dir(&id)?, manifest, model, provider, opts)
    }
}
