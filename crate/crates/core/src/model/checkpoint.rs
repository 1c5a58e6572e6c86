//! Checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "LONGERCK"
//! 8       4     format version, u32 LE
//! 12      8     manifest length N, u64 LE
//! 20      N     JSON manifest {config, param_version, params: [{name, shape}]}
//! 20+N    …     parameter data, f64 LE, in manifest order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LongerModel, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LONGERCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ShapeEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    param_version: u64,
    params: Vec<ShapeEntry>,
}

impl LongerModel {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let manifest = Manifest {
            config: self.config.clone(),
            param_version: self.store.version(),
            params: self
                .store
                .ids()
                .map(|id| ShapeEntry {
                    name: self.store.name(id).to_string(),
                    shape: self.store.get(id).shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for id in self.store.ids() {
            for v in self.store.get(id).data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Schema("not a checkpoint (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Schema(format!("checkpoint format version {}", version)));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = usize::try_from(u64::from_le_bytes(b8))
            .map_err(|_| Error::Schema("manifest length overflows".into()))?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mut model = LongerModel::new(manifest.config)?;
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != manifest.params.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} tensors, model expects {}",
                manifest.params.len(),
                ids.len()
            )));
        }
        for (id, entry) in ids.into_iter().zip(&manifest.params) {
            if model.store.name(id) != entry.name || model.store.get(id).shape() != entry.shape.as_slice() {
                return Err(Error::Schema(format!(
                    "tensor '{}' {:?} does not match model '{}' {:?}",
                    entry.name,
                    entry.shape,
                    model.store.name(id),
                    model.store.get(id).shape()
                )));
            }
            for v in model.store.get_mut(id).data_mut() {
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
        }
        model.store.set_version(manifest.param_version);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut f)
    }
}
