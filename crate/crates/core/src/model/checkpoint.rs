//! On-disk model state: `manifest.json` describing every tensor plus a raw
//! little-endian f64 blob, `tensors.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::CkstnParams;
use super::units::CommonUnits;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "CKSTN-CKPT1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    path: String,
    rows: usize,
    cols: usize,
    /// Offset into the blob, in f64 elements.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    magic: String,
    config: ModelConfig,
    unit_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Parameters plus common units, with the config needed to rebuild them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: CkstnParams,
    pub units: CommonUnits,
}

impl Checkpoint {
    fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out = self.params.named();
        for (i, u) in self.units.units.iter().enumerate() {
            out.push((format!("units.slot.{i}"), u.clone()));
        }
        out.push(("units.state".into(), self.units.state.clone()));
        out
    }

    /// Writes into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (path, t) in self.entries() {
            tensors.push(TensorEntry {
                path,
                rows: t.rows(),
                cols: t.cols(),
                offset,
            });
            offset += t.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            magic: CHECKPOINT_MAGIC.into(),
            config: self.config.clone(),
            unit_step: self.units.step,
            tensors,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB);
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        if manifest.magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {:?}", manifest.magic)));
        }
        manifest.config.validate()?;
        let bpath = dir.join(BLOB);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(format!("{} is not a whole number of f64 values", bpath.display())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();

        let read = |e: &TensorEntry| -> Result<Tensor> {
            let end = e.offset + e.rows * e.cols;
            if end > values.len() {
                return Err(Error::Format(format!("tensor {} runs past the blob", e.path)));
            }
            Tensor::new(e.rows, e.cols, values[e.offset..end].to_vec())
        };

        // Rebuild a template of the right structure, then fill it.
        let template = CkstnParams::init(&manifest.config, &mut rand::SeedableRng::seed_from_u64(0))?;
        let names = template.named();
        let k = manifest.config.units;
        if manifest.tensors.len() != names.len() + k + 1 {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, config needs {}",
                manifest.tensors.len(),
                names.len() + k + 1
            )));
        }
        let mut params = Vec::with_capacity(names.len());
        for ((name, t), e) in names.iter().zip(&manifest.tensors) {
            if &e.path != name || (e.rows, e.cols) != t.shape() {
                return Err(Error::Format(format!(
                    "expected {name} {:?}, found {} {:?}",
                    t.shape(),
                    e.path,
                    (e.rows, e.cols)
                )));
            }
            params.push(read(e)?);
        }
        let params = template.with_tensors(&params)?;
        let rest = &manifest.tensors[names.len()..];
        let expected_shape = (manifest.config.tokens, manifest.config.d_m());
        let mut units = Vec::with_capacity(k);
        for (i, e) in rest[..k].iter().enumerate() {
            if e.path != format!("units.slot.{i}") || (e.rows, e.cols) != expected_shape {
                return Err(Error::Format(format!("unexpected unit entry {}", e.path)));
            }
            units.push(read(e)?);
        }
        let se = &rest[k];
        if se.path != "units.state" || (se.rows, se.cols) != expected_shape {
            return Err(Error::Format(format!("unexpected unit entry {}", se.path)));
        }
        let state = read(se)?;
        Ok(Checkpoint {
            config: manifest.config,
            params,
            units: CommonUnits {
                units,
                state,
                step: manifest.unit_step,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn sample() -> Checkpoint {
        let config = ModelConfig::toy();
        let (params, units) = init_model(&config, 11).unwrap();
        Checkpoint { config, params, units }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let ck = sample();
        ck.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        loaded.save(&b).unwrap();
        for f in [MANIFEST, BLOB] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
        assert_eq!(loaded.units, ck.units);
        for (x, y) in loaded.params.tensors().iter().zip(ck.params.tensors()) {
            assert_eq!(x, &y);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let blob = dir.path().join(BLOB);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn missing_dir_is_io_error() {
        let err = Checkpoint::load(Path::new("/nonexistent/ckstn")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
