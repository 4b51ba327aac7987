//! `CKFT1`: `manifest.json` plus `features.bin`, a row-major little-endian
//! f32 blob. Each item's features are followed by its boxes, if any.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureItem, FeatureSet};
use crate::error::{Error, Result};
use crate::model::Modality;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "CKFT1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "features.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemEntry {
    id: String,
    modality: Modality,
    tokens: usize,
    dim: usize,
    /// Byte offset of the features.
    offset: usize,
    /// Byte offset of the `tokens × 5` boxes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes_offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    endianness: String,
    dtype: String,
    blob_bytes: usize,
    items: Vec<ItemEntry>,
    pairing: Vec<(String, String)>,
}

fn push_f32(blob: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        blob.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Writes `set` into directory `dir` (created if needed).
pub fn write_features(set: &FeatureSet, dir: &Path) -> Result<()> {
    set.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut items = Vec::with_capacity(set.items.len());
    for item in &set.items {
        let offset = blob.len();
        push_f32(&mut blob, &item.features);
        let boxes_offset = item.boxes.as_ref().map(|b| {
            let at = blob.len();
            push_f32(&mut blob, b);
            at
        });
        items.push(ItemEntry {
            id: item.id.clone(),
            modality: item.modality,
            tokens: item.tokens(),
            dim: item.dim(),
            offset,
            boxes_offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION.into(),
        endianness: "little".into(),
        dtype: "f32".into(),
        blob_bytes: blob.len(),
        items,
        pairing: set.pairing.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

fn read_f32(blob: &[u8], offset: usize, rows: usize, cols: usize, what: &str) -> Result<Tensor> {
    let end = offset
        .checked_add(rows * cols * 4)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| Error::Format(format!("{what} runs past the end of the blob")))?;
    let data = blob[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    Tensor::new(rows, cols, data)
}

/// Reads and verifies a `CKFT1` directory.
pub fn read_features(dir: &Path) -> Result<FeatureSet> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if m.format != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported feature format {:?}", m.format)));
    }
    if m.endianness != "little" || m.dtype != "f32" {
        return Err(Error::Format(format!("unsupported encoding {} {}", m.endianness, m.dtype)));
    }
    let bpath = dir.join(BLOB);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let needed: usize = m
        .items
        .iter()
        .map(|e| 4 * e.tokens * (e.dim + if e.boxes_offset.is_some() { 5 } else { 0 }))
        .sum();
    if blob.len() != m.blob_bytes || blob.len() != needed {
        return Err(Error::Format(format!(
            "{} holds {} bytes, manifest declares {} and items need {}",
            bpath.display(),
            blob.len(),
            m.blob_bytes,
            needed
        )));
    }
    let mut items = Vec::with_capacity(m.items.len());
    for e in &m.items {
        let features = read_f32(&blob, e.offset, e.tokens, e.dim, &e.id)?;
        let boxes = e
            .boxes_offset
            .map(|off| read_f32(&blob, off, e.tokens, 5, &e.id))
            .transpose()?;
        items.push(FeatureItem {
            id: e.id.clone(),
            modality: e.modality,
            features,
            boxes,
        });
    }
    let set = FeatureSet {
        items,
        pairing: m.pairing,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_features(&FeatureSet::default(), dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(BLOB)).unwrap().len(), 0);
        assert_eq!(read_features(dir.path()).unwrap(), FeatureSet::default());
    }

    #[test]
    fn small_item_blob_size() {
        let dir = tempfile::tempdir().unwrap();
        let set = FeatureSet {
            items: vec![FeatureItem {
                id: "a".into(),
                modality: Modality::Textual,
                features: Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
                boxes: None,
            }],
            pairing: vec![],
        };
        write_features(&set, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(BLOB)).unwrap().len(), 24);
        assert_eq!(read_features(dir.path()).unwrap(), set);
    }

    #[test]
    fn version_and_length_checks() {
        let dir = tempfile::tempdir().unwrap();
        let set = FeatureSet {
            items: vec![FeatureItem {
                id: "a".into(),
                modality: Modality::Visual,
                features: Tensor::filled(2, 2, 0.25),
                boxes: Some(Tensor::filled(2, 5, 0.5)),
            }],
            pairing: vec![],
        };
        write_features(&set, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(BLOB)).unwrap().len(), 4 * (4 + 10));
        let blob = dir.path().join(BLOB);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_features(dir.path()), Err(Error::Format(_))));
        fs::write(&blob, &bytes).unwrap();

        let mpath = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&mpath).unwrap().replace("CKFT1", "CKFT9");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(read_features(dir.path()), Err(Error::Format(_))));
    }
}
