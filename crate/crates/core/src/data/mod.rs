//! Paired feature corpora: the `CKFT1` on-disk format, a synthetic
//! generator and a deterministic batcher.

mod batch;
mod format;
mod synth;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use batch::make_batches;
pub use format::{read_features, write_features, FORMAT_VERSION};
pub use synth::{synth_generate, SynthSpec};

use crate::error::{Error, Result};
use crate::model::{ItemInput, Modality};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureItem {
    pub id: String,
    pub modality: Modality,
    /// `tokens × dim`.
    pub features: Tensor,
    /// `tokens × 5` region boxes `(x1, y1, x2, y2, area)`, visual items only.
    pub boxes: Option<Tensor>,
}

impl FeatureItem {
    pub fn tokens(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub items: Vec<FeatureItem>,
    /// `(visual id, textual id)`.
    pub pairing: Vec<(String, String)>,
}

impl FeatureSet {
    /// Checks ids, pairings, box shapes and per-modality widths.
    pub fn validate(&self) -> Result<()> {
        let mut by_id = HashMap::new();
        let mut dims: HashMap<Modality, usize> = HashMap::new();
        for item in &self.items {
            if by_id.insert(item.id.as_str(), item).is_some() {
                return Err(Error::Validation(format!("duplicate item id {:?}", item.id)));
            }
            if item.tokens() == 0 || item.dim() == 0 {
                return Err(Error::Validation(format!("item {:?} is empty", item.id)));
            }
            let d = *dims.entry(item.modality).or_insert(item.dim());
            if d != item.dim() {
                return Err(Error::Validation(format!(
                    "item {:?} has width {}, other {:?} items have {d}",
                    item.id,
                    item.dim(),
                    item.modality
                )));
            }
            if let Some(b) = &item.boxes {
                if item.modality != Modality::Visual {
                    return Err(Error::Validation(format!("textual item {:?} carries boxes", item.id)));
                }
                if b.rows() != item.tokens() {
                    return Err(Error::Validation(format!(
                        "item {:?} has {} boxes for {} tokens",
                        item.id,
                        b.rows(),
                        item.tokens()
                    )));
                }
                crate::model::layers::validate_boxes(b)?;
            }
        }
        for (v, t) in &self.pairing {
            for (id, want) in [(v, Modality::Visual), (t, Modality::Textual)] {
                match by_id.get(id.as_str()) {
                    None => return Err(Error::Validation(format!("pairing refers to unknown id {id:?}"))),
                    Some(item) if item.modality != want => {
                        return Err(Error::Validation(format!("pairing expects {id:?} to be {want:?}")))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self, modality: Modality) -> Option<usize> {
        self.items.iter().find(|i| i.modality == modality).map(FeatureItem::dim)
    }

    /// First `n` pairs and the rest, each with only the items it references.
    pub fn split(&self, n: usize) -> (FeatureSet, FeatureSet) {
        let n = n.min(self.pairing.len());
        let part = |pairs: &[(String, String)]| {
            let ids: HashSet<&str> = pairs.iter().flat_map(|(v, t)| [v.as_str(), t.as_str()]).collect();
            FeatureSet {
                items: self.items.iter().filter(|i| ids.contains(i.id.as_str())).cloned().collect(),
                pairing: pairs.to_vec(),
            }
        };
        (part(&self.pairing[..n]), part(&self.pairing[n..]))
    }

    /// Every pairing as padded model inputs, in pairing order.
    pub fn paired_inputs(&self, tokens: usize) -> Result<Vec<(ItemInput, ItemInput)>> {
        self.validate()?;
        let by_id: HashMap<&str, &FeatureItem> = self.items.iter().map(|i| (i.id.as_str(), i)).collect();
        self.pairing
            .iter()
            .map(|(v, t)| {
                let (v, t) = (by_id[v.as_str()], by_id[t.as_str()]);
                Ok((
                    ItemInput::fit(&v.features, v.boxes.as_ref(), tokens)?,
                    ItemInput::fit(&t.features, None, tokens)?,
                ))
            })
            .collect()
    }
}

/// JSON file naming the training and held-out feature directories. Relative
/// paths resolve against the descriptor's own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusDescriptor {
    pub train: PathBuf,
    pub test: PathBuf,
}

impl CorpusDescriptor {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut d: CorpusDescriptor =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        d.train = base.join(&d.train);
        d.test = base.join(&d.test);
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(&self) -> Result<(FeatureSet, FeatureSet)> {
        Ok((read_features(&self.train)?, read_features(&self.test)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, modality: Modality, rows: usize, cols: usize) -> FeatureItem {
        FeatureItem {
            id: id.into(),
            modality,
            features: Tensor::filled(rows, cols, 0.5),
            boxes: None,
        }
    }

    #[test]
    fn validation_catches_bad_sets() {
        let ok = FeatureSet {
            items: vec![item("v", Modality::Visual, 2, 3), item("t", Modality::Textual, 4, 5)],
            pairing: vec![("v".into(), "t".into())],
        };
        ok.validate().unwrap();
        let mut bad = ok.clone();
        bad.pairing.push(("v".into(), "missing".into()));
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.pairing = vec![("t".into(), "v".into())];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.items.push(item("v2", Modality::Visual, 2, 4));
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.items[0].boxes = Some(Tensor::zeros(3, 5));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_keeps_referenced_items() {
        let set = FeatureSet {
            items: (0..3)
                .flat_map(|i| [item(&format!("v{i}"), Modality::Visual, 1, 2), item(&format!("t{i}"), Modality::Textual, 1, 2)])
                .collect(),
            pairing: (0..3).map(|i| (format!("v{i}"), format!("t{i}"))).collect(),
        };
        let (a, b) = set.split(2);
        assert_eq!(a.pairing.len(), 2);
        assert_eq!(a.items.len(), 4);
        assert_eq!(b.items.len(), 2);
        b.validate().unwrap();
    }

    #[test]
    fn descriptor_paths_are_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.json");
        CorpusDescriptor {
            train: "train".into(),
            test: "test".into(),
        }
        .save(&path)
        .unwrap();
        let d = CorpusDescriptor::load(&path).unwrap();
        assert_eq!(d.train, dir.path().join("train"));
    }
}
