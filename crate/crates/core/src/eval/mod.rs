//! Retrieval metrics, ablation sweeps and region-word matching export.

mod ablation;
mod matching;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationConfig, AblationReport, AblationRow, GapEstimate, Variant, VariantSummary};
pub use matching::{export_matching, MatchRow};

use crate::error::{Error, Result};
use crate::losses::pair_similarity_matrix;
use crate::model::{encode, CkstnParams, CommonUnits, Encoded, ItemInput, Modality, ModelConfig};
use crate::tensor::Tensor;

/// Which side of the similarity matrix is queried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Sentence queries ranking images: one query per column.
    ImageRetrieval,
    /// Image queries ranking sentences: one query per row.
    SentenceRetrieval,
}

/// Percentage of queries whose true match (the diagonal) ranks within the
/// top `k`. Candidates scoring equal to the true match rank ahead of it only
/// when their index is lower.
pub fn recall_at_k(sim: &Tensor, k: usize, direction: Direction) -> Result<f64> {
    let n = sim.rows();
    if n == 0 || sim.cols() != n {
        return Err(Error::Validation(format!("recall needs a non-empty square matrix, got {:?}", sim.shape())));
    }
    if k == 0 {
        return Err(Error::Validation("recall cutoff must be at least 1".into()));
    }
    let score = |q: usize, c: usize| match direction {
        Direction::SentenceRetrieval => sim.get(q, c),
        Direction::ImageRetrieval => sim.get(c, q),
    };
    let hits = (0..n)
        .filter(|&q| {
            let truth = score(q, q);
            let ahead = (0..n)
                .filter(|&c| c != q && (score(q, c) > truth || (score(q, c) == truth && c < q)))
                .count();
            ahead < k
        })
        .count();
    Ok(100.0 * hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub n: usize,
    pub image_r1: f64,
    pub image_r5: f64,
    pub image_r10: f64,
    pub sentence_r1: f64,
    pub sentence_r5: f64,
    pub sentence_r10: f64,
    pub rsum: f64,
    /// Where the similarity matrix was written, if it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<String>,
}

impl RetrievalReport {
    pub fn from_similarity(sim: &Tensor) -> Result<Self> {
        let r = |k, d| recall_at_k(sim, k, d);
        let (i1, i5, i10) = (
            r(1, Direction::ImageRetrieval)?,
            r(5, Direction::ImageRetrieval)?,
            r(10, Direction::ImageRetrieval)?,
        );
        let (s1, s5, s10) = (
            r(1, Direction::SentenceRetrieval)?,
            r(5, Direction::SentenceRetrieval)?,
            r(10, Direction::SentenceRetrieval)?,
        );
        Ok(RetrievalReport {
            n: sim.rows(),
            image_r1: i1,
            image_r5: i5,
            image_r10: i10,
            sentence_r1: s1,
            sentence_r5: s5,
            sentence_r10: s10,
            rsum: i1 + i5 + i10 + s1 + s5 + s10,
            similarity: None,
        })
    }

    pub fn recalls(&self) -> [f64; 6] {
        [
            self.image_r1,
            self.image_r5,
            self.image_r10,
            self.sentence_r1,
            self.sentence_r5,
            self.sentence_r10,
        ]
    }

    pub const CSV_HEADER: &'static str = "n,image_r1,image_r5,image_r10,sentence_r1,sentence_r5,sentence_r10,rsum";

    pub fn csv_row(&self) -> String {
        let r = self.recalls();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.n, r[0], r[1], r[2], r[3], r[4], r[5], self.rsum
        )
    }
}

/// Encodes every pair against a frozen unit snapshot, in parallel.
pub fn encode_pairs(
    cfg: &ModelConfig,
    params: &CkstnParams,
    units: &CommonUnits,
    pairs: &[(ItemInput, ItemInput)],
) -> Result<Vec<(Encoded, Encoded)>> {
    let params = params.detached();
    pairs
        .par_iter()
        .map(|(v, t)| {
            Ok((
                encode(cfg, &params, units, v, Modality::Visual)?,
                encode(cfg, &params, units, t, Modality::Textual)?,
            ))
        })
        .collect()
}

/// `N × N` image-by-sentence similarity of the adjusted features.
pub fn similarity_matrix(
    cfg: &ModelConfig,
    params: &CkstnParams,
    units: &CommonUnits,
    pairs: &[(ItemInput, ItemInput)],
) -> Result<Tensor> {
    let enc = encode_pairs(cfg, params, units, pairs)?;
    let y_vis: Vec<Tensor> = enc.iter().map(|(v, _)| v.y.clone()).collect();
    let y_tex: Vec<Tensor> = enc.iter().map(|(_, t)| t.y.clone()).collect();
    let vm: Vec<Vec<bool>> = pairs.iter().map(|(v, _)| v.mask.clone()).collect();
    let tm: Vec<Vec<bool>> = pairs.iter().map(|(_, t)| t.mask.clone()).collect();
    pair_similarity_matrix(&y_vis, &y_tex, &vm, &tm, cfg.pair_pooling)
}

pub fn evaluate(
    cfg: &ModelConfig,
    params: &CkstnParams,
    units: &CommonUnits,
    pairs: &[(ItemInput, ItemInput)],
) -> Result<RetrievalReport> {
    RetrievalReport::from_similarity(&similarity_matrix(cfg, params, units, pairs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dominant_diagonal() {
        let sim = Tensor::from_rows(&[[0.9, 0.3, 0.1], [0.2, 0.8, 0.3], [0.0, 0.1, 0.7]]);
        for d in [Direction::ImageRetrieval, Direction::SentenceRetrieval] {
            assert_eq!(recall_at_k(&sim, 1, d).unwrap(), 100.0);
        }
    }

    #[test]
    fn cutoff_at_least_n_is_full() {
        let sim = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(recall_at_k(&sim, 1, Direction::SentenceRetrieval).unwrap(), 0.0);
        assert_eq!(recall_at_k(&sim, 2, Direction::SentenceRetrieval).unwrap(), 100.0);
        assert_eq!(recall_at_k(&sim, 7, Direction::ImageRetrieval).unwrap(), 100.0);
    }

    #[test]
    fn ties_favour_lower_index() {
        let sim = Tensor::filled(3, 3, 0.5);
        // query 0 wins its tie; queries 1 and 2 lose to lower indices
        assert!((recall_at_k(&sim, 1, Direction::SentenceRetrieval).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert!((recall_at_k(&sim, 2, Direction::ImageRetrieval).unwrap() - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn directions_differ() {
        // image 0 prefers sentence 1, but sentence 0 still prefers image 0
        let sim = Tensor::from_rows(&[[0.5, 0.6], [0.1, 0.7]]);
        assert_eq!(recall_at_k(&sim, 1, Direction::SentenceRetrieval).unwrap(), 50.0);
        assert_eq!(recall_at_k(&sim, 1, Direction::ImageRetrieval).unwrap(), 100.0);
    }

    #[test]
    fn errors_and_report() {
        assert!(recall_at_k(&Tensor::zeros(0, 0), 1, Direction::ImageRetrieval).is_err());
        assert!(recall_at_k(&Tensor::identity(2), 0, Direction::ImageRetrieval).is_err());
        let r = RetrievalReport::from_similarity(&Tensor::identity(4)).unwrap();
        assert_eq!(r.rsum, 600.0);
        assert_eq!(r.recalls().iter().sum::<f64>(), r.rsum);
        assert_eq!(r.csv_row().split(',').count(), RetrievalReport::CSV_HEADER.split(',').count());
    }
}
