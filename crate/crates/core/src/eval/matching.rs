use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The best-associated region for one word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub word: String,
    pub region_id: String,
    pub cosine: f64,
    /// The word vector, or every region vector, had zero norm; `cosine` is 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_norm: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// For each word row of `y_tex`, the region row of `y_vis` with the highest
/// cosine. Ties go to the lower region index.
pub fn export_matching(y_vis: &Tensor, y_tex: &Tensor, vocab: &[String], region_ids: &[String]) -> Result<Vec<MatchRow>> {
    if vocab.len() != y_tex.rows() || region_ids.len() != y_vis.rows() || y_vis.cols() != y_tex.cols() {
        return Err(Error::Validation(format!(
            "{} words for {:?} text features, {} region ids for {:?} visual features",
            vocab.len(),
            y_tex.shape(),
            region_ids.len(),
            y_vis.shape()
        )));
    }
    if y_vis.rows() == 0 {
        return Err(Error::Validation("no regions to match".into()));
    }
    let region_norms: Vec<f64> = (0..y_vis.rows()).map(|r| norm(y_vis.row(r))).collect();
    Ok((0..y_tex.rows())
        .map(|w| {
            let word = y_tex.row(w);
            let wn = norm(word);
            let cos = |r: usize| {
                if wn == 0.0 || region_norms[r] == 0.0 {
                    0.0
                } else {
                    word.iter().zip(y_vis.row(r)).map(|(a, b)| a * b).sum::<f64>() / (wn * region_norms[r])
                }
            };
            let mut best = 0;
            let mut best_cos = cos(0);
            for r in 1..y_vis.rows() {
                let c = cos(r);
                if c > best_cos {
                    best = r;
                    best_cos = c;
                }
            }
            MatchRow {
                word: vocab[w].clone(),
                region_id: region_ids[best].clone(),
                cosine: best_cos,
                zero_norm: wn == 0.0 || region_norms.iter().all(|n| *n == 0.0),
            }
        })
        .collect())
}
