//! Contrastive and hardest-negative matching losses.
//!
//! All losses are built from differentiable tensor ops, so the returned
//! totals can be passed straight to [`Tensor::backward`]. Batch reductions
//! are means, which keeps loss scale independent of batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PairPooling;
use crate::tensor::Tensor;

fn valid_rows(t: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if mask.len() != t.rows() {
        return Err(Error::Dimension {
            op: "mask",
            lhs: t.shape(),
            rhs: (mask.len(), t.cols()),
        });
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&r| mask[r]).collect();
    if idx.is_empty() {
        return Err(Error::Validation("every row is masked out".into()));
    }
    t.select_rows(&idx)
}

/// Cosine between every valid region and every valid word, `dk × dl`.
/// Zero-norm rows give similarity 0.
pub fn region_word_cosine(y_vis: &Tensor, y_tex: &Tensor, vis_mask: &[bool], tex_mask: &[bool]) -> Result<Tensor> {
    if y_vis.cols() != y_tex.cols() {
        return Err(Error::Dimension {
            op: "region_word_cosine",
            lhs: y_vis.shape(),
            rhs: y_tex.shape(),
        });
    }
    let v = valid_rows(y_vis, vis_mask)?.normalize_rows();
    let t = valid_rows(y_tex, tex_mask)?.normalize_rows();
    v.matmul(&t.transpose())
}

/// Mean over words of the best region score, as a 1×1 tensor.
pub fn pool_pair_similarity(c: &Tensor) -> Result<Tensor> {
    if c.is_empty() {
        return Err(Error::Validation("empty region-word matrix".into()));
    }
    let (r, w) = c.shape();
    c.block_max_mean_pool(r, w, &vec![true; r], &vec![true; w])
}

fn check_batch(ys_vis: &[Tensor], ys_tex: &[Tensor], vis_masks: &[Vec<bool>], tex_masks: &[Vec<bool>]) -> Result<()> {
    let n = ys_vis.len();
    if n == 0 || ys_tex.len() != n || vis_masks.len() != n || tex_masks.len() != n {
        return Err(Error::Validation(format!(
            "batch needs matching non-empty lists, got {} visual, {} textual, {}/{} masks",
            n,
            ys_tex.len(),
            vis_masks.len(),
            tex_masks.len()
        )));
    }
    Ok(())
}

/// Item means over valid rows, one row per item.
fn masked_means(ys: &[Tensor], masks: &[Vec<bool>]) -> Result<Tensor> {
    let stacked = Tensor::concat_rows(ys)?;
    let total = stacked.rows();
    let mut avg = vec![0.0; ys.len() * total];
    let mut offset = 0;
    for (i, (y, mask)) in ys.iter().zip(masks).enumerate() {
        if mask.len() != y.rows() {
            return Err(Error::Dimension {
                op: "masked_means",
                lhs: y.shape(),
                rhs: (mask.len(), y.cols()),
            });
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::Validation(format!("item {i} has no valid rows")));
        }
        for (r, &m) in mask.iter().enumerate() {
            if m {
                avg[i * total + offset + r] = 1.0 / count as f64;
            }
        }
        offset += y.rows();
    }
    Tensor::new(ys.len(), total, avg)?.matmul(&stacked)
}

/// `N × N` image-by-sentence similarity for a batch of adjusted features.
pub fn pair_similarity_matrix(
    ys_vis: &[Tensor],
    ys_tex: &[Tensor],
    vis_masks: &[Vec<bool>],
    tex_masks: &[Vec<bool>],
    pooling: PairPooling,
) -> Result<Tensor> {
    check_batch(ys_vis, ys_tex, vis_masks, tex_masks)?;
    match pooling {
        PairPooling::MaxMean => {
            let (nv, nt) = (ys_vis[0].rows(), ys_tex[0].rows());
            if ys_vis.iter().any(|y| y.rows() != nv) || ys_tex.iter().any(|y| y.rows() != nt) {
                return Err(Error::Validation("items in a batch must share a token count".into()));
            }
            let v = Tensor::concat_rows(ys_vis)?.normalize_rows();
            let t = Tensor::concat_rows(ys_tex)?.normalize_rows();
            let c_all = v.matmul(&t.transpose())?;
            let rv: Vec<bool> = vis_masks.concat();
            let ct: Vec<bool> = tex_masks.concat();
            c_all.block_max_mean_pool(nv, nt, &rv, &ct)
        }
        PairPooling::Global => {
            let v = masked_means(ys_vis, vis_masks)?.normalize_rows();
            let t = masked_means(ys_tex, tex_masks)?.normalize_rows();
            v.matmul(&t.transpose())
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveTerms {
    pub i2t: Tensor,
    pub t2i: Tensor,
    pub con: Tensor,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// Symmetric InfoNCE on a precomputed `N × N` cosine matrix.
pub fn contrastive_from_similarity(sim: &Tensor, tau: f64) -> Result<ContrastiveTerms> {
    check_tau(tau)?;
    let logits = sim.scale(1.0 / tau);
    let i2t = logits.diag_cross_entropy()?;
    let t2i = logits.transpose().diag_cross_entropy()?;
    let con = i2t.add(&t2i)?;
    Ok(ContrastiveTerms { i2t, t2i, con })
}

/// Flattens each gate to one vector, L2-normalizes, and applies symmetric
/// InfoNCE at temperature `tau`.
pub fn contrastive_loss(g_vis: &[Tensor], g_tex: &[Tensor], tau: f64) -> Result<ContrastiveTerms> {
    check_tau(tau)?;
    if g_vis.is_empty() || g_vis.len() != g_tex.len() {
        return Err(Error::Validation(format!(
            "contrastive loss needs equal non-empty batches, got {} and {}",
            g_vis.len(),
            g_tex.len()
        )));
    }
    let flatten = |gs: &[Tensor]| -> Result<Tensor> {
        let rows = gs.iter().map(|g| g.reshape(1, g.len())).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::concat_rows(&rows)?.normalize_rows())
    };
    let v = flatten(g_vis)?;
    let t = flatten(g_tex)?;
    contrastive_from_similarity(&v.matmul(&t.transpose())?, tau)
}

#[derive(Debug, Clone)]
pub struct Matching {
    pub loss: Tensor,
    /// Set when the batch has fewer than two pairs, so no negatives exist.
    pub degenerate: bool,
}

/// Hardest-negative hinge in both directions, averaged over positives.
pub fn matching_loss(sim: &Tensor, gamma: f64) -> Result<Matching> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("margin must be non-negative, got {gamma}")));
    }
    if sim.rows() != sim.cols() {
        return Err(Error::Dimension {
            op: "matching_loss",
            lhs: sim.shape(),
            rhs: (sim.cols(), sim.rows()),
        });
    }
    if sim.rows() < 2 {
        return Ok(Matching {
            loss: Tensor::zeros(1, 1),
            degenerate: true,
        });
    }
    Ok(Matching {
        loss: sim.hardest_negative_hinge(gamma)?,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_con: f64,
    pub l_kl: f64,
    pub l_all: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub gamma: f64,
    /// When off, the contrastive term is still reported but not optimized.
    pub contrastive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            gamma: 0.2,
            contrastive: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("margin must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Differentiable batch objective plus its scalar breakdown.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Tensor,
    pub similarity: Tensor,
    pub values: LossValues,
    pub degenerate: bool,
}

/// Per-item tensors of one batch, in pair order.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub g_vis: &'a [Tensor],
    pub g_tex: &'a [Tensor],
    pub y_vis: &'a [Tensor],
    pub y_tex: &'a [Tensor],
    pub vis_masks: &'a [Vec<bool>],
    pub tex_masks: &'a [Vec<bool>],
}

pub fn batch_loss(batch: BatchView<'_>, cfg: &LossConfig, pooling: PairPooling) -> Result<BatchLoss> {
    let con = contrastive_loss(batch.g_vis, batch.g_tex, cfg.tau)?;
    let similarity = pair_similarity_matrix(batch.y_vis, batch.y_tex, batch.vis_masks, batch.tex_masks, pooling)?;
    let m = matching_loss(&similarity, cfg.gamma)?;
    let total = if cfg.contrastive {
        con.con.add(&m.loss)?
    } else {
        m.loss.clone()
    };
    let l_con = con.con.scalar();
    let l_kl = m.loss.scalar();
    let values = LossValues {
        l_i2t: con.i2t.scalar(),
        l_t2i: con.t2i.scalar(),
        l_con,
        l_kl,
        l_all: l_con + l_kl,
    };
    Ok(BatchLoss {
        total,
        similarity,
        values,
        degenerate: m.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let a = Tensor::from_rows(&[[1.0, 2.0]]);
        let c = region_word_cosine(&a, &a, &[true], &[true]).unwrap();
        assert!((c.scalar() - 1.0).abs() < 1e-15);
        let b = Tensor::from_rows(&[[-2.0, 1.0]]);
        assert!(region_word_cosine(&a, &b, &[true], &[true]).unwrap().scalar().abs() < 1e-15);
        let neg = a.scale(-3.0);
        assert!((region_word_cosine(&a, &neg, &[true], &[true]).unwrap().scalar() + 1.0).abs() < 1e-15);
        let z = Tensor::zeros(1, 2);
        assert_eq!(region_word_cosine(&a, &z, &[true], &[true]).unwrap().scalar(), 0.0);
    }

    #[test]
    fn masks_drop_rows() {
        let v = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        let t = Tensor::from_rows(&[[1.0, 0.0], [5.0, 5.0]]);
        let c = region_word_cosine(&v, &t, &[true, true, false], &[true, false]).unwrap();
        assert_eq!(c.shape(), (2, 1));
    }

    #[test]
    fn pooling_example() {
        let c = Tensor::from_rows(&[[0.2, 0.8], [0.6, 0.4]]);
        assert!((pool_pair_similarity(&c).unwrap().scalar() - 0.7).abs() < 1e-15);
        assert!(pool_pair_similarity(&Tensor::zeros(0, 0)).is_err());
    }

    #[test]
    fn contrastive_cases() {
        let one = contrastive_from_similarity(&Tensor::from_rows(&[[0.3]]), 0.07).unwrap();
        assert_eq!(one.con.scalar(), 0.0);
        let eye = contrastive_from_similarity(&Tensor::identity(2), 1.0).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((eye.i2t.scalar() - expected).abs() < 1e-12);
        assert!((eye.t2i.scalar() - expected).abs() < 1e-12);
        assert!(contrastive_from_similarity(&eye.con, 0.0).is_err());
    }

    #[test]
    fn matching_cases() {
        let sim = Tensor::from_rows(&[[0.9, 0.1], [0.2, 0.8]]);
        assert_eq!(matching_loss(&sim, 0.2).unwrap().loss.scalar(), 0.0);
        let sim = Tensor::from_rows(&[[0.5, 0.6], [0.4, 0.7]]);
        assert!((matching_loss(&sim, 0.2).unwrap().loss.scalar() - 0.25).abs() < 1e-12);
        let m = matching_loss(&Tensor::from_rows(&[[0.5]]), 0.2).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.loss.scalar(), 0.0);
    }

    #[test]
    fn global_pooling_uses_masked_means() {
        let v = vec![Tensor::from_rows(&[[1.0, 0.0], [9.0, 9.0]])];
        let t = vec![Tensor::from_rows(&[[2.0, 0.0], [0.0, 0.0]])];
        let s = pair_similarity_matrix(&v, &t, &[vec![true, false]], &[vec![true, true]], PairPooling::Global).unwrap();
        assert!((s.scalar() - 1.0).abs() < 1e-12);
    }
}
