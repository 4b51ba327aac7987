//! The per-item building blocks of the encoder pipelines.

use super::config::{AttentionNormalizer, GateNormalizer};
use super::params::{LightweightLayerParams, Linear, SeeLayerParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn checked(t: Tensor, step: &str) -> Result<Tensor> {
    t.ensure_finite(step)?;
    Ok(t)
}

/// Checks `(x1, y1, x2, y2, area)` rows: every value in `[0, 1]`, `x2 ≥ x1`, `y2 ≥ y1`.
pub fn validate_boxes(boxes: &Tensor) -> Result<()> {
    if boxes.cols() != 5 {
        return Err(Error::Validation(format!(
            "boxes must have 5 columns (x1, y1, x2, y2, area), got {}",
            boxes.cols()
        )));
    }
    for r in 0..boxes.rows() {
        let b = boxes.row(r);
        if let Some(v) = b.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("box {r} has coordinate {v} outside [0, 1]")));
        }
        if b[2] < b[0] || b[3] < b[1] {
            return Err(Error::Validation(format!("box {r} has x2 < x1 or y2 < y1: {b:?}")));
        }
    }
    Ok(())
}

/// `features + FC(boxes)`: region geometry folded into visual features.
pub fn fuse_geometry(features: &Tensor, boxes: &Tensor, fc: &Linear) -> Result<Tensor> {
    validate_boxes(boxes)?;
    if boxes.rows() != features.rows() {
        return Err(Error::Dimension {
            op: "fuse_geometry",
            lhs: features.shape(),
            rhs: boxes.shape(),
        });
    }
    checked(features.add(&fc.forward(boxes)?)?, "fuse_geometry")
}

/// Unnormalized or row-softmaxed attention scores `(E T_Q)(E T_K)ᵀ / √d_e`.
pub fn attention_scores(e: &Tensor, p: &LightweightLayerParams, norm: AttentionNormalizer) -> Result<Tensor> {
    let d_e = p.t_q.cols() as f64;
    let q = e.matmul(&p.t_q)?;
    let k = e.matmul(&p.t_k)?;
    let scores = q.matmul(&k.transpose())?.scale(1.0 / d_e.sqrt());
    match norm {
        AttentionNormalizer::Literal => Ok(scores),
        AttentionNormalizer::Softmax => scores.softmax_rows(),
    }
}

/// One lightweight transformer layer.
///
/// Attention output `A(E)·(E T_V)`, then `P = Add&Norm(attn, residual)` and
/// `Add&Norm(FFN(P), P)`. `residual` must be given when the layer changes
/// width (its input is not `d_e` wide); otherwise `E` itself is used.
pub fn lightweight_layer(
    e: &Tensor,
    p: &LightweightLayerParams,
    residual: Option<&Tensor>,
    norm: AttentionNormalizer,
) -> Result<Tensor> {
    if e.cols() != p.input_dim() {
        return Err(Error::Dimension {
            op: "lightweight_layer",
            lhs: e.shape(),
            rhs: p.t_q.shape(),
        });
    }
    let residual = match residual {
        Some(r) => r.clone(),
        None if e.cols() == p.t_q.cols() => e.clone(),
        None => {
            return Err(Error::Config(format!(
                "layer maps width {} to {} and needs a projected residual",
                e.cols(),
                p.t_q.cols()
            )))
        }
    };
    let a = checked(attention_scores(e, p, norm)?, "lightweight_layer.scores")?;
    let attended = checked(a.matmul(&e.matmul(&p.t_v)?)?, "lightweight_layer.attention")?;
    let mid = checked(p.norm_attn.add_norm(&attended, &residual)?, "lightweight_layer.add_norm_1")?;
    let ff = checked(p.ffn.forward(&mid)?, "lightweight_layer.ffn")?;
    checked(p.norm_ffn.add_norm(&ff, &mid)?, "lightweight_layer.add_norm_2")
}

/// Style embedding extractor output: the final embedding and every step.
#[derive(Debug, Clone)]
pub struct SeeOutput {
    pub style: Tensor,
    /// `M_1 .. M_m`.
    pub steps: Vec<Tensor>,
}

/// Recurrence over `m` column chunks of `e`:
/// `R_i = concat_shuffle(chunk_i(e), M_{i-1})`, `M_i = MLP_i(R_i)`, `M_0 = 0`.
pub fn see_forward(e: &Tensor, layers: &[SeeLayerParams]) -> Result<SeeOutput> {
    let m = layers.len();
    if m == 0 {
        return Err(Error::Config("style extractor needs at least one layer".into()));
    }
    if e.cols() % m != 0 {
        return Err(Error::Config(format!("{m} extractor layers do not divide width {}", e.cols())));
    }
    let mut prev = Tensor::zeros(e.rows(), e.cols() / m);
    let mut steps = Vec::with_capacity(m);
    for (i, layer) in layers.iter().enumerate() {
        let r = e.clip_chunk(i + 1, m)?.concat_shuffle(&prev)?;
        prev = checked(layer.forward(&r)?, "see_forward")?;
        steps.push(prev.clone());
    }
    Ok(SeeOutput { style: prev, steps })
}

fn gate(x: &Tensor, g: GateNormalizer) -> Result<Tensor> {
    match g {
        GateNormalizer::Logistic => Ok(x.sigmoid()),
        GateNormalizer::SoftmaxRows => x.softmax_rows(),
    }
}

/// Common-unit attention `S_o = Σ_i g(S_i · M_cᵀ) · M_c`.
pub fn cko_attend(style: &Tensor, units: &[Tensor], g: GateNormalizer) -> Result<Tensor> {
    let (first, rest) = units
        .split_first()
        .ok_or_else(|| Error::Config("common knowledge attention needs at least one unit".into()))?;
    let st = style.transpose();
    let term = |s: &Tensor| -> Result<Tensor> {
        s.same_shape(style, "cko_attend")?;
        gate(&s.matmul(&st)?, g)?.matmul(style)
    };
    let mut acc = term(first)?;
    for s in rest {
        acc = acc.add(&term(s)?)?;
    }
    checked(acc, "cko_attend")
}

/// `G = ReLU(W_o·S_o + b_o)`, optionally capped at 1.
pub fn memory_gate(s_o: &Tensor, w_o: &Tensor, b_o: &Tensor, clamp: bool) -> Result<Tensor> {
    let g = w_o.matmul(s_o)?.add_row(b_o)?.relu();
    let g = if clamp { g.clamp_max(1.0) } else { g };
    checked(g, "memory_gate")
}

/// `Y = g(W_g·G·P) ⊙ Ê`.
pub fn adjust_features(
    gate_in: &Tensor,
    e_hat: &Tensor,
    w_g: &Tensor,
    proj: &Tensor,
    g: GateNormalizer,
) -> Result<Tensor> {
    let logits = w_g.matmul(gate_in)?.matmul(proj)?;
    checked(gate(&logits, g)?.mul(e_hat)?, "adjust_features")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::params::glorot;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_geometry_weights_pass_features_through() {
        let x = Tensor::from_fn(3, 4, |r, c| (r + c) as f64);
        let fc = Linear {
            weight: Tensor::zeros(5, 4),
            bias: Tensor::zeros(1, 4),
        };
        let boxes = Tensor::from_rows(&[[0.1, 0.1, 0.5, 0.5, 0.16]; 3]);
        assert_eq!(fuse_geometry(&x, &boxes, &fc).unwrap(), x);
    }

    #[test]
    fn degenerate_box_is_accepted() {
        let mut rng = rng();
        let fc = Linear::init(&mut rng, 5, 4);
        let boxes = Tensor::from_rows(&[[0.3, 0.3, 0.3, 0.3, 0.0]]);
        let y = fuse_geometry(&Tensor::filled(1, 4, 1.0), &boxes, &fc).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn invalid_boxes_rejected() {
        let fc = Linear::init(&mut rng(), 5, 2);
        let x = Tensor::zeros(1, 2);
        for bad in [[1.2, 0.0, 1.0, 1.0, 0.5], [0.5, 0.0, 0.4, 1.0, 0.5], [0.0, 0.6, 1.0, 0.5, 0.1]] {
            let err = fuse_geometry(&x, &Tensor::from_rows(&[bad]), &fc).unwrap_err();
            assert!(matches!(err, Error::Validation(_)), "{bad:?}");
        }
    }

    #[test]
    fn zero_query_key_gives_zero_attention() {
        let mut rng = rng();
        let mut p = LightweightLayerParams::init(&mut rng, 8, 8, 2);
        p.t_q = Tensor::zeros(8, 8);
        p.t_k = Tensor::zeros(8, 8);
        let e = glorot(&mut rng, 3, 8);
        let out = lightweight_layer(&e, &p, None, AttentionNormalizer::Literal).unwrap();
        let mid = p.norm_attn.add_norm(&Tensor::zeros(3, 8), &e).unwrap();
        let expect = p.norm_ffn.add_norm(&p.ffn.forward(&mid).unwrap(), &mid).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn layer_output_shape_and_width_errors() {
        let mut rng = rng();
        let p = LightweightLayerParams::init(&mut rng, 6, 8, 2);
        let e = glorot(&mut rng, 5, 6);
        assert!(matches!(
            lightweight_layer(&e, &p, None, AttentionNormalizer::Softmax),
            Err(Error::Config(_))
        ));
        let res = glorot(&mut rng, 5, 8);
        let out = lightweight_layer(&e, &p, Some(&res), AttentionNormalizer::Softmax).unwrap();
        assert_eq!(out.shape(), (5, 8));
        assert!(matches!(
            lightweight_layer(&res, &p, None, AttentionNormalizer::Softmax),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_attention_rows_sum_to_one() {
        let mut rng = rng();
        let p = LightweightLayerParams::init(&mut rng, 8, 8, 2);
        let e = glorot(&mut rng, 6, 8).scale(3.0);
        let a = attention_scores(&e, &p, AttentionNormalizer::Softmax).unwrap();
        for r in 0..6 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_see_layer_interleaves_zero_seed() {
        // With m = 1 the shuffled input has zeros in every odd column.
        let e = Tensor::from_fn(2, 4, |r, c| 1.0 + (r * 4 + c) as f64);
        let r = e.clip_chunk(1, 1).unwrap().concat_shuffle(&Tensor::zeros(2, 4)).unwrap();
        for row in 0..2 {
            for j in 0..4 {
                assert_eq!(r.get(row, 2 * j + 1), 0.0);
                assert_eq!(r.get(row, 2 * j), e.get(row, j));
            }
        }
        let layer = SeeLayerParams::init(&mut rng(), 4);
        let out = see_forward(&e, std::slice::from_ref(&layer)).unwrap();
        assert_eq!(out.style, layer.forward(&r).unwrap());
        assert_eq!(out.steps.len(), 1);
    }

    #[test]
    fn zero_mlp_gives_zero_style() {
        let mut layers: Vec<SeeLayerParams> = (0..4).map(|_| SeeLayerParams::init(&mut rng(), 2)).collect();
        for l in &mut layers {
            for lin in &mut l.mlp {
                lin.weight = Tensor::zeros(lin.weight.rows(), lin.weight.cols());
            }
        }
        let e = Tensor::from_fn(3, 8, |r, c| (r * c) as f64 - 2.0);
        let out = see_forward(&e, &layers).unwrap();
        for m in &out.steps {
            assert!(m.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn cko_closed_forms() {
        // k = 1, n = 1, zero score → 0.5 · M_c
        let style = Tensor::from_rows(&[[2.0, -4.0]]);
        let unit = Tensor::from_rows(&[[2.0, 1.0]]);
        let s_o = cko_attend(&style, &[unit], GateNormalizer::Logistic).unwrap();
        assert_eq!(s_o.row(0), &[1.0, -2.0]);

        let units = vec![glorot(&mut rng(), 3, 2); 2];
        let zero = cko_attend(&Tensor::zeros(3, 2), &units, GateNormalizer::Logistic).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));

        assert!(matches!(
            cko_attend(&style, &[], GateNormalizer::Logistic),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn memory_gate_cases() {
        let s_o = Tensor::from_rows(&[[0.5, 2.0], [0.0, 3.0]]);
        let b = Tensor::zeros(1, 2);
        assert_eq!(memory_gate(&s_o, &Tensor::identity(2), &b, false).unwrap(), s_o);
        let neg = Tensor::identity(2).scale(-1.0);
        let g = memory_gate(&s_o.add(&Tensor::filled(2, 2, 0.1)).unwrap(), &neg, &b, false).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
        let g = memory_gate(&s_o.scale(10.0), &Tensor::identity(2), &b, true).unwrap();
        assert!(g.data().iter().all(|v| *v <= 1.0));
        assert_eq!(g.get(0, 0), 1.0);
    }

    #[test]
    fn adjust_feature_cases() {
        let e_hat = Tensor::from_fn(2, 4, |r, c| (r + 2 * c) as f64 - 3.0);
        let w_g = Tensor::zeros(2, 2);
        let proj = Tensor::filled(3, 4, 0.3);
        let g = Tensor::filled(2, 3, 0.7);
        let y = adjust_features(&g, &e_hat, &w_g, &proj, GateNormalizer::Logistic).unwrap();
        assert_eq!(y, e_hat.scale(0.5));
        let y = adjust_features(
            &g,
            &Tensor::zeros(2, 4),
            &Tensor::identity(2),
            &proj,
            GateNormalizer::Logistic,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }
}
