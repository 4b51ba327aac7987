//! Whole-pipeline forward passes.

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, SeeInput};
use super::layers::{adjust_features, cko_attend, fuse_geometry, lightweight_layer, memory_gate, see_forward};
use super::params::{CkstnParams, PipelineParams};
use super::units::{update_common_units, CommonUnits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

/// One item padded or truncated to the model's token count.
#[derive(Debug, Clone)]
pub struct ItemInput {
    pub features: Tensor,
    pub boxes: Option<Tensor>,
    /// `true` for real tokens, `false` for padding rows.
    pub mask: Vec<bool>,
}

impl ItemInput {
    /// Pads with zero rows (and zero boxes) or truncates to `n` tokens.
    pub fn fit(features: &Tensor, boxes: Option<&Tensor>, n: usize) -> Result<Self> {
        if let Some(b) = boxes {
            if b.rows() != features.rows() {
                return Err(Error::Validation(format!(
                    "{} boxes for {} tokens",
                    b.rows(),
                    features.rows()
                )));
            }
        }
        let keep = features.rows().min(n);
        if keep == 0 {
            return Err(Error::Validation("item has no tokens".into()));
        }
        let pad = |t: &Tensor| {
            Tensor::from_fn(n, t.cols(), |r, c| if r < keep { t.get(r, c) } else { 0.0 })
        };
        Ok(ItemInput {
            features: pad(features),
            boxes: boxes.map(pad),
            mask: (0..n).map(|r| r < keep).collect(),
        })
    }

    pub fn tokens(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Everything one pipeline produces for one item.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Transformer output `Ê`.
    pub e_hat: Tensor,
    /// Style embedding `M_c`.
    pub style: Tensor,
    /// Common-unit attention `S_o`; absent without common knowledge optimization.
    pub s_o: Option<Tensor>,
    /// Memory gate `G`, or the style embedding when the gate is disabled.
    pub gate: Tensor,
    /// Adjusted features `Y`.
    pub y: Tensor,
}

fn pipeline<'a>(params: &'a CkstnParams, modality: Modality) -> &'a PipelineParams {
    match modality {
        Modality::Visual => &params.visual,
        Modality::Textual => &params.textual,
    }
}

/// Runs one modality's pipeline against a frozen snapshot of the common units.
pub fn encode(
    cfg: &ModelConfig,
    params: &CkstnParams,
    units: &CommonUnits,
    item: &ItemInput,
    modality: Modality,
) -> Result<Encoded> {
    let p = pipeline(params, modality);
    let expected_in = match modality {
        Modality::Visual => cfg.d_in,
        Modality::Textual => cfg.d_in_text(),
    };
    if item.features.shape() != (cfg.tokens, expected_in) {
        return Err(Error::Dimension {
            op: "encode",
            lhs: item.features.shape(),
            rhs: (cfg.tokens, expected_in),
        });
    }

    let x = match (modality, &item.boxes) {
        (Modality::Visual, Some(boxes)) => fuse_geometry(&item.features, boxes, &params.shared.geometry)?,
        _ => item.features.clone(),
    };
    let projected = match &p.input_proj {
        Some(proj) => proj.forward(&x)?,
        None => x.clone(),
    };

    let mut h = x;
    for (i, layer) in p.layers.iter().enumerate() {
        let residual = (i == 0 && p.input_proj.is_some()).then_some(&projected);
        h = lightweight_layer(&h, layer, residual, cfg.attention_normalizer)?;
    }
    let e_hat = h;

    let style = if p.see.is_empty() {
        e_hat.clone()
    } else {
        let src = match cfg.see_input {
            SeeInput::Transformer => &e_hat,
            SeeInput::Extractor => &projected,
        };
        see_forward(src, &p.see)?.style
    };

    let shared = &params.shared;
    let (s_o, gate) = if cfg.use_cko {
        let s_o = cko_attend(&style, &units.units, cfg.gate_normalizer)?;
        let g = memory_gate(&s_o, &shared.w_o, &shared.b_o, cfg.gate_clamp)?;
        (Some(s_o), g)
    } else {
        (None, style.clone())
    };
    let y = adjust_features(&gate, &e_hat, &shared.w_g, &shared.gate_proj, cfg.gate_normalizer)?;
    Ok(Encoded {
        e_hat,
        style,
        s_o,
        gate,
        y,
    })
}

#[derive(Debug, Clone)]
pub struct PairOutput {
    pub visual: Encoded,
    pub textual: Encoded,
    /// Units after this pair's sequential update (unchanged without common
    /// knowledge optimization).
    pub units: CommonUnits,
}

/// Encodes a visual-textual pair with the same unit snapshot, then advances
/// the units once using both memory gates.
pub fn forward_pair(
    cfg: &ModelConfig,
    params: &CkstnParams,
    units: &CommonUnits,
    visual: &ItemInput,
    textual: &ItemInput,
) -> Result<PairOutput> {
    let v = encode(cfg, params, units, visual, Modality::Visual)?;
    let t = encode(cfg, params, units, textual, Modality::Textual)?;
    let units = match (&v.s_o, &t.s_o) {
        (Some(sv), Some(st)) => update_common_units(units, &v.gate, &t.gate, sv, st)?,
        _ => units.clone(),
    };
    Ok(PairOutput {
        visual: v,
        textual: t,
        units,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::init_model;

    fn random_item(rng: &mut ChaCha8Rng, n: usize, d: usize, boxes: bool) -> ItemInput {
        let f = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let b = boxes.then(|| {
            Tensor::from_fn(n, 5, |_, c| match c {
                0 | 1 => 0.2,
                2 | 3 => 0.6,
                _ => 0.16,
            })
        });
        ItemInput::fit(&f, b.as_ref(), n).unwrap()
    }

    #[test]
    fn toy_shapes() {
        let cfg = ModelConfig::toy();
        let (params, units) = init_model(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_item(&mut rng, 8, 16, true);
        let t = random_item(&mut rng, 8, 16, false);
        let out = forward_pair(&cfg, &params, &units, &v, &t).unwrap();
        assert_eq!(out.visual.y.shape(), (8, 32));
        assert_eq!(out.textual.y.shape(), (8, 32));
        assert_eq!(out.visual.gate.shape(), (8, 8));
        assert_eq!(out.textual.gate.shape(), (8, 8));
        assert_eq!(out.units.step, 1);
    }

    #[test]
    fn deterministic_with_frozen_units() {
        let cfg = ModelConfig::toy();
        let (params, units) = init_model(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_item(&mut rng, 8, 16, true);
        let t = random_item(&mut rng, 8, 16, false);
        let a = forward_pair(&cfg, &params, &units, &v, &t).unwrap();
        let b = forward_pair(&cfg, &params, &units, &v, &t).unwrap();
        assert_eq!(a.visual.y, b.visual.y);
        assert_eq!(a.textual.y, b.textual.y);
        assert_eq!(a.units, b.units);
    }

    #[test]
    fn padding_and_truncation() {
        let f = Tensor::filled(3, 2, 1.0);
        let item = ItemInput::fit(&f, None, 5).unwrap();
        assert_eq!(item.features.shape(), (5, 2));
        assert_eq!(item.mask, vec![true, true, true, false, false]);
        assert_eq!(item.features.row(4), &[0.0, 0.0]);
        let item = ItemInput::fit(&f, None, 2).unwrap();
        assert_eq!(item.tokens(), 2);
        assert!(ItemInput::fit(&Tensor::zeros(0, 2), None, 2).is_err());
    }

    #[test]
    fn without_cko_units_do_not_move() {
        let cfg = ModelConfig {
            use_cko: false,
            ..ModelConfig::toy()
        };
        let (params, units) = init_model(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_item(&mut rng, 8, 16, true);
        let t = random_item(&mut rng, 8, 16, false);
        let out = forward_pair(&cfg, &params, &units, &v, &t).unwrap();
        assert_eq!(out.units, units);
        assert!(out.visual.s_o.is_none());
        assert_eq!(out.visual.gate, out.visual.style);
    }

    #[test]
    fn see_bypass_and_extractor_input() {
        for cfg in [
            ModelConfig {
                see_layers: 0,
                ..ModelConfig::toy()
            },
            ModelConfig {
                see_input: SeeInput::Extractor,
                ..ModelConfig::toy()
            },
        ] {
            let (params, units) = init_model(&cfg, 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let v = random_item(&mut rng, 8, 16, true);
            let t = random_item(&mut rng, 8, 16, false);
            let out = forward_pair(&cfg, &params, &units, &v, &t).unwrap();
            assert_eq!(out.visual.gate.shape(), (8, cfg.d_m()));
            assert!(out.visual.y.all_finite());
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let cfg = ModelConfig::toy();
        let (params, units) = init_model(&cfg, 3).unwrap();
        let item = ItemInput::fit(&Tensor::zeros(8, 15), None, 8).unwrap();
        let err = encode(&cfg, &params, &units, &item, Modality::Textual).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "encode", .. }));
    }
}
