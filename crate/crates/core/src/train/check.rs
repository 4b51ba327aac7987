use crate::error::Result;
use crate::losses::{batch_loss, BatchView, LossConfig};
use crate::model::{encode, CkstnParams, CommonUnits, ItemInput, Modality, ModelConfig};
use crate::tensor::{grad_check, GradReport, Tensor};

/// Finite-difference check of the full training loss on one batch, for every
/// parameter of the model. The units are held fixed.
pub fn check_model_gradients(
    model: &ModelConfig,
    params: &CkstnParams,
    units: &CommonUnits,
    pairs: &[(ItemInput, ItemInput)],
    loss: &LossConfig,
    tol: f64,
) -> Result<Vec<GradReport>> {
    model.validate()?;
    loss.validate()?;
    let vis_masks: Vec<Vec<bool>> = pairs.iter().map(|(v, _)| v.mask.clone()).collect();
    let tex_masks: Vec<Vec<bool>> = pairs.iter().map(|(_, t)| t.mask.clone()).collect();
    let f = |ts: &[Tensor]| -> Result<Tensor> {
        let p = params.with_tensors(ts)?;
        let mut g_vis = Vec::with_capacity(pairs.len());
        let mut g_tex = Vec::with_capacity(pairs.len());
        let mut y_vis = Vec::with_capacity(pairs.len());
        let mut y_tex = Vec::with_capacity(pairs.len());
        for (v, t) in pairs {
            let ev = encode(model, &p, units, v, Modality::Visual)?;
            let et = encode(model, &p, units, t, Modality::Textual)?;
            g_vis.push(ev.gate);
            g_tex.push(et.gate);
            y_vis.push(ev.y);
            y_tex.push(et.y);
        }
        let view = BatchView {
            g_vis: &g_vis,
            g_tex: &g_tex,
            y_vis: &y_vis,
            y_tex: &y_tex,
            vis_masks: &vis_masks,
            tex_masks: &tex_masks,
        };
        Ok(batch_loss(view, loss, model.pair_pooling)?.total)
    };
    grad_check(f, &params.named(), tol)
}
