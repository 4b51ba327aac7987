use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::adam::{adam_step, OptimState};
use super::{lr_at, TrainConfig, UnitUpdate};
use crate::data::{make_batches, FeatureSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalReport};
use crate::losses::{batch_loss, BatchView, LossValues};
use crate::model::{
    encode, forward_pair, init_model, update_common_units, Checkpoint, CkstnParams, CommonUnits, Encoded, ItemInput,
    Modality, ModelConfig,
};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,lr,L_con,L_kl,L_all,R1_i2t,R1_t2i,Rsum";

/// One line of the metrics log. Row 0 holds the losses and recalls of the
/// initial model before any update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub l_con: f64,
    pub l_kl: f64,
    pub l_all: f64,
    /// Held-out R@1 with image queries.
    pub r1_i2t: f64,
    /// Held-out R@1 with sentence queries.
    pub r1_t2i: f64,
    pub rsum: f64,
}

impl MetricsRow {
    fn new(epoch: usize, lr: f64, losses: &LossValues, report: &RetrievalReport) -> Self {
        MetricsRow {
            epoch,
            lr,
            l_con: losses.l_con,
            l_kl: losses.l_kl,
            l_all: losses.l_all,
            r1_i2t: report.sentence_r1,
            r1_t2i: report.image_r1,
            rsum: report.rsum,
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.l_con, self.l_kl, self.l_all, self.r1_i2t, self.r1_t2i, self.rsum
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Checkpoint with the highest held-out Rsum (earliest on ties).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub metrics: Vec<MetricsRow>,
    /// Held-out report of the last checkpoint.
    pub report: RetrievalReport,
}

struct Trainer<'a> {
    model: &'a ModelConfig,
    cfg: &'a TrainConfig,
    params: CkstnParams,
    units: CommonUnits,
    optim: OptimState,
}

fn mean_of(ts: &[&Tensor]) -> Result<Tensor> {
    let first = ts[0];
    let mut acc = vec![0.0; first.len()];
    for t in ts {
        for (a, v) in acc.iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    let n = ts.len() as f64;
    Tensor::new(first.rows(), first.cols(), acc.into_iter().map(|a| a / n).collect())
}

impl Trainer<'_> {
    /// Forward and loss for one batch. With `learn`, also backpropagates,
    /// steps Adam and advances the units.
    fn batch(&mut self, pairs: &[&(ItemInput, ItemInput)], lr: f64, learn: bool) -> Result<LossValues> {
        let params = if learn { self.params.tracked() } else { self.params.detached() };
        let mut vis = Vec::with_capacity(pairs.len());
        let mut tex = Vec::with_capacity(pairs.len());
        let mut units = self.units.clone();
        for (v, t) in pairs {
            match self.cfg.unit_update {
                UnitUpdate::PerPair => {
                    let out = forward_pair(self.model, &params, &units, v, t)?;
                    units = out.units;
                    vis.push(out.visual);
                    tex.push(out.textual);
                }
                UnitUpdate::PerBatch => {
                    vis.push(encode(self.model, &params, &units, v, Modality::Visual)?);
                    tex.push(encode(self.model, &params, &units, t, Modality::Textual)?);
                }
            }
        }
        let col = |enc: &[Encoded], f: fn(&Encoded) -> &Tensor| enc.iter().map(|e| f(e).clone()).collect::<Vec<_>>();
        let (g_vis, g_tex) = (col(&vis, |e| &e.gate), col(&tex, |e| &e.gate));
        let (y_vis, y_tex) = (col(&vis, |e| &e.y), col(&tex, |e| &e.y));
        let vm: Vec<Vec<bool>> = pairs.iter().map(|(v, _)| v.mask.clone()).collect();
        let tm: Vec<Vec<bool>> = pairs.iter().map(|(_, t)| t.mask.clone()).collect();
        let view = BatchView {
            g_vis: &g_vis,
            g_tex: &g_tex,
            y_vis: &y_vis,
            y_tex: &y_tex,
            vis_masks: &vm,
            tex_masks: &tm,
        };
        let loss = batch_loss(view, &self.cfg.loss(), self.model.pair_pooling)?;
        if !loss.total.all_finite() || !loss.values.l_all.is_finite() {
            return Err(Error::numeric("train", format!("non-finite loss {:?}", loss.values)));
        }
        if learn {
            let grads = loss.total.backward()?;
            let named = params.named();
            let g: Vec<Tensor> = named.iter().map(|(_, p)| grads.get_or_zero(p)).collect();
            let next = adam_step(&named, &g, &mut self.optim, lr, &self.cfg.adam())?;
            self.params = self.params.with_tensors(&next)?;
            self.units = match self.cfg.unit_update {
                UnitUpdate::PerPair => units,
                UnitUpdate::PerBatch if self.model.use_cko => {
                    let gate = |enc: &[Encoded]| mean_of(&enc.iter().map(|e| &e.gate).collect::<Vec<_>>());
                    let attn = |enc: &[Encoded]| {
                        mean_of(&enc.iter().map(|e| e.s_o.as_ref().expect("common units enabled")).collect::<Vec<_>>())
                    };
                    update_common_units(&self.units, &gate(&vis)?, &gate(&tex)?, &attn(&vis)?, &attn(&tex)?)?
                }
                UnitUpdate::PerBatch => units,
            };
        }
        Ok(loss.values)
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.clone(),
            params: self.params.clone(),
            units: self.units.clone(),
        }
    }
}

fn mean_values(all: &[LossValues]) -> LossValues {
    let n = all.len().max(1) as f64;
    let sum = |f: fn(&LossValues) -> f64| all.iter().map(f).sum::<f64>() / n;
    LossValues {
        l_i2t: sum(|v| v.l_i2t),
        l_t2i: sum(|v| v.l_t2i),
        l_con: sum(|v| v.l_con),
        l_kl: sum(|v| v.l_kl),
        l_all: sum(|v| v.l_all),
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    batch: usize,
    pairs: &'a [usize],
    lr: f64,
    error: String,
    non_finite_params: Vec<String>,
    unit_step: u64,
}

/// Writes `nan_dump.json` describing the batch that failed. Epoch 0 is the
/// initial evaluation pass.
fn write_dump(dir: &Path, tr: &Trainer<'_>, epoch: usize, batch: usize, pairs: &[usize], lr: f64, err: &Error) -> Result<()> {
    let dump = NanDump {
        epoch,
        batch,
        pairs,
        lr,
        error: err.to_string(),
        non_finite_params: tr
            .params
            .named()
            .into_iter()
            .filter(|(_, t)| !t.all_finite())
            .map(|(n, _)| n)
            .collect(),
        unit_step: tr.units.step,
    };
    let path = dir.join("nan_dump.json");
    let json = serde_json::to_string_pretty(&dump).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &FeatureSet,
    test_set: &FeatureSet,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with(model, cfg, train_set, test_set, out_dir, |_| {})
}

/// Trains from a fresh seeded initialization. With `out_dir`, writes
/// `metrics.csv`, `checkpoint-final/`, `checkpoint-best/`, and on a
/// numeric failure `nan_dump.json`.
pub fn train_with(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &FeatureSet,
    test_set: &FeatureSet,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    let pairs = train_set.paired_inputs(model.tokens)?;
    let held_out = test_set.paired_inputs(model.tokens)?;
    if pairs.is_empty() || held_out.is_empty() {
        return Err(Error::Validation(format!(
            "training needs pairs in both splits, got {} and {}",
            pairs.len(),
            held_out.len()
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (params, units) = init_model(model, cfg.seed)?;
    let optim = OptimState::new(&params.named());
    let mut tr = Trainer {
        model,
        cfg,
        params,
        units,
        optim,
    };

    let initial_lr = if cfg.epochs > 0 { lr_at(0.0, cfg)? } else { cfg.lr_low };
    let mut initial = Vec::new();
    for (b, idx) in make_batches(pairs.len(), cfg.batch_size, cfg.seed, 0).iter().enumerate() {
        let batch: Vec<_> = idx.iter().map(|&i| &pairs[i]).collect();
        match tr.batch(&batch, initial_lr, false) {
            Ok(v) => initial.push(v),
            Err(err @ Error::Numeric { .. }) => {
                if let Some(dir) = out_dir {
                    write_dump(dir, &tr, 0, b, idx, initial_lr, &err)?;
                }
                return Err(err);
            }
            Err(err) => return Err(err),
        }
    }
    let mut report = evaluate(model, &tr.params, &tr.units, &held_out)?;
    let row = MetricsRow::new(0, initial_lr, &mean_values(&initial), &report);
    on_epoch(&row);
    let mut metrics = vec![row];
    let mut best = (tr.checkpoint(), 0, report.rsum);

    for epoch in 0..cfg.epochs {
        let batches = make_batches(pairs.len(), cfg.batch_size, cfg.seed, epoch as u64);
        let nb = batches.len() as f64;
        let mut values = Vec::with_capacity(batches.len());
        let mut lr = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            lr = lr_at(epoch as f64 + b as f64 / nb, cfg)?;
            let batch: Vec<_> = idx.iter().map(|&i| &pairs[i]).collect();
            match tr.batch(&batch, lr, true) {
                Ok(v) => values.push(v),
                Err(err @ Error::Numeric { .. }) => {
                    if let Some(dir) = out_dir {
                        write_dump(dir, &tr, epoch + 1, b, idx, lr, &err)?;
                    }
                    return Err(err);
                }
                Err(err) => return Err(err),
            }
        }
        report = evaluate(model, &tr.params, &tr.units, &held_out)?;
        let row = MetricsRow::new(epoch + 1, lr, &mean_values(&values), &report);
        on_epoch(&row);
        metrics.push(row);
        if report.rsum > best.2 {
            best = (tr.checkpoint(), epoch + 1, report.rsum);
        }
    }

    let last = tr.checkpoint();
    if let Some(dir) = out_dir {
        let mut csv = String::from(METRICS_HEADER);
        csv.push('\n');
        for r in &metrics {
            let _ = writeln!(csv, "{}", r.csv());
        }
        let path = dir.join("metrics.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        last.save(&dir.join("checkpoint-final"))?;
        best.0.save(&dir.join("checkpoint-best"))?;
    }
    Ok(TrainOutcome {
        last,
        best: best.0,
        best_epoch: best.1,
        metrics,
        report,
    })
}
