use std::fs;
use std::path::{Path, PathBuf};

use ckstn::data::{synth_generate, write_features, CorpusDescriptor, FeatureSet, SynthSpec};
use ckstn::eval::{encode_pairs, export_matching, run_ablation, similarity_matrix, RetrievalReport};
use ckstn::model::{init_model, param_count, Checkpoint, ModelConfig};
use ckstn::train::{check_model_gradients, train};
use ckstn::{Error, Result};
use serde_json::{json, Value};

use crate::config::RunConfig;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn synthetic_split(cfg: &RunConfig) -> Result<(FeatureSet, FeatureSet)> {
    let set = synth_generate(&cfg.data.synth)?;
    let n = cfg.data.train_pairs;
    if n == 0 || n >= set.pairing.len() {
        return Err(Error::Config(format!(
            "data.train_pairs must leave pairs on both sides of {} synthetic pairs, got {n}",
            set.pairing.len()
        )));
    }
    Ok(set.split(n))
}

/// Train and held-out splits: the configured descriptor, or a fresh
/// synthetic corpus.
fn corpus(cfg: &RunConfig) -> Result<(FeatureSet, FeatureSet)> {
    match &cfg.data.corpus {
        Some(path) => CorpusDescriptor::load(path)?.read(),
        None => synthetic_split(cfg),
    }
}

fn checkpoint_path(cfg: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.output.join("checkpoint-final"))
}

pub fn gen_data(cfg: &RunConfig) -> Result<Value> {
    let (tr, te) = synthetic_split(cfg)?;
    let out = &cfg.output;
    write_features(&tr, &out.join("train"))?;
    write_features(&te, &out.join("test"))?;
    let descriptor = out.join("corpus.json");
    CorpusDescriptor {
        train: PathBuf::from("train"),
        test: PathBuf::from("test"),
    }
    .save(&descriptor)?;
    Ok(json!({
        "corpus": descriptor,
        "train_pairs": tr.pairing.len(),
        "test_pairs": te.pairing.len(),
    }))
}

pub fn train_cmd(cfg: &RunConfig) -> Result<Value> {
    let (tr, te) = corpus(cfg)?;
    let out = train(&cfg.model, &cfg.train, &tr, &te, Some(&cfg.output))?;
    let first = &out.metrics[0];
    let last = out.metrics.last().expect("row 0 always present");
    Ok(json!({
        "epochs": cfg.train.epochs,
        "seed": cfg.train.seed,
        "best_epoch": out.best_epoch,
        "l_all_initial": first.l_all,
        "l_all_final": last.l_all,
        "report": out.report,
        "output": cfg.output,
    }))
}

pub fn eval(cfg: &RunConfig) -> Result<Value> {
    let ckpt = Checkpoint::load(&checkpoint_path(cfg, &cfg.eval.checkpoint))?;
    let (_, te) = corpus(cfg)?;
    let pairs = te.paired_inputs(ckpt.config.tokens)?;
    let sim = similarity_matrix(&ckpt.config, &ckpt.params, &ckpt.units, &pairs)?;
    fs::create_dir_all(&cfg.output).map_err(io_err(&cfg.output))?;
    let sim_path = cfg.output.join("similarity.csv");
    let mut sim_csv = String::new();
    for r in 0..sim.rows() {
        let row: Vec<String> = sim.row(r).iter().map(f64::to_string).collect();
        sim_csv.push_str(&row.join(","));
        sim_csv.push('\n');
    }
    write_text(&sim_path, &sim_csv)?;
    let mut report = RetrievalReport::from_similarity(&sim)?;
    report.similarity = Some(sim_path.display().to_string());
    write_text(&cfg.output.join("eval_report.json"), &to_json(&report)?)?;
    write_text(
        &cfg.output.join("eval_report.csv"),
        &format!("{}\n{}\n", RetrievalReport::CSV_HEADER, report.csv_row()),
    )?;
    serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))
}

pub fn grad_check(cfg: &RunConfig) -> Result<Value> {
    let gc = &cfg.grad_check;
    if gc.seeds.is_empty() || gc.batch == 0 || !(gc.tol > 0.0) {
        return Err(Error::Config("grad_check needs seeds, batch >= 1 and tol > 0".into()));
    }
    let model = &cfg.model;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    let mut failing = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &gc.seeds {
        let spec = SynthSpec {
            pairs: gc.batch,
            noise: gc.noise,
            tokens: model.tokens,
            d_vis: model.d_in,
            d_tex: model.d_in_text(),
            seed: seed.wrapping_add(1000),
            ..SynthSpec::default()
        };
        let pairs = synth_generate(&spec)?.paired_inputs(model.tokens)?;
        let (params, units) = init_model(model, seed)?;
        let reports = check_model_gradients(model, &params, &units, &pairs, &cfg.train.loss(), gc.tol)?;
        let seed_worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        worst = worst.max(seed_worst);
        checked += reports.iter().map(|r| r.checked).sum::<usize>();
        skipped += reports.iter().map(|r| r.skipped_kinks).sum::<usize>();
        failing.extend(reports.iter().filter(|r| !r.pass).map(|r| format!("seed {seed}: {}", r.op)));
        per_seed.push(json!({ "seed": seed, "max_rel_error": seed_worst }));
        fs::create_dir_all(&cfg.output).map_err(io_err(&cfg.output))?;
        write_text(&cfg.output.join(format!("grad_check_seed{seed}.json")), &to_json(&reports)?)?;
    }
    let result = json!({
        "max_rel_error": worst,
        "tol": gc.tol,
        "pass": failing.is_empty(),
        "checked": checked,
        "skipped_kinks": skipped,
        "seeds": per_seed,
    });
    if failing.is_empty() {
        Ok(result)
    } else {
        Err(Error::Numeric {
            op: "grad-check".into(),
            detail: format!("max relative error {worst:e} >= {}; failing {failing:?}", gc.tol),
        })
    }
}

pub fn ablate(cfg: &RunConfig) -> Result<Value> {
    let (tr, te) = corpus(cfg)?;
    let report = run_ablation(&cfg.ablation, &cfg.model, &cfg.train, &tr, &te)?;
    fs::create_dir_all(&cfg.output).map_err(io_err(&cfg.output))?;
    write_text(&cfg.output.join("ablation_rows.csv"), &report.rows_csv())?;
    write_text(&cfg.output.join("ablation_summary.csv"), &report.summary_csv())?;
    write_text(&cfg.output.join("ablation.json"), &to_json(&report)?)?;
    Ok(json!({
        "rows": report.rows.len(),
        "rsum_order": report.rsum_order,
        "cko_gap": report.cko_gap,
        "summary": report.summary,
    }))
}

pub fn export_matching_cmd(cfg: &RunConfig) -> Result<Value> {
    let mc = &cfg.matching;
    let ckpt = Checkpoint::load(&checkpoint_path(cfg, &mc.checkpoint))?;
    let (_, te) = corpus(cfg)?;
    let (vid, tid) = te
        .pairing
        .get(mc.pair)
        .cloned()
        .ok_or_else(|| Error::Validation(format!("pair {} outside {} held-out pairs", mc.pair, te.pairing.len())))?;
    let pairs = te.paired_inputs(ckpt.config.tokens)?;
    let (v_in, t_in) = &pairs[mc.pair];
    let enc = encode_pairs(&ckpt.config, &ckpt.params, &ckpt.units, std::slice::from_ref(&pairs[mc.pair]))?;
    let (ev, et) = &enc[0];
    let keep = |mask: &[bool]| mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect::<Vec<_>>();
    let (regions, words) = (keep(&v_in.mask), keep(&t_in.mask));
    let vocab = match &mc.vocab {
        Some(v) if v.len() != words.len() => {
            return Err(Error::Validation(format!(
                "matching.vocab has {} entries for {} word tokens of {tid}",
                v.len(),
                words.len()
            )))
        }
        Some(v) => v.clone(),
        None => (0..words.len()).map(|i| format!("w{i}")).collect(),
    };
    let region_ids: Vec<String> = regions.iter().map(|i| format!("{vid}/r{i}")).collect();
    let rows = export_matching(
        &ev.y.select_rows(&regions)?,
        &et.y.select_rows(&words)?,
        &vocab,
        &region_ids,
    )?;
    fs::create_dir_all(&cfg.output).map_err(io_err(&cfg.output))?;
    let path = cfg.output.join("matching.jsonl");
    let mut lines = String::new();
    for r in &rows {
        lines.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        lines.push('\n');
    }
    write_text(&path, &lines)?;
    Ok(json!({ "pair": [vid, tid], "words": rows.len(), "output": path }))
}

/// Element count of the lightweight feed-forward block of one layer, and of
/// a standard block four times wider, at the configured width.
fn ffn_counts(model: &ModelConfig) -> Result<(usize, usize)> {
    let probe = |m: &ModelConfig| -> Result<usize> {
        let (p, _) = init_model(m, 0)?;
        Ok(param_count(&p).under("visual.layers.0.ffn"))
    };
    let standard = ModelConfig {
        ffn_dim: Some(4 * model.d_e),
        ..model.clone()
    };
    Ok((probe(model)?, probe(&standard)?))
}

pub fn param_count_cmd(cfg: &RunConfig) -> Result<Value> {
    let (params, _) = init_model(&cfg.model, cfg.train.seed)?;
    let count = param_count(&params);
    let (light, standard) = ffn_counts(&cfg.model)?;
    fs::create_dir_all(&cfg.output).map_err(io_err(&cfg.output))?;
    write_text(&cfg.output.join("param_count.json"), &to_json(&count)?)?;
    Ok(json!({
        "total": count.total,
        "visual": count.under("visual"),
        "textual": count.under("textual"),
        "shared": count.under("shared"),
        "ffn_per_layer": light,
        "standard_ffn_per_layer": standard,
    }))
}
