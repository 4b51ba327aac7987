use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::FeatureSet;
use crate::error::{Error, Result};
use crate::model::{init_model, param_count, ModelConfig};
use crate::train::{train, TrainConfig};

/// One model/loss modification swept by the ablation runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Standard,
    /// No common-unit attention or memory gate.
    WithoutCko,
    /// Style extractor depth; 0 removes the extractor.
    See(usize),
    /// Contrastive term reported but not optimized.
    WithoutContrastive,
}

impl Variant {
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match *self {
            Variant::Standard => {}
            Variant::WithoutCko => m.use_cko = false,
            Variant::See(depth) => m.see_layers = depth,
            Variant::WithoutContrastive => t.contrastive = false,
        }
        (m, t)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Standard => f.write_str("standard"),
            Variant::WithoutCko => f.write_str("wo-cko"),
            Variant::See(m) => write!(f, "see-{m}"),
            Variant::WithoutContrastive => f.write_str("wo-con"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "wo-cko" => Ok(Variant::WithoutCko),
            "wo-con" => Ok(Variant::WithoutContrastive),
            "wo-see" => Ok(Variant::See(0)),
            _ => s
                .strip_prefix("see-")
                .and_then(|m| m.parse().ok())
                .map(Variant::See)
                .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: ["standard", "wo-cko", "see-0", "see-2", "see-4", "see-8", "see-16", "wo-con"]
                .map(String::from)
                .to_vec(),
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub see_layers: usize,
    pub use_cko: bool,
    pub contrastive: bool,
    pub params: usize,
    pub image_r1: f64,
    pub image_r5: f64,
    pub image_r10: f64,
    pub sentence_r1: f64,
    pub sentence_r5: f64,
    pub sentence_r10: f64,
    pub rsum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub image_r1_mean: f64,
    pub image_r1_sd: f64,
    pub sentence_r1_mean: f64,
    pub sentence_r1_sd: f64,
    pub rsum_mean: f64,
    pub rsum_sd: f64,
}

/// Difference in mean Rsum, standard minus without common units, with a 95%
/// Welch interval. Reported, never asserted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapEstimate {
    pub gap: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<VariantSummary>,
    /// Variant names by descending mean Rsum.
    pub rsum_order: Vec<String>,
    pub cko_gap: Option<GapEstimate>,
}

const ROW_HEADER: &str =
    "variant,seed,see_layers,use_cko,contrastive,params,image_r1,image_r5,image_r10,sentence_r1,sentence_r5,sentence_r10,rsum";
const SUMMARY_HEADER: &str =
    "variant,runs,image_r1_mean,image_r1_sd,sentence_r1_mean,sentence_r1_sd,rsum_mean,rsum_sd";

impl AblationReport {
    pub fn rows_csv(&self) -> String {
        let mut out = format!("{ROW_HEADER}\n");
        for r in &self.rows {
            out += &format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.variant,
                r.seed,
                r.see_layers,
                r.use_cko,
                r.contrastive,
                r.params,
                r.image_r1,
                r.image_r5,
                r.image_r10,
                r.sentence_r1,
                r.sentence_r5,
                r.sentence_r10,
                r.rsum
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for s in &self.summary {
            out += &format!(
                "{},{},{},{},{},{},{},{}\n",
                s.variant,
                s.runs,
                s.image_r1_mean,
                s.image_r1_sd,
                s.sentence_r1_mean,
                s.sentence_r1_sd,
                s.rsum_mean,
                s.rsum_sd
            );
        }
        out
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn welch(a: &[f64], b: &[f64]) -> Option<GapEstimate> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let ((ma, sa), (mb, sb)) = (mean_sd(a), mean_sd(b));
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let gap = ma - mb;
    let se = (va + vb).sqrt();
    if se == 0.0 {
        return Some(GapEstimate {
            gap,
            ci_low: gap,
            ci_high: gap,
        });
    }
    let df = (va + vb).powi(2) / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    let t = StudentsT::new(0.0, 1.0, df).ok()?.inverse_cdf(0.975);
    Some(GapEstimate {
        gap,
        ci_low: gap - t * se,
        ci_high: gap + t * se,
    })
}

/// Trains every variant under every seed (in parallel; each run is
/// sequential and deterministic) and summarizes held-out recalls of the
/// final checkpoints.
pub fn run_ablation(
    cfg: &AblationConfig,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &FeatureSet,
    test_set: &FeatureSet,
) -> Result<AblationReport> {
    let variants = cfg.variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?;
    if variants.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|v| cfg.seeds.iter().map(move |s| (*v, *s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|(variant, seed)| {
            let (m, mut t) = variant.apply(model, train_cfg);
            t.seed = *seed;
            m.validate()?;
            let params = param_count(&init_model(&m, *seed)?.0).total;
            let outcome = train(&m, &t, train_set, test_set, None)?;
            let r = outcome.report;
            Ok(AblationRow {
                variant: variant.to_string(),
                seed: *seed,
                see_layers: m.see_layers,
                use_cko: m.use_cko,
                contrastive: t.contrastive,
                params,
                image_r1: r.image_r1,
                image_r5: r.image_r5,
                image_r10: r.image_r10,
                sentence_r1: r.sentence_r1,
                sentence_r5: r.sentence_r5,
                sentence_r10: r.sentence_r10,
                rsum: r.rsum,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut names: Vec<String> = Vec::new();
    for v in &variants {
        let n = v.to_string();
        if !names.contains(&n) {
            names.push(n);
        }
    }
    let col = |name: &str, f: fn(&AblationRow) -> f64| -> Vec<f64> {
        rows.iter().filter(|r| r.variant == name).map(f).collect()
    };
    let summary: Vec<VariantSummary> = names
        .iter()
        .map(|name| {
            let (i1, i1sd) = mean_sd(&col(name, |r| r.image_r1));
            let (s1, s1sd) = mean_sd(&col(name, |r| r.sentence_r1));
            let (rs, rssd) = mean_sd(&col(name, |r| r.rsum));
            VariantSummary {
                variant: name.clone(),
                runs: col(name, |r| r.rsum).len(),
                image_r1_mean: i1,
                image_r1_sd: i1sd,
                sentence_r1_mean: s1,
                sentence_r1_sd: s1sd,
                rsum_mean: rs,
                rsum_sd: rssd,
            }
        })
        .collect();
    let mut order: Vec<&VariantSummary> = summary.iter().collect();
    order.sort_by(|a, b| b.rsum_mean.total_cmp(&a.rsum_mean));
    let rsum_order = order.iter().map(|s| s.variant.clone()).collect();
    let cko_gap = welch(&col("standard", |r| r.rsum), &col("wo-cko", |r| r.rsum));
    Ok(AblationReport {
        rows,
        summary,
        rsum_order,
        cko_gap,
    })
}
