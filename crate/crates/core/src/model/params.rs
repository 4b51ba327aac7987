//! Learnable weights, organised as a tree addressable by dotted path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Uniform Glorot initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound))
}

/// Walks and rebuilds parameter tensors in a fixed order.
pub trait ParamTree: Sized {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self;
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamTree for Tensor {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((prefix.to_string(), self));
    }

    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        f(self)
    }
}

impl<T: ParamTree> ParamTree for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        self.iter().map(|item| item.map_tensors(f)).collect()
    }
}

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub(crate) fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: glorot(rng, fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

impl ParamTree for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.weight.visit(&join(prefix, "weight"), out);
        self.bias.visit(&join(prefix, "bias"), out);
    }

    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    fn init(width: usize) -> Self {
        NormParams {
            gain: Tensor::filled(1, width, 1.0),
            bias: Tensor::zeros(1, width),
        }
    }

    /// Add&Norm: layer normalization of `x + residual`.
    pub fn add_norm(&self, x: &Tensor, residual: &Tensor) -> Result<Tensor> {
        x.add(residual)?.layer_norm(&self.gain, &self.bias)
    }
}

impl ParamTree for NormParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.gain.visit(&join(prefix, "gain"), out);
        self.bias.visit(&join(prefix, "bias"), out);
    }

    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        NormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

/// Bottleneck feed-forward block `d_e → d_f → d_e` with a GELU between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu())
    }
}

impl ParamTree for FeedForward {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.up.visit(&join(prefix, "up"), out);
        self.down.visit(&join(prefix, "down"), out);
    }

    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        FeedForward {
            up: self.up.map_tensors(f),
            down: self.down.map_tensors(f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LightweightLayerParams {
    pub t_q: Tensor,
    pub t_k: Tensor,
    pub t_v: Tensor,
    pub norm_attn: NormParams,
    pub ffn: FeedForward,
    pub norm_ffn: NormParams,
}

impl LightweightLayerParams {
    pub(crate) fn init(rng: &mut ChaCha8Rng, d: usize, d_e: usize, d_f: usize) -> Self {
        LightweightLayerParams {
            t_q: glorot(rng, d, d_e),
            t_k: glorot(rng, d, d_e),
            t_v: glorot(rng, d, d_e),
            norm_attn: NormParams::init(d_e),
            ffn: FeedForward {
                up: Linear::init(rng, d_e, d_f),
                down: Linear::init(rng, d_f, d_e),
            },
            norm_ffn: NormParams::init(d_e),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.t_q.rows()
    }
}

impl ParamTree for LightweightLayerParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.t_q.visit(&join(prefix, "t_q"), out);
        self.t_k.visit(&join(prefix, "t_k"), out);
        self.t_v.visit(&join(prefix, "t_v"), out);
        self.norm_attn.visit(&join(prefix, "norm_attn"), out);
        self.ffn.visit(&join(prefix, "ffn"), out);
        self.norm_ffn.visit(&join(prefix, "norm_ffn"), out);
    }

    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        LightweightLayerParams {
            t_q: f(&self.t_q),
            t_k: f(&self.t_k),
            t_v: f(&self.t_v),
            norm_attn: self.norm_attn.map_tensors(f),
            ffn: self.ffn.map_tensors(f),
            norm_ffn: self.norm_ffn.map_tensors(f),
        }
    }
}

/// One extractor step: a three-layer perceptron `2·d_m → d_m → d_m → d_m`.
#[derive(Debug, Clone)]
pub struct SeeLayerParams {
    pub mlp: Vec<Linear>,
}

impl SeeLayerParams {
    pub(crate) fn init(rng: &mut ChaCha8Rng, d_m: usize) -> Self {
        SeeLayerParams {
            mlp: vec![
                Linear::init(rng, 2 * d_m, d_m),
                Linear::init(rng, d_m, d_m),
                Linear::init(rng, d_m, d_m),
            ],
        }
    }

    pub fn forward(&self, r: &Tensor) -> Result<Tensor> {
        let h = self.mlp[0].forward(r)?.gelu();
        let h = self.mlp[1].forward(&h)?.gelu();
        self.mlp[2].forward(&h)
    }
}

impl ParamTree for SeeLayerParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.mlp.visit(&join(prefix, "mlp"), out);
    }

    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        SeeLayerParams {
            mlp: self.mlp.map_tensors(f),
        }
    }
}

/// Weights owned by one modality.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    /// Present when the input width differs from `d_e`: maps extractor
    /// features into the common space for the first residual connection.
    pub input_proj: Option<Linear>,
    pub layers: Vec<LightweightLayerParams>,
    pub see: Vec<SeeLayerParams>,
}

impl PipelineParams {
    fn init(rng: &mut ChaCha8Rng, cfg: &ModelConfig, d_in: usize) -> Self {
        let input_proj = (d_in != cfg.d_e).then(|| Linear::init(rng, d_in, cfg.d_e));
        let layers = (0..cfg.layers)
            .map(|i| {
                let d = if i == 0 { d_in } else { cfg.d_e };
                LightweightLayerParams::init(rng, d, cfg.d_e, cfg.ffn_dim())
            })
            .collect();
        let see = (0..cfg.see_layers).map(|_| SeeLayerParams::init(rng, cfg.d_m())).collect();
        PipelineParams {
            input_proj,
            layers,
            see,
        }
    }
}

impl ParamTree for PipelineParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        if let Some(p) = &self.input_proj {
            p.visit(&join(prefix, "input_proj"), out);
        }
        self.layers.visit(&join(prefix, "layers"), out);
        self.see.visit(&join(prefix, "see"), out);
    }

    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        PipelineParams {
            input_proj: self.input_proj.as_ref().map(|p| p.map_tensors(f)),
            layers: self.layers.map_tensors(f),
            see: self.see.map_tensors(f),
        }
    }
}

/// Weights used by both modalities.
#[derive(Debug, Clone)]
pub struct SharedParams {
    /// Memory-gate mixing over tokens, `n × n`.
    pub w_o: Tensor,
    /// Memory-gate bias, `1 × d_m`, added to every row.
    pub b_o: Tensor,
    /// Adjustment mixing over tokens, `n × n`.
    pub w_g: Tensor,
    /// Width-matching projection `d_m → d_e` applied before the adjustment gate.
    pub gate_proj: Tensor,
    /// Box geometry `(x1, y1, x2, y2, area) → d_in` fused into visual features.
    pub geometry: Linear,
}

impl ParamTree for SharedParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.w_o.visit(&join(prefix, "w_o"), out);
        self.b_o.visit(&join(prefix, "b_o"), out);
        self.w_g.visit(&join(prefix, "w_g"), out);
        self.gate_proj.visit(&join(prefix, "gate_proj"), out);
        self.geometry.visit(&join(prefix, "geometry"), out);
    }

    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        SharedParams {
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
            w_g: f(&self.w_g),
            gate_proj: f(&self.gate_proj),
            geometry: self.geometry.map_tensors(f),
        }
    }
}

/// All learnable weights of the model.
#[derive(Debug, Clone)]
pub struct CkstnParams {
    pub visual: PipelineParams,
    pub textual: PipelineParams,
    pub shared: SharedParams,
}

impl CkstnParams {
    /// Fresh weights: Glorot-uniform matrices, zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (n, d_m) = (cfg.tokens, cfg.d_m());
        let visual = PipelineParams::init(rng, cfg, cfg.d_in);
        let textual = PipelineParams::init(rng, cfg, cfg.d_in_text());
        let shared = SharedParams {
            w_o: glorot(rng, n, n),
            b_o: Tensor::zeros(1, d_m),
            w_g: glorot(rng, n, n),
            gate_proj: glorot(rng, d_m, cfg.d_e),
            geometry: Linear::init(rng, 5, cfg.d_in),
        };
        Ok(CkstnParams {
            visual,
            textual,
            shared,
        })
    }

    /// `(path, tensor)` for every parameter, in a fixed order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out.into_iter().map(|(p, t)| (p, t.clone())).collect()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Same structure with tensors replaced, in [`CkstnParams::named`] order.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        let expected = self.tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (e, t) in expected.iter().zip(tensors) {
            e.same_shape(t, "with_tensors")?;
        }
        let mut it = tensors.iter();
        Ok(self.map_tensors(&mut |_| it.next().expect("counted").clone()))
    }

    /// Copy whose tensors are all tracked leaves.
    pub fn tracked(&self) -> Self {
        self.map_tensors(&mut |t| t.to_param())
    }

    pub fn detached(&self) -> Self {
        self.map_tensors(&mut |t| t.detach())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(Tensor::all_finite)
    }
}

impl ParamTree for CkstnParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.visual.visit(&join(prefix, "visual"), out);
        self.textual.visit(&join(prefix, "textual"), out);
        self.shared.visit(&join(prefix, "shared"), out);
    }

    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        CkstnParams {
            visual: self.visual.map_tensors(f),
            textual: self.textual.map_tensors(f),
            shared: self.shared.map_tensors(f),
        }
    }
}
