use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The common feature units and the sequentially updated state.
///
/// Units are read by the common-knowledge attention. Each update blends the
/// previous state with the fused visual-textual product and writes the new
/// state into the next unit slot, cycling through all `k` slots. None of this
/// is differentiated: it is running state, owned by one writer at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonUnits {
    pub units: Vec<Tensor>,
    pub state: Tensor,
    pub step: u64,
}

impl CommonUnits {
    /// `k` units drawn from a standard normal scaled by `1/√d_m`; the state
    /// starts as a copy of the first unit.
    pub fn init(k: usize, n: usize, d_m: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("at least one common unit is required".into()));
        }
        let scale = 1.0 / (d_m as f64).sqrt();
        let units: Vec<Tensor> = (0..k)
            .map(|_| {
                Tensor::from_fn(n, d_m, |_, _| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * scale
                })
            })
            .collect();
        let state = units[0].clone();
        Ok(CommonUnits { units, state, step: 0 })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.state.shape()
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Slot that the next update writes.
    pub fn next_slot(&self) -> usize {
        (self.step % self.units.len() as u64) as usize
    }
}

/// `S_t = Z ⊙ S_{t-1} + (1 − Z) ⊙ F` with `Z = G_vis ⊙ G_tex` and
/// `F = S_ovis ⊙ S_otex`, all elementwise. Returns the advanced units; the
/// inputs are read as plain values.
pub fn update_common_units(
    units: &CommonUnits,
    g_vis: &Tensor,
    g_tex: &Tensor,
    s_o_vis: &Tensor,
    s_o_tex: &Tensor,
) -> Result<CommonUnits> {
    for t in [g_vis, g_tex, s_o_vis, s_o_tex] {
        units.state.same_shape(t, "update_common_units")?;
    }
    let prev = units.state.data();
    let mut next = Vec::with_capacity(prev.len());
    for i in 0..prev.len() {
        let z = g_vis.data()[i] * g_tex.data()[i];
        let f = s_o_vis.data()[i] * s_o_tex.data()[i];
        let mut v = z * prev[i] + (1.0 - z) * f;
        if (0.0..=1.0).contains(&z) {
            // keep rounding from stepping outside the blended endpoints
            v = v.clamp(prev[i].min(f), prev[i].max(f));
        }
        next.push(v);
    }
    let state = Tensor::new(units.state.rows(), units.state.cols(), next)?;
    state.ensure_finite("update_common_units")?;
    let mut out = units.clone();
    let slot = units.next_slot();
    out.units[slot] = state.clone();
    out.state = state;
    out.step += 1;
    Ok(out)
}
