//! The two encoder pipelines and the shared common-knowledge state.

pub mod checkpoint;
pub mod config;
pub mod count;
pub mod forward;
pub mod layers;
pub mod params;
pub mod units;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;
pub use config::{AttentionNormalizer, GateNormalizer, ModelConfig, PairPooling, SeeInput};
pub use count::{param_count, ParamCount};
pub use forward::{encode, forward_pair, Encoded, ItemInput, Modality, PairOutput};
pub use params::{CkstnParams, ParamTree};
pub use units::{update_common_units, CommonUnits};

use crate::error::Result;

/// Fresh parameters and common units from one seeded stream.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<(CkstnParams, CommonUnits)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CkstnParams::init(cfg, &mut rng)?;
    let units = CommonUnits::init(cfg.units, cfg.tokens, cfg.d_m(), &mut rng)?;
    Ok((params, units))
}
