//! Velocity stubs with known answers, for exercising losses and samplers
//! without a trained network.

use ndarr::{Tape, Tensor, Var};

use super::model::{ModelInput, VelocityField};
use crate::error::{contract, Result};

/// Returns a fixed velocity per batch slot.
pub struct FixedVelocity<'t> {
    pub tape: &'t Tape,
    pub targets: Vec<Tensor>,
}

impl<'t> VelocityField<'t> for FixedVelocity<'t> {
    fn velocity(&self, _input: &ModelInput<'_>, slot: usize) -> Result<Var<'t>> {
        match self.targets.get(slot) {
            Some(t) => Ok(self.tape.constant(t.clone())),
            None => contract(format!("no target for slot {slot}")),
        }
    }
}

/// The exact straight-path velocity towards a known clean latent:
/// `(x_t − x₀) / t`, zero at `t = 0`.
pub fn velocity_towards(x_t: &Tensor, x0: &Tensor, t: f64) -> Result<Tensor> {
    if t == 0.0 {
        return Ok(Tensor::zeros(x_t.shape()));
    }
    Ok(x_t.zip_map(x0, |a, b| (a - b) / t)?)
}
