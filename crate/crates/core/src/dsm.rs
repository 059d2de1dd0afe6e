//! The weighted denoising score matching objective and its noise
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::network::ScoreNetwork;
use crate::tape::{NodeId, Tape};

/// Geometric noise schedule sigma_i = sigma_min (sigma_max/sigma_min)^((i-1)/(L-1)).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub levels: Vec<f64>,
}

impl NoiseSchedule {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// lambda(sigma) = sigma^2, so that lambda * L = ||z + sigma s||^2 / 2.
    pub fn lambda(sigma: f64) -> f64 {
        crate::cv::lambda(sigma)
    }
}

/// Builds the increasing geometric sequence with exact endpoints.
pub fn make_schedule(sigma_min: f64, sigma_max: f64, levels: usize) -> Result<NoiseSchedule, CoreError> {
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(CoreError::InvalidConfig(format!(
            "schedule needs 0 < sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]"
        )));
    }
    if levels < 2 {
        return Err(CoreError::InvalidConfig("schedule needs at least 2 levels".into()));
    }
    let ratio = sigma_max / sigma_min;
    let mut out = Vec::with_capacity(levels);
    for i in 0..levels {
        out.push(sigma_min * ratio.powf(i as f64 / (levels - 1) as f64));
    }
    out[0] = sigma_min;
    out[levels - 1] = sigma_max;
    Ok(NoiseSchedule { sigma_min, sigma_max, levels: out })
}

/// The per-sample loss L = 1/2 || z/sigma + s(x + sigma z) ||^2 as a
/// scalar tape node, so one reverse pass yields its parameter gradient.
pub fn build_dsm_loss(
    tape: &mut Tape,
    x: &[f64],
    z: &[f64],
    sigma: f64,
) -> Result<NodeId, CoreError> {
    if sigma <= 0.0 {
        return Err(CoreError::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let d = x.len();
    let mut perturbed = vec![0.0; d];
    let mut target = vec![0.0; d];
    for i in 0..d {
        perturbed[i] = x[i] + sigma * z[i];
        target[i] = z[i] / sigma;
    }
    let s = tape.forward_network(&perturbed);
    let t = tape.constant(&target);
    let residual = tape.comb(&[(1.0, s), (1.0, t)]);
    let sq = tape.dot(residual, residual);
    Ok(tape.scalar_comb(0.0, &[(0.5, sq)]))
}

/// Loss value without keeping the tape.
pub fn dsm_loss_value(net: &ScoreNetwork, x: &[f64], z: &[f64], sigma: f64) -> Result<f64, CoreError> {
    let mut tape = Tape::new(net);
    let node = build_dsm_loss(&mut tape, x, z, sigma)?;
    Ok(tape.scalar_value(node))
}
