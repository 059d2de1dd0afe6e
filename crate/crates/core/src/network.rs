//! The score network: an MLP with a flat parameter vector, plus
//! spectral normalization and checkpoint round-tripping.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activation::ActivationFamily;
use crate::error::CoreError;
use crate::linalg::{gemv, gemv_t, norm, norm_sq};
use crate::rng::RngStream;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: ActivationFamily,
    #[serde(default)]
    pub spectral_norm: bool,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, activation: ActivationFamily) -> Self {
        MlpConfig { input_dim, hidden_widths, activation, spectral_norm: false }
    }

    /// Layer widths including input and output (both `input_dim`).
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_widths.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden_widths);
        d.push(self.input_dim);
        d
    }

    pub fn layer_count(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    pub fn param_count(&self) -> usize {
        let dims = self.dims();
        (0..dims.len() - 1).map(|l| dims[l] * dims[l + 1] + dims[l + 1]).sum()
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.input_dim == 0 {
            return Err(CoreError::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidConfig("hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Offsets of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub w_offset: usize,
    pub b_offset: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct ScoreNetwork {
    pub config: MlpConfig,
    pub theta: Vec<f64>,
    layers: Vec<LayerSpec>,
}

impl ScoreNetwork {
    fn layout(config: &MlpConfig) -> Vec<LayerSpec> {
        let dims = config.dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (in_dim, out_dim) = (dims[l], dims[l + 1]);
            layers.push(LayerSpec { w_offset: off, b_offset: off + in_dim * out_dim, in_dim, out_dim });
            off += in_dim * out_dim + out_dim;
        }
        layers
    }

    /// Weights drawn from N(0, 1/fan_in), biases zero.
    pub fn init(config: MlpConfig, rng: &mut RngStream) -> Result<Self, CoreError> {
        config.validate()?;
        let layers = Self::layout(&config);
        let mut theta = vec![0.0; config.param_count()];
        for spec in &layers {
            let scale = 1.0 / (spec.in_dim as f64).sqrt();
            let w = &mut theta[spec.w_offset..spec.w_offset + spec.in_dim * spec.out_dim];
            rng.fill_gaussian(w);
            for v in w.iter_mut() {
                *v *= scale;
            }
        }
        Ok(ScoreNetwork { config, theta, layers })
    }

    pub fn from_theta(config: MlpConfig, theta: Vec<f64>) -> Result<Self, CoreError> {
        config.validate()?;
        if theta.len() != config.param_count() {
            return Err(CoreError::InvalidConfig(format!(
                "theta length {} does not match config ({} params)",
                theta.len(),
                config.param_count()
            )));
        }
        let layers = Self::layout(&config);
        Ok(ScoreNetwork { config, theta, layers })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self, CoreError> {
        let n = config.param_count();
        Self::from_theta(config, vec![0.0; n])
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    #[inline]
    pub fn layer(&self, l: usize) -> LayerSpec {
        self.layers[l]
    }

    #[inline]
    pub fn weights(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        &self.theta[s.w_offset..s.w_offset + s.in_dim * s.out_dim]
    }

    #[inline]
    pub fn bias(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        &self.theta[s.b_offset..s.b_offset + s.out_dim]
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// Network evaluation; the tape forward is the single code path.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new(self);
        let out = tape.forward_network(x);
        tape.value(out).to_vec()
    }

    /// Divides every weight matrix by its largest singular value,
    /// estimated by power iteration (relative tolerance 1e-6, capped at
    /// `iters`). Zero matrices are left untouched.
    pub fn spectral_normalize(&mut self, iters: usize) {
        assert!(iters >= 1);
        for l in 0..self.layers.len() {
            let s = self.layers[l];
            let w = &mut self.theta[s.w_offset..s.w_offset + s.in_dim * s.out_dim];
            spectral_normalize_matrix(w, s.out_dim, s.in_dim, iters);
        }
    }
}

/// Largest-singular-value estimate of a row-major `rows x cols` matrix.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, iters: usize) -> f64 {
    if norm_sq(w) == 0.0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..iters {
        gemv(w, rows, cols, &v, &mut u);
        let new_sigma = norm(&u);
        if new_sigma == 0.0 {
            // v is in the null space; perturb deterministically
            for (j, vj) in v.iter_mut().enumerate() {
                *vj += (j as f64 + 1.0) * 1e-3;
            }
            let n = norm(&v);
            for vj in v.iter_mut() {
                *vj /= n;
            }
            continue;
        }
        gemv_t(w, rows, cols, &u, &mut v);
        let vn = norm(&v);
        for vj in v.iter_mut() {
            *vj /= vn;
        }
        // The estimate approaches sigma_max from below and the residual
        // error is a multiple of the last change, so stop well inside
        // the 1e-6 contract.
        if (new_sigma - sigma).abs() <= 1e-9 * new_sigma {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

/// In-place spectral normalization of one matrix; returns the estimated
/// largest singular value before scaling.
pub fn spectral_normalize_matrix(w: &mut [f64], rows: usize, cols: usize, iters: usize) -> f64 {
    let sigma = power_iteration(w, rows, cols, iters);
    if sigma > 0.0 {
        for v in w.iter_mut() {
            *v /= sigma;
        }
    }
    sigma
}

/// Uniform hidden width whose realized parameter count comes within 3%
/// of `total` for the requested depth.
pub fn param_count_plan(
    total: usize,
    depth: usize,
    input_dim: usize,
    activation: ActivationFamily,
) -> Result<MlpConfig, CoreError> {
    if depth == 0 {
        return Err(CoreError::Infeasible("depth must be >= 1".into()));
    }
    let d = input_dim as f64;
    let t = total as f64;
    // params(W) = (depth-1) W^2 + W (2 D + depth) + D
    let lin = 2.0 * d + depth as f64;
    let width = if depth == 1 {
        (t - d) / lin
    } else {
        let a = (depth - 1) as f64;
        let disc = lin * lin + 4.0 * a * (t - d);
        ((-lin + disc.sqrt()) / (2.0 * a)).max(0.0)
    };
    let width = width.round() as i64;
    if width < 1 {
        return Err(CoreError::Infeasible(format!(
            "budget {total} too small for depth {depth} at input dim {input_dim}"
        )));
    }
    let config = MlpConfig::new(input_dim, vec![width as usize; depth], activation);
    let realized = config.param_count();
    let rel = (realized as f64 - t).abs() / t;
    if rel > 0.03 {
        return Err(CoreError::Infeasible(format!(
            "no uniform width hits {total} params at depth {depth} (closest: {realized})"
        )));
    }
    Ok(config)
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    config: MlpConfig,
    theta: Vec<String>,
}

/// Writes `{"config": ..., "theta": [17-significant-digit strings]}`;
/// 17 digits round-trip every f64 exactly.
pub fn save_checkpoint(net: &ScoreNetwork, path: &Path) -> Result<(), CoreError> {
    let doc = CheckpointDoc {
        config: net.config.clone(),
        theta: net.theta.iter().map(|v| format!("{:.16e}", v)).collect(),
    };
    fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ScoreNetwork, CoreError> {
    let doc: CheckpointDoc = serde_json::from_str(&fs::read_to_string(path)?)?;
    let theta = doc
        .theta
        .iter()
        .map(|s| s.parse::<f64>())
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| CoreError::InvalidConfig(format!("bad theta entry: {e}")))?;
    ScoreNetwork::from_theta(doc.config, theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tanh_cfg(hidden: Vec<usize>) -> MlpConfig {
        MlpConfig::new(2, hidden, ActivationFamily::Tanh)
    }

    #[test]
    fn param_count_matches_hand_arithmetic() {
        let cfg = tanh_cfg(vec![128, 128]);
        assert_eq!(cfg.param_count(), 2 * 128 + 128 + 128 * 128 + 128 + 128 * 2 + 2);
        assert_eq!(cfg.param_count(), 17_154);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = tanh_cfg(vec![8, 8]);
        let a = ScoreNetwork::init(cfg.clone(), &mut RngStream::new(11, 0)).unwrap();
        let b = ScoreNetwork::init(cfg, &mut RngStream::new(11, 0)).unwrap();
        assert_eq!(a.theta, b.theta);
        for l in 0..a.layer_count() {
            assert!(a.bias(l).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn spectral_diag_and_identity() {
        let mut w = vec![3.0, 0.0, 0.0, 1.0];
        let sigma = spectral_normalize_matrix(&mut w, 2, 2, 500);
        assert!((sigma - 3.0).abs() < 1e-9);
        assert!((w[0] - 1.0).abs() < 1e-9 && (w[3] - 1.0 / 3.0).abs() < 1e-9);

        let mut id = vec![1.0, 0.0, 0.0, 1.0];
        spectral_normalize_matrix(&mut id, 2, 2, 500);
        assert!((id[0] - 1.0).abs() < 1e-9 && (id[3] - 1.0).abs() < 1e-9);

        let mut z = vec![0.0; 4];
        let s = spectral_normalize_matrix(&mut z, 2, 2, 10);
        assert_eq!(s, 0.0);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectral_norm_matches_svd_oracle() {
        let mut rng = RngStream::new(77, 0);
        let mut w = rng.gaussian_vec(64 * 64);
        spectral_normalize_matrix(&mut w, 64, 64, 2000);
        let m = nalgebra::DMatrix::from_row_slice(64, 64, &w);
        let top = m.svd(false, false).singular_values[0];
        assert!((top - 1.0).abs() < 1e-5, "post-normalization sigma_max {top}");
    }

    #[test]
    fn plan_recovers_two_by_128() {
        let cfg = param_count_plan(17_154, 2, 2, ActivationFamily::Tanh).unwrap();
        assert_eq!(cfg.hidden_widths, vec![128, 128]);
        assert_eq!(cfg.param_count(), 17_154);

        let one = param_count_plan(17_154, 1, 2, ActivationFamily::Tanh).unwrap();
        let w = one.hidden_widths[0];
        let realized = one.param_count();
        assert_eq!(realized, 2 * w + w + w * 2 + 2);
        assert!((realized as f64 - 17_154.0).abs() / 17_154.0 <= 0.03);

        assert!(param_count_plan(8, 3, 2, ActivationFamily::Tanh).is_err());
    }

    #[test]
    fn lipschitz_after_projection() {
        let mut rng = RngStream::new(5, 0);
        let mut net =
            ScoreNetwork::init(tanh_cfg(vec![32, 32]), &mut RngStream::new(13, 0)).unwrap();
        net.spectral_normalize(1000);
        for _ in 0..10_000 {
            let x = rng.gaussian_vec(2);
            let y = rng.gaussian_vec(2);
            let dx: f64 = norm(&[x[0] - y[0], x[1] - y[1]]);
            let sx = net.forward(&x);
            let sy = net.forward(&y);
            let ds = norm(&[sx[0] - sy[0], sx[1] - sy[1]]);
            assert!(ds <= dx * (1.0 + 1e-4), "lipschitz violated: {ds} vs {dx}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = ScoreNetwork::init(tanh_cfg(vec![5, 3]), &mut RngStream::new(21, 4)).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(net.config, back.config);
        assert_eq!(net.theta, back.theta);
    }
}
