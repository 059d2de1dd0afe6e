//! Regression-coefficient estimation and variance-reduction reporting.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::linalg::pairwise_sum;
use crate::rng::RngStream;

/// Coordinates whose control variance falls below this are treated as
/// dead and get beta = 0 instead of a poisoned ratio.
pub const VAR_GUARD: f64 = 1e-300;

/// One-pass bivariate co-moment accumulator (Welford style). Mergeable:
/// merging two accumulators equals accumulating the concatenated stream
/// up to rounding.
#[derive(Debug, Clone, Default)]
pub struct CovAccumulator {
    n: u64,
    mean_l: f64,
    mean_c: f64,
    m2_l: f64,
    m2_c: f64,
    m_lc: f64,
}

impl CovAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, l: f64, c: f64) {
        self.n += 1;
        let nf = self.n as f64;
        let dl = l - self.mean_l;
        let dc = c - self.mean_c;
        self.mean_l += dl / nf;
        self.mean_c += dc / nf;
        self.m2_l += dl * (l - self.mean_l);
        self.m2_c += dc * (c - self.mean_c);
        self.m_lc += dl * (c - self.mean_c);
    }

    pub fn merge(&mut self, other: &CovAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let dl = other.mean_l - self.mean_l;
        let dc = other.mean_c - self.mean_c;
        let w = na * nb / n;
        self.m2_l += other.m2_l + dl * dl * w;
        self.m2_c += other.m2_c + dc * dc * w;
        self.m_lc += other.m_lc + dl * dc * w;
        self.mean_l += dl * nb / n;
        self.mean_c += dc * nb / n;
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean_l(&self) -> f64 {
        self.mean_l
    }

    pub fn mean_c(&self) -> f64 {
        self.mean_c
    }

    /// Unbiased sample variance of the first stream.
    pub fn var_l(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2_l / (self.n - 1) as f64
        }
    }

    pub fn var_c(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2_c / (self.n - 1) as f64
        }
    }

    pub fn cov(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m_lc / (self.n - 1) as f64
        }
    }

    pub fn corr(&self) -> f64 {
        let d = (self.var_l() * self.var_c()).sqrt();
        if d <= 0.0 {
            0.0
        } else {
            self.cov() / d
        }
    }
}

/// beta_opt = Cov(L, C) / Var(C); dead control (variance below the
/// guard) yields 0.
pub fn beta_opt(acc: &CovAccumulator) -> Result<f64, CoreError> {
    if acc.count() < 2 {
        return Err(CoreError::Contract("beta estimation needs at least 2 samples".into()));
    }
    let var_c = acc.var_c();
    if var_c <= VAR_GUARD {
        return Ok(0.0);
    }
    Ok(acc.cov() / var_c)
}

/// Per-coordinate bivariate accumulator sharing one sample count;
/// used for gradients paired with their control variates.
#[derive(Debug, Clone)]
pub struct VecCovAccumulator {
    n: u64,
    mean_g: Vec<f64>,
    mean_c: Vec<f64>,
    m2_g: Vec<f64>,
    m2_c: Vec<f64>,
    m_gc: Vec<f64>,
}

impl VecCovAccumulator {
    pub fn new(dim: usize) -> Self {
        VecCovAccumulator {
            n: 0,
            mean_g: vec![0.0; dim],
            mean_c: vec![0.0; dim],
            m2_g: vec![0.0; dim],
            m2_c: vec![0.0; dim],
            m_gc: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean_g.len()
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn push(&mut self, g: &[f64], c: &[f64]) {
        debug_assert_eq!(g.len(), self.dim());
        debug_assert_eq!(c.len(), self.dim());
        self.n += 1;
        let nf = self.n as f64;
        for j in 0..g.len() {
            let dg = g[j] - self.mean_g[j];
            let dc = c[j] - self.mean_c[j];
            self.mean_g[j] += dg / nf;
            self.mean_c[j] += dc / nf;
            self.m2_g[j] += dg * (g[j] - self.mean_g[j]);
            self.m2_c[j] += dc * (c[j] - self.mean_c[j]);
            self.m_gc[j] += dg * (c[j] - self.mean_c[j]);
        }
    }

    pub fn merge(&mut self, other: &VecCovAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let w = na * nb / n;
        for j in 0..self.dim() {
            let dg = other.mean_g[j] - self.mean_g[j];
            let dc = other.mean_c[j] - self.mean_c[j];
            self.m2_g[j] += other.m2_g[j] + dg * dg * w;
            self.m2_c[j] += other.m2_c[j] + dc * dc * w;
            self.m_gc[j] += other.m_gc[j] + dg * dc * w;
            self.mean_g[j] += dg * nb / n;
            self.mean_c[j] += dc * nb / n;
        }
        self.n += other.n;
    }

    pub fn mean_g(&self) -> &[f64] {
        &self.mean_g
    }

    pub fn mean_c(&self) -> &[f64] {
        &self.mean_c
    }

    pub fn var_g(&self, j: usize) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2_g[j] / (self.n - 1) as f64
        }
    }

    pub fn var_c(&self, j: usize) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2_c[j] / (self.n - 1) as f64
        }
    }

    pub fn cov(&self, j: usize) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m_gc[j] / (self.n - 1) as f64
        }
    }

    /// Coordinate-wise beta_opt with the dead-coordinate guard.
    pub fn beta(&self) -> Result<Vec<f64>, CoreError> {
        if self.n < 2 {
            return Err(CoreError::Contract("beta estimation needs at least 2 samples".into()));
        }
        Ok((0..self.dim())
            .map(|j| {
                let vc = self.var_c(j);
                if vc <= VAR_GUARD {
                    0.0
                } else {
                    self.cov(j) / vc
                }
            })
            .collect())
    }

    /// Pooled scalar coefficient sum_j Cov_j / sum_j VarC_j.
    pub fn beta_pooled(&self) -> f64 {
        let cov = pairwise_sum(&self.m_gc);
        let var = pairwise_sum(&self.m2_c);
        if var <= VAR_GUARD {
            0.0
        } else {
            cov / var
        }
    }

    /// rho_g = sum_j Var(g_j - beta_j c_j) / sum_j Var(g_j) at the
    /// coordinate-wise optimal beta.
    pub fn rho_optimal(&self) -> Result<f64, CoreError> {
        let total: f64 = pairwise_sum(&self.m2_g);
        if total <= 0.0 {
            return Err(CoreError::Contract("raw gradient variance is zero".into()));
        }
        let mut controlled = 0.0;
        for j in 0..self.dim() {
            let reduction =
                if self.m2_c[j] <= VAR_GUARD { 0.0 } else { self.m_gc[j] * self.m_gc[j] / self.m2_c[j] };
            controlled += self.m2_g[j] - reduction;
        }
        Ok((controlled / total).max(0.0))
    }

    /// rho_g when one scalar beta is applied to every coordinate.
    pub fn rho_scalar_beta(&self, beta: f64) -> Result<f64, CoreError> {
        let total: f64 = pairwise_sum(&self.m2_g);
        if total <= 0.0 {
            return Err(CoreError::Contract("raw gradient variance is zero".into()));
        }
        let mut controlled = 0.0;
        for j in 0..self.dim() {
            controlled += self.m2_g[j] - 2.0 * beta * self.m_gc[j] + beta * beta * self.m2_c[j];
        }
        Ok((controlled / total).max(0.0))
    }
}

/// Eq.-style regression estimator: mean(L - beta C) + beta gamma.
pub fn regression_estimate(l: &[f64], c: &[f64], beta: f64, gamma: f64) -> f64 {
    assert_eq!(l.len(), c.len());
    assert!(!l.is_empty());
    let diffs: Vec<f64> = l.iter().zip(c).map(|(&a, &b)| a - beta * b).collect();
    pairwise_sum(&diffs) / l.len() as f64 + beta * gamma
}

/// Var of the regression estimator:
/// (Var(L) - 2 beta Cov + beta^2 Var(C)) / N.
pub fn predicted_variance(
    var_l: f64,
    var_c: f64,
    cov: f64,
    beta: f64,
    n: usize,
) -> Result<f64, CoreError> {
    if var_l < 0.0 || var_c < 0.0 {
        return Err(CoreError::Contract("variances must be non-negative".into()));
    }
    if n < 1 {
        return Err(CoreError::Contract("sample count must be >= 1".into()));
    }
    Ok((var_l - 2.0 * beta * cov + beta * beta * var_c) / n as f64)
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    let sq: Vec<f64> = v.iter().map(|&x| (x - mean) * (x - mean)).collect();
    pairwise_sum(&sq) / (n - 1.0)
}

/// Ratio of unbiased sample variances over paired draws.
pub fn variance_ratio(controlled: &[f64], raw: &[f64]) -> Result<f64, CoreError> {
    if controlled.len() != raw.len() || raw.len() < 2 {
        return Err(CoreError::Contract("variance ratio needs paired samples, >= 2".into()));
    }
    let raw_var = sample_variance(raw);
    if raw_var <= 0.0 {
        return Err(CoreError::Contract("raw variance is zero".into()));
    }
    Ok(sample_variance(controlled) / raw_var)
}

/// Coordinate-wise beta over a batch of gradient / control pairs.
pub fn beta_gradient(grads: &[Vec<f64>], cvs: &[Vec<f64>]) -> Result<Vec<f64>, CoreError> {
    if grads.len() != cvs.len() || grads.len() < 2 {
        return Err(CoreError::Contract("gradient beta needs a batch of >= 2".into()));
    }
    let mut acc = VecCovAccumulator::new(grads[0].len());
    for (g, c) in grads.iter().zip(cvs) {
        acc.push(g, c);
    }
    acc.beta()
}

/// How the regression coefficient is obtained during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum BetaMode {
    /// One shared coefficient, frozen.
    Fixed(f64),
    /// Re-estimated from each batch and applied to the same batch
    /// (slightly biased: beta correlates with the samples it scales).
    BatchOptimal,
    /// Exponential moving average over past batches, applied to the
    /// current batch; keeps the estimator unbiased at batch boundaries.
    EmaOptimal { decay: f64 },
}

impl Default for BetaMode {
    fn default() -> Self {
        BetaMode::EmaOptimal { decay: 0.9 }
    }
}

impl BetaMode {
    pub fn name(&self) -> String {
        match self {
            BetaMode::Fixed(v) => format!("fixed{v}"),
            BetaMode::BatchOptimal => "batch".into(),
            BetaMode::EmaOptimal { .. } => "ema".into(),
        }
    }
}

/// Per-parameter regression coefficient with the estimation state
/// behind it.
#[derive(Debug, Clone)]
pub struct BetaEstimate {
    pub mode: BetaMode,
    pub value: Vec<f64>,
    pub sample_count: u64,
    cov_ema: Vec<f64>,
    var_ema: Vec<f64>,
}

impl BetaEstimate {
    pub fn new(mode: BetaMode, dim: usize) -> Self {
        if let BetaMode::EmaOptimal { decay } = mode {
            assert!(decay > 0.0 && decay < 1.0, "ema decay must lie in (0, 1)");
        }
        let value = match mode {
            BetaMode::Fixed(v) => vec![v; dim],
            _ => vec![0.0; dim],
        };
        BetaEstimate { mode, value, sample_count: 0, cov_ema: vec![0.0; dim], var_ema: vec![0.0; dim] }
    }

    /// Folds one batch of co-moment statistics into the estimate. In
    /// EMA mode the returned coefficient lags the batch it is applied
    /// to; in batch mode it is computed from it.
    pub fn update(&mut self, acc: &VecCovAccumulator) {
        self.sample_count += acc.count();
        match self.mode {
            BetaMode::Fixed(_) => {}
            BetaMode::BatchOptimal => {
                if let Ok(beta) = acc.beta() {
                    self.value = beta;
                }
            }
            BetaMode::EmaOptimal { decay } => {
                for j in 0..self.value.len() {
                    self.cov_ema[j] = decay * self.cov_ema[j] + (1.0 - decay) * acc.cov(j);
                    self.var_ema[j] = decay * self.var_ema[j] + (1.0 - decay) * acc.var_c(j);
                    self.value[j] = if self.var_ema[j] <= VAR_GUARD {
                        0.0
                    } else {
                        // the (1 - decay^t) normalizations cancel in the ratio
                        self.cov_ema[j] / self.var_ema[j]
                    };
                }
            }
        }
    }
}

/// Which beta enters a variance-ratio evaluation.
#[derive(Debug, Clone, Copy)]
pub enum BetaChoice {
    /// Coordinate-wise Cov/Var, estimated from the same aggregation.
    PerCoordinateOptimal,
    /// One shared coefficient applied to every coordinate.
    Scalar(f64),
}

/// Raw per-block pair sums for one block of paired (g, c) draws.
#[derive(Debug, Clone)]
pub struct BlockStats {
    pub n: u64,
    pub sum_g: Vec<f64>,
    pub sum_c: Vec<f64>,
    pub sum_gg: Vec<f64>,
    pub sum_cc: Vec<f64>,
    pub sum_gc: Vec<f64>,
}

impl BlockStats {
    pub fn new(dim: usize) -> Self {
        BlockStats {
            n: 0,
            sum_g: vec![0.0; dim],
            sum_c: vec![0.0; dim],
            sum_gg: vec![0.0; dim],
            sum_cc: vec![0.0; dim],
            sum_gc: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, g: &[f64], c: &[f64]) {
        debug_assert_eq!(g.len(), self.sum_g.len());
        self.n += 1;
        for j in 0..g.len() {
            self.sum_g[j] += g[j];
            self.sum_c[j] += c[j];
            self.sum_gg[j] += g[j] * g[j];
            self.sum_cc[j] += c[j] * c[j];
            self.sum_gc[j] += g[j] * c[j];
        }
    }
}

/// Per-block raw sums for gradient/control pairs, enough to rebuild
/// coordinate-summed variances over any block resample. Backs the
/// bootstrap standard errors without storing per-sample gradients.
/// Scalar pairs are the dim = 1 case.
#[derive(Debug, Clone)]
pub struct BlockedVecStats {
    pub dim: usize,
    pub blocks: Vec<BlockStats>,
}

impl BlockedVecStats {
    pub fn new(dim: usize, blocks: usize) -> Self {
        assert!(blocks >= 2);
        BlockedVecStats { dim, blocks: (0..blocks).map(|_| BlockStats::new(dim)).collect() }
    }

    pub fn from_blocks(dim: usize, blocks: Vec<BlockStats>) -> Self {
        assert!(blocks.len() >= 2);
        BlockedVecStats { dim, blocks }
    }

    pub fn push(&mut self, block: usize, g: &[f64], c: &[f64]) {
        self.blocks[block].push(g, c);
    }

    pub fn total_count(&self) -> u64 {
        self.blocks.iter().map(|b| b.n).sum()
    }

    fn aggregate(&self, weights: Option<&[u32]>, scratch: &mut AggScratch) -> u64 {
        let d = self.dim;
        scratch.reset(d);
        let mut n = 0u64;
        for (b, stats) in self.blocks.iter().enumerate() {
            let w = weights.map_or(1, |w| w[b]);
            if w == 0 {
                continue;
            }
            n += w as u64 * stats.n;
            let wf = w as f64;
            for j in 0..d {
                scratch.g[j] += wf * stats.sum_g[j];
                scratch.c[j] += wf * stats.sum_c[j];
                scratch.gg[j] += wf * stats.sum_gg[j];
                scratch.cc[j] += wf * stats.sum_cc[j];
                scratch.gc[j] += wf * stats.sum_gc[j];
            }
        }
        n
    }

    /// Coordinate-summed variance ratio under the given block weights
    /// (None = the full sample).
    pub fn rho_weighted(&self, weights: Option<&[u32]>, beta: BetaChoice) -> f64 {
        let mut scratch = AggScratch::new(self.dim);
        self.rho_with_scratch(weights, beta, &mut scratch)
    }

    fn rho_with_scratch(
        &self,
        weights: Option<&[u32]>,
        beta: BetaChoice,
        scratch: &mut AggScratch,
    ) -> f64 {
        let n = self.aggregate(weights, scratch);
        if n < 2 {
            return f64::NAN;
        }
        let nf = n as f64;
        let mut raw = 0.0;
        let mut controlled = 0.0;
        for j in 0..self.dim {
            let m2g = scratch.gg[j] - scratch.g[j] * scratch.g[j] / nf;
            let m2c = scratch.cc[j] - scratch.c[j] * scratch.c[j] / nf;
            let mgc = scratch.gc[j] - scratch.g[j] * scratch.c[j] / nf;
            raw += m2g;
            controlled += match beta {
                BetaChoice::PerCoordinateOptimal => {
                    let reduction = if m2c <= VAR_GUARD { 0.0 } else { mgc * mgc / m2c };
                    m2g - reduction
                }
                BetaChoice::Scalar(b) => m2g - 2.0 * b * mgc + b * b * m2c,
            };
        }
        if raw <= 0.0 {
            f64::NAN
        } else {
            (controlled / raw).max(0.0)
        }
    }

    /// Pooled regression coefficient sum_j Cov_j / sum_j Var(C)_j under
    /// the given block weights.
    pub fn beta_pooled_weighted(&self, weights: Option<&[u32]>) -> f64 {
        let mut scratch = AggScratch::new(self.dim);
        let n = self.aggregate(weights, &mut scratch);
        if n < 2 {
            return f64::NAN;
        }
        let nf = n as f64;
        let mut cov = 0.0;
        let mut var = 0.0;
        for j in 0..self.dim {
            cov += scratch.gc[j] - scratch.g[j] * scratch.c[j] / nf;
            var += scratch.cc[j] - scratch.c[j] * scratch.c[j] / nf;
        }
        if var <= VAR_GUARD {
            0.0
        } else {
            cov / var
        }
    }

    /// Point estimate at the coordinate-wise optimal beta.
    pub fn rho(&self) -> f64 {
        self.rho_weighted(None, BetaChoice::PerCoordinateOptimal)
    }

    /// Block-bootstrap standard error of rho (beta re-estimated on
    /// every resample unless scalar).
    pub fn rho_bootstrap_se(&self, beta: BetaChoice, resamples: usize, rng: &mut RngStream) -> f64 {
        let mut scratch = AggScratch::new(self.dim);
        bootstrap_blocks(self.blocks.len(), resamples, rng, |weights| {
            self.rho_with_scratch(Some(weights), beta, &mut scratch)
        })
    }
}

/// Resamples block weights and returns the standard deviation of the
/// statistic over the resamples.
pub fn bootstrap_blocks(
    n_blocks: usize,
    resamples: usize,
    rng: &mut RngStream,
    mut stat: impl FnMut(&[u32]) -> f64,
) -> f64 {
    let mut weights = vec![0u32; n_blocks];
    let mut values = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for w in weights.iter_mut() {
            *w = 0;
        }
        for _ in 0..n_blocks {
            weights[rng.next_index(n_blocks)] += 1;
        }
        let v = stat(&weights);
        if v.is_finite() {
            values.push(v);
        }
    }
    if values.len() < 2 {
        return f64::NAN;
    }
    sample_variance(&values).sqrt()
}

struct AggScratch {
    g: Vec<f64>,
    c: Vec<f64>,
    gg: Vec<f64>,
    cc: Vec<f64>,
    gc: Vec<f64>,
}

impl AggScratch {
    fn new(dim: usize) -> Self {
        AggScratch {
            g: vec![0.0; dim],
            c: vec![0.0; dim],
            gg: vec![0.0; dim],
            cc: vec![0.0; dim],
            gc: vec![0.0; dim],
        }
    }

    fn reset(&mut self, dim: usize) {
        debug_assert_eq!(self.g.len(), dim);
        for v in [&mut self.g, &mut self.c, &mut self.gg, &mut self.cc, &mut self.gc] {
            for x in v.iter_mut() {
                *x = 0.0;
            }
        }
    }
}

/// How the objective-side rho is evaluated on a scalar sample.
#[derive(Debug, Clone, Copy)]
pub enum ScalarBeta {
    Optimal,
    Fixed(f64),
}

/// rho = Var(L - beta C) / Var(L) over paired scalar samples, with a
/// plain nonparametric bootstrap SE (beta re-estimated per resample
/// when optimal).
pub fn scalar_rho_with_se(
    l: &[f64],
    c: &[f64],
    beta: ScalarBeta,
    resamples: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64), CoreError> {
    if l.len() != c.len() || l.len() < 2 {
        return Err(CoreError::Contract("paired samples of length >= 2 required".into()));
    }
    let rho_of = |acc: &CovAccumulator| -> f64 {
        let var_l = acc.var_l();
        if var_l <= 0.0 {
            return f64::NAN;
        }
        match beta {
            ScalarBeta::Optimal => {
                let var_c = acc.var_c();
                let reduction = if var_c <= VAR_GUARD { 0.0 } else { acc.cov().powi(2) / var_c };
                ((var_l - reduction) / var_l).max(0.0)
            }
            ScalarBeta::Fixed(b) => {
                ((var_l - 2.0 * b * acc.cov() + b * b * acc.var_c()) / var_l).max(0.0)
            }
        }
    };
    let mut acc = CovAccumulator::new();
    for i in 0..l.len() {
        acc.push(l[i], c[i]);
    }
    let point = rho_of(&acc);

    let mut values = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut racc = CovAccumulator::new();
        for _ in 0..l.len() {
            let i = rng.next_index(l.len());
            racc.push(l[i], c[i]);
        }
        let r = rho_of(&racc);
        if r.is_finite() {
            values.push(r);
        }
    }
    let se = if values.len() < 2 { f64::NAN } else { sample_variance(&values).sqrt() };
    Ok((point, se))
}

/// One CSV row of a variance report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub sigma: f64,
    pub regime: String,
    pub k: u32,
    pub beta_mode: String,
    pub rho_obj: f64,
    pub rho_obj_se: f64,
    pub rho_grad: f64,
    pub rho_grad_se: f64,
    pub beta_mean: f64,
    pub n_samples: usize,
}

/// Collection of measurement rows, serialized as CSV.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VarianceReport {
    pub rows: Vec<ReportRow>,
}

impl VarianceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "sigma,regime,k,beta_mode,rho_obj,rho_obj_se,rho_grad,rho_grad_se,beta_mean,n_samples\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.sigma,
                r.regime,
                r.k,
                r.beta_mode,
                r.rho_obj,
                r.rho_obj_se,
                r.rho_grad,
                r.rho_grad_se,
                r.beta_mean,
                r.n_samples
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CoreError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}
