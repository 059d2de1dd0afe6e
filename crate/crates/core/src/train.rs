//! Training loop: per-sample noise levels, gradient control variates,
//! pooled beta estimation and JSON-lines step records.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::{build_objective_cv, expansion_point, lambda, CvPlan, Regime};
use crate::dsm::{build_dsm_loss, make_schedule, NoiseSchedule};
use crate::error::CoreError;
use crate::estimator::{BetaEstimate, BetaMode, VecCovAccumulator};
use crate::linalg::norm;
use crate::mixture::Dataset;
use crate::moments::MomentTable;
use crate::network::ScoreNetwork;
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::RngStream;
use crate::tape::Tape;

/// Per-sample work is sliced into fixed-size chunks so results do not
/// depend on the worker count.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvTrainConfig {
    pub regime: Regime,
    pub k: u32,
    #[serde(default)]
    pub beta_mode: BetaMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub levels: usize,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub cv: Option<CvTrainConfig>,
    #[serde(default)]
    pub checkpoint_steps: Vec<usize>,
    /// Project every weight matrix onto spectral norm 1 after each step.
    #[serde(default)]
    pub spectral_projection: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.batch_size < 1 {
            return Err(CoreError::InvalidConfig("batch size must be >= 1".into()));
        }
        if let Some(cv) = &self.cv {
            if cv.k > 2 {
                return Err(CoreError::InvalidConfig("cv order k must be <= 2".into()));
            }
        }
        Ok(())
    }
}

/// One JSON-lines record per training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_mean: f64,
    pub grad_norm: f64,
    pub rho_g_batch: f64,
    pub beta_norm: f64,
    pub sigma_histogram: Vec<u32>,
}

struct CvState {
    plan: CvPlan,
    beta: BetaEstimate,
    k: u32,
    regime: Regime,
}

pub struct Trainer<'a> {
    pub net: ScoreNetwork,
    pub schedule: NoiseSchedule,
    data: &'a Dataset,
    opt: OptimizerState,
    cv: Option<CvState>,
    rng: RngStream,
    spectral_projection: bool,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(net: ScoreNetwork, data: &'a Dataset, config: &TrainConfig) -> Result<Self, CoreError> {
        config.validate()?;
        let schedule = make_schedule(config.sigma_min, config.sigma_max, config.levels)?;
        let opt = OptimizerState::new(config.optimizer, net.param_count());
        let cv = match &config.cv {
            None => None,
            Some(c) => {
                let dim = net.input_dim();
                let plan = match c.regime {
                    Regime::SmallSigma => {
                        let table = MomentTable::new(dim, c.k);
                        CvPlan::small(dim, c.k, &table)?
                    }
                    Regime::LargeSigma => {
                        let moments = data.data_moments(2 * c.k);
                        CvPlan::large(dim, c.k, &moments)?
                    }
                };
                Some(CvState {
                    plan,
                    beta: BetaEstimate::new(c.beta_mode, net.param_count()),
                    k: c.k,
                    regime: c.regime,
                })
            }
        };
        Ok(Trainer {
            net,
            schedule,
            data,
            opt,
            cv,
            rng: RngStream::new(config.seed, 0),
            spectral_projection: config.spectral_projection,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Draws a batch, forms the (optionally controlled) averaged
    /// gradient and applies one optimizer update.
    pub fn train_step(&mut self, batch_size: usize) -> Result<StepRecord, CoreError> {
        let d = self.net.input_dim();
        let p = self.net.param_count();
        let n_levels = self.schedule.levels.len();

        // All randomness is drawn up front, so the stream advance per
        // step is identical with and without the control variate.
        let mut inputs = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let xi = self.rng.next_index(self.data.len());
            let level = self.rng.next_index(n_levels);
            let z = self.rng.gaussian_vec(d);
            inputs.push((xi, level, z));
        }

        struct Partial {
            grad_sum: Vec<f64>,
            acc: Option<VecCovAccumulator>,
            loss_sum: f64,
            hist: Vec<u32>,
            bad: Option<usize>,
        }

        let net = &self.net;
        let data = self.data;
        let schedule = &self.schedule;
        let cv = &self.cv;
        let beta: Option<&[f64]> = cv.as_ref().map(|c| c.beta.value.as_slice());

        let partials: Vec<Partial> = inputs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new(net);
                let mut grad_sum = vec![0.0; p];
                let mut gbuf = vec![0.0; p];
                let mut sg = vec![0.0; p];
                let mut sc = vec![0.0; p];
                let mut acc = cv.as_ref().map(|_| VecCovAccumulator::new(p));
                let mut loss_sum = 0.0;
                let mut hist = vec![0u32; n_levels];
                let mut bad = None;
                for (xi, level, z) in chunk {
                    let x = &data.samples[*xi];
                    let sigma = schedule.levels[*level];
                    let lam = lambda(sigma);
                    hist[*level] += 1;
                    tape.clear();
                    let loss_node = match build_dsm_loss(&mut tape, x, z, sigma) {
                        Ok(n) => n,
                        Err(_) => {
                            bad = Some(*xi);
                            continue;
                        }
                    };
                    let loss = tape.scalar_value(loss_node);
                    if tape.backward(loss_node).is_err() {
                        bad = Some(*xi);
                        continue;
                    }
                    gbuf.copy_from_slice(tape.param_grad());
                    loss_sum += lam * loss;

                    match cv {
                        None => {
                            for j in 0..p {
                                grad_sum[j] += lam * gbuf[j];
                            }
                        }
                        Some(state) => {
                            let point = expansion_point(state.regime, x, z, sigma);
                            let cv_grad = (|| -> Result<(), CoreError> {
                                let jet = tape.input_jet(&point, state.k.min(2) as u8)?;
                                let node =
                                    build_objective_cv(&mut tape, &jet, x, z, sigma, &state.plan)?;
                                tape.backward(node)
                            })();
                            if cv_grad.is_err() {
                                bad = Some(*xi);
                                continue;
                            }
                            let c = tape.param_grad();
                            let b = beta.unwrap();
                            for j in 0..p {
                                grad_sum[j] += lam * (gbuf[j] - b[j] * c[j]);
                                sg[j] = lam * gbuf[j];
                                sc[j] = lam * c[j];
                            }
                            acc.as_mut().unwrap().push(&sg, &sc);
                        }
                    }
                    if !loss.is_finite() {
                        bad = Some(*xi);
                    }
                }
                Partial { grad_sum, acc, loss_sum, hist, bad }
            })
            .collect();

        // deterministic merge in chunk order
        let mut grad = vec![0.0; p];
        let mut batch_acc = self.cv.as_ref().map(|_| VecCovAccumulator::new(p));
        let mut loss_sum = 0.0;
        let mut hist = vec![0u32; n_levels];
        for part in &partials {
            if let Some(xi) = part.bad {
                return Err(CoreError::NonFinite {
                    node: 0,
                    context: format!("training step {} on sample index {xi}", self.step),
                });
            }
            for j in 0..p {
                grad[j] += part.grad_sum[j];
            }
            loss_sum += part.loss_sum;
            for (h, ph) in hist.iter_mut().zip(&part.hist) {
                *h += ph;
            }
            if let (Some(total), Some(pa)) = (batch_acc.as_mut(), part.acc.as_ref()) {
                total.merge(pa);
            }
        }
        let bf = batch_size as f64;
        for g in grad.iter_mut() {
            *g /= bf;
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                node: 0,
                context: format!("averaged gradient at step {}", self.step),
            });
        }

        let grad_norm = norm(&grad);
        self.opt.update(&mut self.net.theta, &grad);
        if self.spectral_projection {
            self.net.spectral_normalize(100);
        }

        let mut rho_g_batch = f64::NAN;
        let mut beta_norm = 0.0;
        if let (Some(state), Some(acc)) = (self.cv.as_mut(), batch_acc.as_ref()) {
            if acc.count() >= 2 {
                rho_g_batch = acc.rho_optimal().unwrap_or(f64::NAN);
                state.beta.update(acc);
            }
            beta_norm = norm(&state.beta.value);
        }

        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss_mean: loss_sum / bf,
            grad_norm,
            rho_g_batch,
            beta_norm,
            sigma_histogram: hist,
        })
    }

    /// Runs `steps` training steps, invoking the callback after each.
    pub fn run(
        &mut self,
        steps: usize,
        batch_size: usize,
        mut on_step: impl FnMut(&StepRecord, &ScoreNetwork),
    ) -> Result<(), CoreError> {
        for _ in 0..steps {
            let record = self.train_step(batch_size)?;
            on_step(&record, &self.net);
        }
        Ok(())
    }
}

/// Convenience builder used by experiments: schedule is part of the
/// config, data indices and noise share one master stream.
pub fn default_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 128,
        steps: 2000,
        seed,
        sigma_min: 0.1,
        sigma_max: 10.0,
        levels: 10,
        optimizer: OptimizerKind::adam(0.001),
        cv: None,
        checkpoint_steps: Vec::new(),
        spectral_projection: false,
    }
}

/// Ratio of mean lambda(sigma) L between the largest and smallest
/// schedule levels; the weighting aims at keeping this near one.
pub fn lambda_magnitude_ratio(
    net: &ScoreNetwork,
    data: &Dataset,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
    n: usize,
) -> Result<f64, CoreError> {
    let d = net.input_dim();
    let mut means = Vec::new();
    for &sigma in [schedule.sigma_min, schedule.sigma_max].iter() {
        let mut total = 0.0;
        for _ in 0..n {
            let x = data.draw(rng);
            let z = rng.gaussian_vec(d);
            total += lambda(sigma) * crate::dsm::dsm_loss_value(net, x, &z, sigma)?;
        }
        means.push(total / n as f64);
    }
    Ok(means[1] / means[0])
}
