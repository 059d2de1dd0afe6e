//! The experiment harness: frozen-checkpoint variance measurement and
//! the individual study runners.

pub mod beta_study;
pub mod convergence;
pub mod grid;
pub mod k_compare;
pub mod optimizer_compare;
pub mod sigma_sweep;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationFamily;
use crate::cv::{build_objective_cv, expansion_point, CvPlan, Regime};
use crate::dsm::build_dsm_loss;
use crate::error::CoreError;
use crate::estimator::{BetaChoice, BlockStats, BlockedVecStats};
use crate::mixture::{mixture_sample, Dataset, GaussianMixture};
use crate::moments::MomentTable;
use crate::network::{MlpConfig, ScoreNetwork};
use crate::rng::RngStream;
use crate::tape::Tape;
use crate::train::{default_train_config, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    BetaStudy,
    SigmaSweep,
    KCompare,
    Convergence,
    Grid,
    OptimizerCompare,
}

/// Flat experiment configuration; unset fields fall back to the
/// defaults of the requested experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub experiment: Option<ExperimentId>,
    pub sigma_grid: Vec<f64>,
    pub k_list: Vec<u32>,
    pub seeds: Vec<u64>,
    /// Draws per measurement cell.
    pub n_samples: usize,
    pub dataset_size: usize,
    /// Steps of plain training before measurement (0 = measure at init).
    pub train_steps: usize,
    pub train_batch: usize,
    pub train_sigma_min: f64,
    pub train_sigma_max: f64,
    pub hidden_widths: Vec<usize>,
    /// Convergence experiment arms.
    pub conv_batch_small: usize,
    pub conv_batch_large: usize,
    pub conv_steps_small: usize,
    pub conv_steps_large: usize,
    /// Width/depth grid.
    pub depths: Vec<usize>,
    pub param_budget: usize,
    /// Optimizer comparison.
    pub lr_sgd: f64,
    pub lr_adam: f64,
    pub checkpoint_steps: Vec<usize>,
    /// Bootstrap controls.
    pub blocks: usize,
    pub resamples: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            experiment: None,
            sigma_grid: vec![0.1, 0.5, 1.0, 5.0, 10.0],
            k_list: vec![0, 1, 2],
            seeds: vec![1, 2, 3, 4, 5],
            n_samples: 10_000,
            dataset_size: 10_000,
            train_steps: 2_000,
            train_batch: 128,
            train_sigma_min: 0.1,
            train_sigma_max: 10.0,
            hidden_widths: vec![128, 128],
            conv_batch_small: 10,
            conv_batch_large: 1_000,
            conv_steps_small: 3_000,
            conv_steps_large: 1_000,
            depths: vec![1, 2, 3, 4],
            param_budget: 17_154,
            lr_sgd: 0.005,
            lr_adam: 0.001,
            checkpoint_steps: vec![0, 250, 500, 1_000, 1_500],
            blocks: 50,
            resamples: 200,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.sigma_grid.is_empty()
            || self.sigma_grid.iter().any(|&s| s <= 0.0)
            || self.sigma_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(CoreError::InvalidConfig("sigma grid must be positive ascending".into()));
        }
        if self.seeds.is_empty() {
            return Err(CoreError::InvalidConfig("at least one seed required".into()));
        }
        Ok(())
    }
}

/// Centered toy dataset plus the analytic score oracle translated to
/// match the centering.
pub struct ToySetup {
    pub data: Dataset,
    pub oracle: GaussianMixture,
}

pub fn toy_setup(dataset_size: usize, seed: u64) -> ToySetup {
    let gm = GaussianMixture::toy_bimodal();
    let mut rng = RngStream::new(seed, 0).split(0xDA7A);
    let mut data = mixture_sample(&gm, &mut rng, dataset_size);
    data.center();
    let oracle = gm.shifted(&data.offset);
    ToySetup { data, oracle }
}

/// The default measurement network: two hidden layers of 128, tanh.
pub fn default_network(spec: &ExperimentSpec, seed: u64) -> Result<ScoreNetwork, CoreError> {
    let cfg = MlpConfig::new(2, spec.hidden_widths.clone(), ActivationFamily::Tanh);
    ScoreNetwork::init(cfg, &mut RngStream::new(seed, 0).split(0x1217))
}

/// Plain (no control variate) training to the measurement checkpoint.
pub fn train_checkpoint(
    net: ScoreNetwork,
    data: &Dataset,
    steps: usize,
    batch: usize,
    sigma_min: f64,
    sigma_max: f64,
    seed: u64,
) -> Result<ScoreNetwork, CoreError> {
    if steps == 0 {
        return Ok(net);
    }
    let mut cfg = default_train_config(seed);
    cfg.batch_size = batch;
    cfg.steps = steps;
    cfg.sigma_min = sigma_min;
    cfg.sigma_max = sigma_max;
    let mut trainer = Trainer::new(net, data, &cfg)?;
    for _ in 0..steps {
        trainer.train_step(batch)?;
    }
    Ok(trainer.net)
}

/// Paired loss / control-variate statistics of one frozen-checkpoint
/// cell: objective pairs as dim-1 blocks, gradient pairs as dim-p
/// blocks.
pub struct CellMeasurement {
    pub sigma: f64,
    pub regime: Regime,
    pub k: u32,
    pub n: usize,
    pub obj: BlockedVecStats,
    pub grad: Option<BlockedVecStats>,
}

impl CellMeasurement {
    pub fn rho_obj(&self, beta: BetaChoice) -> f64 {
        self.obj.rho_weighted(None, beta)
    }

    pub fn rho_obj_se(&self, beta: BetaChoice, resamples: usize, rng: &mut RngStream) -> f64 {
        self.obj.rho_bootstrap_se(beta, resamples, rng)
    }

    pub fn beta_obj(&self) -> f64 {
        self.obj.beta_pooled_weighted(None)
    }

    pub fn grad(&self) -> &BlockedVecStats {
        self.grad.as_ref().expect("cell was measured without gradients")
    }

    pub fn rho_grad(&self, beta: BetaChoice) -> f64 {
        self.grad().rho_weighted(None, beta)
    }

    pub fn rho_grad_se(&self, beta: BetaChoice, resamples: usize, rng: &mut RngStream) -> f64 {
        self.grad().rho_bootstrap_se(beta, resamples, rng)
    }

    pub fn beta_grad_pooled(&self) -> f64 {
        self.grad().beta_pooled_weighted(None)
    }
}

/// Measures one (sigma, regime, k) cell at frozen parameters with
/// paired draws. Work is chunked deterministically: chunk b consumes
/// stream `rng.split(b)`, so results are independent of thread count.
pub fn measure_cell(
    net: &ScoreNetwork,
    data: &Dataset,
    sigma: f64,
    regime: Regime,
    k: u32,
    draws: usize,
    blocks: usize,
    with_gradients: bool,
    rng: &RngStream,
) -> Result<CellMeasurement, CoreError> {
    let dim = net.input_dim();
    let p = net.param_count();
    let plan = match regime {
        Regime::SmallSigma => {
            let table = MomentTable::new(dim, k);
            CvPlan::small(dim, k, &table)?
        }
        Regime::LargeSigma => {
            let moments = data.data_moments(2 * k);
            CvPlan::large(dim, k, &moments)?
        }
    };
    let per_block = draws.div_ceil(blocks);

    let results: Vec<Result<(BlockStats, Option<BlockStats>), CoreError>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng.split(b as u64);
            let mut tape = Tape::new(net);
            let mut obj_block = BlockStats::new(1);
            let mut grad_block = with_gradients.then(|| BlockStats::new(p));
            let mut gbuf = vec![0.0; p];
            let count = per_block.min(draws.saturating_sub(b * per_block));
            for _ in 0..count {
                let x = data.draw(&mut rng).clone();
                let z = rng.gaussian_vec(dim);
                tape.clear();
                let loss_node = build_dsm_loss(&mut tape, &x, &z, sigma)?;
                let l = tape.scalar_value(loss_node);
                let point = expansion_point(regime, &x, &z, sigma);
                let jet = tape.input_jet(&point, k.min(2) as u8)?;
                let cv_node = build_objective_cv(&mut tape, &jet, &x, &z, sigma, &plan)?;
                let c = tape.scalar_value(cv_node);
                if !l.is_finite() || !c.is_finite() {
                    tape.assert_finite("cell measurement")?;
                }
                obj_block.push(&[l], &[c]);
                if let Some(gb) = grad_block.as_mut() {
                    tape.backward(loss_node)?;
                    gbuf.copy_from_slice(tape.param_grad());
                    tape.backward(cv_node)?;
                    gb.push(&gbuf, tape.param_grad());
                }
            }
            Ok((obj_block, grad_block))
        })
        .collect();

    let mut obj_blocks = Vec::with_capacity(blocks);
    let mut grad_blocks = with_gradients.then(|| Vec::with_capacity(blocks));
    for r in results {
        let (o, g) = r?;
        obj_blocks.push(o);
        if let (Some(list), Some(g)) = (grad_blocks.as_mut(), g) {
            list.push(g);
        }
    }
    Ok(CellMeasurement {
        sigma,
        regime,
        k,
        n: draws,
        obj: BlockedVecStats::from_blocks(1, obj_blocks),
        grad: grad_blocks.map(|g| BlockedVecStats::from_blocks(p, g)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_cell_is_thread_count_invariant_and_sane() {
        let setup = toy_setup(512, 3);
        let net = default_network(&ExperimentSpec::default(), 5).unwrap();
        let rng = RngStream::new(42, 0);
        let cell = measure_cell(
            &net,
            &setup.data,
            0.5,
            Regime::SmallSigma,
            1,
            400,
            8,
            true,
            &rng,
        )
        .unwrap();
        assert_eq!(cell.obj.total_count(), 400);
        let rho = cell.rho_grad(BetaChoice::PerCoordinateOptimal);
        assert!(rho.is_finite() && (0.0..=1.0).contains(&rho), "{rho}");
        // beta = 0 leaves the objective variance untouched
        let rho0 = cell.rho_obj(BetaChoice::Scalar(0.0));
        assert!((rho0 - 1.0).abs() < 1e-12);

        // rerun gives bit-identical statistics
        let cell2 =
            measure_cell(&net, &setup.data, 0.5, Regime::SmallSigma, 1, 400, 8, true, &rng)
                .unwrap();
        assert_eq!(cell.rho_obj(BetaChoice::PerCoordinateOptimal).to_bits(),
                   cell2.rho_obj(BetaChoice::PerCoordinateOptimal).to_bits());
        assert_eq!(rho.to_bits(), cell2.rho_grad(BetaChoice::PerCoordinateOptimal).to_bits());
    }
}
