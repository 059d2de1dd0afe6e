//! Taylor-order comparison: rho_g and beta_g curves over sigma for
//! k in {0, 1, 2}, averaged over seeds.

use crate::cv::Regime;
use crate::error::CoreError;
use crate::estimator::{BetaChoice, ReportRow, VarianceReport};
use crate::rng::RngStream;

use super::{default_network, measure_cell, toy_setup, train_checkpoint, ExperimentSpec};

/// Per-seed reports plus the seed-averaged report (rho and beta
/// averaged cell-wise; SE column carries the seed spread of rho).
pub struct KCompareResult {
    pub per_seed: Vec<(u64, VarianceReport)>,
    pub mean: VarianceReport,
}

pub fn run_k_compare(spec: &ExperimentSpec) -> Result<KCompareResult, CoreError> {
    spec.validate()?;
    let mut per_seed = Vec::new();
    for &seed in &spec.seeds {
        let setup = toy_setup(spec.dataset_size, seed);
        let net = train_checkpoint(
            default_network(spec, seed)?,
            &setup.data,
            spec.train_steps,
            spec.train_batch,
            spec.train_sigma_min,
            spec.train_sigma_max,
            seed,
        )?;
        let master = RngStream::new(seed, 0);
        let mut report = VarianceReport::default();
        for (i, &sigma) in spec.sigma_grid.iter().enumerate() {
            // one stream per sigma, shared across k: paired comparison
            let cell_rng = master.split(0xC0_0000 + i as u64);
            for &k in &spec.k_list {
                let cell = measure_cell(
                    &net,
                    &setup.data,
                    sigma,
                    Regime::SmallSigma,
                    k,
                    spec.n_samples,
                    spec.blocks,
                    true,
                    &cell_rng,
                )?;
                let mut boot = cell_rng.split(0xB00 + k as u64);
                let choice = BetaChoice::PerCoordinateOptimal;
                report.rows.push(ReportRow {
                    sigma,
                    regime: "small".into(),
                    k,
                    beta_mode: "opt".into(),
                    rho_obj: cell.rho_obj(choice),
                    rho_obj_se: f64::NAN,
                    rho_grad: cell.rho_grad(choice),
                    rho_grad_se: cell.rho_grad_se(choice, spec.resamples, &mut boot),
                    beta_mean: cell.beta_grad_pooled(),
                    n_samples: cell.n,
                });
            }
        }
        per_seed.push((seed, report));
    }

    // cell-wise mean over seeds; the SE column becomes the standard
    // error of the seed mean
    let mut mean = VarianceReport::default();
    let rows_per_seed = per_seed[0].1.rows.len();
    let n_seeds = per_seed.len() as f64;
    for r in 0..rows_per_seed {
        let template = &per_seed[0].1.rows[r];
        let rhos: Vec<f64> = per_seed.iter().map(|(_, rep)| rep.rows[r].rho_grad).collect();
        let betas: Vec<f64> = per_seed.iter().map(|(_, rep)| rep.rows[r].beta_mean).collect();
        let rho_mean = rhos.iter().sum::<f64>() / n_seeds;
        let var =
            rhos.iter().map(|&v| (v - rho_mean) * (v - rho_mean)).sum::<f64>() / (n_seeds - 1.0).max(1.0);
        mean.rows.push(ReportRow {
            sigma: template.sigma,
            regime: template.regime.clone(),
            k: template.k,
            beta_mode: "opt_seed_mean".into(),
            rho_obj: per_seed.iter().map(|(_, rep)| rep.rows[r].rho_obj).sum::<f64>() / n_seeds,
            rho_obj_se: f64::NAN,
            rho_grad: rho_mean,
            rho_grad_se: (var / n_seeds).sqrt(),
            beta_mean: betas.iter().sum::<f64>() / n_seeds,
            n_samples: per_seed.iter().map(|(_, rep)| rep.rows[r].n_samples).sum(),
        });
    }
    Ok(KCompareResult { per_seed, mean })
}

impl KCompareResult {
    /// Seed-averaged rho_g for a (k, sigma) cell.
    pub fn mean_rho(&self, k: u32, sigma: f64) -> Option<f64> {
        self.mean
            .rows
            .iter()
            .find(|r| r.k == k && (r.sigma - sigma).abs() < 1e-12)
            .map(|r| r.rho_grad)
    }
}
