//! The bi-modal Gaussian toy distribution, its analytic score, datasets
//! and the score-field error metric.

use serde::{Deserialize, Serialize};

use crate::cv::DataMoments;
use crate::linalg::Vec64;
use crate::network::ScoreNetwork;
use crate::rng::RngStream;

/// Mixture of isotropic unit-covariance Gaussians.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec64>,
}

impl GaussianMixture {
    /// The toy target: 1/5 N(5, I) + 4/5 N(-5, I) in two dimensions.
    pub fn toy_bimodal() -> Self {
        GaussianMixture {
            weights: vec![0.2, 0.8],
            means: vec![vec![5.0, 5.0], vec![-5.0, -5.0]],
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Mixture mean, sum_i w_i mu_i.
    pub fn mean(&self) -> Vec64 {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for i in 0..d {
                m[i] += w * mu[i];
            }
        }
        m
    }

    /// Translated copy (used after centering a dataset).
    pub fn shifted(&self, offset: &[f64]) -> Self {
        GaussianMixture {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|mu| mu.iter().zip(offset).map(|(&m, &o)| m + o).collect())
                .collect(),
        }
    }

    /// log p(x) up to the shared (2 pi)^(-d/2) constant, with
    /// log-sum-exp stabilization.
    pub fn log_density_unnorm(&self, x: &[f64]) -> f64 {
        let exps: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(mu, &w)| {
                let sq: f64 = x.iter().zip(mu).map(|(&a, &b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * sq
            })
            .collect();
        let m = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + exps.iter().map(|e| (e - m).exp()).sum::<f64>().ln()
    }

    /// The Stein score of the mixture: sum_i r_i(x) (mu_i - x) with
    /// responsibilities computed via log-sum-exp.
    pub fn score(&self, x: &[f64]) -> Vec64 {
        let d = self.dim();
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(mu, &w)| {
                let sq: f64 = x.iter().zip(mu).map(|(&a, &b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * sq
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let mut out = vec![0.0; d];
        for (l, mu) in logits.iter().zip(&self.means) {
            let r = (l - m).exp() / denom;
            for i in 0..d {
                out[i] += r * (mu[i] - x[i]);
            }
        }
        out
    }

    /// Index of the nearest mode (for mode-mass splits).
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_sq = f64::INFINITY;
        for (i, mu) in self.means.iter().enumerate() {
            let sq: f64 = x.iter().zip(mu).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if sq < best_sq {
                best_sq = sq;
                best = i;
            }
        }
        best
    }

    /// One draw: component by weight, then a unit-covariance Gaussian.
    pub fn sample_one(&self, rng: &mut RngStream) -> Vec64 {
        let u = rng.next_f64();
        let mut acc = 0.0;
        let mut comp = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = i;
                break;
            }
        }
        let d = self.dim();
        let mut x = rng.gaussian_vec(d);
        for i in 0..d {
            x[i] += self.means[comp][i];
        }
        x
    }
}

/// Training samples, with optional centering and the empirical moments
/// the large-noise control variate needs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Vec64>,
    pub centered: bool,
    /// Mean subtracted during centering (zeros when uncentered).
    pub offset: Vec64,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> Vec64 {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for x in &self.samples {
            for i in 0..d {
                m[i] += x[i];
            }
        }
        for v in m.iter_mut() {
            *v /= self.samples.len() as f64;
        }
        m
    }

    /// Subtracts the empirical mean so that every first-order moment is
    /// exactly zero (up to rounding).
    pub fn center(&mut self) {
        if self.centered {
            return;
        }
        let m = self.mean();
        for x in self.samples.iter_mut() {
            for i in 0..x.len() {
                x[i] -= m[i];
            }
        }
        self.offset = m.iter().map(|&v| -v).collect();
        self.centered = true;
    }

    pub fn data_moments(&self, max_order: u32) -> DataMoments {
        DataMoments::from_samples(&self.samples, max_order)
    }

    pub fn draw<'a>(&'a self, rng: &mut RngStream) -> &'a Vec64 {
        &self.samples[rng.next_index(self.samples.len())]
    }
}

/// n i.i.d. mixture draws.
pub fn mixture_sample(gm: &GaussianMixture, rng: &mut RngStream, n: usize) -> Dataset {
    assert!(n >= 1);
    let samples = (0..n).map(|_| gm.sample_one(rng)).collect();
    Dataset { samples, centered: false, offset: vec![0.0; gm.dim()] }
}

/// Mean squared error between the network score field and the analytic
/// mixture score over the given evaluation points.
pub fn score_field_mse(net: &ScoreNetwork, gm: &GaussianMixture, points: &[Vec64]) -> f64 {
    assert!(!points.is_empty());
    let mut total = 0.0;
    for x in points {
        let s = net.forward(x);
        let truth = gm.score(x);
        total += s.iter().zip(&truth).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>();
    }
    total / points.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationFamily;
    use crate::network::{MlpConfig, ScoreNetwork};

    #[test]
    fn score_collapses_to_near_mode() {
        let gm = GaussianMixture::toy_bimodal();
        let s = gm.score(&[5.0, 5.0]);
        assert!(crate::linalg::norm(&s) < 1e-8, "{:?}", s);
    }

    #[test]
    fn score_at_origin_is_mixture_weighted() {
        let gm = GaussianMixture::toy_bimodal();
        let s = gm.score(&[0.0, 0.0]);
        assert!((s[0] + 3.0).abs() < 1e-12 && (s[1] + 3.0).abs() < 1e-12, "{:?}", s);
    }

    #[test]
    fn score_matches_log_density_gradient() {
        let gm = GaussianMixture::toy_bimodal();
        let mut rng = RngStream::new(7, 1);
        let h = 1e-5;
        for _ in 0..1000 {
            let x = gm.sample_one(&mut rng);
            let s = gm.score(&x);
            for i in 0..2 {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (gm.log_density_unnorm(&xp) - gm.log_density_unnorm(&xm)) / (2.0 * h);
                let scale = fd.abs().max(s[i].abs()).max(1e-4);
                assert!((fd - s[i]).abs() <= 1e-6 * scale.max(1.0), "{} vs {}", fd, s[i]);
            }
        }
    }

    #[test]
    fn sample_statistics() {
        let gm = GaussianMixture::toy_bimodal();
        let mut rng = RngStream::new(2023, 0);
        let n = 100_000;
        let data = mixture_sample(&gm, &mut rng, n);
        let mode1 = data.samples.iter().filter(|x| gm.nearest_mode(x) == 0).count() as f64
            / n as f64;
        // binomial 5 SE band around 0.2
        assert!((mode1 - 0.2).abs() <= 5.0 * (0.2 * 0.8 / n as f64).sqrt(), "{mode1}");
        let mean = data.mean();
        // per-dimension variance is 1 + w1 w2 (mu1 - mu2)^2 = 17
        let se = (17.0 / n as f64).sqrt();
        for i in 0..2 {
            assert!((mean[i] + 3.0).abs() <= 5.0 * se, "mean[{i}] = {}", mean[i]);
        }

        // determinism
        let data2 = mixture_sample(&gm, &mut RngStream::new(2023, 0), n);
        assert_eq!(data.samples[0], data2.samples[0]);
        assert_eq!(data.samples[n - 1], data2.samples[n - 1]);
    }

    #[test]
    fn centering_zeroes_first_moments() {
        let gm = GaussianMixture::toy_bimodal();
        let mut data = mixture_sample(&gm, &mut RngStream::new(5, 0), 10_000);
        data.center();
        let moments = data.data_moments(2);
        for i in 0..2 {
            let mu1 = moments.mu(&crate::moments::MultiIndex::unit(2, i)).unwrap();
            assert!(mu1.abs() <= 1e-12, "first moment {mu1}");
        }
        let mu0 = moments.mu(&crate::moments::MultiIndex::zeros(2)).unwrap();
        assert_eq!(mu0, 1.0);
    }

    #[test]
    fn mse_of_zero_network_is_mean_squared_score() {
        let gm = GaussianMixture::toy_bimodal();
        let net = ScoreNetwork::zeros(MlpConfig::new(2, vec![4], ActivationFamily::Tanh)).unwrap();
        let mut rng = RngStream::new(9, 9);
        let pts: Vec<Vec64> = (0..200).map(|_| gm.sample_one(&mut rng)).collect();
        let mse = score_field_mse(&net, &gm, &pts);
        let expect: f64 = pts
            .iter()
            .map(|x| crate::linalg::norm_sq(&gm.score(x)))
            .sum::<f64>()
            / pts.len() as f64;
        assert!((mse - expect).abs() < 1e-12);
        assert!(mse > 0.0);
    }
}
