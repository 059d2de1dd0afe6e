//! Control variates for the denoising score matching objective and its
//! gradients, assembled from k-th order Taylor expansions of the score
//! network.
//!
//! Two regimes: the small-noise expansion is centered at the data point
//! with sigma*z as the perturbation and de-biased with Gaussian
//! moments; the large-noise expansion is centered at sigma*z with the
//! data point as the perturbation and de-biased with empirical data
//! moments. For each regime the objective control variate is built as
//! tape nodes, so one reverse pass yields the gradient control variate;
//! the directly assembled gradient expression exists as an independent
//! route for testing the equivalence.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::linalg::{dot, norm_sq, Vec64};
use crate::moments::{enumerate_multi_indices, JetValues, MomentTable, MultiIndex};
use crate::network::ScoreNetwork;
use crate::tape::{InputJet, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SmallSigma,
    LargeSigma,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::SmallSigma => "small",
            Regime::LargeSigma => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvTarget {
    Objective,
    Gradient,
}

/// Which control variate to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub regime: Regime,
    pub k: u32,
    pub target: CvTarget,
}

/// Empirical data moments mu_alpha = E[x^alpha] over the training set.
#[derive(Debug, Clone)]
pub struct DataMoments {
    dim: usize,
    max_order: u32,
    mu: HashMap<MultiIndex, f64>,
    pub sample_count: usize,
}

impl DataMoments {
    /// Moments of every |alpha| <= max_order over the given samples.
    pub fn from_samples(samples: &[Vec64], max_order: u32) -> Self {
        assert!(!samples.is_empty());
        let dim = samples[0].len();
        let n = samples.len() as f64;
        let mut mu = HashMap::new();
        for alpha in enumerate_multi_indices(dim, max_order) {
            let mean = samples.iter().map(|x| alpha.monomial(x)).sum::<f64>() / n;
            mu.insert(alpha, mean);
        }
        DataMoments { dim, max_order, mu, sample_count: samples.len() }
    }

    /// Directly supplied moments (tests and synthetic setups).
    pub fn from_parts(dim: usize, max_order: u32, mu: HashMap<MultiIndex, f64>) -> Self {
        DataMoments { dim, max_order, mu, sample_count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    pub fn mu(&self, alpha: &MultiIndex) -> Result<f64, CoreError> {
        self.mu.get(alpha).copied().ok_or_else(|| CoreError::MissingMoment(alpha.0.clone()))
    }
}

/// Per-(dim, k) constants of one control-variate family, precomputed so
/// the per-sample inner loops touch no hash maps and allocate nothing
/// beyond tape nodes.
#[derive(Debug, Clone)]
pub struct CvPlan {
    pub dim: usize,
    pub k: u32,
    pub regime: Regime,
    pub indices: Vec<MultiIndex>,
    order: Vec<i32>,
    fact_inv: Vec<f64>,
    /// E[z^alpha z] per index (small regime only).
    vec_moment: Vec<Vec64>,
    /// delta_{alpha_i + alpha_j} (small) or mu_{alpha_i + alpha_j} (large), n x n.
    pair_constant: Vec<f64>,
    /// mu_{alpha_i} (large regime only).
    mu: Vec<f64>,
}

impl CvPlan {
    pub fn small(dim: usize, k: u32, table: &MomentTable) -> Result<Self, CoreError> {
        let indices = enumerate_multi_indices(dim, k);
        let n = indices.len();
        let mut pair_constant = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                pair_constant[i * n + j] = table.delta(&indices[i].add(&indices[j]))?;
            }
        }
        let vec_moment =
            indices.iter().map(|a| table.vec_moment(a).cloned()).collect::<Result<Vec<_>, _>>()?;
        Ok(CvPlan {
            dim,
            k,
            regime: Regime::SmallSigma,
            order: indices.iter().map(|a| a.order() as i32).collect(),
            fact_inv: indices.iter().map(|a| 1.0 / a.factorial()).collect(),
            vec_moment,
            pair_constant,
            mu: Vec::new(),
            indices,
        })
    }

    pub fn large(dim: usize, k: u32, data: &DataMoments) -> Result<Self, CoreError> {
        if data.dim() != dim {
            return Err(CoreError::InvalidConfig("data moment dimension mismatch".into()));
        }
        let indices = enumerate_multi_indices(dim, k);
        let n = indices.len();
        let mut pair_constant = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                pair_constant[i * n + j] = data.mu(&indices[i].add(&indices[j]))?;
            }
        }
        let mu = indices.iter().map(|a| data.mu(a)).collect::<Result<Vec<_>, _>>()?;
        Ok(CvPlan {
            dim,
            k,
            regime: Regime::LargeSigma,
            order: indices.iter().map(|a| a.order() as i32).collect(),
            fact_inv: indices.iter().map(|a| 1.0 / a.factorial()).collect(),
            vec_moment: Vec::new(),
            pair_constant,
            mu,
            indices,
        })
    }
}

/// Tape node holding d^alpha s for |alpha| <= 2.
fn jet_node(jet: &InputJet, alpha: &MultiIndex) -> Result<NodeId, CoreError> {
    match alpha.order() {
        0 => Ok(jet.value),
        1 => {
            let p = alpha.0.iter().position(|&a| a == 1).unwrap();
            jet.first.get(p).copied().ok_or_else(|| CoreError::MissingMoment(alpha.0.clone()))
        }
        2 => {
            let mut it = alpha.0.iter().enumerate().filter(|(_, &a)| a > 0);
            let (p, &ap) = it.next().unwrap();
            let q = if ap == 2 { p } else { it.next().unwrap().0 };
            if jet.second.is_empty() {
                return Err(CoreError::MissingMoment(alpha.0.clone()));
            }
            Ok(jet.second_node(p, q))
        }
        _ => Err(CoreError::MissingMoment(alpha.0.clone())),
    }
}

/// Value-level network derivatives extracted from a jet on the tape.
pub fn extract_jet_values(tape: &Tape, jet: &InputJet) -> JetValues {
    JetValues {
        dim: jet.dim,
        value: tape.value(jet.value).to_vec(),
        first: jet.first.iter().map(|&n| tape.value(n).to_vec()).collect(),
        second: jet.second.iter().map(|&n| tape.value(n).to_vec()).collect(),
    }
}

fn check_sigma(sigma: f64) -> Result<(), CoreError> {
    if sigma <= 0.0 {
        return Err(CoreError::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Small-noise objective control variate as a scalar tape node:
///
/// (||z||^2 - D) / (2 sigma^2)
///   + 1/2 sum_{|a|,|r| <= k} sigma^(|a|+|r|)/(a! r!) (z^(a+r) - delta_(a+r)) <d^a s, d^r s>
///   + sum_{|a| <= k} sigma^(|a|-1)/a! <z^a z - E[z^a z], d^a s>
///
/// evaluated at x (the jet's expansion point). Zero mean over z by
/// construction.
pub fn build_cv_objective_small(
    tape: &mut Tape,
    jet: &InputJet,
    z: &[f64],
    sigma: f64,
    plan: &CvPlan,
) -> Result<NodeId, CoreError> {
    check_sigma(sigma)?;
    debug_assert!(matches!(plan.regime, Regime::SmallSigma));
    let d = plan.dim;
    let n = plan.indices.len();
    let monomials: Vec<f64> = plan.indices.iter().map(|a| a.monomial(z)).collect();
    let nodes: Vec<NodeId> =
        plan.indices.iter().map(|a| jet_node(jet, a)).collect::<Result<Vec<_>, _>>()?;

    let mut terms: Vec<(f64, NodeId)> = Vec::with_capacity(n * (n + 1) / 2 + n);
    for i in 0..n {
        for j in i..n {
            let zc = monomials[i] * monomials[j] - plan.pair_constant[i * n + j];
            if zc == 0.0 {
                continue;
            }
            let sym = if i == j { 0.5 } else { 1.0 };
            let coef = sym
                * sigma.powi(plan.order[i] + plan.order[j])
                * plan.fact_inv[i]
                * plan.fact_inv[j]
                * zc;
            let dot_node = tape.dot(nodes[i], nodes[j]);
            terms.push((coef, dot_node));
        }
    }
    let mut weight = vec![0.0; d];
    for i in 0..n {
        let m = monomials[i];
        let vm = &plan.vec_moment[i];
        for p in 0..d {
            weight[p] = m * z[p] - vm[p];
        }
        if weight.iter().all(|&w| w == 0.0) {
            continue;
        }
        let coef = sigma.powi(plan.order[i] - 1) * plan.fact_inv[i];
        let w_node = tape.constant(&weight);
        let dot_node = tape.dot(w_node, nodes[i]);
        terms.push((coef, dot_node));
    }
    let bias = (norm_sq(z) - d as f64) / (2.0 * sigma * sigma);
    Ok(tape.scalar_comb(bias, &terms))
}

/// Large-noise objective control variate as a scalar tape node:
///
/// sum_{|a| <= k} (x^a - mu_a)/(sigma a!) <z, d^a s(sigma z)>
///   + 1/2 sum_{|a|,|r| <= k} (x^(a+r) - mu_(a+r))/(a! r!) <d^a s(sigma z), d^r s(sigma z)>
///
/// where the jet is expanded at sigma*z. Zero mean over x ~ data when
/// the mu are the exact dataset moments.
pub fn build_cv_objective_large(
    tape: &mut Tape,
    jet_at_sz: &InputJet,
    x: &[f64],
    z: &[f64],
    sigma: f64,
    plan: &CvPlan,
) -> Result<NodeId, CoreError> {
    check_sigma(sigma)?;
    debug_assert!(matches!(plan.regime, Regime::LargeSigma));
    let n = plan.indices.len();
    let monomials: Vec<f64> = plan.indices.iter().map(|a| a.monomial(x)).collect();
    let nodes: Vec<NodeId> =
        plan.indices.iter().map(|a| jet_node(jet_at_sz, a)).collect::<Result<Vec<_>, _>>()?;

    let mut terms: Vec<(f64, NodeId)> = Vec::with_capacity(n * (n + 1) / 2 + n);
    let z_node = tape.constant(z);
    for i in 0..n {
        let xc = monomials[i] - plan.mu[i];
        if xc == 0.0 {
            continue;
        }
        let coef = xc / sigma * plan.fact_inv[i];
        let dot_node = tape.dot(z_node, nodes[i]);
        terms.push((coef, dot_node));
    }
    for i in 0..n {
        for j in i..n {
            let xc = monomials[i] * monomials[j] - plan.pair_constant[i * n + j];
            if xc == 0.0 {
                continue;
            }
            let sym = if i == j { 0.5 } else { 1.0 };
            let coef = sym * xc * plan.fact_inv[i] * plan.fact_inv[j];
            let dot_node = tape.dot(nodes[i], nodes[j]);
            terms.push((coef, dot_node));
        }
    }
    Ok(tape.scalar_comb(0.0, &terms))
}

/// Builds the objective control variate for either regime. For the
/// small regime the jet must be expanded at x; for the large regime at
/// sigma * z.
pub fn build_objective_cv(
    tape: &mut Tape,
    jet: &InputJet,
    x: &[f64],
    z: &[f64],
    sigma: f64,
    plan: &CvPlan,
) -> Result<NodeId, CoreError> {
    match plan.regime {
        Regime::SmallSigma => build_cv_objective_small(tape, jet, z, sigma, plan),
        Regime::LargeSigma => build_cv_objective_large(tape, jet, x, z, sigma, plan),
    }
}

/// Expansion point of the jet for a regime.
pub fn expansion_point(regime: Regime, x: &[f64], z: &[f64], sigma: f64) -> Vec64 {
    match regime {
        Regime::SmallSigma => x.to_vec(),
        Regime::LargeSigma => z.iter().map(|&v| sigma * v).collect(),
    }
}

/// Directly assembled gradient control variate (the per-rho weighted
/// sum of mixed derivatives with the first Taylor factor detached).
/// Exists as an independent route for testing; production takes the
/// reverse pass of the objective node instead.
pub fn build_gradient_cv_assembled(
    tape: &mut Tape,
    jet: &InputJet,
    x: &[f64],
    z: &[f64],
    sigma: f64,
    plan: &CvPlan,
) -> Result<NodeId, CoreError> {
    check_sigma(sigma)?;
    let d = plan.dim;
    let n = plan.indices.len();
    let monomials: Vec<f64> = match plan.regime {
        Regime::SmallSigma => plan.indices.iter().map(|a| a.monomial(z)).collect(),
        Regime::LargeSigma => plan.indices.iter().map(|a| a.monomial(x)).collect(),
    };
    let nodes: Vec<NodeId> =
        plan.indices.iter().map(|a| jet_node(jet, a)).collect::<Result<Vec<_>, _>>()?;
    let deriv_values: Vec<Vec64> = nodes.iter().map(|&nd| tape.value(nd).to_vec()).collect();

    let mut terms: Vec<(f64, NodeId)> = Vec::with_capacity(n);
    let mut weight = vec![0.0; d];
    for r in 0..n {
        for w in weight.iter_mut() {
            *w = 0.0;
        }
        match plan.regime {
            Regime::SmallSigma => {
                // sigma^(|r|-1)/r! (z^r z - E[z^r z])
                let c = sigma.powi(plan.order[r] - 1) * plan.fact_inv[r];
                let vm = &plan.vec_moment[r];
                for p in 0..d {
                    weight[p] += c * (monomials[r] * z[p] - vm[p]);
                }
                // sum_a sigma^(|a|+|r|)/(a! r!) (z^(a+r) - delta) d^a s
                for a in 0..n {
                    let zc = monomials[a] * monomials[r] - plan.pair_constant[a * n + r];
                    if zc == 0.0 {
                        continue;
                    }
                    let coef = sigma.powi(plan.order[a] + plan.order[r])
                        * plan.fact_inv[a]
                        * plan.fact_inv[r]
                        * zc;
                    for p in 0..d {
                        weight[p] += coef * deriv_values[a][p];
                    }
                }
            }
            Regime::LargeSigma => {
                // (x^r - mu_r)/(sigma r!) z
                let c = (monomials[r] - plan.mu[r]) / sigma * plan.fact_inv[r];
                for p in 0..d {
                    weight[p] += c * z[p];
                }
                // sum_a (x^(a+r) - mu_(a+r))/(a! r!) d^a s(sigma z)
                for a in 0..n {
                    let xc = monomials[a] * monomials[r] - plan.pair_constant[a * n + r];
                    if xc == 0.0 {
                        continue;
                    }
                    let coef = xc * plan.fact_inv[a] * plan.fact_inv[r];
                    for p in 0..d {
                        weight[p] += coef * deriv_values[a][p];
                    }
                }
            }
        }
        if weight.iter().all(|&w| w == 0.0) {
            continue;
        }
        let w_node = tape.constant(&weight);
        let dot_node = tape.dot(w_node, nodes[r]);
        terms.push((1.0, dot_node));
    }
    Ok(tape.scalar_comb(0.0, &terms))
}

fn jet_order(k: u32) -> u8 {
    k.min(2) as u8
}

fn guard_k(k: u32) -> Result<(), CoreError> {
    if k > 2 {
        return Err(CoreError::InvalidConfig(format!(
            "assembled control variates need input derivatives of order {k}, available up to 2"
        )));
    }
    Ok(())
}

/// Small-noise objective control variate value.
pub fn cv_objective_small(
    net: &ScoreNetwork,
    x: &[f64],
    z: &[f64],
    sigma: f64,
    k: u32,
    table: &MomentTable,
) -> Result<f64, CoreError> {
    guard_k(k)?;
    let plan = CvPlan::small(net.input_dim(), k, table)?;
    let mut tape = Tape::new(net);
    let jet = tape.input_jet(x, jet_order(k))?;
    let node = build_cv_objective_small(&mut tape, &jet, z, sigma, &plan)?;
    Ok(tape.scalar_value(node))
}

/// Small-noise gradient control variate, directly assembled.
pub fn cv_gradient_small(
    net: &ScoreNetwork,
    x: &[f64],
    z: &[f64],
    sigma: f64,
    k: u32,
    table: &MomentTable,
) -> Result<Vec64, CoreError> {
    guard_k(k)?;
    let plan = CvPlan::small(net.input_dim(), k, table)?;
    let mut tape = Tape::new(net);
    let jet = tape.input_jet(x, jet_order(k))?;
    let node = build_gradient_cv_assembled(&mut tape, &jet, x, z, sigma, &plan)?;
    tape.backward(node)?;
    Ok(tape.param_grad().to_vec())
}

/// Large-noise objective control variate value.
pub fn cv_objective_large(
    net: &ScoreNetwork,
    x: &[f64],
    z: &[f64],
    sigma: f64,
    k: u32,
    data: &DataMoments,
) -> Result<f64, CoreError> {
    guard_k(k)?;
    let plan = CvPlan::large(net.input_dim(), k, data)?;
    let mut tape = Tape::new(net);
    let point = expansion_point(Regime::LargeSigma, x, z, sigma);
    let jet = tape.input_jet(&point, jet_order(k))?;
    let node = build_cv_objective_large(&mut tape, &jet, x, z, sigma, &plan)?;
    Ok(tape.scalar_value(node))
}

/// Large-noise gradient control variate, directly assembled.
pub fn cv_gradient_large(
    net: &ScoreNetwork,
    x: &[f64],
    z: &[f64],
    sigma: f64,
    k: u32,
    data: &DataMoments,
) -> Result<Vec64, CoreError> {
    guard_k(k)?;
    let plan = CvPlan::large(net.input_dim(), k, data)?;
    let mut tape = Tape::new(net);
    let point = expansion_point(Regime::LargeSigma, x, z, sigma);
    let jet = tape.input_jet(&point, jet_order(k))?;
    let node = build_gradient_cv_assembled(&mut tape, &jet, x, z, sigma, &plan)?;
    tape.backward(node)?;
    Ok(tape.param_grad().to_vec())
}

/// Gradient of the objective control variate through the tape; equal to
/// the assembled gradient control variate (the product rule collapses
/// the symmetric double sum).
pub fn cv_gradient_via_tape(
    net: &ScoreNetwork,
    x: &[f64],
    z: &[f64],
    sigma: f64,
    plan: &CvPlan,
) -> Result<Vec64, CoreError> {
    let mut tape = Tape::new(net);
    let point = expansion_point(plan.regime, x, z, sigma);
    let jet = tape.input_jet(&point, jet_order(plan.k))?;
    let node = build_objective_cv(&mut tape, &jet, x, z, sigma, plan)?;
    tape.backward(node)?;
    Ok(tape.param_grad().to_vec())
}

/// Closed-form small-noise objective control variate for k = 1 or 2,
/// written with traces, Frobenius norms and z-contractions instead of
/// multi-index sums. Independent of the general path (used to
/// cross-check it).
pub fn cv_objective_small_closed(
    net: &ScoreNetwork,
    x: &[f64],
    z: &[f64],
    sigma: f64,
    k: u32,
) -> Result<f64, CoreError> {
    check_sigma(sigma)?;
    if !(k == 1 || k == 2) {
        return Err(CoreError::InvalidConfig(format!(
            "closed forms exist for k in {{1, 2}}, got {k}"
        )));
    }
    let d = net.input_dim();
    let mut tape = Tape::new(net);
    let jet = tape.input_jet(x, jet_order(k))?;
    let jv = extract_jet_values(&tape, &jet);
    let s = &jv.value;

    // jz = J z, trace(J), ||J||_F^2
    let mut jz = vec![0.0; d];
    let mut tr_j = 0.0;
    let mut j_frob = 0.0;
    for p in 0..d {
        let col = &jv.first[p];
        for i in 0..d {
            jz[i] += col[i] * z[p];
        }
        tr_j += col[p];
        j_frob += norm_sq(col);
    }

    let mut c = (norm_sq(z) - d as f64) / (2.0 * sigma * sigma);
    c += dot(z, s) / sigma;
    c += dot(z, &jz) - tr_j;
    c += sigma * dot(s, &jz);
    c += 0.5 * sigma * sigma * (norm_sq(&jz) - j_frob);

    if k == 2 {
        // b2 = 1/2 z^T H z per output, tr(H_i), ||H_i||_F^2
        let mut b2 = vec![0.0; d];
        let mut tr_h = vec![0.0; d];
        let mut h_frob = vec![0.0; d];
        for p in 0..d {
            for q in p..d {
                let slice = &jv.second[JetValues::pair_index(d, p, q)];
                let w = if p == q { 1.0 } else { 2.0 };
                for i in 0..d {
                    b2[i] += 0.5 * w * z[p] * z[q] * slice[i];
                    h_frob[i] += w * slice[i] * slice[i];
                }
                if p == q {
                    for i in 0..d {
                        tr_h[i] += slice[i];
                    }
                }
            }
        }
        let s2 = sigma * sigma;
        c += sigma * dot(z, &b2);
        c += s2 * (dot(s, &b2) - 0.5 * dot(s, &tr_h));
        c += s2 * sigma * dot(&jz, &b2);
        let mut debias = 0.0;
        for i in 0..d {
            debias += 2.0 * h_frob[i] + tr_h[i] * tr_h[i];
        }
        c += 0.5 * s2 * s2 * norm_sq(&b2) - s2 * s2 / 8.0 * debias;
    }
    Ok(c)
}

/// lambda(sigma) = sigma^2: the weighting that keeps lambda * L at
/// roughly constant magnitude across noise levels.
pub fn lambda(sigma: f64) -> f64 {
    sigma * sigma
}

/// The controlled training objective lambda(sigma) (L - beta C); equals
/// lambda * L exactly at beta = 0.
#[allow(clippy::too_many_arguments)]
pub fn controlled_loss(
    net: &ScoreNetwork,
    x: &[f64],
    z: &[f64],
    sigma: f64,
    beta: f64,
    k: u32,
    regime: Regime,
    table: &MomentTable,
    data: Option<&DataMoments>,
) -> Result<f64, CoreError> {
    let l = crate::dsm::dsm_loss_value(net, x, z, sigma)?;
    let c = if beta == 0.0 {
        0.0
    } else {
        match regime {
            Regime::SmallSigma => cv_objective_small(net, x, z, sigma, k, table)?,
            Regime::LargeSigma => {
                let data = data.ok_or_else(|| {
                    CoreError::InvalidConfig("large-sigma controlled loss needs data moments".into())
                })?;
                cv_objective_large(net, x, z, sigma, k, data)?
            }
        }
    };
    Ok(lambda(sigma) * (l - beta * c))
}

/// |R_k| <= L_{k+1} d^{k+1} / (k+1)! for a Taylor expansion whose k-th
/// derivative is Lipschitz.
pub fn taylor_remainder_bound(lipschitz: f64, distance: f64, k: u32) -> f64 {
    assert!(lipschitz >= 0.0 && distance >= 0.0);
    let mut fact = 1.0;
    for i in 1..=(k + 1) {
        fact *= i as f64;
    }
    lipschitz * distance.powi(k as i32 + 1) / fact
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationFamily;
    use crate::network::MlpConfig;
    use crate::rng::RngStream;

    fn table(dim: usize, k: u32) -> MomentTable {
        MomentTable::new(dim, k)
    }

    fn linear_1d(w: f64) -> ScoreNetwork {
        let mut net =
            ScoreNetwork::zeros(MlpConfig::new(1, vec![], ActivationFamily::Tanh)).unwrap();
        net.theta[0] = w;
        net
    }

    fn random_net(hidden: Vec<usize>, seed: u64) -> ScoreNetwork {
        ScoreNetwork::init(
            MlpConfig::new(2, hidden, ActivationFamily::Tanh),
            &mut RngStream::new(seed, 0),
        )
        .unwrap()
    }

    #[test]
    fn zero_weight_network_reduces_to_noise_term() {
        let net = ScoreNetwork::zeros(MlpConfig::new(2, vec![4], ActivationFamily::Tanh)).unwrap();
        let t = table(2, 2);
        for k in 0..=2 {
            let c = cv_objective_small(&net, &[0.3, -0.2], &[0.0, 0.0], 0.5, k, &t).unwrap();
            assert!((c - (-4.0)).abs() < 1e-14, "k={k}: {c}");
        }
    }

    #[test]
    fn constant_network_k0_hand_value() {
        // s = (2, -1) built from zero weights and an output bias
        let mut net =
            ScoreNetwork::zeros(MlpConfig::new(2, vec![4], ActivationFamily::Tanh)).unwrap();
        let spec = net.layer(1);
        net.theta[spec.b_offset] = 2.0;
        net.theta[spec.b_offset + 1] = -1.0;
        let c = cv_objective_small(&net, &[0.0, 0.0], &[1.0, 1.0], 1.0, 0, &table(2, 0)).unwrap();
        assert!((c - 1.0).abs() < 1e-14, "{c}");
    }

    #[test]
    fn closed_form_k1_linear_hand_value() {
        let net = linear_1d(1.0);
        let c = cv_objective_small_closed(&net, &[1.0], &[1.0], 1.0, 1).unwrap();
        assert!((c - 2.0).abs() < 1e-14, "{c}");
    }

    #[test]
    fn closed_form_reduces_to_noise_term_for_zero_network() {
        let net = ScoreNetwork::zeros(MlpConfig::new(2, vec![4], ActivationFamily::Tanh)).unwrap();
        let z = [0.5, -1.5];
        let expect = (norm_sq(&z) - 2.0) / (2.0 * 0.09);
        for k in [1, 2] {
            let c = cv_objective_small_closed(&net, &[1.0, 1.0], &z, 0.3, k).unwrap();
            assert!((c - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_forms_match_general_path() {
        let mut rng = RngStream::new(314, 0);
        for trial in 0..60 {
            let net = random_net(vec![6, 6], 1000 + trial);
            let x = rng.gaussian_vec(2);
            let z = rng.gaussian_vec(2);
            let sigma = 10f64.powf(rng.next_f64() * 2.0 - 1.0);
            for k in [1u32, 2] {
                let general = cv_objective_small(&net, &x, &z, sigma, k, &table(2, k)).unwrap();
                let closed = cv_objective_small_closed(&net, &x, &z, sigma, k).unwrap();
                let scale = general.abs().max(closed.abs()).max(1e-12);
                assert!(
                    (general - closed).abs() <= 1e-10 * scale,
                    "k={k} sigma={sigma}: general {general} vs closed {closed}"
                );
            }
        }
    }

    #[test]
    fn gradient_small_k0_linear_hand_value() {
        // s(u) = w u, k = 0, z = 2, x = 3, sigma = 1 -> z * x / sigma = 6
        let net = linear_1d(1.0);
        let g = cv_gradient_small(&net, &[3.0], &[2.0], 1.0, 0, &table(1, 0)).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-14, "{:?}", g);
    }

    #[test]
    fn gradient_small_k0_zero_weight_net_matches_formula() {
        // k = 0 reduces to (z / sigma)^T d_theta s(x)
        let net = ScoreNetwork::zeros(MlpConfig::new(2, vec![4], ActivationFamily::Tanh)).unwrap();
        let (x, z, sigma) = ([0.4, -0.1], [1.0, -2.0], 0.7);
        let g = cv_gradient_small(&net, &x, &z, sigma, 0, &table(2, 0)).unwrap();

        let mut tape = Tape::new(&net);
        let s = tape.forward_network(&x);
        let zs: Vec<f64> = z.iter().map(|&v| v / sigma).collect();
        let zn = tape.constant(&zs);
        let d = tape.dot(zn, s);
        tape.backward(d).unwrap();
        let expect = tape.param_grad();
        let nonzero = expect.iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero > 0, "bias-path derivatives should survive");
        for i in 0..g.len() {
            assert!((g[i] - expect[i]).abs() <= 1e-12 * expect[i].abs().max(1.0));
        }
    }

    #[test]
    fn objective_large_hand_values() {
        // constant network: every term carries a vanishing factor
        let mut cnet =
            ScoreNetwork::zeros(MlpConfig::new(1, vec![2], ActivationFamily::Tanh)).unwrap();
        let spec = cnet.layer(1);
        cnet.theta[spec.b_offset] = 3.0;
        let mut mu = HashMap::new();
        mu.insert(MultiIndex(vec![0]), 1.0);
        mu.insert(MultiIndex(vec![1]), 0.0);
        mu.insert(MultiIndex(vec![2]), 1.0);
        let data = DataMoments::from_parts(1, 2, mu);
        let c = cv_objective_large(&cnet, &[0.8], &[0.3], 2.0, 1, &data).unwrap();
        assert!(c.abs() < 1e-14, "{c}");

        // 1D linear, w = 2, x = 1, z = 1, sigma = 2: 1 + 8 + 0 = 9
        let net = linear_1d(2.0);
        let c = cv_objective_large(&net, &[1.0], &[1.0], 2.0, 1, &data).unwrap();
        assert!((c - 9.0).abs() < 1e-12, "{c}");
    }

    #[test]
    fn gradient_large_constant_network_is_zero() {
        let mut cnet =
            ScoreNetwork::zeros(MlpConfig::new(2, vec![3], ActivationFamily::Tanh)).unwrap();
        let spec = cnet.layer(1);
        cnet.theta[spec.b_offset] = 1.5;
        cnet.theta[spec.b_offset + 1] = -0.5;
        let samples: Vec<Vec64> =
            vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 2.0], vec![0.0, -2.0]];
        let data = DataMoments::from_samples(&samples, 2);
        let g = cv_gradient_large(&cnet, &samples[0], &[0.5, 0.5], 3.0, 1, &data).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-14), "{:?}", g);
    }

    #[test]
    fn cv_large_exact_zero_mean_over_dataset() {
        let mut rng = RngStream::new(8, 0);
        let samples: Vec<Vec64> = (0..64).map(|_| rng.gaussian_vec(2)).collect();
        let data = DataMoments::from_samples(&samples, 2);
        let net = random_net(vec![8], 5);
        let z = [0.4, -1.1];
        let sigma = 5.0;
        let mean: f64 = samples
            .iter()
            .map(|x| cv_objective_large(&net, x, &z, sigma, 1, &data).unwrap())
            .sum::<f64>()
            / samples.len() as f64;
        assert!(mean.abs() < 1e-10, "dataset mean {mean}");
    }

    #[test]
    fn small_cv_zero_mean_smoke() {
        let net = random_net(vec![16, 16], 22);
        let t = table(2, 2);
        let x = [0.5, -0.3];
        for &sigma in &[0.1, 1.0] {
            for k in 0..=2u32 {
                let plan = CvPlan::small(2, k, &t).unwrap();
                let mut rng = RngStream::new(1234, k as u64);
                let n = 20_000usize;
                let (mut sum, mut sum2) = (0.0, 0.0);
                let mut tape = Tape::new(&net);
                for _ in 0..n {
                    let z = rng.gaussian_vec(2);
                    tape.clear();
                    let jet = tape.input_jet(&x, jet_order(k)).unwrap();
                    let node = build_cv_objective_small(&mut tape, &jet, &z, sigma, &plan).unwrap();
                    let c = tape.scalar_value(node);
                    sum += c;
                    sum2 += c * c;
                }
                let mean = sum / n as f64;
                let var = (sum2 / n as f64 - mean * mean).max(0.0);
                let se = (var / n as f64).sqrt().max(1e-300);
                assert!(mean.abs() <= 5.0 * se, "sigma={sigma} k={k}: mean {mean}, se {se}");
            }
        }
    }

    #[test]
    fn sigma_must_be_positive() {
        let net = random_net(vec![4], 1);
        assert!(cv_objective_small(&net, &[0.0, 0.0], &[1.0, 1.0], 0.0, 1, &table(2, 1)).is_err());
        assert!(cv_objective_small(&net, &[0.0, 0.0], &[1.0, 1.0], -1.0, 1, &table(2, 1)).is_err());
    }

    #[test]
    fn k_above_two_rejected() {
        let net = random_net(vec![4], 2);
        assert!(cv_objective_small(&net, &[0.0, 0.0], &[1.0, 1.0], 1.0, 3, &table(2, 3)).is_err());
    }

    #[test]
    fn remainder_bound_values() {
        assert!((taylor_remainder_bound(2.0, 0.5, 1) - 0.25).abs() < 1e-15);
        assert_eq!(taylor_remainder_bound(1.0, 0.0, 3), 0.0);
    }

    #[test]
    fn remainder_bound_holds_for_sine() {
        // f = sin: every derivative is 1-Lipschitz. T_k around a.
        let mut rng = RngStream::new(99, 9);
        for _ in 0..2000 {
            let a = (rng.next_f64() - 0.5) * 2.0 * std::f64::consts::PI;
            let h = (rng.next_f64() * 1.95 + 0.05) * if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            let k = (rng.next_u64() % 4) as u32;
            let mut taylor = 0.0;
            let mut hpow = 1.0;
            let mut fact = 1.0;
            for j in 0..=k {
                // d^j sin at a = sin(a + j pi/2)
                taylor += (a + j as f64 * std::f64::consts::FRAC_PI_2).sin() * hpow / fact;
                hpow *= h;
                fact *= (j + 1) as f64;
            }
            let remainder = ((a + h).sin() - taylor).abs();
            let bound = taylor_remainder_bound(1.0, h.abs(), k);
            assert!(
                remainder <= bound * (1.0 + 1e-12) + 1e-13,
                "a={a} h={h} k={k}: remainder {remainder} > bound {bound}"
            );
        }
    }

    #[test]
    fn controlled_loss_identities() {
        let net = random_net(vec![8], 3);
        let t = table(2, 1);
        let (x, z, sigma) = ([0.2, 0.4], [1.0, -0.5], 0.8);
        let l = crate::dsm::dsm_loss_value(&net, &x, &z, sigma).unwrap();
        let at_zero =
            controlled_loss(&net, &x, &z, sigma, 0.0, 1, Regime::SmallSigma, &t, None).unwrap();
        assert_eq!(at_zero, lambda(sigma) * l);

        let c = cv_objective_small(&net, &x, &z, sigma, 0, &t).unwrap();
        let prior_work =
            controlled_loss(&net, &x, &z, sigma, 1.0, 0, Regime::SmallSigma, &t, None).unwrap();
        assert!((prior_work - lambda(sigma) * (l - c)).abs() < 1e-12);
    }

    #[test]
    fn controlled_loss_is_unbiased() {
        // E[lambda (L - beta C)] = E[lambda L] for any beta; paired draws
        let net = random_net(vec![8, 8], 77);
        let t = table(2, 1);
        let x = [0.1, -0.6];
        let sigma = 0.5;
        let plan = CvPlan::small(2, 1, &t).unwrap();
        for &beta in &[0.5, 1.0, 2.0] {
            let mut rng = RngStream::new(31337, beta.to_bits());
            let n = 50_000usize;
            let (mut sum, mut sum2) = (0.0, 0.0);
            let mut tape = Tape::new(&net);
            for _ in 0..n {
                let z = rng.gaussian_vec(2);
                tape.clear();
                let jet = tape.input_jet(&x, 1).unwrap();
                let node = build_cv_objective_small(&mut tape, &jet, &z, sigma, &plan).unwrap();
                let c = lambda(sigma) * beta * tape.scalar_value(node);
                sum += c;
                sum2 += c * c;
            }
            let mean = sum / n as f64;
            let var = (sum2 / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt().max(1e-300);
            assert!(mean.abs() <= 5.0 * se, "beta={beta}: mean diff {mean}, se {se}");
        }
    }
}
