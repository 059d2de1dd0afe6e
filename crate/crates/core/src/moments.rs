//! Multi-index algebra and closed-form standard-Gaussian moments: the
//! de-biasing constants subtracted inside every control variate.

use std::collections::HashMap;

use crate::error::CoreError;
use crate::linalg::Vec64;

/// Exponent vector alpha of a monomial z^alpha.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(pub Vec<u32>);

/// Exact n! in integer arithmetic.
fn factorial_u128(n: u32) -> u128 {
    (1..=n as u128).product()
}

/// Exact n!! for odd n (empty product for n <= 0).
fn double_factorial_u128(n: i64) -> u128 {
    let mut acc: u128 = 1;
    let mut k = n;
    while k > 1 {
        acc *= k as u128;
        k -= 2;
    }
    acc
}

/// omega_m = E[z^m] for scalar standard normal z: 0 for odd m,
/// (2p)!/(2^p p!) for m = 2p.
pub fn omega(m: u32) -> f64 {
    if m % 2 == 1 {
        return 0.0;
    }
    let p = m / 2;
    (factorial_u128(2 * p) / ((1u128 << p) * factorial_u128(p))) as f64
}

impl MultiIndex {
    pub fn zeros(dim: usize) -> Self {
        MultiIndex(vec![0; dim])
    }

    pub fn unit(dim: usize, i: usize) -> Self {
        let mut v = vec![0; dim];
        v[i] = 1;
        MultiIndex(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// |alpha| = sum of exponents.
    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    /// alpha! = product of component factorials, exact for |alpha| <= 8.
    pub fn factorial(&self) -> f64 {
        self.0.iter().map(|&a| factorial_u128(a)).product::<u128>() as f64
    }

    /// z^alpha
    pub fn monomial(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.0.len());
        let mut acc = 1.0;
        for (i, &a) in self.0.iter().enumerate() {
            if a > 0 {
                acc *= z[i].powi(a as i32);
            }
        }
        acc
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        debug_assert_eq!(self.dim(), other.dim());
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn add_unit(&self, i: usize) -> MultiIndex {
        let mut v = self.0.clone();
        v[i] += 1;
        MultiIndex(v)
    }
}

/// All multi-indices with |alpha| <= max_order over `dim` variables, in
/// graded lexicographic order (by |alpha|, then lexicographic).
/// The count is C(dim + max_order, max_order).
pub fn enumerate_multi_indices(dim: usize, max_order: u32) -> Vec<MultiIndex> {
    assert!(dim >= 1);
    fn compositions(dim: usize, total: u32, out: &mut Vec<Vec<u32>>, prefix: &mut Vec<u32>) {
        if dim == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 0..=total {
            prefix.push(first);
            compositions(dim - 1, total - first, out, prefix);
            prefix.pop();
        }
    }
    let mut result = Vec::new();
    for grade in 0..=max_order {
        let mut grade_list = Vec::new();
        compositions(dim, grade, &mut grade_list, &mut Vec::new());
        grade_list.sort();
        result.extend(grade_list.into_iter().map(MultiIndex));
    }
    result
}

/// delta_alpha = E[z^alpha] for z ~ N(0, I): zero when any component
/// exponent is odd, otherwise the product of (alpha_i - 1)!!.
pub fn gaussian_moment(alpha: &MultiIndex) -> f64 {
    let mut acc: u128 = 1;
    for &a in &alpha.0 {
        if a % 2 == 1 {
            return 0.0;
        }
        acc *= double_factorial_u128(a as i64 - 1);
    }
    acc as f64
}

/// E[z^alpha z], component m = prod_i omega(alpha_i + [i == m]).
pub fn gaussian_moment_vec(alpha: &MultiIndex) -> Vec64 {
    let d = alpha.dim();
    let mut out = vec![0.0; d];
    for m in 0..d {
        let mut acc = 1.0;
        for (i, &a) in alpha.0.iter().enumerate() {
            let exponent = if i == m { a + 1 } else { a };
            acc *= omega(exponent);
            if acc == 0.0 {
                break;
            }
        }
        out[m] = acc;
    }
    out
}

/// Precomputed Gaussian moments for a fixed dimension, keyed by
/// exponent vector. The control-variate inner loops hit these once per
/// term per sample and must not recompute factorials.
#[derive(Debug, Clone)]
pub struct MomentTable {
    dim: usize,
    max_order: u32,
    delta: HashMap<MultiIndex, f64>,
    vec_moment: HashMap<MultiIndex, Vec64>,
}

impl MomentTable {
    /// Table for Taylor order k: scalar moments up to |alpha| = 2k + 2,
    /// vector moments up to |alpha| = k.
    pub fn new(dim: usize, k: u32) -> Self {
        let max_order = 2 * k + 2;
        let mut delta = HashMap::new();
        for alpha in enumerate_multi_indices(dim, max_order) {
            delta.insert(alpha.clone(), gaussian_moment(&alpha));
        }
        let mut vec_moment = HashMap::new();
        for alpha in enumerate_multi_indices(dim, k) {
            vec_moment.insert(alpha.clone(), gaussian_moment_vec(&alpha));
        }
        MomentTable { dim, max_order, delta, vec_moment }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self, alpha: &MultiIndex) -> Result<f64, CoreError> {
        self.delta
            .get(alpha)
            .copied()
            .ok_or_else(|| CoreError::MissingMoment(alpha.0.clone()))
    }

    pub fn vec_moment(&self, alpha: &MultiIndex) -> Result<&Vec64, CoreError> {
        self.vec_moment
            .get(alpha)
            .ok_or_else(|| CoreError::MissingMoment(alpha.0.clone()))
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }
}

/// Value-level network derivatives at one point: s, the Jacobian
/// columns and the packed Hessian slices (pairs p <= q).
#[derive(Debug, Clone)]
pub struct JetValues {
    pub dim: usize,
    pub value: Vec64,
    pub first: Vec<Vec64>,
    pub second: Vec<Vec64>,
}

impl JetValues {
    pub fn pair_index(dim: usize, p: usize, q: usize) -> usize {
        let (p, q) = if p <= q { (p, q) } else { (q, p) };
        p * dim - p * (p + 1) / 2 + q
    }

    /// d^alpha s for |alpha| <= 2.
    pub fn deriv(&self, alpha: &MultiIndex) -> Result<&[f64], CoreError> {
        match alpha.order() {
            0 => Ok(&self.value),
            1 => {
                let p = alpha.0.iter().position(|&a| a == 1).unwrap();
                self.first
                    .get(p)
                    .map(|v| v.as_slice())
                    .ok_or_else(|| CoreError::MissingMoment(alpha.0.clone()))
            }
            2 => {
                let mut idx = alpha.0.iter().enumerate().filter(|(_, &a)| a > 0);
                let (p, &ap) = idx.next().unwrap();
                let q = if ap == 2 { p } else { idx.next().unwrap().0 };
                self.second
                    .get(Self::pair_index(self.dim, p, q))
                    .map(|v| v.as_slice())
                    .ok_or_else(|| CoreError::MissingMoment(alpha.0.clone()))
            }
            _ => Err(CoreError::MissingMoment(alpha.0.clone())),
        }
    }
}

/// E_z[T^k(x + sigma z)] via the closed-form moments: only even-order
/// multi-indices survive, each weighted by sigma^|alpha| delta_alpha / alpha!.
pub fn expected_taylor(
    jet: &JetValues,
    sigma: f64,
    k: u32,
    table: &MomentTable,
) -> Result<Vec64, CoreError> {
    let d = jet.dim;
    let mut out = vec![0.0; d];
    for alpha in enumerate_multi_indices(d, k) {
        if alpha.order() % 2 == 1 {
            continue;
        }
        let delta = table.delta(&alpha)?;
        if delta == 0.0 {
            continue;
        }
        let coef = sigma.powi(alpha.order() as i32) * delta / alpha.factorial();
        let ds = jet.deriv(&alpha)?;
        for i in 0..d {
            out[i] += coef * ds[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn enumeration_order_and_counts() {
        let idx = enumerate_multi_indices(2, 1);
        let expect: Vec<MultiIndex> =
            [vec![0, 0], vec![0, 1], vec![1, 0]].into_iter().map(MultiIndex).collect();
        assert_eq!(idx, expect);

        let one_dim = enumerate_multi_indices(1, 3);
        assert_eq!(
            one_dim,
            [vec![0], vec![1], vec![2], vec![3]].into_iter().map(MultiIndex).collect::<Vec<_>>()
        );

        assert_eq!(enumerate_multi_indices(3, 2).len(), 10);
    }

    fn binomial(n: usize, k: usize) -> usize {
        let mut acc = 1usize;
        for i in 0..k {
            acc = acc * (n - i) / (i + 1);
        }
        acc
    }

    #[test]
    fn enumeration_count_formula() {
        for d in 1..=5 {
            for k in 0..=4u32 {
                let count = enumerate_multi_indices(d, k).len();
                assert_eq!(count, binomial(d + k as usize, k as usize), "d={d} k={k}");
            }
        }
    }

    #[test]
    fn moment_fixed_values() {
        assert_eq!(gaussian_moment(&MultiIndex(vec![4])), 3.0);
        assert_eq!(gaussian_moment(&MultiIndex(vec![1, 2])), 0.0);
        assert_eq!(gaussian_moment(&MultiIndex(vec![2, 2])), 1.0);
        assert_eq!(gaussian_moment(&MultiIndex(vec![6])), 15.0);
        assert_eq!(gaussian_moment(&MultiIndex(vec![0, 0])), 1.0);
    }

    #[test]
    fn moment_vec_fixed_values() {
        assert_eq!(gaussian_moment_vec(&MultiIndex(vec![0, 0])), vec![0.0, 0.0]);
        assert_eq!(gaussian_moment_vec(&MultiIndex(vec![1, 0])), vec![1.0, 0.0]);
        assert_eq!(gaussian_moment_vec(&MultiIndex(vec![2, 0])), vec![0.0, 0.0]);
    }

    #[test]
    fn moment_vec_consistent_with_moment() {
        // component m of E[z^alpha z] equals E[z^(alpha + e_m)]
        for d in 1..=3usize {
            for alpha in enumerate_multi_indices(d, 4) {
                let v = gaussian_moment_vec(&alpha);
                for m in 0..d {
                    assert_eq!(v[m], gaussian_moment(&alpha.add_unit(m)), "{alpha:?} m={m}");
                }
            }
        }
    }

    #[test]
    fn moments_match_monte_carlo() {
        // 2,2 moment against the empirical mean of z1^2 z2^2
        let mut rng = RngStream::new(404, 0);
        let n = 1_000_000usize;
        let alpha = MultiIndex(vec![2, 2]);
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.gaussian_vec(2);
            let m = alpha.monomial(&z);
            sum += m;
            sum2 += m * m;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 5.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn expected_taylor_orders_zero_and_one_reduce_to_value() {
        let jet = JetValues {
            dim: 2,
            value: vec![0.5, -1.0],
            first: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            second: vec![vec![0.0; 2]; 3],
        };
        let table = MomentTable::new(2, 2);
        let t0 = expected_taylor(&jet, 0.7, 0, &table).unwrap();
        let t1 = expected_taylor(&jet, 0.7, 1, &table).unwrap();
        assert_eq!(t0, jet.value);
        assert_eq!(t1, jet.value); // odd moments vanish
    }

    #[test]
    fn expected_taylor_quadratic_matches_monte_carlo() {
        // s(u) = u^2 in one dimension at x = 0, sigma = 1:
        // E[T^2] = 0.5 * delta_2 * s'' = 1
        let jet =
            JetValues { dim: 1, value: vec![0.0], first: vec![vec![0.0]], second: vec![vec![2.0]] };
        let table = MomentTable::new(1, 2);
        let expect = expected_taylor(&jet, 1.0, 2, &table).unwrap();
        assert!((expect[0] - 1.0).abs() < 1e-15);

        let mut rng = RngStream::new(11, 3);
        let n = 1_000_000usize;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.gaussian_pair().0;
            // T^2(x + z) = s + z s' + z^2/2 s'' = z^2
            let t = z * z;
            sum += t;
            sum2 += t * t;
        }
        let mean = sum / n as f64;
        let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - expect[0]).abs() <= 5.0 * se);
    }

    #[test]
    fn table_reports_missing_moment() {
        let table = MomentTable::new(2, 1);
        let too_high = MultiIndex(vec![5, 0]);
        assert!(table.delta(&too_high).is_err());
    }

    #[test]
    fn all_low_order_moments_match_monte_carlo() {
        // every |alpha| <= 6, dim <= 3 within 5 SE of the empirical mean
        let n = 1_000_000usize;
        for d in 1..=3usize {
            let indices = enumerate_multi_indices(d, 6);
            let mut sums = vec![0.0; indices.len()];
            let mut sums2 = vec![0.0; indices.len()];
            let mut rng = RngStream::new(2020, d as u64);
            let mut z = vec![0.0; d];
            for _ in 0..n {
                rng.fill_gaussian(&mut z);
                for (j, alpha) in indices.iter().enumerate() {
                    let m = alpha.monomial(&z);
                    sums[j] += m;
                    sums2[j] += m * m;
                }
            }
            for (j, alpha) in indices.iter().enumerate() {
                let mean = sums[j] / n as f64;
                let var = (sums2[j] / n as f64 - mean * mean).max(0.0);
                let se = (var / n as f64).sqrt().max(1e-12);
                let exact = gaussian_moment(alpha);
                assert!(
                    (mean - exact).abs() <= 5.0 * se,
                    "alpha {alpha:?}: mc {mean} vs {exact} (se {se})"
                );
            }
        }
    }
}
