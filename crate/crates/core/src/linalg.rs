//! Minimal dense linear algebra: flat `f64` vectors and row-major matrices.

/// Dense vector of 64-bit floats.
pub type Vec64 = Vec<f64>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape mismatch");
        Mat64 { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64]) -> Vec64 {
        assert_eq!(self.cols, x.len());
        let mut y = vec![0.0; self.rows];
        gemv(&self.data, self.rows, self.cols, x, &mut y);
        y
    }

    /// y = Aᵀ x
    pub fn mul_vec_t(&self, x: &[f64]) -> Vec64 {
        assert_eq!(self.rows, x.len());
        let mut y = vec![0.0; self.cols];
        gemv_t(&self.data, self.rows, self.cols, x, &mut y);
        y
    }

    /// C = A B
    pub fn mul_mat(&self, b: &Mat64) -> Mat64 {
        assert_eq!(self.cols, b.rows);
        let mut c = Mat64::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik == 0.0 {
                    continue;
                }
                for j in 0..b.cols {
                    c.data[i * b.cols + j] += aik * b.get(k, j);
                }
            }
        }
        c
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm_sq(&self.data).sqrt()
    }
}

/// y += 0 overwritten; y = W x for a row-major `rows x cols` slice.
#[inline]
pub fn gemv(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
}

/// y = Wᵀ x for a row-major `rows x cols` slice (accumulates into zeroed y).
#[inline]
pub fn gemv_t(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(y.len(), cols);
    for yc in y.iter_mut() {
        *yc = 0.0;
    }
    for r in 0..rows {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            y[c] += row[c] * xr;
        }
    }
}

/// Pairwise-order sum. Rounding grows like O(log n) instead of O(n),
/// which matters for the 1/sigma^2-amplified constants downstream.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        let mut acc = 0.0;
        for &x in v {
            acc += x;
        }
        return acc;
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Inner product in pairwise-summation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    fn rec(a: &[f64], b: &[f64]) -> f64 {
        if a.len() <= 8 {
            let mut acc = 0.0;
            for i in 0..a.len() {
                acc += a[i] * b[i];
            }
            return acc;
        }
        let mid = a.len() / 2;
        rec(&a[..mid], &b[..mid]) + rec(&a[mid..], &b[mid..])
    }
    rec(a, b)
}

/// Squared Euclidean norm in pairwise-summation order.
pub fn norm_sq(v: &[f64]) -> f64 {
    dot(v, v)
}

pub fn norm(v: &[f64]) -> f64 {
    norm_sq(v).sqrt()
}

/// y += c * x
#[inline]
pub fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += c * x[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random_mat(rng: &mut RngStream, rows: usize, cols: usize) -> Mat64 {
        let data = rng.gaussian_vec(rows * cols);
        Mat64::from_rows(rows, cols, data)
    }

    #[test]
    fn matmul_associates_with_matvec() {
        let mut rng = RngStream::new(42, 0);
        for trial in 0..5 {
            let a = random_mat(&mut rng.split(trial), 32, 32);
            let b = random_mat(&mut rng.split(trial + 100), 32, 32);
            let x = rng.gaussian_vec(32);
            let ab_x = a.mul_mat(&b).mul_vec(&x);
            let a_bx = a.mul_vec(&b.mul_vec(&x));
            for i in 0..32 {
                let scale = a_bx[i].abs().max(1.0);
                assert!(
                    (ab_x[i] - a_bx[i]).abs() <= 1e-12 * scale,
                    "(AB)x vs A(Bx) diverged at {i}: {} vs {}",
                    ab_x[i],
                    a_bx[i]
                );
            }
        }
    }

    #[test]
    fn transpose_matvec_matches_naive() {
        let mut rng = RngStream::new(7, 0);
        let a = random_mat(&mut rng, 5, 3);
        let x = rng.gaussian_vec(5);
        let y = a.mul_vec_t(&x);
        for c in 0..3 {
            let mut expect = 0.0;
            for r in 0..5 {
                expect += a.get(r, c) * x[r];
            }
            assert!((y[c] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_input() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 5050.0);
        assert_eq!(dot(&v, &v), v.iter().map(|x| x * x).sum::<f64>());
    }
}
