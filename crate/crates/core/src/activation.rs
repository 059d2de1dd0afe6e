//! Elementwise activations with derivatives up to order 3.
//!
//! Order 3 is the ceiling because backpropagating through an explicit
//! second-derivative node differentiates the activation once more.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationFamily {
    Tanh,
    Softplus,
    Relu,
}

/// Numerically stable logistic function.
#[inline]
fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl ActivationFamily {
    /// phi^(m)(u) for m in 0..=3.
    #[inline]
    pub fn eval(self, order: u8, u: f64) -> f64 {
        match self {
            ActivationFamily::Tanh => {
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                match order {
                    0 => t,
                    1 => sech2,
                    2 => -2.0 * t * sech2,
                    3 => -2.0 * sech2 * (1.0 - 3.0 * t * t),
                    _ => panic!("activation derivative order {order} unsupported"),
                }
            }
            ActivationFamily::Softplus => {
                let s = logistic(u);
                match order {
                    // ln(1 + e^u) without overflow for large |u|
                    0 => u.max(0.0) + (-u.abs()).exp().ln_1p(),
                    1 => s,
                    2 => s * (1.0 - s),
                    3 => s * (1.0 - s) * (1.0 - 2.0 * s),
                    _ => panic!("activation derivative order {order} unsupported"),
                }
            }
            ActivationFamily::Relu => match order {
                0 => u.max(0.0),
                1 => {
                    if u > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                2 | 3 => 0.0,
                _ => panic!("activation derivative order {order} unsupported"),
            },
        }
    }

    /// Highest input-derivative order the jets may request. ReLU stops
    /// at 1: its second derivative vanishes almost everywhere, which
    /// would silently degenerate the k = 2 control variate.
    pub fn max_jet_order(self) -> u8 {
        match self {
            ActivationFamily::Relu => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationFamily::Tanh => "tanh",
            ActivationFamily::Softplus => "softplus",
            ActivationFamily::Relu => "relu",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_values() {
        assert_eq!(ActivationFamily::Tanh.eval(0, 0.0), 0.0);
        assert_eq!(ActivationFamily::Tanh.eval(1, 0.0), 1.0);
        let ln2 = 0.693_147_180_559_945_3;
        assert!((ActivationFamily::Softplus.eval(0, 0.0) - ln2).abs() < 1e-15);
        assert_eq!(ActivationFamily::Relu.eval(0, -1.0), 0.0);
        assert_eq!(ActivationFamily::Relu.eval(0, 2.5), 2.5);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        // order-m evaluator vs central difference of the order-(m-1) one
        let h = 1e-6;
        for act in [ActivationFamily::Tanh, ActivationFamily::Softplus] {
            for m in 1..=3u8 {
                let mut u = -4.0;
                while u <= 4.0 {
                    let fd = (act.eval(m - 1, u + h) - act.eval(m - 1, u - h)) / (2.0 * h);
                    let exact = act.eval(m, u);
                    let scale = exact.abs().max(1e-3);
                    assert!(
                        (fd - exact).abs() <= 1e-6 * scale.max(1.0) + 1e-4 * h,
                        "{:?} order {m} at {u}: fd {fd} vs {exact}",
                        act
                    );
                    u += 0.25;
                }
            }
        }
        // relu away from the kink
        for &u in &[-2.0, -0.5, 0.5, 2.0] {
            let fd = (ActivationFamily::Relu.eval(0, u + h) - ActivationFamily::Relu.eval(0, u - h))
                / (2.0 * h);
            assert!((fd - ActivationFamily::Relu.eval(1, u)).abs() < 1e-9);
        }
    }

    #[test]
    fn softplus_stable_at_extremes() {
        let sp = ActivationFamily::Softplus;
        assert!(sp.eval(0, 800.0).is_finite());
        assert!((sp.eval(0, 800.0) - 800.0).abs() < 1e-9);
        assert!(sp.eval(0, -800.0) >= 0.0);
        assert!(sp.eval(1, -800.0) >= 0.0);
    }
}
