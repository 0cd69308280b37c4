use crate::error::{Error, Result};

/// Accuracy order of a central-difference tableau.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Accuracy {
    Second,
    Fourth,
    Sixth,
}

/// One-dimensional central tableau: `(offset, weight)` pairs for step 1.
pub fn tableau(order: u8, accuracy: Accuracy) -> Result<Vec<(i32, f64)>> {
    let t = match (order, accuracy) {
        (0, _) => vec![(0, 1.0)],
        (1, Accuracy::Second) => vec![(-1, -0.5), (1, 0.5)],
        (2, Accuracy::Second) => vec![(-1, 1.0), (0, -2.0), (1, 1.0)],
        (1, Accuracy::Fourth) => vec![
            (-2, 1.0 / 12.0),
            (-1, -8.0 / 12.0),
            (1, 8.0 / 12.0),
            (2, -1.0 / 12.0),
        ],
        (2, Accuracy::Fourth) => vec![
            (-2, -1.0 / 12.0),
            (-1, 16.0 / 12.0),
            (0, -30.0 / 12.0),
            (1, 16.0 / 12.0),
            (2, -1.0 / 12.0),
        ],
        (1, Accuracy::Sixth) => vec![
            (-3, -1.0 / 60.0),
            (-2, 9.0 / 60.0),
            (-1, -45.0 / 60.0),
            (1, 45.0 / 60.0),
            (2, -9.0 / 60.0),
            (3, 1.0 / 60.0),
        ],
        (2, Accuracy::Sixth) => vec![
            (-3, 2.0 / 180.0),
            (-2, -27.0 / 180.0),
            (-1, 270.0 / 180.0),
            (0, -490.0 / 180.0),
            (1, 270.0 / 180.0),
            (2, -27.0 / 180.0),
            (3, 2.0 / 180.0),
        ],
        (k, _) => return Err(Error::UnsupportedOrder(format!("derivative order {k}"))),
    };
    Ok(t)
}

/// Tensor-product central-difference stencil over a point's coordinates.
#[derive(Clone, Debug)]
pub struct Stencil {
    pub orders: Vec<u8>,
    pub steps: Vec<f64>,
    pub accuracy: Accuracy,
}

impl Stencil {
    pub fn new(orders: Vec<u8>, steps: Vec<f64>, accuracy: Accuracy) -> Result<Self> {
        if orders.len() != steps.len() {
            return Err(Error::DimensionMismatch {
                what: "stencil steps",
                expected: orders.len(),
                got: steps.len(),
            });
        }
        if steps.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::InvalidArgument("stencil steps must be positive".into()));
        }
        for &o in &orders {
            tableau(o, accuracy)?;
        }
        Ok(Self {
            orders,
            steps,
            accuracy,
        })
    }

    /// Second-order stencil with the same step on every coordinate.
    pub fn uniform(orders: Vec<u8>, step: f64) -> Result<Self> {
        let n = orders.len();
        Self::new(orders, vec![step; n], Accuracy::Second)
    }

    pub fn dim(&self) -> usize {
        self.orders.len()
    }

    /// Widest offset (in steps) along coordinate `i`.
    pub fn reach(&self, i: usize) -> f64 {
        match (self.orders[i], self.accuracy) {
            (0, _) => 0.0,
            (_, Accuracy::Second) => 1.0,
            (_, Accuracy::Fourth) => 2.0,
            (_, Accuracy::Sixth) => 3.0,
        }
    }

    /// Evaluation points as displacement vectors with weights, already
    /// divided by the step powers.
    pub fn nodes(&self) -> Vec<(Vec<f64>, f64)> {
        let mut out = vec![(vec![0.0; self.dim()], 1.0)];
        for (i, (&o, &h)) in self.orders.iter().zip(&self.steps).enumerate() {
            if o == 0 {
                continue;
            }
            let scale = h.powi(o as i32);
            let tab = tableau(o, self.accuracy).expect("validated in constructor");
            let mut next = Vec::with_capacity(out.len() * tab.len());
            for (disp, w) in &out {
                for &(k, tw) in &tab {
                    let mut d = disp.clone();
                    d[i] = k as f64 * h;
                    next.push((d, w * tw / scale));
                }
            }
            out = next;
        }
        out
    }
}

/// Central-difference estimate of a partial derivative of `field` at `point`.
pub fn fd_derivative<F>(field: F, point: &[f64], stencil: &Stencil) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if point.len() != stencil.dim() {
        return Err(Error::DimensionMismatch {
            what: "stencil point",
            expected: stencil.dim(),
            got: point.len(),
        });
    }
    let mut acc = 0.0;
    let mut x = point.to_vec();
    for (disp, w) in stencil.nodes() {
        for (xi, (p, d)) in x.iter_mut().zip(point.iter().zip(&disp)) {
            *xi = p + d;
        }
        let v = field(&x);
        if !v.is_finite() {
            return Err(Error::NonFiniteEvaluation(format!("field at {x:?}")));
        }
        acc += w * v;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn factorial(k: u32) -> f64 {
        (1..=k).map(|i| i as f64).product()
    }

    #[test]
    fn sine_slope_at_zero() {
        let s = Stencil::uniform(vec![1], 1e-3).unwrap();
        let d = fd_derivative(|x| x[0].sin(), &[0.0], &s).unwrap();
        assert!((d - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn second_derivative_of_square() {
        let s = Stencil::uniform(vec![2], 1e-3).unwrap();
        for x in [-3.0, 0.0, 0.7, 12.5] {
            let d = fd_derivative(|p| p[0] * p[0], &[x], &s).unwrap();
            assert!((d - 2.0).abs() < 1e-6, "{d}");
        }
    }

    #[test]
    fn mixed_rbf_derivative_vanishes_at_unit_distance() {
        // ∂x∂x' exp(-(x-x')²/2) = (1-(x-x')²) exp(-(x-x')²/2)
        let s = Stencil::uniform(vec![1, 1], 1e-3).unwrap();
        let k = |p: &[f64]| (-(p[0] - p[1]).powi(2) / 2.0).exp();
        let d = fd_derivative(k, &[0.0, 1.0], &s).unwrap();
        assert!(d.abs() <= 1e-6, "{d}");
        let d = fd_derivative(k, &[0.0, 0.5], &s).unwrap();
        let exact = 0.75 * (-0.125f64).exp();
        assert!((d - exact).abs() < 1e-6);
    }

    #[test]
    fn tableau_moments() {
        for acc in [Accuracy::Second, Accuracy::Fourth, Accuracy::Sixth] {
            let max_degree = match acc {
                Accuracy::Second => 2,
                Accuracy::Fourth => 4,
                Accuracy::Sixth => 6,
            };
            for k in 1..=2u8 {
                let tab = tableau(k, acc).unwrap();
                let sum: f64 = tab.iter().map(|(_, w)| w).sum();
                assert!(sum.abs() < 1e-14);
                for deg in 0..=max_degree + k as i32 - 1 {
                    let m: f64 = tab.iter().map(|(o, w)| w * (*o as f64).powi(deg)).sum();
                    let expected = if deg == k as i32 { factorial(k as u32) } else { 0.0 };
                    if deg < k as i32 || deg == k as i32 {
                        assert!((m - expected).abs() < 1e-12, "k={k} deg={deg} m={m}");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_third_order() {
        assert!(matches!(
            Stencil::uniform(vec![3], 1e-3),
            Err(Error::UnsupportedOrder(_))
        ));
    }

    #[test]
    fn non_finite_field_is_reported() {
        let s = Stencil::uniform(vec![1], 1e-3).unwrap();
        assert!(fd_derivative(|x| x[0].ln(), &[0.0], &s).is_err());
    }

    proptest! {
        #[test]
        fn exact_on_low_degree_polynomials(
            c in proptest::collection::vec(-2.0f64..2.0, 6),
            x in -1.0f64..1.0,
            y in -1.0f64..1.0,
        ) {
            // quadratic in two variables: second-order stencils are exact
            let f = |p: &[f64]| c[0] + c[1]*p[0] + c[2]*p[1] + c[3]*p[0]*p[0]
                + c[4]*p[0]*p[1] + c[5]*p[1]*p[1];
            let h = 1e-2;
            let cases: [(Vec<u8>, f64); 5] = [
                (vec![1, 0], c[1] + 2.0*c[3]*x + c[4]*y),
                (vec![0, 1], c[2] + c[4]*x + 2.0*c[5]*y),
                (vec![2, 0], 2.0*c[3]),
                (vec![1, 1], c[4]),
                (vec![0, 2], 2.0*c[5]),
            ];
            for (orders, exact) in cases {
                let s = Stencil::uniform(orders, h).unwrap();
                let d = fd_derivative(f, &[x, y], &s).unwrap();
                prop_assert!((d - exact).abs() < 1e-10);
            }
        }
    }
}
