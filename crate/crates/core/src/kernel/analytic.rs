use crate::error::{Error, Result};
use crate::kernel::{check_psi, KernelHyper, OperatorTag};
use crate::pde::LinearOperatorSpec;

/// Probabilists' Hermite polynomial.
fn hermite(n: u8, x: f64) -> Result<f64> {
    Ok(match n {
        0 => 1.0,
        1 => x,
        2 => x * x - 1.0,
        3 => x * x * x - 3.0 * x,
        4 => x.powi(4) - 6.0 * x * x + 3.0,
        _ => return Err(Error::UnsupportedOrder(format!("rbf derivative of order {n}"))),
    })
}

/// `∂^α_s ∂^β_{s'} κ(s, s')` for the RBF on raw coordinates.
fn rbf_partial(s: &[f64], sp: &[f64], psi: &KernelHyper, alpha: &[u8], beta: &[u8]) -> Result<f64> {
    let mut out = psi.sf2();
    let mut sign_flips = 0u32;
    for (i, lam) in psi.lambda().into_iter().enumerate() {
        let r = s[i] - sp[i];
        let n = alpha[i] + beta[i];
        sign_flips += beta[i] as u32;
        let root = lam.sqrt();
        out *= (-root).powi(n as i32) * hermite(n, root * r)? * (-0.5 * lam * r * r).exp();
    }
    if sign_flips % 2 == 1 {
        out = -out;
    }
    Ok(out)
}

fn side_terms(op: &LinearOperatorSpec, s: &[f64], phi: &[f64], active: bool) -> Vec<(f64, Vec<u8>)> {
    if !active {
        return vec![(1.0, vec![0; op.dim()])];
    }
    op.terms()
        .iter()
        .map(|t| (t.coef.eval(s, phi), t.partial.orders(op.dim())))
        .filter(|(c, _)| *c != 0.0)
        .collect()
}

/// Closed-form operator-applied RBF kernel on raw coordinates (the identity
/// feature map).
pub fn analytic_operator_kernel(
    s: &[f64],
    sp: &[f64],
    psi: &KernelHyper,
    phi: &[f64],
    op: &LinearOperatorSpec,
    tag: OperatorTag,
) -> Result<f64> {
    check_psi(psi, op.dim())?;
    let left = side_terms(op, s, phi, tag.left());
    let right = side_terms(op, sp, phi, tag.right());
    let mut acc = 0.0;
    for (cl, a) in &left {
        for (cr, b) in &right {
            acc += cl * cr * rbf_partial(s, sp, psi, a, b)?;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{AffineCoef, Partial, Term};

    fn dx_op() -> LinearOperatorSpec {
        LinearOperatorSpec::new(
            vec![Term {
                coef: AffineCoef::constant(1.0, 0),
                partial: Partial::First(0),
            }],
            0,
            0,
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn first_derivative_left() {
        let psi = KernelHyper::unit(1);
        let v = analytic_operator_kernel(&[0.0], &[1.0], &psi, &[], &dx_op(), OperatorTag::Left).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        let v = analytic_operator_kernel(&[0.0], &[1.0], &psi, &[], &dx_op(), OperatorTag::Right).unwrap();
        assert!((v + (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn mixed_derivative_at_unit_distance_vanishes() {
        let psi = KernelHyper::unit(1);
        let v = analytic_operator_kernel(&[0.0], &[1.0], &psi, &[], &dx_op(), OperatorTag::Both).unwrap();
        assert!(v.abs() < 1e-15);
    }
}
