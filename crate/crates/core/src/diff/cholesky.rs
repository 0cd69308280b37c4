use nalgebra::DMatrix;

use crate::error::{Error, Result};

type Mat = DMatrix<f64>;

fn check_diagonal(l: &Mat) -> Result<()> {
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::InvalidFactor { index: i, value: d });
        }
    }
    Ok(())
}

/// Solves `L Lᵀ X = B`.
pub fn cho_solve(l: &Mat, b: &Mat) -> Mat {
    let mut x = b.clone();
    l.solve_lower_triangular_mut(&mut x);
    l.tr_solve_lower_triangular_mut(&mut x);
    x
}

/// `(L Lᵀ)⁻¹`, symmetrized.
pub fn inverse_from_factor(l: &Mat) -> Mat {
    let n = l.nrows();
    let mut linv = Mat::identity(n, n);
    l.solve_lower_triangular_mut(&mut linv);
    let mut inv = linv.transpose() * &linv;
    symmetrize(&mut inv);
    inv
}

pub(crate) fn symmetrize(m: &mut Mat) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Gradient with respect to the symmetric input `K = L Lᵀ` given the
/// gradient `upstream` with respect to its lower Cholesky factor `L`.
///
/// Uses `K̄ = ½ L⁻ᵀ (P + Pᵀ) L⁻¹` with `P = Φ(Lᵀ L̄)`, where `Φ` keeps the lower
/// triangle and halves the diagonal. Only the lower triangle of `upstream`
/// is read.
pub fn cholesky_pullback(factor: &Mat, upstream: &Mat) -> Result<Mat> {
    check_diagonal(factor)?;
    let n = factor.nrows();
    let lbar = upstream.lower_triangle();
    let mut p = (factor.transpose() * lbar).lower_triangle();
    for i in 0..n {
        p[(i, i)] *= 0.5;
    }
    let mut s = &p + p.transpose();
    // L⁻ᵀ S L⁻¹ = (L⁻ᵀ (L⁻ᵀ S)ᵀ)ᵀ
    factor.tr_solve_lower_triangular_mut(&mut s);
    let mut st = s.transpose();
    factor.tr_solve_lower_triangular_mut(&mut st);
    let mut out = st.transpose() * 0.5;
    symmetrize(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::chol_jitter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logdet_upstream(l: &Mat, scale: f64) -> Mat {
        let n = l.nrows();
        let mut g = Mat::zeros(n, n);
        for i in 0..n {
            g[(i, i)] = scale / l[(i, i)];
        }
        g
    }

    #[test]
    fn half_logdet_at_identity() {
        let l = Mat::identity(3, 3);
        let g = cholesky_pullback(&l, &logdet_upstream(&l, 1.0)).unwrap();
        assert!((g - Mat::identity(3, 3) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn logdet_gradient_is_inverse() {
        let k = Mat::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = chol_jitter(&k, 0.0).unwrap().l;
        let g = cholesky_pullback(&l, &logdet_upstream(&l, 2.0)).unwrap();
        let expected = Mat::from_row_slice(2, 2, &[0.375, -0.25, -0.25, 0.5]);
        assert!((g - expected).amax() < 1e-14);
    }

    #[test]
    fn rejects_bad_diagonal() {
        let l = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.0]);
        assert!(matches!(
            cholesky_pullback(&l, &Mat::identity(2, 2)),
            Err(Error::InvalidFactor { index: 1, .. })
        ));
    }

    fn loss(k: &Mat, y: &Mat) -> f64 {
        let l = chol_jitter(k, 0.0).unwrap().l;
        let a = cho_solve(&l, y);
        let logdet: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        0.5 * y.dot(&a) + 0.5 * logdet
    }

    #[test]
    fn quadratic_plus_logdet_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let a = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let k = &a * a.transpose() + Mat::identity(n, n);
        let y = Mat::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
        let l = chol_jitter(&k, 0.0).unwrap().l;

        // upstream w.r.t. L of ½ yᵀ(LLᵀ)⁻¹y + Σ log L_ii
        let w = {
            let mut w = y.clone();
            l.solve_lower_triangular_mut(&mut w);
            w
        };
        let alpha = cho_solve(&l, &y);
        let mut lbar = -(&alpha * w.transpose());
        for i in 0..n {
            lbar[(i, i)] += 1.0 / l[(i, i)];
        }
        let g = cholesky_pullback(&l, &lbar).unwrap();

        let h = 1e-5;
        for i in 0..n {
            for j in 0..=i {
                let mut e = Mat::zeros(n, n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let fd = (loss(&(&k + &e * h), &y) - loss(&(&k - &e * h), &y)) / (2.0 * h);
                let an = if i == j { g[(i, i)] } else { 2.0 * g[(i, j)] };
                let rel = (fd - an).abs() / an.abs().max(1e-3);
                assert!(rel < 1e-6, "({i},{j}) fd {fd} vs {an}");
            }
        }
    }
}
