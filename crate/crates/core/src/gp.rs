//! Cholesky-based Gaussian process algebra over state and source observations.

use std::f64::consts::PI;

use nalgebra::Cholesky;

use crate::diff::{cho_solve, Mat};
use crate::error::{Error, Result};
use crate::kernel::{gram, joint_covariance, KernelHyper};
use crate::nn::Embedding;
use crate::pde::LinearOperatorSpec;

/// Exact observations of the state `u` and source `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub s_u: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub s_f: Vec<Vec<f64>>,
    pub f: Vec<f64>,
    pub tau_u2: f64,
    pub tau_f2: f64,
}

impl ObservationSet {
    pub fn new(
        s_u: Vec<Vec<f64>>,
        u: Vec<f64>,
        s_f: Vec<Vec<f64>>,
        f: Vec<f64>,
        tau_u2: f64,
        tau_f2: f64,
    ) -> Result<Self> {
        if s_u.is_empty() {
            return Err(Error::InvalidArgument("need at least one state observation".into()));
        }
        if s_u.len() != u.len() {
            return Err(Error::DimensionMismatch {
                what: "state observations",
                expected: s_u.len(),
                got: u.len(),
            });
        }
        if s_f.len() != f.len() {
            return Err(Error::DimensionMismatch {
                what: "source observations",
                expected: s_f.len(),
                got: f.len(),
            });
        }
        if !(tau_u2 > 0.0 && tau_f2 > 0.0) {
            return Err(Error::InvalidArgument("nugget variances must be positive".into()));
        }
        let dim = s_u[0].len();
        if let Some(bad) = s_u.iter().chain(&s_f).find(|s| s.len() != dim) {
            return Err(Error::DimensionMismatch {
                what: "observation point",
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(Self {
            s_u,
            u,
            s_f,
            f,
            tau_u2,
            tau_f2,
        })
    }

    pub fn n_u(&self) -> usize {
        self.s_u.len()
    }

    pub fn n_f(&self) -> usize {
        self.s_f.len()
    }

    pub fn n_total(&self) -> usize {
        self.n_u() + self.n_f()
    }

    /// `[u; f]` as a column.
    pub fn d_joint(&self) -> Mat {
        Mat::from_iterator(self.n_total(), 1, self.u.iter().chain(&self.f).copied())
    }

    /// `diag(τ_u² I, τ_f² I)`.
    pub fn noise_diag(&self) -> Vec<f64> {
        let mut d = vec![self.tau_u2; self.n_u()];
        d.extend(std::iter::repeat(self.tau_f2).take(self.n_f()));
        d
    }

    pub fn without_sources(&self) -> Self {
        Self {
            s_f: vec![],
            f: vec![],
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct CholFactor {
    pub l: Mat,
    pub jitter: f64,
}

impl CholFactor {
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.l.nrows()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &Mat) -> Mat {
        cho_solve(&self.l, b)
    }
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of `K + (nugget + jitter) I`, escalating the jitter by
/// decades from `1e-10` to `1e-4` when needed.
pub fn chol_jitter(k: &Mat, nugget: f64) -> Result<CholFactor> {
    if k.nrows() != k.ncols() {
        return Err(Error::DimensionMismatch {
            what: "cholesky input",
            expected: k.nrows(),
            got: k.ncols(),
        });
    }
    let n = k.nrows();
    let mut ladder = Vec::new();
    let mut jitter = 0.0;
    loop {
        ladder.push(jitter);
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += nugget + jitter;
        }
        if a.iter().all(|x| x.is_finite()) {
            if let Some(c) = Cholesky::new(a) {
                return Ok(CholFactor {
                    l: c.unpack(),
                    jitter,
                });
            }
        }
        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        if jitter > JITTER_MAX * 1.000001 {
            return Err(Error::NotPositiveDefinite { ladder });
        }
    }
}

/// Zero-mean GP posterior mean and variance at `test` given state
/// observations only.
pub fn gpr_predict(
    s_u: &[Vec<f64>],
    u: &[f64],
    emb: &Embedding,
    psi: &KernelHyper,
    tau_u2: f64,
    test: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if s_u.is_empty() {
        return Err(Error::InvalidArgument("need at least one training point".into()));
    }
    let n_phi = 0;
    let op = dummy_operator(s_u[0].len())?;
    let phi = vec![0.0; n_phi];
    let kuu = gram((s_u, false), (s_u, false), emb, psi, &phi, &op)?;
    let fac = chol_jitter(&kuu, tau_u2)?;
    let ks = gram((s_u, false), (test, false), emb, psi, &phi, &op)?;
    let y = Mat::from_column_slice(u.len(), 1, u);
    let alpha = fac.solve(&y);
    let mean = (ks.transpose() * alpha).iter().copied().collect();
    let mut v = ks.clone();
    fac.l.solve_lower_triangular_mut(&mut v);
    let sf2 = psi.sf2();
    let var = (0..test.len())
        .map(|j| (sf2 - v.column(j).norm_squared()).max(0.0))
        .collect();
    Ok((mean, var))
}

/// An operator that is never applied; used where only plain kernel blocks
/// are needed.
fn dummy_operator(dim: usize) -> Result<LinearOperatorSpec> {
    use crate::pde::{AffineCoef, Partial, Term};
    LinearOperatorSpec::new(
        vec![Term {
            coef: AffineCoef::constant(1.0, 0),
            partial: Partial::Value,
        }],
        dim - 1,
        0,
        vec![1.0; dim],
    )
}

/// `½ dᵀ(K_joint + Σ)⁻¹d + ½ log|K_joint + Σ| + (N/2) log 2π`.
pub fn joint_nlml(
    obs: &ObservationSet,
    emb: &Embedding,
    psi: &KernelHyper,
    phi: &[f64],
    op: &LinearOperatorSpec,
) -> Result<f64> {
    let mut k = joint_covariance(&obs.s_u, &obs.s_f, emb, psi, phi, op)?;
    for (i, t) in obs.noise_diag().into_iter().enumerate() {
        k[(i, i)] += t;
    }
    let fac = chol_jitter(&k, 0.0)?;
    let d = obs.d_joint();
    let alpha = fac.solve(&d);
    let n = obs.n_total() as f64;
    Ok(0.5 * d.dot(&alpha) + 0.5 * fac.logdet() + 0.5 * n * (2.0 * PI).ln())
}

/// Split of the joint log-likelihood into the conditional source-term
/// misfit, its log-determinant, and the state-only part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LikelihoodParts {
    /// `‖f − h‖²` in the precision `R_ff`.
    pub fidelity: f64,
    /// `−log|R_ff|`.
    pub complexity: f64,
    pub constant: f64,
}

impl LikelihoodParts {
    pub fn loglik(&self) -> f64 {
        -0.5 * (self.fidelity + self.complexity) + self.constant
    }
}

pub fn decomposed_loglik(
    obs: &ObservationSet,
    emb: &Embedding,
    psi: &KernelHyper,
    phi: &[f64],
    op: &LinearOperatorSpec,
) -> Result<LikelihoodParts> {
    let k = joint_covariance(&obs.s_u, &obs.s_f, emb, psi, phi, op)?;
    decomposed_from_covariance(obs, &k)
}

/// The decomposition given the noise-free joint covariance `k`.
pub fn decomposed_from_covariance(obs: &ObservationSet, k: &Mat) -> Result<LikelihoodParts> {
    let (nu, nf) = (obs.n_u(), obs.n_f());
    let kuu = k.view((0, 0), (nu, nu)).into_owned();
    let fac_u = chol_jitter(&kuu, obs.tau_u2)?;
    let u = Mat::from_column_slice(nu, 1, &obs.u);
    let alpha_u = fac_u.solve(&u);
    let n_total = obs.n_total() as f64;
    let constant = -0.5 * u.dot(&alpha_u) - 0.5 * fac_u.logdet() - 0.5 * n_total * (2.0 * PI).ln();
    if nf == 0 {
        return Ok(LikelihoodParts {
            fidelity: 0.0,
            complexity: 0.0,
            constant,
        });
    }
    let kfu = k.view((nu, 0), (nf, nu)).into_owned();
    let mut kff = k.view((nu, nu), (nf, nf)).into_owned();
    for i in 0..nf {
        kff[(i, i)] += obs.tau_f2;
    }
    // h = K_fu (K_uu^τ)⁻¹ u and the Schur complement, both through
    // V = L_u⁻¹ K_uf
    let mut v = kfu.transpose();
    fac_u.l.solve_lower_triangular_mut(&mut v);
    let mut w_u = u.clone();
    fac_u.l.solve_lower_triangular_mut(&mut w_u);
    let h = v.transpose() * &w_u;
    let mut schur = kff - v.transpose() * &v;
    crate::diff::symmetrize(&mut schur);
    let fac_s = chol_jitter(&schur, 0.0)?;
    let f = Mat::from_column_slice(nf, 1, &obs.f);
    let resid = f - h;
    let fidelity = resid.dot(&fac_s.solve(&resid));
    Ok(LikelihoodParts {
        fidelity,
        complexity: fac_s.logdet(),
        constant,
    })
}
