use std::cell::Cell;
use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{fd_gradient, ParamTransform, Target, Transform};
use crate::diff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::gp::{decomposed_from_covariance, LikelihoodParts, ObservationSet};
use crate::kernel::{gram_from_jets, plain_jets, tape_gram, KernelHyper, OperatorJets};
use crate::nn::{Embedding, JetLayout};
use crate::pde::ProblemSpec;

/// Joint likelihood with the feature network held fixed, so the feature
/// jets of both point sets are computed once.
#[derive(Clone, Debug)]
pub struct PosteriorModel {
    pub obs: ObservationSet,
    zu: Mat,
    ju: Mat,
    f_jets: OperatorJets,
    n_phi: usize,
}

impl PosteriorModel {
    pub fn new(obs: &ObservationSet, emb: &Embedding, problem: &ProblemSpec) -> Result<Self> {
        let zu = emb.jets(&obs.s_u, &JetLayout::values_only())?.z;
        let ju = plain_jets(zu.nrows(), zu.ncols());
        let f_jets = OperatorJets::build(emb, &obs.s_f, &problem.operator)?;
        Ok(Self {
            obs: obs.clone(),
            zu,
            ju,
            f_jets,
            n_phi: problem.n_phi(),
        })
    }

    /// Feature dimension.
    pub fn p(&self) -> usize {
        self.zu.ncols()
    }

    pub fn n_phi(&self) -> usize {
        self.n_phi
    }

    /// Noise-free joint covariance.
    pub fn covariance(&self, psi: &KernelHyper, phi: &[f64]) -> Mat {
        let (lam, sf2) = (psi.lambda(), psi.sf2());
        let (nu, nf) = (self.obs.n_u(), self.obs.n_f());
        let mut k = Mat::zeros(nu + nf, nu + nf);
        k.view_mut((0, 0), (nu, nu))
            .copy_from(&gram_from_jets(&self.zu, &self.ju, &self.zu, &self.ju, &lam, sf2, true));
        if nf > 0 {
            let jf = self.f_jets.combine(phi);
            let zf = &self.f_jets.z;
            let kuf = gram_from_jets(&self.zu, &self.ju, zf, &jf, &lam, sf2, false);
            k.view_mut((0, nu), (nu, nf)).copy_from(&kuf);
            k.view_mut((nu, 0), (nf, nu)).copy_from(&kuf.transpose());
            k.view_mut((nu, nu), (nf, nf))
                .copy_from(&gram_from_jets(zf, &jf, zf, &jf, &lam, sf2, true));
        }
        k
    }

    /// Covariance between plain test features `zt` and the observation
    /// vector `[u; f]`.
    pub fn cross_covariance(&self, zt: &Mat, psi: &KernelHyper, phi: &[f64]) -> Mat {
        let (lam, sf2) = (psi.lambda(), psi.sf2());
        let (nu, nf) = (self.obs.n_u(), self.obs.n_f());
        let jt = plain_jets(zt.nrows(), zt.ncols());
        let mut k = Mat::zeros(zt.nrows(), nu + nf);
        k.columns_mut(0, nu)
            .copy_from(&gram_from_jets(zt, &jt, &self.zu, &self.ju, &lam, sf2, false));
        if nf > 0 {
            let jf = self.f_jets.combine(phi);
            k.columns_mut(nu, nf)
                .copy_from(&gram_from_jets(zt, &jt, &self.f_jets.z, &jf, &lam, sf2, false));
        }
        k
    }

    pub fn loglik_parts(&self, psi: &KernelHyper, phi: &[f64]) -> Result<LikelihoodParts> {
        decomposed_from_covariance(&self.obs, &self.covariance(psi, phi))
    }

    /// Negative joint log-likelihood on the tape.
    pub fn tape_nll(&self, tape: &mut Tape, phi: Var, log_sf2: Var, log_ls: Var) -> Result<Var> {
        let zu = tape.constant(self.zu.clone());
        let ju = tape.constant(self.ju.clone());
        let kuu = tape_gram(tape, (zu, ju), None, log_sf2, log_ls);
        let k = if self.obs.n_f() > 0 {
            let (zf, jf) = self.f_jets.tape_combine(tape, phi);
            let kuf = tape_gram(tape, (zu, ju), Some((zf, jf)), log_sf2, log_ls);
            let kff = tape_gram(tape, (zf, jf), None, log_sf2, log_ls);
            let kfu = tape.transpose(kuf);
            let top = tape.hstack(&[kuu, kuf]);
            let bottom = tape.hstack(&[kfu, kff]);
            tape.vstack(&[top, bottom])
        } else {
            kuu
        };
        let noise = tape.constant(Mat::from_diagonal(&DVector::from_vec(self.obs.noise_diag())));
        let k = tape.add(k, noise);
        let d = tape.constant(self.obs.d_joint());
        tape.gaussian_nll(k, d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Reverse mode through the likelihood.
    Tape,
    /// Central differences of the potential.
    FiniteDifference,
}

pub const FD_STEP: f64 = 1e-5;
const FD_MAX_DIM: usize = 16;

/// Potential energy on `η = (logit φ, log σ², log ℓ)` with uniform `φ`
/// priors on their boxes and log-normal `ψ` priors.
#[derive(Clone, Debug)]
pub struct PosteriorTarget {
    pub model: PosteriorModel,
    pub transform: ParamTransform,
    pub phi_names: Vec<String>,
    /// Prior means of `(log σ², log ℓ)`.
    pub psi_center: Vec<f64>,
    pub psi_sd: f64,
    pub gradient: GradientMode,
    fallbacks: Cell<usize>,
}

impl PosteriorTarget {
    pub fn new(model: PosteriorModel, problem: &ProblemSpec, psi_center: &KernelHyper, psi_sd: f64) -> Result<Self> {
        if psi_center.dim() != model.p() {
            return Err(Error::DimensionMismatch {
                what: "kernel lengthscales",
                expected: model.p(),
                got: psi_center.dim(),
            });
        }
        if !(psi_sd > 0.0) {
            return Err(Error::InvalidArgument("psi prior sd must be positive".into()));
        }
        let mut maps: Vec<Transform> = problem
            .prior_lo
            .iter()
            .zip(&problem.prior_hi)
            .map(|(&lo, &hi)| Transform::Logit { lo, hi })
            .collect();
        maps.extend(std::iter::repeat(Transform::Log).take(1 + model.p()));
        Ok(Self {
            transform: ParamTransform { maps },
            phi_names: problem.param_names.clone(),
            psi_center: psi_center.to_vec(),
            psi_sd,
            model,
            gradient: GradientMode::Tape,
            fallbacks: Cell::new(0),
        })
    }

    pub fn n_phi(&self) -> usize {
        self.model.n_phi()
    }

    pub fn names(&self) -> Vec<String> {
        let mut n = self.phi_names.clone();
        n.push("sigma2".into());
        n.extend((1..=self.model.p()).map(|i| format!("ell_{i}")));
        n
    }

    /// Constrained `φ` and `ψ` of an unconstrained point.
    pub fn split(&self, x: &[f64]) -> (Vec<f64>, KernelHyper) {
        let k = self.n_phi();
        let phi = self.transform.forward(&x[..k]);
        (phi, KernelHyper::from_slice(&x[k..]))
    }

    pub fn unconstrain(&self, phi: &[f64], psi: &KernelHyper) -> Result<Vec<f64>> {
        if phi.len() != self.n_phi() || psi.dim() != self.model.p() {
            return Err(Error::DimensionMismatch {
                what: "initial state",
                expected: self.dim(),
                got: phi.len() + 1 + psi.dim(),
            });
        }
        for (k, v) in phi.iter().enumerate() {
            if !self.transform.maps[k].in_support(*v) {
                return Err(Error::InvalidArgument(format!("phi[{k}] = {v} outside the prior support")));
            }
        }
        let mut x = self.transform.inverse(phi);
        x.extend(psi.to_vec());
        Ok(x)
    }

    /// `−log p(φ) − log p(ψ) − log|J|` and its gradient in `η`.
    fn prior_terms(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let k = self.n_phi();
        let s2 = self.psi_sd * self.psi_sd;
        let mut u = 0.0;
        let mut g = vec![0.0; x.len()];
        for (i, m) in self.transform.maps.iter().enumerate() {
            u -= m.log_jacobian(x[i]);
            g[i] -= m.log_jacobian_grad(x[i]);
            if i < k {
                if let Transform::Logit { lo, hi } = m {
                    u += (hi - lo).ln();
                }
            } else {
                // log-normal density of ψ = e^η
                let c = self.psi_center[i - k];
                u += x[i] + 0.5 * (2.0 * PI * s2).ln() + 0.5 * (x[i] - c).powi(2) / s2;
                g[i] += 1.0 + (x[i] - c) / s2;
            }
        }
        (u, g)
    }

    /// Potential through the decomposed likelihood.
    pub fn potential_checked(&self, x: &[f64]) -> Result<f64> {
        let (phi, psi) = self.split(x);
        let parts = self.model.loglik_parts(&psi, &phi)?;
        Ok(-parts.loglik() + self.prior_terms(x).0)
    }

    pub fn tape_potential_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let k = self.n_phi();
        let (phi, _) = self.split(x);
        let mut t = Tape::new();
        let phi_v = t.param(Mat::from_column_slice(k, 1, &phi));
        let lsf2 = t.param(Mat::from_element(1, 1, x[k]));
        let lls = t.param(Mat::from_row_slice(1, x.len() - k - 1, &x[k + 1..]));
        let nll = self.model.tape_nll(&mut t, phi_v, lsf2, lls)?;
        let grads = t.gradient(nll)?;
        let (u_prior, mut g) = self.prior_terms(x);
        let g_phi = grads.wrt(phi_v);
        for i in 0..k {
            g[i] += g_phi[(i, 0)] * self.transform.maps[i].derivative(x[i]);
        }
        g[k] += grads.wrt(lsf2)[(0, 0)];
        for (i, v) in grads.wrt(lls).iter().enumerate() {
            g[k + 1 + i] += v;
        }
        Ok((t.scalar_value(nll) + u_prior, g))
    }

    /// Central-difference gradient of the potential.
    pub fn grad_potential(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() > FD_MAX_DIM {
            return Err(Error::InvalidArgument(format!(
                "finite-difference gradient limited to {FD_MAX_DIM} dimensions"
            )));
        }
        let (g, fallback) = fd_gradient(|y| self.potential(y), x, FD_STEP)?;
        if fallback {
            self.fallbacks.set(self.fallbacks.get() + 1);
        }
        Ok(g)
    }

    /// Number of one-sided finite-difference gradients taken so far.
    pub fn fd_fallbacks(&self) -> usize {
        self.fallbacks.get()
    }
}

impl Target for PosteriorTarget {
    fn dim(&self) -> usize {
        self.transform.maps.len()
    }

    fn potential(&self, x: &[f64]) -> f64 {
        self.potential_checked(x).unwrap_or(f64::INFINITY)
    }

    fn potential_and_grad(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        match self.gradient {
            GradientMode::Tape => self.tape_potential_and_grad(x).ok(),
            GradientMode::FiniteDifference => {
                let u = self.potential(x);
                if !u.is_finite() {
                    return None;
                }
                self.grad_potential(x).ok().map(|g| (u, g))
            }
        }
    }
}
