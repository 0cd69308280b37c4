use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use super::fd_gradient;
use super::posterior::{PosteriorModel, FD_STEP};
use crate::diff::Mat;
use crate::error::{Error, Result};
use crate::kernel::KernelHyper;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub max_iter: usize,
    /// Stop once the gradient norm falls below this.
    pub grad_tol: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub phi: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimises `fidelity − log|R_ff| + ‖φ − φ_pre‖²` in the prior precision
/// by gradient descent with backtracking and finite-difference gradients.
pub fn map_estimate(
    model: &PosteriorModel,
    psi: &KernelHyper,
    phi_pre: &[f64],
    sigma_prior: &Mat,
    cfg: &MapConfig,
) -> Result<MapResult> {
    let k = phi_pre.len();
    if sigma_prior.shape() != (k, k) {
        return Err(Error::DimensionMismatch {
            what: "prior covariance",
            expected: k,
            got: sigma_prior.nrows(),
        });
    }
    let chol = Cholesky::new(sigma_prior.clone())
        .ok_or_else(|| Error::InvalidArgument("prior covariance must be positive definite".into()))?;
    let precision = chol.inverse();
    let objective = |phi: &[f64]| -> f64 {
        let d = Mat::from_iterator(k, 1, phi.iter().zip(phi_pre).map(|(a, b)| a - b));
        let quad = (d.transpose() * &precision * &d)[(0, 0)];
        match model.loglik_parts(psi, phi) {
            Ok(p) => p.fidelity + p.complexity + quad,
            Err(_) => f64::INFINITY,
        }
    };
    let mut phi = phi_pre.to_vec();
    let mut value = objective(&phi);
    if !value.is_finite() {
        return Err(Error::NonFiniteEvaluation("MAP objective at the prior mean".into()));
    }
    let mut step = 1e-2;
    let mut result = MapResult {
        phi: phi.clone(),
        objective: value,
        grad_norm: f64::INFINITY,
        iterations: 0,
        converged: false,
    };
    for it in 0..cfg.max_iter {
        let (g, _) = fd_gradient(objective, &phi, FD_STEP)?;
        let gn2: f64 = g.iter().map(|v| v * v).sum();
        result.grad_norm = gn2.sqrt();
        result.iterations = it;
        if result.grad_norm <= cfg.grad_tol {
            result.converged = true;
            break;
        }
        let mut accepted = false;
        let mut trial = step * 2.0;
        for _ in 0..60 {
            let cand: Vec<f64> = phi.iter().zip(&g).map(|(p, gi)| p - trial * gi).collect();
            let v = objective(&cand);
            if v.is_finite() && v <= value - 1e-4 * trial * gn2 {
                phi = cand;
                value = v;
                step = trial;
                accepted = true;
                break;
            }
            trial *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !result.converged {
        log::warn!("MAP estimate stopped at gradient norm {:.3e}", result.grad_norm);
    }
    result.phi = phi;
    result.objective = value;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::ObservationSet;
    use crate::nn::{init, Architecture, Embedding, InputScaling};
    use crate::pde::{generate_observations, make_problem, ProblemOverrides, ProblemSpec};

    fn setup() -> (ProblemSpec, ObservationSet, PosteriorModel) {
        let p = make_problem("heat1d", &ProblemOverrides::default()).unwrap();
        let obs = generate_observations(&p, 10, 8, 5).unwrap();
        let emb = Embedding::Network {
            params: init(&Architecture::mlp(2, &[8], 2).unwrap(), 1),
            scaling: InputScaling::to_unit_box(&p.domain.lo, &p.domain.hi),
        };
        let model = PosteriorModel::new(&obs, &emb, &p).unwrap();
        (p, obs, model)
    }

    #[test]
    fn tight_prior_returns_prior_mean() {
        let (_, _, model) = setup();
        let sigma = Mat::from_element(1, 1, 1e-10);
        let r = map_estimate(&model, &KernelHyper::unit(2), &[0.8], &sigma, &MapConfig::default()).unwrap();
        assert!((r.phi[0] - 0.8).abs() < 1e-4, "{:?}", r);
    }

    #[test]
    fn stationary_at_result() {
        let (_, _, model) = setup();
        let sigma = Mat::from_element(1, 1, 0.25);
        let psi = KernelHyper::unit(2);
        let r = map_estimate(&model, &psi, &[0.8], &sigma, &MapConfig::default()).unwrap();
        let precision = 4.0;
        let obj = |phi: &[f64]| {
            let p = model.loglik_parts(&psi, phi).unwrap();
            p.fidelity + p.complexity + precision * (phi[0] - 0.8).powi(2)
        };
        let (g, _) = fd_gradient(obj, &r.phi, FD_STEP).unwrap();
        assert!(g[0].abs() <= 1e-3, "{:?} {:?}", g, r);
    }

    #[test]
    fn rejects_indefinite_prior() {
        let (_, _, model) = setup();
        let sigma = Mat::from_element(1, 1, -1.0);
        assert!(map_estimate(&model, &KernelHyper::unit(2), &[0.8], &sigma, &MapConfig::default()).is_err());
    }
}
