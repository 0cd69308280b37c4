//! Hamiltonian Monte Carlo over the PDE parameters and kernel
//! hyperparameters.

mod diagnostics;
mod map;
mod posterior;

pub use diagnostics::{autocorrelation, ess, split_rhat, ChainDiagnostics};
pub use map::{map_estimate, MapConfig, MapResult};
pub use posterior::{GradientMode, PosteriorModel, PosteriorTarget, FD_STEP};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::sigmoid;
use crate::error::{Error, Result};

/// Map from an unconstrained coordinate to its constrained value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Logit { lo: f64, hi: f64 },
    Log,
    Identity,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Transform {
    pub fn forward(&self, eta: f64) -> f64 {
        match *self {
            Transform::Logit { lo, hi } => (lo + (hi - lo) * sigmoid(eta)).clamp(lo, hi),
            Transform::Log => eta.exp(),
            Transform::Identity => eta,
        }
    }

    pub fn inverse(&self, x: f64) -> f64 {
        match *self {
            Transform::Logit { lo, hi } => {
                let u = (x - lo) / (hi - lo);
                u.ln() - (-u).ln_1p()
            }
            Transform::Log => x.ln(),
            Transform::Identity => x,
        }
    }

    /// `log |d forward / d η|`.
    pub fn log_jacobian(&self, eta: f64) -> f64 {
        match *self {
            Transform::Logit { lo, hi } => (hi - lo).ln() - softplus(-eta) - softplus(eta),
            Transform::Log => eta,
            Transform::Identity => 0.0,
        }
    }

    /// Derivative of `log_jacobian`.
    pub fn log_jacobian_grad(&self, eta: f64) -> f64 {
        match *self {
            Transform::Logit { .. } => 1.0 - 2.0 * sigmoid(eta),
            Transform::Log => 1.0,
            Transform::Identity => 0.0,
        }
    }

    /// `d forward / d η`.
    pub fn derivative(&self, eta: f64) -> f64 {
        match *self {
            Transform::Logit { lo, hi } => {
                let s = sigmoid(eta);
                (hi - lo) * s * (1.0 - s)
            }
            Transform::Log => eta.exp(),
            Transform::Identity => 1.0,
        }
    }

    /// Strictly inside the support.
    pub fn in_support(&self, x: f64) -> bool {
        match *self {
            Transform::Logit { lo, hi } => x > lo && x < hi,
            Transform::Log => x > 0.0 && x.is_finite(),
            Transform::Identity => x.is_finite(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTransform {
    pub maps: Vec<Transform>,
}

impl ParamTransform {
    pub fn forward(&self, eta: &[f64]) -> Vec<f64> {
        self.maps.iter().zip(eta).map(|(m, e)| m.forward(*e)).collect()
    }

    pub fn inverse(&self, x: &[f64]) -> Vec<f64> {
        self.maps.iter().zip(x).map(|(m, v)| m.inverse(*v)).collect()
    }

    pub fn log_jacobian(&self, eta: &[f64]) -> f64 {
        self.maps.iter().zip(eta).map(|(m, e)| m.log_jacobian(*e)).sum()
    }
}

/// A differentiable negative log density on an unconstrained space.
pub trait Target {
    fn dim(&self) -> usize;
    /// `+∞` where the density cannot be evaluated.
    fn potential(&self, x: &[f64]) -> f64;
    /// `None` where the density cannot be evaluated.
    fn potential_and_grad(&self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
}

/// Central differences with step `h`; where a neighbour is not finite the
/// one-sided difference is used instead and the second value is `true`.
pub fn fd_gradient<F>(f: F, x: &[f64], h: f64) -> Result<(Vec<f64>, bool)>
where
    F: Fn(&[f64]) -> f64,
{
    let f0 = f(x);
    let mut fallback = false;
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let gi = match (fp.is_finite(), fm.is_finite()) {
            (true, true) => (fp - fm) / (2.0 * h),
            (true, false) if f0.is_finite() => {
                fallback = true;
                (fp - f0) / h
            }
            (false, true) if f0.is_finite() => {
                fallback = true;
                (f0 - fm) / h
            }
            _ => return Err(Error::NonFiniteEvaluation(format!("potential around coordinate {i}"))),
        };
        g.push(gi);
    }
    Ok((g, fallback))
}

/// Result of one leapfrog trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub potential: f64,
    pub grad: Vec<f64>,
}

/// Half kick, `l` drifts with full kicks in between, final half kick.
/// `grad0` is the gradient at `x`. Returns `None` on a non-finite state.
pub fn leapfrog<T: Target + ?Sized>(
    target: &T,
    x: &[f64],
    p: &[f64],
    grad0: &[f64],
    eps: f64,
    l: usize,
    inv_mass: &[f64],
) -> Option<Trajectory> {
    let mut x = x.to_vec();
    let mut p = p.to_vec();
    let mut grad = grad0.to_vec();
    let mut potential = f64::NAN;
    for (pi, g) in p.iter_mut().zip(&grad) {
        *pi -= 0.5 * eps * g;
    }
    for step in 0..l {
        for i in 0..x.len() {
            x[i] += eps * inv_mass[i] * p[i];
        }
        let (u, g) = target.potential_and_grad(&x)?;
        if !u.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        potential = u;
        grad = g;
        let k = if step + 1 == l { 0.5 } else { 1.0 };
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi -= k * eps * g;
        }
    }
    if p.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Trajectory { x, p, potential, grad })
}

pub fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcConfig {
    pub n_warmup: usize,
    pub n_samples: usize,
    pub n_leapfrog: usize,
    pub step_size: f64,
    pub target_accept: f64,
    /// Diagonal mass; identity when unset.
    pub mass: Option<Vec<f64>>,
    /// Each trajectory uses `ε·(1 + j·U(−1, 1))`.
    #[serde(default = "default_jitter")]
    pub step_jitter: f64,
    pub seed: u64,
}

fn default_jitter() -> f64 {
    0.1
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            n_warmup: 1500,
            n_samples: 8500,
            n_leapfrog: 20,
            step_size: 0.05,
            target_accept: 0.8,
            mass: None,
            step_jitter: default_jitter(),
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_samples == 0 || self.n_leapfrog == 0 {
            return Err(Error::InvalidArgument("sample and leapfrog counts must be positive".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        if !(self.target_accept > 0.4 && self.target_accept < 0.99) {
            return Err(Error::InvalidArgument("target acceptance must lie in (0.4, 0.99)".into()));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::InvalidArgument("step jitter must lie in [0, 1)".into()));
        }
        if let Some(m) = &self.mass {
            if m.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "mass vector",
                    expected: dim,
                    got: m.len(),
                });
            }
            if m.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument("mass entries must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Step-size adaptation by dual averaging.
#[derive(Clone, Debug)]
pub struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    t: f64,
    target: f64,
}

const DA_GAMMA: f64 = 0.05;
const DA_T0: f64 = 10.0;
const DA_KAPPA: f64 = 0.75;

impl DualAveraging {
    pub fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            h_bar: 0.0,
            log_eps_bar: 0.0,
            t: 0.0,
            target,
        }
    }

    /// Feeds one acceptance probability and returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1.0;
        let w = 1.0 / (self.t + DA_T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        let log_eps = self.mu - self.t.sqrt() / DA_GAMMA * self.h_bar;
        let eta = self.t.powf(-DA_KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    pub fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Post-warmup draws on the unconstrained space.
#[derive(Clone, Debug, PartialEq)]
pub struct RawChain {
    pub draws: Vec<Vec<f64>>,
    pub potentials: Vec<f64>,
    pub accepted: usize,
    pub mean_accept_prob: f64,
    pub warmup_accept_rate: f64,
    pub step_size: f64,
    pub rejected_nonfinite: usize,
}

impl RawChain {
    pub fn accept_rate(&self) -> f64 {
        self.accepted as f64 / self.draws.len() as f64
    }
}

const MIN_WARMUP_ACCEPT: f64 = 0.05;

/// HMC with full momentum refresh and a Metropolis correction; the step
/// size is adapted during warmup and then frozen.
pub fn sample<T: Target + ?Sized>(target: &T, x0: &[f64], cfg: &HmcConfig) -> Result<RawChain> {
    let dim = target.dim();
    cfg.validate(dim)?;
    if x0.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "initial point",
            expected: dim,
            got: x0.len(),
        });
    }
    let mass = cfg.mass.clone().unwrap_or_else(|| vec![1.0; dim]);
    let inv_mass: Vec<f64> = mass.iter().map(|m| 1.0 / m).collect();
    let sqrt_mass: Vec<f64> = mass.iter().map(|m| m.sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (mut u, mut grad) = target
        .potential_and_grad(x0)
        .filter(|(u, _)| u.is_finite())
        .ok_or_else(|| Error::NonFiniteEvaluation("potential at the initial point".into()))?;
    let mut x = x0.to_vec();
    let mut eps = cfg.step_size;
    let mut da = DualAveraging::new(eps, cfg.target_accept);

    let mut chain = RawChain {
        draws: Vec::with_capacity(cfg.n_samples),
        potentials: Vec::with_capacity(cfg.n_samples),
        accepted: 0,
        mean_accept_prob: 0.0,
        warmup_accept_rate: 1.0,
        step_size: eps,
        rejected_nonfinite: 0,
    };
    let mut warm_accepted = 0usize;
    for it in 0..cfg.n_warmup + cfg.n_samples {
        let warm = it < cfg.n_warmup;
        if it == cfg.n_warmup {
            if cfg.n_warmup > 0 {
                chain.warmup_accept_rate = warm_accepted as f64 / cfg.n_warmup as f64;
                if chain.warmup_accept_rate < MIN_WARMUP_ACCEPT {
                    return Err(Error::LowAcceptance {
                        rate: chain.warmup_accept_rate,
                        threshold: MIN_WARMUP_ACCEPT,
                    });
                }
                eps = da.final_step();
            }
            chain.step_size = eps;
        }
        let p: Vec<f64> = sqrt_mass.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
        let h0 = u + kinetic(&p, &inv_mass);
        let eps_it = if cfg.step_jitter > 0.0 {
            eps * (1.0 + cfg.step_jitter * rng.gen_range(-1.0..1.0))
        } else {
            eps
        };
        let prop = leapfrog(target, &x, &p, &grad, eps_it, cfg.n_leapfrog, &inv_mass);
        let (accept_prob, prop) = match prop {
            Some(tr) => {
                let h1 = tr.potential + kinetic(&tr.p, &inv_mass);
                let a = if h1.is_finite() { (h0 - h1).exp().min(1.0) } else { 0.0 };
                (a, Some(tr))
            }
            None => {
                if !warm {
                    chain.rejected_nonfinite += 1;
                }
                (0.0, None)
            }
        };
        let draw: f64 = rng.gen();
        let accept = draw < accept_prob;
        if accept {
            let tr = prop.expect("accepted proposals exist");
            x = tr.x;
            u = tr.potential;
            grad = tr.grad;
        }
        if warm {
            warm_accepted += accept as usize;
            eps = da.update(accept_prob);
        } else {
            chain.accepted += accept as usize;
            chain.mean_accept_prob += accept_prob;
            chain.draws.push(x.clone());
            chain.potentials.push(u);
        }
        if (it + 1) % 500 == 0 {
            log::debug!("hmc iteration {} eps {eps:.4e} U {u:.4}", it + 1);
        }
    }
    chain.mean_accept_prob /= cfg.n_samples as f64;
    Ok(chain)
}

/// Draws on the constrained space with column names.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleChain {
    pub names: Vec<String>,
    pub draws: Vec<Vec<f64>>,
    pub potentials: Vec<f64>,
    pub accept_rate: f64,
    pub mean_accept_prob: f64,
    pub warmup_accept_rate: f64,
    pub step_size: f64,
    pub seed: u64,
    pub n_phi: usize,
}

impl SampleChain {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }

    /// One header line, then one draw per line.
    pub fn to_csv(&self) -> String {
        let mut out = self.names.join(",");
        out.push('\n');
        for d in &self.draws {
            let row: Vec<String> = d.iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Reads the names and draws back from `to_csv` output.
    pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
        let mut lines = text.lines();
        let names: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty chain file".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut draws = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidArgument(format!("chain row {}: {e}", i + 1)))?;
            if row.len() != names.len() {
                return Err(Error::DimensionMismatch {
                    what: "chain row",
                    expected: names.len(),
                    got: row.len(),
                });
            }
            draws.push(row);
        }
        Ok((names, draws))
    }
}

/// Posterior sampling started from the pretrained `(φ, ψ)`.
pub fn run_hmc(target: &PosteriorTarget, phi0: &[f64], psi0: &crate::kernel::KernelHyper, cfg: &HmcConfig) -> Result<SampleChain> {
    let x0 = target.unconstrain(phi0, psi0)?;
    let raw = sample(target, &x0, cfg)?;
    Ok(SampleChain {
        names: target.names(),
        draws: raw.draws.iter().map(|x| target.transform.forward(x)).collect(),
        accept_rate: raw.accept_rate(),
        potentials: raw.potentials,
        mean_accept_prob: raw.mean_accept_prob,
        warmup_accept_rate: raw.warmup_accept_rate,
        step_size: raw.step_size,
        seed: cfg.seed,
        n_phi: target.n_phi(),
    })
}
