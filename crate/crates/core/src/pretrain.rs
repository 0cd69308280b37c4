//! Physics-informed pretraining of the deep kernel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{sigmoid, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::gp::{chol_jitter, gpr_predict, ObservationSet};
use crate::kernel::{deep_kernel, gram, plain_jets, tape_gram, tape_operator_jets, KernelHyper};
use crate::nn::{init, Architecture, Embedding, InputScaling, JetLayout, NetworkParams};
use crate::pde::{apply_operator, Domain, ProblemSpec};

/// Uniform interior collocation points.
pub fn sample_collocation(domain: &Domain, n_col: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    domain.sample(&mut rng, n_col)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_data: f64,
    pub w_pde: f64,
    pub w_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_data: 1.0,
            w_pde: 1.0,
            w_gp: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_data, self.w_pde, self.w_gp];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::InvalidArgument("loss weights are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub data: f64,
    pub pde: f64,
    pub gp: f64,
}

/// Everything the composite loss depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub emb: Embedding,
    pub psi: KernelHyper,
    pub phi: Vec<f64>,
}

/// Composite loss evaluated directly from its definition: GP posterior mean
/// at the state points, finite-difference operator residual of that mean at
/// the collocation points, and the joint NLML.
pub fn composite_loss(
    state: &ModelState,
    obs: &ObservationSet,
    col: &[Vec<f64>],
    w: &LossWeights,
    problem: &ProblemSpec,
) -> Result<LossRecord> {
    let ModelState { emb, psi, phi } = state;
    let (mu_u, _) = gpr_predict(&obs.s_u, &obs.u, emb, psi, obs.tau_u2, &obs.s_u)?;
    let data = mse(&mu_u, &obs.u);

    let op = &problem.operator;
    let kuu = gram((&obs.s_u, false), (&obs.s_u, false), emb, psi, phi, op)?;
    let alpha = chol_jitter(&kuu, obs.tau_u2)?.solve(&Mat::from_column_slice(obs.n_u(), 1, &obs.u));
    let mean = |s: &[f64]| {
        obs.s_u
            .iter()
            .zip(alpha.iter())
            .map(|(si, a)| deep_kernel(s, si, emb, psi).unwrap_or(f64::NAN) * a)
            .sum::<f64>()
    };
    let mut resid = Vec::with_capacity(col.len());
    let mut target = Vec::with_capacity(col.len());
    for s in col {
        resid.push(apply_operator(op, mean, s, phi, Some(&problem.domain))?);
        target.push(problem.source_at(s));
    }
    let pde = mse(&resid, &target);
    let gp = crate::gp::joint_nlml(obs, emb, psi, phi, op)?;
    Ok(LossRecord {
        total: w.w_data * data + w.w_pde * pde + w.w_gp * gp,
        data,
        pde,
        gp,
    })
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Box-constrained `φ` through a logistic map.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl LogitBox {
    pub fn forward(&self, eta: &[f64]) -> Vec<f64> {
        eta.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(e, (a, b))| (a + (b - a) * sigmoid(*e)).clamp(*a, *b))
            .collect()
    }

    pub fn inverse(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(p, (a, b))| {
                let u = (p - a) / (b - a);
                (u / (1.0 - u)).ln()
            })
            .collect()
    }
}

/// Tape nodes of one loss evaluation.
struct LossGraph {
    tape: Tape,
    weights: Vec<(Var, Var)>,
    log_sf2: Var,
    log_ls: Var,
    eta: Var,
    total: Var,
    parts: [Var; 3],
}

fn build_loss_graph(
    emb: &Embedding,
    psi: &KernelHyper,
    eta: &[f64],
    bounds: &LogitBox,
    obs: &ObservationSet,
    col: &[Vec<f64>],
    col_source: &Mat,
    w: &LossWeights,
    problem: &ProblemSpec,
) -> Result<LossGraph> {
    let op = &problem.operator;
    let (nu, nf) = (obs.n_u(), obs.n_f());
    let mut t = Tape::new();
    let weights = emb.tape_params(&mut t);
    let log_sf2 = t.param(Mat::from_element(1, 1, psi.log_sf2));
    let log_ls = t.param(Mat::from_row_slice(1, psi.dim(), &psi.log_ls));
    let eta_v = t.param(Mat::from_column_slice(eta.len(), 1, eta));
    let sig = t.sigmoid(eta_v);
    let width = t.constant(Mat::from_iterator(
        eta.len(),
        1,
        bounds.lo.iter().zip(&bounds.hi).map(|(a, b)| b - a),
    ));
    let lo = t.constant(Mat::from_column_slice(eta.len(), 1, &bounds.lo));
    let scaled = t.mul(sig, width);
    let phi = t.add(scaled, lo);

    let zu = emb.tape_jets(&mut t, &weights, &obs.s_u, &JetLayout::values_only())?.z;
    let p = t.shape(zu).1;
    let ju = t.constant(plain_jets(nu, p));
    let kuu = tape_gram(&mut t, (zu, ju), None, log_sf2, log_ls);
    let noise_u = t.constant(Mat::from_diagonal_element(nu, nu, obs.tau_u2));
    let kuu_noisy = t.add(kuu, noise_u);
    let l = t.cholesky(kuu_noisy)?;
    let u = t.constant(Mat::from_column_slice(nu, 1, &obs.u));
    let alpha = t.chol_solve(l, u);

    let mu = t.matmul(kuu, alpha);
    let du = t.sub(mu, u);
    let du2 = t.square(du);
    let data = t.mean(du2);

    let (zc, jc) = tape_operator_jets(&mut t, emb, &weights, col, op, phi)?;
    let kcu = tape_gram(&mut t, (zc, jc), Some((zu, ju)), log_sf2, log_ls);
    let amu = t.matmul(kcu, alpha);
    let f_col = t.constant(col_source.clone());
    let r = t.sub(amu, f_col);
    let r2 = t.square(r);
    let pde = t.mean(r2);

    let k = if nf > 0 {
        let (zf, jf) = tape_operator_jets(&mut t, emb, &weights, &obs.s_f, op, phi)?;
        let kuf = tape_gram(&mut t, (zu, ju), Some((zf, jf)), log_sf2, log_ls);
        let kff = tape_gram(&mut t, (zf, jf), None, log_sf2, log_ls);
        let kfu = t.transpose(kuf);
        let top = t.hstack(&[kuu, kuf]);
        let bottom = t.hstack(&[kfu, kff]);
        t.vstack(&[top, bottom])
    } else {
        kuu
    };
    let noise = t.constant(Mat::from_diagonal(&nalgebra::DVector::from_vec(obs.noise_diag())));
    let k = t.add(k, noise);
    let d = t.constant(obs.d_joint());
    let gp = t.gaussian_nll(k, d)?;

    let a = t.scale(data, w.w_data);
    let b = t.scale(pde, w.w_pde);
    let c = t.scale(gp, w.w_gp);
    let ab = t.add(a, b);
    let total = t.add(ab, c);
    Ok(LossGraph {
        tape: t,
        weights,
        log_sf2,
        log_ls,
        eta: eta_v,
        total,
        parts: [data, pde, gp],
    })
}

/// Layout of the flat optimisation vector `[θ, log σ², log ℓ, logit φ]`.
#[derive(Clone, Debug)]
pub struct FlatLayout {
    pub arch: Option<Architecture>,
    pub n_theta: usize,
    pub n_psi: usize,
    pub n_phi: usize,
}

impl FlatLayout {
    pub fn len(&self) -> usize {
        self.n_theta + self.n_psi + self.n_phi
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss as a function of the flat vector, with its tape gradient.
pub struct CompositeObjective<'a> {
    pub emb: Embedding,
    pub bounds: LogitBox,
    pub obs: &'a ObservationSet,
    pub col: Vec<Vec<f64>>,
    col_source: Mat,
    pub weights: LossWeights,
    pub problem: &'a ProblemSpec,
    pub layout: FlatLayout,
}

impl<'a> CompositeObjective<'a> {
    pub fn new(
        emb: Embedding,
        obs: &'a ObservationSet,
        col: Vec<Vec<f64>>,
        weights: LossWeights,
        problem: &'a ProblemSpec,
    ) -> Self {
        let arch = match &emb {
            Embedding::Network { params, .. } => Some(params.arch().clone()),
            Embedding::Identity(_) => None,
        };
        let n_theta = arch.as_ref().map_or(0, |a| a.n_params());
        let n_psi = 1 + emb.output_dim();
        let col_source = Mat::from_iterator(col.len(), 1, col.iter().map(|s| problem.source_at(s)));
        Self {
            bounds: LogitBox {
                lo: problem.prior_lo.clone(),
                hi: problem.prior_hi.clone(),
            },
            layout: FlatLayout {
                arch,
                n_theta,
                n_psi,
                n_phi: problem.n_phi(),
            },
            emb,
            obs,
            col,
            col_source,
            weights,
            problem,
        }
    }

    pub fn flatten(&self, state: &ModelState) -> Vec<f64> {
        let mut x = match &state.emb {
            Embedding::Network { params, .. } => params.flatten(),
            Embedding::Identity(_) => vec![],
        };
        x.extend(state.psi.to_vec());
        x.extend(self.bounds.inverse(&state.phi));
        x
    }

    pub fn unflatten(&self, x: &[f64]) -> Result<ModelState> {
        if x.len() != self.layout.len() {
            return Err(Error::DimensionMismatch {
                what: "flat parameter vector",
                expected: self.layout.len(),
                got: x.len(),
            });
        }
        let (theta, rest) = x.split_at(self.layout.n_theta);
        let (psi, eta) = rest.split_at(self.layout.n_psi);
        let emb = match (&self.emb, &self.layout.arch) {
            (Embedding::Network { scaling, .. }, Some(arch)) => Embedding::Network {
                params: NetworkParams::unflatten(arch, theta)?,
                scaling: scaling.clone(),
            },
            _ => self.emb.clone(),
        };
        Ok(ModelState {
            emb,
            psi: KernelHyper::from_slice(psi),
            phi: self.bounds.forward(eta),
        })
    }

    /// Loss components and the gradient of the total in flat order.
    pub fn value_and_grad(&self, x: &[f64]) -> Result<(LossRecord, Vec<f64>)> {
        let state = self.unflatten(x)?;
        let eta = &x[self.layout.n_theta + self.layout.n_psi..];
        let g = build_loss_graph(
            &state.emb,
            &state.psi,
            eta,
            &self.bounds,
            self.obs,
            &self.col,
            &self.col_source,
            &self.weights,
            self.problem,
        )?;
        let rec = LossRecord {
            total: g.tape.scalar_value(g.total),
            data: g.tape.scalar_value(g.parts[0]),
            pde: g.tape.scalar_value(g.parts[1]),
            gp: g.tape.scalar_value(g.parts[2]),
        };
        let grads = g.tape.gradient(g.total)?;
        let mut out = Vec::with_capacity(x.len());
        for &(w, b) in &g.weights {
            let gw = grads.wrt(w);
            for i in 0..gw.nrows() {
                out.extend(gw.row(i).iter());
            }
            out.extend(grads.wrt(b).iter());
        }
        out.extend(grads.wrt(g.log_sf2).iter());
        out.extend(grads.wrt(g.log_ls).iter());
        out.extend(grads.wrt(g.eta).iter());
        Ok((rec, out))
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(x)?.0.total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, n: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            x[i] -= c.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_col: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub n_iter: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Output width of the feature network; 2 for one spatial dimension and
    /// 4 otherwise when unset.
    pub feature_dim: Option<usize>,
    /// Defaults to the midpoint of the prior box.
    pub phi_init: Option<Vec<f64>>,
    /// Defaults to unit signal variance and lengthscales.
    pub psi_init: Option<KernelHyper>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_col: 100,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            n_iter: 2000,
            seed: 0,
            hidden: vec![32, 32],
            feature_dim: None,
            phi_init: None,
            psi_init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub params: NetworkParams,
    pub scaling: InputScaling,
    pub psi: KernelHyper,
    pub phi: Vec<f64>,
    pub trace: Vec<LossRecord>,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    network: serde_json::Value,
    scaling: InputScaling,
    psi: KernelHyper,
    phi: Vec<f64>,
    iterations: usize,
    seed: u64,
    trace: Vec<LossRecord>,
}

impl PretrainReport {
    pub fn embedding(&self) -> Embedding {
        Embedding::Network {
            params: self.params.clone(),
            scaling: self.scaling.clone(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ReportFile {
            network: self.params.to_json(),
            scaling: self.scaling.clone(),
            psi: self.psi.clone(),
            phi: self.phi.clone(),
            iterations: self.iterations,
            seed: self.seed,
            trace: self.trace.clone(),
        })
        .expect("plain data serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let f: ReportFile = serde_json::from_value(value.clone())?;
        Ok(Self {
            params: NetworkParams::from_json(&f.network)?,
            scaling: f.scaling,
            psi: f.psi,
            phi: f.phi,
            trace: f.trace,
            iterations: f.iterations,
            seed: f.seed,
        })
    }
}

/// Feature network for a problem: `[d+1, hidden.., p]` on inputs mapped to
/// the unit box.
pub fn initial_embedding(problem: &ProblemSpec, cfg: &PretrainConfig) -> Result<Embedding> {
    let input = problem.domain.dim();
    let p = cfg.feature_dim.unwrap_or(if problem.dx == 1 { 2 } else { 4 });
    let arch = Architecture::mlp(input, &cfg.hidden, p)?;
    Ok(Embedding::Network {
        params: init(&arch, cfg.seed),
        scaling: InputScaling::to_unit_box(&problem.domain.lo, &problem.domain.hi),
    })
}

pub fn initial_state(problem: &ProblemSpec, cfg: &PretrainConfig) -> Result<ModelState> {
    let emb = initial_embedding(problem, cfg)?;
    let psi = cfg.psi_init.clone().unwrap_or_else(|| KernelHyper::unit(emb.output_dim()));
    let phi = match &cfg.phi_init {
        Some(p) => p.clone(),
        None => problem
            .prior_lo
            .iter()
            .zip(&problem.prior_hi)
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    };
    if phi.len() != problem.n_phi() {
        return Err(Error::DimensionMismatch {
            what: "initial phi",
            expected: problem.n_phi(),
            got: phi.len(),
        });
    }
    for (k, v) in phi.iter().enumerate() {
        if !(*v > problem.prior_lo[k] && *v < problem.prior_hi[k]) {
            return Err(Error::InvalidArgument(format!(
                "initial phi[{k}] = {v} is not strictly inside the prior box"
            )));
        }
    }
    Ok(ModelState { emb, psi, phi })
}

/// Adam on the composite loss over `(θ, ψ, logit φ)`.
pub fn run_pretraining(problem: &ProblemSpec, obs: &ObservationSet, cfg: &PretrainConfig) -> Result<PretrainReport> {
    cfg.weights.validate()?;
    if cfg.n_col == 0 {
        return Err(Error::InvalidArgument("N_col must be at least 1".into()));
    }
    let state = initial_state(problem, cfg)?;
    let col = sample_collocation(&problem.domain, cfg.n_col, cfg.seed.wrapping_add(1));
    let objective = CompositeObjective::new(state.emb.clone(), obs, col, cfg.weights, problem);
    let mut x = objective.flatten(&state);
    let mut adam = Adam::new(cfg.adam, x.len());
    let mut trace = Vec::with_capacity(cfg.n_iter);
    for it in 0..cfg.n_iter {
        let (rec, g) = match objective.value_and_grad(&x) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) | Err(Error::NonFiniteEvaluation(_)) => {
                return Err(Error::Diverged {
                    iteration: it,
                    trace: trace.iter().map(|r: &LossRecord| r.total).collect(),
                })
            }
            Err(e) => return Err(e),
        };
        if !rec.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                trace: trace.iter().map(|r| r.total).collect(),
            });
        }
        if it % 100 == 0 {
            log::debug!(
                "pretrain {it}: total {:.6e} data {:.3e} pde {:.3e} gp {:.3e}",
                rec.total,
                rec.data,
                rec.pde,
                rec.gp
            );
        }
        trace.push(rec);
        adam.step(&mut x, &g);
    }
    let fin = objective.unflatten(&x)?;
    let Embedding::Network { params, scaling } = fin.emb else {
        unreachable!("pretraining always uses a feature network")
    };
    Ok(PretrainReport {
        params,
        scaling,
        psi: fin.psi,
        phi: fin.phi,
        trace,
        iterations: cfg.n_iter,
        seed: cfg.seed,
    })
}
