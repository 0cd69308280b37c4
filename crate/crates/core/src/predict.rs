//! Posterior summaries and model-averaged prediction of the solution field.

use serde::{Deserialize, Serialize};

use crate::diff::{symmetrize, Mat};
use crate::error::{Error, Result};
use crate::gp::chol_jitter;
use crate::hmc::{PosteriorModel, SampleChain};
use crate::kernel::{gram_from_jets, plain_jets, KernelHyper};
use crate::nn::Embedding;
use crate::pde::Domain;

/// Sample quantile by linear interpolation between order statistics,
/// `h = (n − 1) q`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// 2.5% quantiles.
    pub lower: Vec<f64>,
    /// 97.5% quantiles.
    pub upper: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl MarginalSummary {
    pub fn contains(&self, j: usize, v: f64) -> bool {
        self.lower[j] <= v && v <= self.upper[j]
    }
}

/// Means, standard deviations, 95% intervals and covariance of the chosen
/// columns of `draws`.
pub fn marginal_stats_of(names: &[String], draws: &[Vec<f64>], cols: &[usize]) -> Result<MarginalSummary> {
    let n = draws.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two draws".into()));
    }
    let k = cols.len();
    let columns: Vec<Vec<f64>> = cols.iter().map(|&j| draws.iter().map(|d| d[j]).collect()).collect();
    let mean: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let c = columns[a]
                .iter()
                .zip(&columns[b])
                .map(|(x, y)| (x - mean[a]) * (y - mean[b]))
                .sum::<f64>()
                / (n - 1) as f64;
            cov[a][b] = c;
            cov[b][a] = c;
        }
    }
    let mut lower = Vec::with_capacity(k);
    let mut upper = Vec::with_capacity(k);
    for c in &columns {
        let mut s = c.clone();
        s.sort_by(|a, b| a.total_cmp(b));
        lower.push(quantile(&s, 0.025));
        upper.push(quantile(&s, 0.975));
    }
    Ok(MarginalSummary {
        names: cols.iter().map(|&j| names[j].clone()).collect(),
        sd: (0..k).map(|a| cov[a][a].max(0.0).sqrt()).collect(),
        mean,
        lower,
        upper,
        cov,
    })
}

pub fn marginal_stats(chain: &SampleChain, cols: &[usize]) -> Result<MarginalSummary> {
    marginal_stats_of(&chain.names, &chain.draws, cols)
}

/// Statistics of the PDE parameters.
pub fn phi_summary(chain: &SampleChain) -> Result<MarginalSummary> {
    marginal_stats(chain, &(0..chain.n_phi).collect::<Vec<_>>())
}

/// Conditional mean and covariance of the field at `zt` given `[u; f]`.
pub fn conditional_prediction(
    model: &PosteriorModel,
    zt: &Mat,
    psi: &KernelHyper,
    phi: &[f64],
) -> Result<(Mat, Mat)> {
    let mut k = model.covariance(psi, phi);
    for (i, t) in model.obs.noise_diag().into_iter().enumerate() {
        k[(i, i)] += t;
    }
    let fac = chol_jitter(&k, 0.0)?;
    let kx = model.cross_covariance(zt, psi, phi);
    let alpha = fac.solve(&model.obs.d_joint());
    let mean = &kx * alpha;
    let jt = plain_jets(zt.nrows(), zt.ncols());
    let kss = gram_from_jets(zt, &jt, zt, &jt, &psi.lambda(), psi.sf2(), true);
    let mut v = kx.transpose();
    fac.l.solve_lower_triangular_mut(&mut v);
    let mut cov = kss - v.transpose() * v;
    symmetrize(&mut cov);
    Ok((mean, cov))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveField {
    pub test: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub cov: Mat,
    /// Average of the conditional covariances.
    pub within: Mat,
    /// Covariance of the conditional means across draws.
    pub between: Mat,
    pub draws_used: usize,
    /// Chain indices whose conditional prediction failed.
    pub failed: Vec<usize>,
}

impl PredictiveField {
    pub fn variance(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.cov[(i, i)]).collect()
    }

    /// Point coordinates, mean and variance per line.
    pub fn to_csv(&self, coord_names: &[String]) -> String {
        let mut out = coord_names.join(",");
        out.push_str(",mean,variance,within_variance,between_variance\n");
        for (i, s) in self.test.iter().enumerate() {
            let mut row: Vec<String> = s.iter().map(|v| v.to_string()).collect();
            row.push(self.mean[i].to_string());
            row.push(self.cov[(i, i)].to_string());
            row.push(self.within[(i, i)].to_string());
            row.push(self.between[(i, i)].to_string());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Model average over every `thinning`-th draw of the chain.
pub fn bma_predict(
    chain: &SampleChain,
    thinning: usize,
    model: &PosteriorModel,
    emb: &Embedding,
    test: &[Vec<f64>],
) -> Result<PredictiveField> {
    if thinning == 0 {
        return Err(Error::InvalidArgument("thinning stride must be positive".into()));
    }
    let k = chain.n_phi;
    let picks: Vec<usize> = (0..chain.draws.len()).step_by(thinning).collect();
    if picks.is_empty() {
        return Err(Error::InvalidArgument("no draws retained after thinning".into()));
    }
    let zt = emb.feature_matrix(test)?;
    let nt = test.len();
    let mut means = Vec::with_capacity(picks.len());
    let mut within = Mat::zeros(nt, nt);
    let mut failed = Vec::new();
    for &j in &picks {
        let d = &chain.draws[j];
        let phi = &d[..k];
        let psi = KernelHyper {
            log_sf2: d[k].ln(),
            log_ls: d[k + 1..].iter().map(|v| v.ln()).collect(),
        };
        match conditional_prediction(model, &zt, &psi, phi) {
            Ok((m, c)) => {
                means.push(m);
                within += c;
            }
            Err(e) => {
                log::warn!("draw {j} skipped in prediction: {e}");
                failed.push(j);
            }
        }
    }
    let m = means.len();
    if m == 0 {
        return Err(Error::AllDrawsFailed(picks.len()));
    }
    within /= m as f64;
    let mut mean = Mat::zeros(nt, 1);
    for mu in &means {
        mean += mu;
    }
    mean /= m as f64;
    let mut between = Mat::zeros(nt, nt);
    for mu in &means {
        let d = mu - &mean;
        between += &d * d.transpose();
    }
    between /= m as f64;
    Ok(PredictiveField {
        test: test.to_vec(),
        mean: mean.iter().copied().collect(),
        cov: &within + &between,
        within,
        between,
        draws_used: m,
        failed,
    })
}

/// Regular grid over the first spatial coordinate and time (bounds
/// included); remaining coordinates sit at the domain centre.
pub fn grid_points(domain: &Domain, n_space: usize, n_time: usize) -> Vec<Vec<f64>> {
    let dim = domain.dim();
    let center = domain.center();
    let lin = |lo: f64, hi: f64, n: usize, i: usize| {
        if n == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n_space * n_time);
    for it in 0..n_time {
        for ix in 0..n_space {
            let mut s = center.clone();
            s[0] = lin(domain.lo[0], domain.hi[0], n_space, ix);
            s[dim - 1] = lin(domain.lo[dim - 1], domain.hi[dim - 1], n_time, it);
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{gpr_predict, ObservationSet};
    use crate::nn::{init, Architecture, InputScaling};
    use crate::pde::{generate_observations, make_problem, ProblemOverrides, ProblemSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn constant_chain() {
        let draws = vec![vec![1.5]; 10];
        let s = marginal_stats_of(&names(1), &draws, &[0]).unwrap();
        assert_eq!(s.sd[0], 0.0);
        assert_eq!((s.lower[0], s.upper[0]), (1.5, 1.5));
    }

    #[test]
    fn ladder_quantiles() {
        let draws: Vec<Vec<f64>> = (1..=100).map(|v| vec![v as f64]).collect();
        let s = marginal_stats_of(&names(1), &draws, &[0]).unwrap();
        assert!((s.mean[0] - 50.5).abs() < 1e-12);
        assert!((s.lower[0] - 3.475).abs() < 1e-12);
        assert!((s.upper[0] - 97.525).abs() < 1e-12);
    }

    #[test]
    fn normal_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let s = marginal_stats_of(&names(1), &draws, &[0]).unwrap();
        assert!((s.lower[0] + 1.96).abs() < 0.1 && (s.upper[0] - 1.96).abs() < 0.1);
    }

    #[test]
    fn too_few_draws() {
        assert!(marginal_stats_of(&names(1), &[vec![1.0]], &[0]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in 0u64..500, n in 3usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draws: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen(), rng.gen()]).collect();
            let mut shuffled = draws.clone();
            shuffled.reverse();
            shuffled.rotate_left(seed as usize % n);
            let a = marginal_stats_of(&names(2), &draws, &[0, 1]).unwrap();
            let b = marginal_stats_of(&names(2), &shuffled, &[0, 1]).unwrap();
            for j in 0..2 {
                prop_assert!((a.mean[j] - b.mean[j]).abs() < 1e-12);
                prop_assert_eq!(a.lower[j], b.lower[j]);
                prop_assert_eq!(a.upper[j], b.upper[j]);
            }
            prop_assert!((a.cov[0][1] - a.cov[1][0]).abs() == 0.0);
            prop_assert!(a.cov[0][0] * a.cov[1][1] - a.cov[0][1].powi(2) >= -1e-12);
        }
    }

    fn setup(n_f: usize) -> (ProblemSpec, ObservationSet, Embedding, PosteriorModel) {
        let p = make_problem("heat1d", &ProblemOverrides::default()).unwrap();
        let obs = generate_observations(&p, 10, n_f, 3).unwrap();
        let emb = Embedding::Network {
            params: init(&Architecture::mlp(2, &[8], 2).unwrap(), 2),
            scaling: InputScaling::to_unit_box(&p.domain.lo, &p.domain.hi),
        };
        let model = PosteriorModel::new(&obs, &emb, &p).unwrap();
        (p, obs, emb, model)
    }

    fn chain_of(draws: Vec<Vec<f64>>) -> SampleChain {
        SampleChain {
            names: vec!["alpha".into(), "sigma2".into(), "ell_1".into(), "ell_2".into()],
            potentials: vec![0.0; draws.len()],
            draws,
            accept_rate: 1.0,
            mean_accept_prob: 1.0,
            warmup_accept_rate: 1.0,
            step_size: 0.1,
            seed: 0,
            n_phi: 1,
        }
    }

    #[test]
    fn state_only_single_draw_is_gpr() {
        let (p, obs, emb, _) = setup(0);
        let model = PosteriorModel::new(&obs, &emb, &p).unwrap();
        let test = grid_points(&p.domain, 4, 3);
        let chain = chain_of(vec![vec![1.0, 1.2, 0.8, 1.5]]);
        let field = bma_predict(&chain, 1, &model, &emb, &test).unwrap();
        let psi = KernelHyper { log_sf2: 1.2f64.ln(), log_ls: vec![0.8f64.ln(), 1.5f64.ln()] };
        let (m, v) = gpr_predict(&obs.s_u, &obs.u, &emb, &psi, obs.tau_u2, &test).unwrap();
        for i in 0..test.len() {
            assert!((field.mean[i] - m[i]).abs() < 1e-10);
            assert!((field.cov[(i, i)] - v[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn single_draw_is_conditional() {
        let (p, _, emb, model) = setup(6);
        let test = grid_points(&p.domain, 3, 3);
        let d = vec![0.9, 1.1, 0.7, 1.3];
        let field = bma_predict(&chain_of(vec![d.clone()]), 1, &model, &emb, &test).unwrap();
        let psi = KernelHyper { log_sf2: d[1].ln(), log_ls: vec![d[2].ln(), d[3].ln()] };
        let (m, c) = conditional_prediction(&model, &emb.feature_matrix(&test).unwrap(), &psi, &d[..1]).unwrap();
        assert_eq!(field.mean, m.iter().copied().collect::<Vec<_>>());
        assert!((field.cov - c).amax() == 0.0);
        assert!(field.between.amax() == 0.0);
    }

    #[test]
    fn total_covariance_decomposition() {
        let (p, _, emb, model) = setup(6);
        let test = grid_points(&p.domain, 3, 2);
        let draws = vec![
            vec![0.9, 1.1, 0.7, 1.3],
            vec![1.2, 0.8, 0.9, 1.0],
            vec![1.0, 1.0, 1.1, 0.6],
        ];
        let field = bma_predict(&chain_of(draws.clone()), 1, &model, &emb, &test).unwrap();
        // second pass: E[m mᵀ] − m̄ m̄ᵀ for the between part
        let zt = emb.feature_matrix(&test).unwrap();
        let mut second = Mat::zeros(test.len(), test.len());
        let mut sum_c = Mat::zeros(test.len(), test.len());
        let mut mbar = Mat::zeros(test.len(), 1);
        for d in &draws {
            let psi = KernelHyper { log_sf2: d[1].ln(), log_ls: vec![d[2].ln(), d[3].ln()] };
            let (m, c) = conditional_prediction(&model, &zt, &psi, &d[..1]).unwrap();
            second += &m * m.transpose();
            sum_c += c;
            mbar += m;
        }
        let k = draws.len() as f64;
        mbar /= k;
        let total = sum_c / k + second / k - &mbar * mbar.transpose();
        assert!((total - &field.cov).amax() < 1e-10);
        for i in 0..test.len() {
            assert!(field.cov[(i, i)] >= field.within[(i, i)] - 1e-12);
            assert!(field.cov[(i, i)] >= field.between[(i, i)] - 1e-10);
        }
        assert!((field.cov.clone() - field.cov.transpose()).amax() == 0.0);
    }

    #[test]
    fn thinning_picks_every_kth() {
        let (p, _, emb, model) = setup(4);
        let test = grid_points(&p.domain, 2, 2);
        let draws = vec![vec![1.0, 1.0, 1.0, 1.0]; 25];
        let field = bma_predict(&chain_of(draws), 10, &model, &emb, &test).unwrap();
        assert_eq!(field.draws_used, 3);
        assert!(bma_predict(&chain_of(vec![vec![1.0; 4]]), 0, &model, &emb, &test).is_err());
    }

    #[test]
    fn grid_covers_bounds() {
        let p = make_problem("heat1d", &ProblemOverrides::default()).unwrap();
        let g = grid_points(&p.domain, 21, 21);
        assert_eq!(g.len(), 441);
        assert_eq!(g[0], vec![0.0, 0.0]);
        assert_eq!(g[440], vec![1.0, 1.0]);
    }
}
