use serde::{Deserialize, Serialize};

/// Sample autocorrelation at lags `0..=max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        let mut out = vec![0.0; max_lag.min(n.saturating_sub(1)) + 1];
        out[0] = 1.0;
        return out;
    }
    (0..=max_lag.min(n - 1))
        .map(|k| {
            let c: f64 = (0..n - k).map(|i| (x[i] - mean) * (x[i + k] - mean)).sum();
            c / n as f64 / c0
        })
        .collect()
}

/// Effective sample size with Geyer's initial positive sequence.
pub fn ess(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let rho = autocorrelation(x, n - 1);
    if rho[1..].iter().all(|r| *r == 0.0) && rho[0] == 1.0 {
        let mean = x.iter().sum::<f64>() / n as f64;
        if x.iter().all(|v| *v == mean) {
            return n as f64;
        }
    }
    let mut sum = 0.0;
    let mut k = 0;
    while k + 1 < rho.len() {
        let pair = rho[k] + rho[k + 1];
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        k += 2;
    }
    let tau = 2.0 * sum - 1.0;
    n as f64 / tau.max(1.0 / n as f64)
}

/// Split-`R̂` over chains of equal length.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let half = chains.iter().map(|c| c.len() / 2).min().unwrap_or(0);
    if half < 2 {
        return f64::NAN;
    }
    let parts: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[c.len() - half..]])
        .collect();
    let m = parts.len() as f64;
    let n = half as f64;
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let w = parts
        .iter()
        .zip(&means)
        .map(|(p, mu)| p.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub names: Vec<String>,
    pub accept_rate: f64,
    pub mean_accept_prob: f64,
    pub warmup_accept_rate: f64,
    pub step_size: f64,
    pub ess: Vec<f64>,
    /// Present when several chains were run.
    pub rhat: Option<Vec<f64>>,
    pub n_samples: usize,
    pub seed: u64,
}

impl ChainDiagnostics {
    pub fn from_chains(chains: &[super::SampleChain]) -> Self {
        let first = &chains[0];
        let dim = first.names.len();
        let ess = (0..dim).map(|j| chains.iter().map(|c| ess(&c.column(j))).sum()).collect();
        let rhat = (chains.len() > 1).then(|| {
            (0..dim)
                .map(|j| split_rhat(&chains.iter().map(|c| c.column(j)).collect::<Vec<_>>()))
                .collect()
        });
        let k = chains.len() as f64;
        Self {
            names: first.names.clone(),
            accept_rate: chains.iter().map(|c| c.accept_rate).sum::<f64>() / k,
            mean_accept_prob: chains.iter().map(|c| c.mean_accept_prob).sum::<f64>() / k,
            warmup_accept_rate: chains.iter().map(|c| c.warmup_accept_rate).sum::<f64>() / k,
            step_size: first.step_size,
            ess,
            rhat,
            n_samples: chains.iter().map(|c| c.draws.len()).sum(),
            seed: first.seed,
        }
    }
}
