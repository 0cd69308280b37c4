//! Linear operators, manufactured-solution problems and exact observations.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{fd_derivative, Accuracy, Stencil};
use crate::error::{Error, Result};
use crate::gp::ObservationSet;

pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A spatially varying scalar.
#[derive(Clone)]
pub enum CoefFn {
    Zero,
    Const(f64),
    Func(PointFn),
}

impl CoefFn {
    pub fn func(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        CoefFn::Func(Arc::new(f))
    }

    pub fn eval(&self, s: &[f64]) -> f64 {
        match self {
            CoefFn::Zero => 0.0,
            CoefFn::Const(c) => *c,
            CoefFn::Func(f) => f(s),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, CoefFn::Zero)
    }
}

impl fmt::Debug for CoefFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoefFn::Zero => write!(f, "Zero"),
            CoefFn::Const(c) => write!(f, "Const({c})"),
            CoefFn::Func(_) => write!(f, "Func(..)"),
        }
    }
}

/// Coefficient `a(s, φ) = offset(s) + Σ_k φ_k slope_k(s)`.
#[derive(Clone, Debug)]
pub struct AffineCoef {
    pub offset: CoefFn,
    pub slopes: Vec<CoefFn>,
}

impl AffineCoef {
    pub fn constant(c: f64, n_phi: usize) -> Self {
        Self {
            offset: CoefFn::Const(c),
            slopes: vec![CoefFn::Zero; n_phi],
        }
    }

    /// `scale · φ_k`.
    pub fn param(k: usize, scale: f64, n_phi: usize) -> Self {
        let mut slopes = vec![CoefFn::Zero; n_phi];
        slopes[k] = CoefFn::Const(scale);
        Self {
            offset: CoefFn::Zero,
            slopes,
        }
    }

    pub fn eval(&self, s: &[f64], phi: &[f64]) -> f64 {
        self.offset.eval(s)
            + self
                .slopes
                .iter()
                .zip(phi)
                .map(|(c, p)| if c.is_zero() { 0.0 } else { p * c.eval(s) })
                .sum::<f64>()
    }

    /// Component `m`: 0 is the offset, `k + 1` the slope on `φ_k`.
    pub fn component(&self, m: usize) -> &CoefFn {
        if m == 0 {
            &self.offset
        } else {
            &self.slopes[m - 1]
        }
    }
}

/// Which partial derivative a term applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partial {
    Value,
    First(usize),
    Second(usize, usize),
}

impl Partial {
    /// Per-coordinate derivative orders over `dim` coordinates.
    pub fn orders(&self, dim: usize) -> Vec<u8> {
        let mut o = vec![0u8; dim];
        match *self {
            Partial::Value => {}
            Partial::First(j) => o[j] += 1,
            Partial::Second(j, k) => {
                o[j] += 1;
                o[k] += 1;
            }
        }
        o
    }
}

#[derive(Clone, Debug)]
pub struct Term {
    pub coef: AffineCoef,
    pub partial: Partial,
}

/// `𝒜[u; φ](s) = Σ a_i(s, φ) ∂^{α_i} u(s)` over points `s = (x_1..x_d, t)`.
#[derive(Clone, Debug)]
pub struct LinearOperatorSpec {
    terms: Vec<Term>,
    dx: usize,
    n_phi: usize,
    /// Extent of each coordinate, used to size finite-difference steps.
    ranges: Vec<f64>,
}

impl LinearOperatorSpec {
    pub fn new(terms: Vec<Term>, dx: usize, n_phi: usize, ranges: Vec<f64>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("operator needs at least one term".into()));
        }
        if ranges.len() != dx + 1 {
            return Err(Error::DimensionMismatch {
                what: "operator coordinate ranges",
                expected: dx + 1,
                got: ranges.len(),
            });
        }
        for term in &terms {
            if term.coef.slopes.len() != n_phi {
                return Err(Error::DimensionMismatch {
                    what: "coefficient slopes",
                    expected: n_phi,
                    got: term.coef.slopes.len(),
                });
            }
            let o = match term.partial {
                Partial::Second(j, k) if j.max(k) > dx => None,
                Partial::First(j) if j > dx => None,
                p => Some(p.orders(dx + 1)),
            };
            let Some(o) = o else {
                return Err(Error::InvalidArgument("derivative index out of range".into()));
            };
            if o[dx] > 1 {
                return Err(Error::UnsupportedOrder("temporal order above 1".into()));
            }
            if o[..dx].iter().map(|&x| x as u32).sum::<u32>() > 2 {
                return Err(Error::UnsupportedOrder("spatial order above 2".into()));
            }
        }
        Ok(Self {
            terms,
            dx,
            n_phi,
            ranges,
        })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn dx(&self) -> usize {
        self.dx
    }

    /// Number of point coordinates (`d_x + 1`).
    pub fn dim(&self) -> usize {
        self.dx + 1
    }

    pub fn n_phi(&self) -> usize {
        self.n_phi
    }

    pub fn ranges(&self) -> &[f64] {
        &self.ranges
    }

    /// Zero-coefficient copy, for tests of degenerate cross-covariances.
    pub fn zeroed(&self) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| Term {
                coef: AffineCoef {
                    offset: CoefFn::Zero,
                    slopes: vec![CoefFn::Zero; self.n_phi],
                },
                partial: t.partial,
            })
            .collect();
        Self {
            terms,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    /// Lower spatial bounds followed by the initial time.
    pub lo: Vec<f64>,
    /// Upper spatial bounds followed by the horizon `T`.
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn ranges(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Strictly interior in space, `t ∈ (t0, T]`.
    pub fn contains(&self, s: &[f64]) -> bool {
        let n = self.dim();
        s.len() == n
            && (0..n - 1).all(|i| s[i] > self.lo[i] && s[i] < self.hi[i])
            && s[n - 1] > self.lo[n - 1]
            && s[n - 1] <= self.hi[n - 1]
    }

    /// Uniform draws over the open box × `(t0, T]`, avoiding a tiny ball
    /// around the spatial origin.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut s = Vec::with_capacity(dim);
            for i in 0..dim - 1 {
                s.push(rng.gen_range(self.lo[i]..self.hi[i]));
            }
            // (t0, T]
            let t = self.hi[dim - 1] - rng.gen_range(0.0..(self.hi[dim - 1] - self.lo[dim - 1]));
            s.push(t);
            let r2: f64 = s[..dim - 1].iter().map(|x| x * x).sum();
            if r2 < 1e-16 || !self.contains(&s) {
                continue;
            }
            out.push(s);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemName {
    Heat1d,
    Heat50d,
    Adr50d,
}

impl ProblemName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "heat1d" => Ok(Self::Heat1d),
            "heat50d" => Ok(Self::Heat50d),
            "adr50d" => Ok(Self::Adr50d),
            other => Err(Error::UnknownProblem(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Heat1d => "heat1d",
            Self::Heat50d => "heat50d",
            Self::Adr50d => "adr50d",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemOverrides {
    /// Spatial dimension (multi-dimensional problems only).
    pub dim: Option<usize>,
    pub phi_true: Option<Vec<f64>>,
    pub prior_lo: Option<Vec<f64>>,
    pub prior_hi: Option<Vec<f64>>,
}

#[derive(Clone)]
pub struct ProblemSpec {
    pub name: ProblemName,
    pub dx: usize,
    pub operator: LinearOperatorSpec,
    /// Manufactured source, built at the true parameters.
    pub source: PointFn,
    pub solution: PointFn,
    pub domain: Domain,
    pub phi_true: Vec<f64>,
    pub prior_lo: Vec<f64>,
    pub prior_hi: Vec<f64>,
    pub param_names: Vec<String>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dx", &self.dx)
            .field("phi_true", &self.phi_true)
            .field("prior_lo", &self.prior_lo)
            .field("prior_hi", &self.prior_hi)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn n_phi(&self) -> usize {
        self.phi_true.len()
    }

    pub fn source_at(&self, s: &[f64]) -> f64 {
        (self.source)(s)
    }

    pub fn solution_at(&self, s: &[f64]) -> f64 {
        (self.solution)(s)
    }
}

fn sum(x: &[f64]) -> f64 {
    x.iter().sum()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn heat1d() -> (LinearOperatorSpec, Domain, Vec<f64>, Vec<f64>, Vec<f64>, Vec<String>) {
    let terms = vec![
        Term {
            coef: AffineCoef::constant(1.0, 1),
            partial: Partial::First(1),
        },
        Term {
            coef: AffineCoef::param(0, -1.0, 1),
            partial: Partial::Second(0, 0),
        },
    ];
    let op = LinearOperatorSpec::new(terms, 1, 1, vec![1.0, 1.0]).expect("valid operator");
    let domain = Domain {
        lo: vec![0.0, 0.0],
        hi: vec![1.0, 1.0],
    };
    (op, domain, vec![1.0], vec![0.0], vec![2.0], vec!["alpha".into()])
}

/// Diffusivity `κ(x; α) = 1 + Σ_k α_k sin(kπ‖x‖/√d)`.
pub fn heat_diffusivity(x: &[f64], alpha: &[f64]) -> f64 {
    let d = x.len() as f64;
    let r = norm(x);
    1.0 + alpha
        .iter()
        .enumerate()
        .map(|(k, a)| a * ((k + 1) as f64 * PI * r / d.sqrt()).sin())
        .sum::<f64>()
}

fn heat_d(d: usize) -> LinearOperatorSpec {
    let sqrt_d = (d as f64).sqrt();
    let mut terms = vec![Term {
        coef: AffineCoef::constant(1.0, 3),
        partial: Partial::First(d),
    }];
    for j in 0..d {
        let slopes = (1..=3)
            .map(|k| {
                CoefFn::func(move |s: &[f64]| {
                    -((k as f64) * PI * norm(&s[..d]) / sqrt_d).sin()
                })
            })
            .collect();
        terms.push(Term {
            coef: AffineCoef {
                offset: CoefFn::Const(-1.0),
                slopes,
            },
            partial: Partial::Second(j, j),
        });
        // -∂_jκ ∂_j
        let slopes = (1..=3)
            .map(|k| {
                CoefFn::func(move |s: &[f64]| {
                    let x = &s[..d];
                    let r = norm(x);
                    let w = k as f64 * PI / sqrt_d;
                    -w * (w * r).cos() * x[j] / r
                })
            })
            .collect();
        terms.push(Term {
            coef: AffineCoef {
                offset: CoefFn::Zero,
                slopes,
            },
            partial: Partial::First(j),
        });
    }
    let mut ranges = vec![1.0; d];
    ranges.push(1.0);
    LinearOperatorSpec::new(terms, d, 3, ranges).expect("valid operator")
}

fn adr_d(d: usize) -> LinearOperatorSpec {
    let mut terms = vec![
        Term {
            coef: AffineCoef::constant(1.0, 3),
            partial: Partial::First(d),
        },
        Term {
            coef: AffineCoef::param(2, 1.0, 3),
            partial: Partial::Value,
        },
    ];
    for j in 0..d {
        terms.push(Term {
            coef: AffineCoef::param(0, -1.0, 3),
            partial: Partial::Second(j, j),
        });
        terms.push(Term {
            coef: AffineCoef::param(1, 1.0, 3),
            partial: Partial::First(j),
        });
    }
    let mut ranges = vec![4.0; d];
    ranges.push(1.0);
    LinearOperatorSpec::new(terms, d, 3, ranges).expect("valid operator")
}

/// Builds one of the three benchmark problems.
pub fn make_problem(name: &str, overrides: &ProblemOverrides) -> Result<ProblemSpec> {
    let name = ProblemName::parse(name)?;
    let mut spec = match name {
        ProblemName::Heat1d => {
            if overrides.dim.is_some_and(|d| d != 1) {
                return Err(Error::InvalidArgument(
                    "heat1d has a fixed spatial dimension of 1".into(),
                ));
            }
            let (operator, domain, phi_true, lo, hi, names) = heat1d();
            ProblemSpec {
                name,
                dx: 1,
                operator,
                source: Arc::new(|_| 0.0),
                solution: Arc::new(|s: &[f64]| (-s[1]).exp() * (PI * s[0]).sin()),
                domain,
                phi_true,
                prior_lo: lo,
                prior_hi: hi,
                param_names: names,
            }
        }
        ProblemName::Heat50d => {
            let d = overrides.dim.unwrap_or(50);
            ProblemSpec {
                name,
                dx: d,
                operator: heat_d(d),
                source: Arc::new(|_| 0.0),
                solution: Arc::new(move |s: &[f64]| {
                    (-s[d]).exp() * (sum(&s[..d]) / d as f64).cos()
                }),
                domain: Domain {
                    lo: vec![0.0; d + 1],
                    hi: vec![1.0; d + 1],
                },
                phi_true: vec![0.3, 0.1, 0.05],
                prior_lo: vec![-0.3; 3],
                prior_hi: vec![0.3; 3],
                param_names: vec!["alpha1".into(), "alpha2".into(), "alpha3".into()],
            }
        }
        ProblemName::Adr50d => {
            let d = overrides.dim.unwrap_or(50);
            let mut lo = vec![-2.0; d];
            lo.push(0.0);
            let mut hi = vec![2.0; d];
            hi.push(1.0);
            ProblemSpec {
                name,
                dx: d,
                operator: adr_d(d),
                source: Arc::new(|_| 0.0),
                solution: Arc::new(move |s: &[f64]| {
                    (-s[d]).exp() * (sum(&s[..d]) / d as f64).cos()
                }),
                domain: Domain { lo, hi },
                phi_true: vec![0.8, 0.5, 0.2],
                prior_lo: vec![0.0; 3],
                prior_hi: vec![2.0, 1.0, 1.0],
                param_names: vec!["alpha".into(), "beta".into(), "gamma".into()],
            }
        }
    };
    if overrides.dim == Some(0) {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let n = spec.n_phi();
    for (what, v) in [
        ("phi_true", &overrides.phi_true),
        ("prior_lo", &overrides.prior_lo),
        ("prior_hi", &overrides.prior_hi),
    ] {
        if let Some(v) = v {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
        }
    }
    if let Some(v) = &overrides.phi_true {
        spec.phi_true = v.clone();
    }
    if let Some(v) = &overrides.prior_lo {
        spec.prior_lo = v.clone();
    }
    if let Some(v) = &overrides.prior_hi {
        spec.prior_hi = v.clone();
    }
    for k in 0..n {
        let (lo, hi, x) = (spec.prior_lo[k], spec.prior_hi[k], spec.phi_true[k]);
        if !(lo < hi) || !(lo..=hi).contains(&x) {
            return Err(Error::InvalidArgument(format!(
                "true value {x} of `{}` outside prior [{lo}, {hi}]",
                spec.param_names[k]
            )));
        }
    }
    spec.source = manufactured_source(&spec);
    Ok(spec)
}

fn manufactured_source(spec: &ProblemSpec) -> PointFn {
    let d = spec.dx;
    let phi = spec.phi_true.clone();
    match spec.name {
        ProblemName::Heat1d => {
            let a = phi[0];
            Arc::new(move |s: &[f64]| (-s[1]).exp() * (PI * s[0]).sin() * (a * PI * PI - 1.0))
        }
        ProblemName::Heat50d => Arc::new(move |s: &[f64]| {
            let x = &s[..d];
            let df = d as f64;
            let w = sum(x) / df;
            let r = norm(x);
            let kappa = heat_diffusivity(x, &phi);
            let grad_sum: f64 = phi
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    let c = (k + 1) as f64 * PI / df.sqrt();
                    a * c * (c * r).cos()
                })
                .sum();
            (-s[d]).exp()
                * ((kappa / df - 1.0) * w.cos() + grad_sum / df * (sum(x) / r) * w.sin())
        }),
        ProblemName::Adr50d => {
            let (a, b, g) = (phi[0], phi[1], phi[2]);
            Arc::new(move |s: &[f64]| {
                let df = d as f64;
                let w = sum(&s[..d]) / df;
                (-s[d]).exp() * ((-1.0 + a / df + g) * w.cos() - b * w.sin())
            })
        }
    }
}

/// Finite-difference step per coordinate at `s`: `1e-3 × range`, shrunk so
/// the footprint stays inside `domain` (never below a tenth of the default).
pub fn local_steps(domain: Option<&Domain>, ranges: &[f64], s: &[f64], reach: f64) -> Vec<f64> {
    ranges
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let h = 1e-3 * r;
            match domain {
                Some(dom) => {
                    let room = (s[i] - dom.lo[i]).min(dom.hi[i] - s[i]) / reach;
                    h.min(room).max(0.1 * h)
                }
                None => h,
            }
        })
        .collect()
}

/// `Σ a_i(s, φ) ∂^{α_i} field(s)` with second-order central differences.
pub fn apply_operator<F>(
    op: &LinearOperatorSpec,
    field: F,
    s: &[f64],
    phi: &[f64],
    domain: Option<&Domain>,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let steps = local_steps(domain, op.ranges(), s, 1.0);
    let mut acc = 0.0;
    for term in op.terms() {
        let c = term.coef.eval(s, phi);
        if c == 0.0 {
            continue;
        }
        let stencil = Stencil::new(term.partial.orders(op.dim()), steps.clone(), Accuracy::Second)?;
        acc += c * fd_derivative(&field, s, &stencil)?;
    }
    if !acc.is_finite() {
        return Err(Error::NonFiniteEvaluation("operator application".into()));
    }
    Ok(acc)
}

/// Exact observations of the manufactured solution and source.
pub fn generate_observations(
    problem: &ProblemSpec,
    n_u: usize,
    n_f: usize,
    seed: u64,
) -> Result<ObservationSet> {
    if n_u == 0 {
        return Err(Error::InvalidArgument("N_u must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_u = problem.domain.sample(&mut rng, n_u);
    let s_f = problem.domain.sample(&mut rng, n_f);
    let u = s_u.iter().map(|s| problem.solution_at(s)).collect();
    let f = s_f.iter().map(|s| problem.source_at(s)).collect();
    ObservationSet::new(s_u, u, s_f, f, 1e-6, 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none() -> ProblemOverrides {
        ProblemOverrides::default()
    }

    #[test]
    fn heat1d_values() {
        let p = make_problem("heat1d", &none()).unwrap();
        assert!((p.source_at(&[0.5, 0.0]) - (PI * PI - 1.0)).abs() < 1e-12);
        assert!((p.source_at(&[0.5, 0.0]) - 8.869604).abs() < 1e-6);
        assert!((p.solution_at(&[0.5, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adr_source_at_origin() {
        let p = make_problem("adr50d", &none()).unwrap();
        let mut s = vec![0.0; 51];
        assert!((p.source_at(&s) + 0.784).abs() < 1e-12);
        s[50] = 0.5;
        assert!((p.source_at(&s) + 0.784 * (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn heat_diffusivity_at_origin() {
        assert_eq!(heat_diffusivity(&[0.0; 50], &[0.3, 0.1, 0.05]), 1.0);
    }

    #[test]
    fn unknown_problem() {
        assert!(matches!(
            make_problem("wave2d", &none()),
            Err(Error::UnknownProblem(_))
        ));
    }

    #[test]
    fn true_values_inside_prior() {
        for name in ["heat1d", "heat50d", "adr50d"] {
            let p = make_problem(name, &none()).unwrap();
            for k in 0..p.n_phi() {
                assert!(p.prior_lo[k] <= p.phi_true[k] && p.phi_true[k] <= p.prior_hi[k]);
            }
        }
        let bad = ProblemOverrides {
            phi_true: Some(vec![3.0]),
            ..none()
        };
        assert!(make_problem("heat1d", &bad).is_err());
    }

    #[test]
    fn zero_field_and_linearity() {
        let p = make_problem("heat1d", &none()).unwrap();
        let s = [0.4, 0.6];
        let z = apply_operator(&p.operator, |_| 0.0, &s, &[1.3], None).unwrap();
        assert_eq!(z, 0.0);

        let u = |x: &[f64]| (x[0] * 2.0).sin() * x[1].exp();
        let v = |x: &[f64]| x[0].powi(3) - x[1] * x[0];
        let (a, b) = (1.7, -0.4);
        let lhs = apply_operator(&p.operator, |x| a * u(x) + b * v(x), &s, &[1.3], None).unwrap();
        let rhs = a * apply_operator(&p.operator, u, &s, &[1.3], None).unwrap()
            + b * apply_operator(&p.operator, v, &s, &[1.3], None).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    fn max_residual(p: &ProblemSpec, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.domain
            .sample(&mut rng, n)
            .iter()
            .map(|s| {
                let a = apply_operator(&p.operator, |x| p.solution_at(x), s, &p.phi_true, Some(&p.domain))
                    .unwrap();
                (a - p.source_at(s)).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn manufactured_residuals_small() {
        let p = make_problem("heat1d", &none()).unwrap();
        assert!(max_residual(&p, 100, 1) <= 1e-5);
        for name in ["heat50d", "adr50d"] {
            for dim in [3, 10] {
                let o = ProblemOverrides {
                    dim: Some(dim),
                    ..none()
                };
                let p = make_problem(name, &o).unwrap();
                let r = max_residual(&p, 30, 2);
                assert!(r <= 1e-5, "{name} d={dim}: {r}");
            }
        }
    }

    #[test]
    fn observations_exact_and_deterministic() {
        let p = make_problem("heat1d", &none()).unwrap();
        let a = generate_observations(&p, 20, 10, 5).unwrap();
        let b = generate_observations(&p, 20, 10, 5).unwrap();
        assert_eq!(a.s_u, b.s_u);
        assert_eq!(a.f, b.f);
        for (s, u) in a.s_u.iter().zip(&a.u) {
            assert_eq!(*u, p.solution_at(s));
            assert!(p.domain.contains(s));
        }
        for s in &a.s_f {
            assert!(p.domain.contains(s) && s[1] > 0.0);
        }
    }

    #[test]
    fn operator_validation() {
        let bad = LinearOperatorSpec::new(
            vec![Term {
                coef: AffineCoef::constant(1.0, 0),
                partial: Partial::Second(1, 1),
            }],
            1,
            0,
            vec![1.0, 1.0],
        );
        assert!(matches!(bad, Err(Error::UnsupportedOrder(_))));
    }
}
