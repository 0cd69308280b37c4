//! Multilayer perceptron feature extractor with forward-mode input jets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{CustomOp, Mat, Tape, Var};
use crate::error::{Error, Result};

/// Layer widths from input to output; tanh on hidden layers, identity on
/// the output layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    widths: Vec<usize>,
}

impl Architecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidArgument(
                "architecture needs an input, at least one hidden layer and an output".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(Self { widths })
    }

    /// `[input, hidden.., output]`.
    pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut w = vec![input];
        w.extend_from_slice(hidden);
        w.push(output);
        Self::new(w)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    layers: Vec<Layer>,
}

/// Xavier-uniform weights, zero biases.
pub fn init(arch: &Architecture, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Layer {
                w: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..bound)),
                b: DVector::zeros(fan_out),
            }
        })
        .collect();
    NetworkParams {
        arch: arch.clone(),
        layers,
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    widths: Vec<usize>,
    params: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = arch
            .widths
            .windows(2)
            .map(|w| Layer {
                w: DMatrix::zeros(w[1], w[0]),
                b: DVector::zeros(w[1]),
            })
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Layer-major; weights row-major, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.n_params());
        for l in &self.layers {
            for i in 0..l.w.nrows() {
                out.extend(l.w.row(i).iter());
            }
            out.extend(l.b.iter());
        }
        out
    }

    pub fn unflatten(arch: &Architecture, theta: &[f64]) -> Result<Self> {
        if theta.len() != arch.n_params() {
            return Err(Error::DimensionMismatch {
                what: "network parameter vector",
                expected: arch.n_params(),
                got: theta.len(),
            });
        }
        let mut it = theta.iter().copied();
        let layers = arch
            .widths
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let w = DMatrix::from_row_iterator(n_out, n_in, it.by_ref().take(n_in * n_out));
                let b = DVector::from_iterator(n_out, it.by_ref().take(n_out));
                Layer { w, b }
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.arch.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.arch.input_dim(),
                got: s.len(),
            });
        }
        let mut h = DVector::from_column_slice(s);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = &l.w * h + &l.b;
            if i < last {
                h.apply(|x| *x = x.tanh());
            }
        }
        Ok(h.iter().copied().collect())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ParamsFile {
            widths: self.arch.widths.clone(),
            params: self.flatten(),
        })
        .expect("plain data serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let f: ParamsFile = serde_json::from_value(value.clone())?;
        Self::unflatten(&Architecture::new(f.widths)?, &f.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_json(&v)
    }
}

/// Per-coordinate affine map `s̃ = (s - center) * scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Maps each `[lo_i, hi_i]` onto `[-1, 1]`.
    pub fn to_unit_box(lo: &[f64], hi: &[f64]) -> Self {
        Self {
            center: lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect(),
            scale: lo.iter().zip(hi).map(|(a, b)| 2.0 / (b - a)).collect(),
        }
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(x, (c, k))| (x - c) * k)
            .collect()
    }
}

/// The map from spatio-temporal points to kernel features.
#[derive(Clone, Debug, PartialEq)]
pub enum Embedding {
    /// Raw coordinates are the features.
    Identity(usize),
    Network {
        params: NetworkParams,
        scaling: InputScaling,
    },
}

/// Which input derivatives to propagate: first derivatives along the
/// coordinates in `firsts`, second derivatives for `pairs` of indices into
/// `firsts`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct JetLayout {
    pub firsts: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
}

impl JetLayout {
    pub fn values_only() -> Self {
        Self::default()
    }

    pub fn n_blocks(&self) -> usize {
        1 + self.firsts.len() + self.pairs.len()
    }

    pub fn first_slot(&self, coord: usize) -> Option<usize> {
        self.firsts.iter().position(|&c| c == coord)
    }

    pub fn pair_slot(&self, a: usize, b: usize) -> Option<usize> {
        let (ia, ib) = (self.first_slot(a)?, self.first_slot(b)?);
        self.pairs
            .iter()
            .position(|&(x, y)| (x, y) == (ia, ib) || (x, y) == (ib, ia))
    }
}

/// Features and their input derivatives at `n` points, each block `n × p`.
#[derive(Clone, Debug)]
pub struct Jets {
    pub z: Mat,
    pub first: Vec<Mat>,
    pub second: Vec<Mat>,
}

impl Embedding {
    pub fn input_dim(&self) -> usize {
        match self {
            Embedding::Identity(d) => *d,
            Embedding::Network { params, .. } => params.arch.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Embedding::Identity(d) => *d,
            Embedding::Network { params, .. } => params.arch.output_dim(),
        }
    }

    pub fn features(&self, s: &[f64]) -> Result<Vec<f64>> {
        match self {
            Embedding::Identity(d) => {
                if s.len() != *d {
                    return Err(Error::DimensionMismatch {
                        what: "embedding input",
                        expected: *d,
                        got: s.len(),
                    });
                }
                Ok(s.to_vec())
            }
            Embedding::Network { params, scaling } => {
                if s.len() != params.arch.input_dim() {
                    return Err(Error::DimensionMismatch {
                        what: "network input",
                        expected: params.arch.input_dim(),
                        got: s.len(),
                    });
                }
                params.forward(&scaling.apply(s))
            }
        }
    }

    /// Features for many points as an `n × p` matrix.
    pub fn feature_matrix(&self, points: &[Vec<f64>]) -> Result<Mat> {
        Ok(self.jets(points, &JetLayout::values_only())?.z)
    }

    /// Forward-mode propagation of values and selected input derivatives.
    pub fn jets(&self, points: &[Vec<f64>], layout: &JetLayout) -> Result<Jets> {
        let input = self.input_jets(points, layout)?;
        match self {
            Embedding::Identity(_) => Ok(split_blocks(&input, points.len(), layout)),
            Embedding::Network { params, .. } => {
                let n = points.len();
                let mut x = input;
                let last = params.layers.len() - 1;
                for (i, l) in params.layers.iter().enumerate() {
                    let mut y = &x * l.w.transpose();
                    for j in 0..y.ncols() {
                        for r in 0..n {
                            y[(r, j)] += l.b[j];
                        }
                    }
                    x = if i < last {
                        tanh_jet_forward(&y, n, layout)
                    } else {
                        y
                    };
                }
                Ok(split_blocks(&x, n, layout))
            }
        }
    }

    /// Stacked input jets `[values; ∂_j blocks; ∂_jk blocks]` after scaling.
    fn input_jets(&self, points: &[Vec<f64>], layout: &JetLayout) -> Result<Mat> {
        let d = self.input_dim();
        let n = points.len();
        let identity = InputScaling::identity(d);
        let scaling = match self {
            Embedding::Identity(_) => &identity,
            Embedding::Network { scaling, .. } => scaling,
        };
        let mut x = Mat::zeros(n * layout.n_blocks(), d);
        for (r, p) in points.iter().enumerate() {
            if p.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "embedding input",
                    expected: d,
                    got: p.len(),
                });
            }
            for (j, v) in scaling.apply(p).into_iter().enumerate() {
                x[(r, j)] = v;
            }
        }
        for (slot, &c) in layout.firsts.iter().enumerate() {
            for r in 0..n {
                x[((1 + slot) * n + r, c)] = scaling.scale[c];
            }
        }
        Ok(x)
    }

    /// Jets as tape nodes, with the network weights supplied as `weights`
    /// and `biases` vars (`w: out × in`, `b: 1 × out`).
    pub fn tape_jets(
        &self,
        tape: &mut Tape,
        weights: &[(Var, Var)],
        points: &[Vec<f64>],
        layout: &JetLayout,
    ) -> Result<TapeJets> {
        let n = points.len();
        let x0 = self.input_jets(points, layout)?;
        let mut x = tape.constant(x0);
        if let Embedding::Network { params, .. } = self {
            let last = params.layers.len() - 1;
            for (i, &(w, b)) in weights.iter().enumerate() {
                let y = tape.linear(x, w, b, n);
                x = if i < last {
                    let value = tanh_jet_forward(tape.value(y), n, layout);
                    tape.custom(
                        &[y],
                        value,
                        TanhJet {
                            n,
                            layout: layout.clone(),
                        },
                    )
                } else {
                    y
                };
            }
        }
        let p = tape.shape(x).1;
        let z = tape.slice(x, 0, 0, n, p);
        let first = (0..layout.firsts.len())
            .map(|k| tape.slice(x, (1 + k) * n, 0, n, p))
            .collect();
        let off = 1 + layout.firsts.len();
        let second = (0..layout.pairs.len())
            .map(|k| tape.slice(x, (off + k) * n, 0, n, p))
            .collect();
        Ok(TapeJets { z, first, second })
    }

    /// Registers the network parameters as tape leaves (`b` as a row).
    pub fn tape_params(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        match self {
            Embedding::Identity(_) => vec![],
            Embedding::Network { params, .. } => params
                .layers
                .iter()
                .map(|l| {
                    let w = tape.param(l.w.clone());
                    let b = tape.param(Mat::from_row_slice(1, l.b.len(), l.b.as_slice()));
                    (w, b)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TapeJets {
    pub z: Var,
    pub first: Vec<Var>,
    pub second: Vec<Var>,
}

fn split_blocks(x: &Mat, n: usize, layout: &JetLayout) -> Jets {
    let p = x.ncols();
    let block = |k: usize| x.view((k * n, 0), (n, p)).into_owned();
    let nf = layout.firsts.len();
    Jets {
        z: block(0),
        first: (0..nf).map(|k| block(1 + k)).collect(),
        second: (0..layout.pairs.len()).map(|k| block(1 + nf + k)).collect(),
    }
}

fn tanh_jet_forward(a: &Mat, n: usize, layout: &JetLayout) -> Mat {
    let m = a.ncols();
    let nf = layout.firsts.len();
    let mut out = Mat::zeros(a.nrows(), m);
    for c in 0..m {
        for r in 0..n {
            let y = a[(r, c)].tanh();
            let d = 1.0 - y * y;
            let e = -2.0 * y * d;
            out[(r, c)] = y;
            for k in 0..nf {
                out[((1 + k) * n + r, c)] = d * a[((1 + k) * n + r, c)];
            }
            for (q, &(j, k)) in layout.pairs.iter().enumerate() {
                let row = (1 + nf + q) * n + r;
                out[(row, c)] =
                    d * a[(row, c)] + e * a[((1 + j) * n + r, c)] * a[((1 + k) * n + r, c)];
            }
        }
    }
    out
}

/// Elementwise tanh applied to stacked value / first / second derivative
/// blocks by the chain rule.
struct TanhJet {
    n: usize,
    layout: JetLayout,
}

impl CustomOp for TanhJet {
    fn name(&self) -> &'static str {
        "tanh_jet"
    }

    fn backward(&self, parents: &[&Mat], output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let a = parents[0];
        let n = self.n;
        let nf = self.layout.firsts.len();
        let mut ga = Mat::zeros(a.nrows(), a.ncols());
        for c in 0..a.ncols() {
            for r in 0..n {
                let y = output[(r, c)];
                let d = 1.0 - y * y;
                let e = -2.0 * y * d;
                let de = -2.0 * d * (1.0 - 3.0 * y * y);
                let mut g0 = grad[(r, c)] * d;
                for k in 0..nf {
                    let row = (1 + k) * n + r;
                    g0 += grad[(row, c)] * a[(row, c)] * e;
                    ga[(row, c)] += grad[(row, c)] * d;
                }
                for (q, &(j, k)) in self.layout.pairs.iter().enumerate() {
                    let row = (1 + nf + q) * n + r;
                    let gh = grad[(row, c)];
                    let aj = a[((1 + j) * n + r, c)];
                    let ak = a[((1 + k) * n + r, c)];
                    g0 += gh * (e * a[(row, c)] + de * aj * ak);
                    ga[(row, c)] += gh * d;
                    ga[((1 + j) * n + r, c)] += gh * e * ak;
                    ga[((1 + k) * n + r, c)] += gh * e * aj;
                }
                ga[(r, c)] = g0;
            }
        }
        vec![Some(ga)]
    }
}
