//! Matrix-valued reverse-mode tape.
//!
//! Every node holds a dense `f64` matrix (scalars are `1×1`). Nodes are
//! appended in evaluation order, so a node's parents always precede it and
//! one reverse sweep over the node list propagates adjoints from the root to
//! every leaf.
//!
//! ```
//! use pidkl::diff::Tape;
//! use nalgebra::DMatrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(DMatrix::from_element(1, 1, 3.0));
//! let y = tape.mul(x, x);
//! let y = tape.sum(y);
//! let grads = tape.gradient(y).unwrap();
//! assert_eq!(grads.wrt(x)[(0, 0)], 6.0);
//! ```

use nalgebra::DMatrix;

use crate::diff::cholesky::{cho_solve, cholesky_pullback, inverse_from_factor};
use crate::error::{Error, Result};
use crate::gp::chol_jitter;

pub type Mat = DMatrix<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose forward value is computed by the caller
/// and whose pullback is supplied here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one adjoint per parent (in the order the parents were given),
    /// `None` where the parent receives no gradient.
    fn backward(&self, parents: &[&Mat], output: &Mat, grad: &Mat) -> Vec<Option<Mat>>;
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ScaleBy(usize, usize),
    MulCol(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Sum(usize),
    Slice {
        src: usize,
        row: usize,
        col: usize,
    },
    HStack(Vec<usize>),
    VStack(Vec<usize>),
    RowOuter(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
        value_rows: usize,
    },
    Cholesky(usize),
    CholSolve(usize, usize),
    LogDetChol(usize),
    GaussianNll {
        k: usize,
        y: usize,
        factor: Mat,
        alpha: Mat,
    },
    Custom {
        parents: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::MulCol(..) => "mul_col",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sum(..) => "sum",
            Op::Slice { .. } => "slice",
            Op::HStack(..) => "hstack",
            Op::VStack(..) => "vstack",
            Op::RowOuter(..) => "row_outer",
            Op::Linear { .. } => "linear",
            Op::Cholesky(..) => "cholesky",
            Op::CholSolve(..) => "chol_solve",
            Op::LogDetChol(..) => "logdet_chol",
            Op::GaussianNll { .. } => "gaussian_nll",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    op: Op,
    value: Mat,
}

/// Adjoints of the root with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(x: f64) -> Mat {
    Mat::from_element(1, 1, x)
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a.0, b.0), v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_mul(self.value(b));
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(Op::Scale(a.0, k), v)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).add_scalar(k);
        self.push(Op::AddScalar(a.0), v)
    }

    /// Multiplies every entry of `a` by the `1×1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar_value(s);
        let v = self.value(a) * k;
        self.push(Op::ScaleBy(a.0, s.0), v)
    }

    /// Scales row `i` of `a` (`n×m`) by entry `i` of the column `c` (`n×1`).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let av = self.value(a);
        let cv = self.value(c);
        let mut v = av.clone();
        for j in 0..v.ncols() {
            for i in 0..v.nrows() {
                v[(i, j)] *= cv[(i, 0)];
            }
        }
        self.push(Op::MulCol(a.0, c.0), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::MatMul(a.0, b.0), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a.0), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a.0), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a.0), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a.0), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        self.push(Op::Sum(a.0), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn slice(&mut self, a: Var, row: usize, col: usize, nrows: usize, ncols: usize) -> Var {
        let v = self.value(a).view((row, col), (nrows, ncols)).into_owned();
        self.push(Op::Slice { src: a.0, row, col }, v)
    }

    /// Entry `(row, col)` as a `1×1` node.
    pub fn entry(&mut self, a: Var, row: usize, col: usize) -> Var {
        self.slice(a, row, col, 1, 1)
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.nrows(), rows, "hstack row mismatch");
            v.view_mut((0, c0), pv.shape()).copy_from(pv);
            c0 += pv.ncols();
        }
        self.push(Op::HStack(parts.iter().map(|p| p.0).collect()), v)
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut r0 = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.ncols(), cols, "vstack column mismatch");
            v.view_mut((r0, 0), pv.shape()).copy_from(pv);
            r0 += pv.nrows();
        }
        self.push(Op::VStack(parts.iter().map(|p| p.0).collect()), v)
    }

    /// Per-row outer product: row `i` of the result is `vec(a_i ⊗ b_i)`,
    /// row-major, so entry `(i, k*q + l) = a[i,k] * b[i,l]`.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, p) = av.shape();
        let q = bv.ncols();
        let mut v = Mat::zeros(n, p * q);
        for k in 0..p {
            for l in 0..q {
                for i in 0..n {
                    v[(i, k * q + l)] = av[(i, k)] * bv[(i, l)];
                }
            }
        }
        self.push(Op::RowOuter(a.0, b.0), v)
    }

    /// `x Wᵀ`, with the bias row `b` added to the first `value_rows` rows only.
    pub fn linear(&mut self, x: Var, w: Var, b: Var, value_rows: usize) -> Var {
        let mut v = self.value(x) * self.value(w).transpose();
        let bv = self.value(b);
        for j in 0..v.ncols() {
            for i in 0..value_rows {
                v[(i, j)] += bv[(0, j)];
            }
        }
        self.push(
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
                value_rows,
            },
            v,
        )
    }

    /// Lower Cholesky factor of a symmetric matrix (jitter escalated if
    /// needed; the jitter is treated as a constant).
    pub fn cholesky(&mut self, k: Var) -> Result<Var> {
        let f = chol_jitter(self.value(k), 0.0)?;
        Ok(self.push(Op::Cholesky(k.0), f.l))
    }

    /// Solves `L Lᵀ X = B` for a factor node `l`.
    pub fn chol_solve(&mut self, l: Var, b: Var) -> Var {
        let v = cho_solve(self.value(l), self.value(b));
        self.push(Op::CholSolve(l.0, b.0), v)
    }

    /// `log|L Lᵀ|` for a factor node `l`.
    pub fn logdet_chol(&mut self, l: Var) -> Var {
        let lv = self.value(l);
        let v: f64 = (0..lv.nrows()).map(|i| lv[(i, i)].ln()).sum::<f64>() * 2.0;
        self.push(Op::LogDetChol(l.0), scalar(v))
    }

    /// Negative log density of `y ~ N(0, K)`:
    /// `½ yᵀK⁻¹y + ½ log|K| + (n/2) log 2π`.
    pub fn gaussian_nll(&mut self, k: Var, y: Var) -> Result<Var> {
        let f = chol_jitter(self.value(k), 0.0)?;
        let yv = self.value(y);
        let alpha = cho_solve(&f.l, yv);
        let n = yv.nrows() as f64;
        let quad = yv.dot(&alpha);
        let logdet: f64 = (0..f.l.nrows()).map(|i| f.l[(i, i)].ln()).sum::<f64>() * 2.0;
        let v = 0.5 * quad + 0.5 * logdet + 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        Ok(self.push(
            Op::GaussianNll {
                k: k.0,
                y: y.0,
                factor: f.l,
                alpha,
            },
            scalar(v),
        ))
    }

    pub fn custom(&mut self, parents: &[Var], value: Mat, op: impl CustomOp + 'static) -> Var {
        self.push(
            Op::Custom {
                parents: parents.iter().map(|p| p.0).collect(),
                op: Box::new(op),
            },
            value,
        )
    }

    /// One reverse sweep from the scalar `root`.
    pub fn gradient(&self, root: Var) -> Result<Gradients> {
        assert_eq!(self.shape(root), (1, 1), "gradient root must be a scalar");
        for (i, node) in self.nodes[..=root.0].iter().enumerate() {
            if node.value.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    kind: node.op.kind(),
                    index: i,
                });
            }
        }

        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.pullback(node, &g)?;
            for (parent, adj) in contributions {
                if adj.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        kind: node.op.kind(),
                        index: i,
                    });
                }
                match &mut grads[parent] {
                    Some(acc) => *acc += adj,
                    slot @ None => *slot = Some(adj),
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn pullback(&self, node: &Node, g: &Mat) -> Result<Vec<(usize, Mat)>> {
        let val = |i: usize| &self.nodes[i].value;
        let out = match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, -g)],
            Op::Mul(a, b) => vec![
                (*a, g.component_mul(val(*b))),
                (*b, g.component_mul(val(*a))),
            ],
            Op::Scale(a, k) => vec![(*a, g * *k)],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::ScaleBy(a, s) => {
                let k = val(*s)[(0, 0)];
                vec![(*a, g * k), (*s, scalar(g.dot(val(*a))))]
            }
            Op::MulCol(a, c) => {
                let av = val(*a);
                let cv = val(*c);
                let mut ga = g.clone();
                let mut gc = Mat::zeros(cv.nrows(), 1);
                for j in 0..ga.ncols() {
                    for i in 0..ga.nrows() {
                        gc[(i, 0)] += g[(i, j)] * av[(i, j)];
                        ga[(i, j)] *= cv[(i, 0)];
                    }
                }
                vec![(*a, ga), (*c, gc)]
            }
            Op::MatMul(a, b) => vec![
                (*a, g * val(*b).transpose()),
                (*b, val(*a).transpose() * g),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Tanh(a) => {
                let d = node.value.map(|y| 1.0 - y * y);
                vec![(*a, g.component_mul(&d))]
            }
            Op::Exp(a) => vec![(*a, g.component_mul(&node.value))],
            Op::Log(a) => vec![(*a, g.component_div(val(*a)))],
            Op::Sigmoid(a) => {
                let d = node.value.map(|y| y * (1.0 - y));
                vec![(*a, g.component_mul(&d))]
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Mat::from_element(r, c, g[(0, 0)]))]
            }
            Op::Slice { src, row, col } => {
                let (r, c) = val(*src).shape();
                let mut ga = Mat::zeros(r, c);
                ga.view_mut((*row, *col), g.shape()).copy_from(g);
                vec![(*src, ga)]
            }
            Op::HStack(parts) => {
                let mut c0 = 0;
                parts
                    .iter()
                    .map(|p| {
                        let (r, c) = val(*p).shape();
                        let part = g.view((0, c0), (r, c)).into_owned();
                        c0 += c;
                        (*p, part)
                    })
                    .collect()
            }
            Op::VStack(parts) => {
                let mut r0 = 0;
                parts
                    .iter()
                    .map(|p| {
                        let (r, c) = val(*p).shape();
                        let part = g.view((r0, 0), (r, c)).into_owned();
                        r0 += r;
                        (*p, part)
                    })
                    .collect()
            }
            Op::RowOuter(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                let (n, p) = av.shape();
                let q = bv.ncols();
                let mut ga = Mat::zeros(n, p);
                let mut gb = Mat::zeros(n, q);
                for k in 0..p {
                    for l in 0..q {
                        for i in 0..n {
                            let gi = g[(i, k * q + l)];
                            ga[(i, k)] += gi * bv[(i, l)];
                            gb[(i, l)] += gi * av[(i, k)];
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Linear {
                x,
                w,
                b,
                value_rows,
            } => {
                let gx = g * val(*w);
                let gw = g.transpose() * val(*x);
                let mut gb = Mat::zeros(1, g.ncols());
                for j in 0..g.ncols() {
                    gb[(0, j)] = g.view((0, j), (*value_rows, 1)).sum();
                }
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Cholesky(k) => {
                let gk = cholesky_pullback(&node.value, &g.lower_triangle())?;
                vec![(*k, gk)]
            }
            Op::CholSolve(l, b) => {
                let lv = val(*l);
                let gb = cho_solve(lv, g);
                // dK = -B̄ Xᵀ; L̄ = tril((K̄ + K̄ᵀ) L)
                let kbar = -(&gb * node.value.transpose());
                let gl = ((&kbar + kbar.transpose()) * lv).lower_triangle();
                vec![(*l, gl), (*b, gb)]
            }
            Op::LogDetChol(l) => {
                let lv = val(*l);
                let n = lv.nrows();
                let mut gl = Mat::zeros(n, n);
                for i in 0..n {
                    gl[(i, i)] = 2.0 * g[(0, 0)] / lv[(i, i)];
                }
                vec![(*l, gl)]
            }
            Op::GaussianNll {
                k,
                y,
                factor,
                alpha,
            } => {
                let s = g[(0, 0)];
                let kinv = inverse_from_factor(factor);
                let gk = (kinv - alpha * alpha.transpose()) * (0.5 * s);
                vec![(*k, gk), (*y, alpha * s)]
            }
            Op::Custom { parents, op } => {
                let pv: Vec<&Mat> = parents.iter().map(|p| val(*p)).collect();
                op.backward(&pv, &node.value, g)
                    .into_iter()
                    .zip(parents.iter())
                    .filter_map(|(adj, p)| adj.map(|a| (*p, a)))
                    .collect()
            }
        };
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reverse-mode gradient of a scalar function of a flat parameter vector.
pub fn gradient_at<F>(f: F, x: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.param(Mat::from_column_slice(x.len(), 1, x));
    let root = f(&mut tape, input)?;
    let grads = tape.gradient(root)?;
    Ok((
        tape.scalar_value(root),
        grads.wrt(input).iter().copied().collect(),
    ))
}
