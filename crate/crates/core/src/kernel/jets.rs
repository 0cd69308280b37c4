use crate::diff::{Mat, Tape, Var};
use crate::error::Result;
use crate::kernel::pair::jet_width;
use crate::nn::{Embedding, JetLayout, Jets, TapeJets};
use crate::pde::{LinearOperatorSpec, Partial};

/// Input derivatives an operator needs from the feature map.
pub fn jet_layout(op: &LinearOperatorSpec) -> JetLayout {
    let mut layout = JetLayout::default();
    let add_first = |l: &mut JetLayout, c: usize| {
        if l.first_slot(c).is_none() {
            l.firsts.push(c);
        }
    };
    for term in op.terms() {
        match term.partial {
            Partial::Value => {}
            Partial::First(j) => add_first(&mut layout, j),
            Partial::Second(j, k) => {
                add_first(&mut layout, j);
                add_first(&mut layout, k);
            }
        }
    }
    for term in op.terms() {
        if let Partial::Second(j, k) = term.partial {
            if layout.pair_slot(j, k).is_none() {
                let (a, b) = (layout.first_slot(j).unwrap(), layout.first_slot(k).unwrap());
                layout.pairs.push((a, b));
            }
        }
    }
    layout
}

/// Coefficient columns `[term][component] -> n values` (`None` when zero).
fn coefficient_columns(op: &LinearOperatorSpec, points: &[Vec<f64>]) -> Vec<Vec<Option<Mat>>> {
    op.terms()
        .iter()
        .map(|t| {
            (0..=op.n_phi())
                .map(|m| {
                    let c = t.coef.component(m);
                    if c.is_zero() {
                        None
                    } else {
                        Some(Mat::from_iterator(points.len(), 1, points.iter().map(|s| c.eval(s))))
                    }
                })
                .collect()
        })
        .collect()
}

fn scale_rows(m: &Mat, col: &Mat) -> Mat {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for i in 0..out.nrows() {
            out[(i, j)] *= col[(i, 0)];
        }
    }
    out
}

fn row_outer(a: &Mat, b: &Mat) -> Mat {
    let (n, p) = a.shape();
    let q = b.ncols();
    Mat::from_fn(n, p * q, |i, c| a[(i, c / q)] * b[(i, c % q)])
}

/// Per-point operator jets split into the parameter-free part and one part
/// per component of `φ`, so that `jet(φ) = J_0 + Σ_k φ_k J_{k+1}`.
#[derive(Clone, Debug)]
pub struct OperatorJets {
    pub z: Mat,
    pub components: Vec<Option<Mat>>,
}

impl OperatorJets {
    pub fn build(emb: &Embedding, points: &[Vec<f64>], op: &LinearOperatorSpec) -> Result<Self> {
        let layout = jet_layout(op);
        let jets = emb.jets(points, &layout)?;
        Ok(Self::from_jets(&jets, &layout, points, op))
    }

    fn from_jets(jets: &Jets, layout: &JetLayout, points: &[Vec<f64>], op: &LinearOperatorSpec) -> Self {
        let n = points.len();
        let p = jets.z.ncols();
        let coefs = coefficient_columns(op, points);
        let outers: Vec<Mat> = layout
            .pairs
            .iter()
            .map(|&(a, b)| row_outer(&jets.first[a], &jets.first[b]))
            .collect();
        let components = (0..=op.n_phi())
            .map(|m| {
                let mut jet = Mat::zeros(n, jet_width(p));
                let mut any = false;
                for (t, term) in op.terms().iter().enumerate() {
                    let Some(col) = &coefs[t][m] else { continue };
                    any = true;
                    match term.partial {
                        Partial::Value => {
                            let mut c = jet.column_mut(0);
                            c += col.column(0);
                        }
                        Partial::First(j) => {
                            let slot = layout.first_slot(j).unwrap();
                            let mut v = jet.columns_mut(1, p);
                            v += scale_rows(&jets.first[slot], col);
                        }
                        Partial::Second(j, k) => {
                            let slot = layout.pair_slot(j, k).unwrap();
                            {
                                let mut v = jet.columns_mut(1, p);
                                v += scale_rows(&jets.second[slot], col);
                            }
                            let mut w = jet.columns_mut(1 + p, p * p);
                            w += scale_rows(&outers[slot], col);
                        }
                    }
                }
                any.then_some(jet)
            })
            .collect();
        Self {
            z: jets.z.clone(),
            components,
        }
    }

    pub fn combine(&self, phi: &[f64]) -> Mat {
        let (n, p) = self.z.shape();
        let mut out = Mat::zeros(n, jet_width(p));
        for (m, c) in self.components.iter().enumerate() {
            if let Some(c) = c {
                let w = if m == 0 { 1.0 } else { phi[m - 1] };
                out += c * w;
            }
        }
        out
    }

    /// Places the fixed parts on the tape and combines them with the
    /// `n_phi × 1` node `phi`.
    pub fn tape_combine(&self, tape: &mut Tape, phi: Var) -> (Var, Var) {
        let z = tape.constant(self.z.clone());
        let comps: Vec<Option<Var>> = self
            .components
            .iter()
            .map(|c| c.as_ref().map(|c| tape.constant(c.clone())))
            .collect();
        let jet = combine_on_tape(tape, &comps, phi, self.z.shape());
        (z, jet)
    }
}

fn combine_on_tape(tape: &mut Tape, comps: &[Option<Var>], phi: Var, (n, p): (usize, usize)) -> Var {
    let mut acc: Option<Var> = None;
    for (m, c) in comps.iter().enumerate() {
        let Some(c) = *c else { continue };
        let term = if m == 0 {
            c
        } else {
            let pk = tape.entry(phi, m - 1, 0);
            tape.scale_by(c, pk)
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    acc.unwrap_or_else(|| tape.constant(Mat::zeros(n, jet_width(p))))
}

/// Operator jets with the network parameters and `φ` (`n_phi × 1`) on the
/// tape. Returns `(z, jet)`.
pub fn tape_operator_jets(
    tape: &mut Tape,
    emb: &Embedding,
    weights: &[(Var, Var)],
    points: &[Vec<f64>],
    op: &LinearOperatorSpec,
    phi: Var,
) -> Result<(Var, Var)> {
    let layout = jet_layout(op);
    let TapeJets { z, first, second } = emb.tape_jets(tape, weights, points, &layout)?;
    let n = points.len();
    let p = tape.shape(z).1;
    let coefs = coefficient_columns(op, points);
    let outers: Vec<Var> = layout
        .pairs
        .iter()
        .map(|&(a, b)| tape.row_outer(first[a], first[b]))
        .collect();

    let mut comps = Vec::with_capacity(op.n_phi() + 1);
    for m in 0..=op.n_phi() {
        let mut c_col = Mat::zeros(n, 1);
        let mut v: Option<Var> = None;
        let mut w: Option<Var> = None;
        let mut any = false;
        let accumulate = |tape: &mut Tape, acc: &mut Option<Var>, x: Var| {
            *acc = Some(match *acc {
                Some(a) => tape.add(a, x),
                None => x,
            });
        };
        for (t, term) in op.terms().iter().enumerate() {
            let Some(col) = &coefs[t][m] else { continue };
            any = true;
            match term.partial {
                Partial::Value => c_col += col,
                Partial::First(j) => {
                    let cv = tape.constant(col.clone());
                    let x = tape.mul_col(first[layout.first_slot(j).unwrap()], cv);
                    accumulate(tape, &mut v, x);
                }
                Partial::Second(j, k) => {
                    let slot = layout.pair_slot(j, k).unwrap();
                    let cv = tape.constant(col.clone());
                    let x = tape.mul_col(second[slot], cv);
                    accumulate(tape, &mut v, x);
                    let y = tape.mul_col(outers[slot], cv);
                    accumulate(tape, &mut w, y);
                }
            }
        }
        if !any {
            comps.push(None);
            continue;
        }
        let c = tape.constant(c_col);
        let v = v.unwrap_or_else(|| tape.constant(Mat::zeros(n, p)));
        let w = w.unwrap_or_else(|| tape.constant(Mat::zeros(n, p * p)));
        comps.push(Some(tape.hstack(&[c, v, w])));
    }
    let jet = combine_on_tape(tape, &comps, phi, (n, p));
    Ok((z, jet))
}
