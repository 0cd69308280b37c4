//! Operator-applied RBF entries from latent-space jets.
//!
//! A linear operator acting on `κ(g(s), g(s'))` through the chain rule reduces,
//! at each point, to a jet `(c, v, W)` in feature space: the operator becomes
//! `c + v·∇_z + Σ W_ab ∂_{z_a}∂_{z_b}`. A jet is stored as a row
//! `[c, v_0..v_{p-1}, W row-major]`.

use crate::diff::{CustomOp, Mat, Tape, Var};

pub fn jet_width(p: usize) -> usize {
    1 + p + p * p
}

/// Jets of the identity operator (`c = 1`).
pub fn plain_jets(n: usize, p: usize) -> Mat {
    let mut m = Mat::zeros(n, jet_width(p));
    m.column_mut(0).fill(1.0);
    m
}

/// Scratch space for one entry; reused across pairs.
pub(crate) struct Pair {
    p: usize,
    r: Vec<f64>,
    g: Vec<f64>,
    y: Vec<f64>,
    yr: Vec<f64>,
    pub k: f64,
    pub a: f64,
    pub ar: f64,
    pub e: f64,
}

impl Pair {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            r: vec![0.0; p],
            g: vec![0.0; p],
            y: vec![0.0; p],
            yr: vec![0.0; p],
            k: 0.0,
            a: 0.0,
            ar: 0.0,
            e: 0.0,
        }
    }

    /// Value of `𝒜_s 𝒜'_{s'} κ` for left jet `jl` at `zl` and right jet `jr`
    /// at `zr`.
    #[allow(clippy::too_many_arguments)]
    pub fn eval(&mut self, zl: &[f64], jl: &[f64], zr: &[f64], jr: &[f64], lam: &[f64], sf2: f64) -> f64 {
        let p = self.p;
        let (c, v, w) = (jl[0], &jl[1..1 + p], &jl[1 + p..]);
        let (cr, vr, wr) = (jr[0], &jr[1..1 + p], &jr[1 + p..]);
        let mut quad = 0.0;
        for a in 0..p {
            let r = zl[a] - zr[a];
            self.r[a] = r;
            self.g[a] = -lam[a] * r;
            quad += lam[a] * r * r;
        }
        let k = sf2 * (-0.5 * quad).exp();
        let g = &self.g;
        let (mut s, mut sr, mut tw, mut twr) = (0.0, 0.0, 0.0, 0.0);
        for a in 0..p {
            s += v[a] * g[a];
            sr += vr[a] * g[a];
            tw += lam[a] * w[a * p + a];
            twr += lam[a] * wr[a * p + a];
            let (mut ya, mut yra) = (0.0, 0.0);
            for b in 0..p {
                ya += (w[a * p + b] + w[b * p + a]) * g[b];
                yra += (wr[a * p + b] + wr[b * p + a]) * g[b];
            }
            self.y[a] = ya;
            self.yr[a] = yra;
        }
        let (mut q, mut qr, mut m, mut a1, mut a2, mut bb, mut ww) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for a in 0..p {
            q += 0.5 * g[a] * self.y[a];
            qr += 0.5 * g[a] * self.yr[a];
            m += lam[a] * v[a] * vr[a];
            a1 += lam[a] * vr[a] * self.y[a];
            a2 += lam[a] * v[a] * self.yr[a];
            bb += lam[a] * self.y[a] * self.yr[a];
            for b in 0..p {
                ww += lam[a] * lam[b] * w[a * p + b] * (wr[a * p + b] + wr[b * p + a]);
            }
        }
        let big_a = c + s + q - tw;
        let big_ar = cr - sr + qr - twr;
        let pv = big_a * big_ar + m + a1 - a2 - bb + ww;
        self.k = k;
        self.a = big_a;
        self.ar = big_ar;
        self.e = k * pv;
        self.e
    }

    /// Accumulates `weight · ∂E` into the jet, feature and hyperparameter
    /// adjoints. Must follow `eval` on the same inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        weight: f64,
        jl: &[f64],
        jr: &[f64],
        lam: &[f64],
        gjl: &mut [f64],
        gjr: &mut [f64],
        gzl: &mut [f64],
        gzr: &mut [f64],
        glam: &mut [f64],
    ) -> f64 {
        let p = self.p;
        let (v, w) = (&jl[1..1 + p], &jl[1 + p..]);
        let (vr, wr) = (&jr[1..1 + p], &jr[1 + p..]);
        let (g, y, yr, r) = (&self.g, &self.y, &self.yr, &self.r);
        let (big_a, big_ar, k) = (self.a, self.ar, self.k);
        let gk = weight * k;

        gjl[0] += gk * big_ar;
        gjr[0] += gk * big_a;
        for a in 0..p {
            gjl[1 + a] += gk * (g[a] * big_ar + lam[a] * (vr[a] - yr[a]));
            gjr[1 + a] += gk * (-g[a] * big_a + lam[a] * (v[a] + y[a]));
        }
        for a in 0..p {
            let lvr = lam[a] * vr[a];
            let lyr = lam[a] * yr[a];
            let lv = lam[a] * v[a];
            let ly = lam[a] * y[a];
            for b in 0..p {
                let lvr_b = lam[b] * vr[b];
                let lyr_b = lam[b] * yr[b];
                let lv_b = lam[b] * v[b];
                let ly_b = lam[b] * y[b];
                let hess = g[a] * g[b] - if a == b { lam[a] } else { 0.0 };
                let ll = lam[a] * lam[b];
                gjl[1 + p + a * p + b] += gk
                    * (hess * big_ar + lvr * g[b] + lvr_b * g[a] - lyr * g[b] - lyr_b * g[a]
                        + ll * (wr[a * p + b] + wr[b * p + a]));
                gjr[1 + p + a * p + b] += gk
                    * (hess * big_a - lv * g[b] - lv_b * g[a] - ly * g[b] - ly_b * g[a]
                        + ll * (w[a * p + b] + w[b * p + a]));
            }
        }

        // ∂P/∂g and ∂P/∂Λ at fixed g
        for a in 0..p {
            let mut dg = (v[a] + y[a]) * big_ar + big_a * (-vr[a] + yr[a]);
            let mut dl = -w[a * p + a] * big_ar - wr[a * p + a] * big_a + v[a] * vr[a]
                + vr[a] * y[a]
                - v[a] * yr[a]
                - y[a] * yr[a];
            for b in 0..p {
                let sab = w[a * p + b] + w[b * p + a];
                let srab = wr[a * p + b] + wr[b * p + a];
                dg += sab * lam[b] * vr[b] - srab * lam[b] * v[b] - sab * lam[b] * yr[b]
                    - srab * lam[b] * y[b];
                dl += lam[b] * sab * srab;
            }
            let de_dr = g[a] * self.e - k * lam[a] * dg;
            gzl[a] += weight * de_dr;
            gzr[a] -= weight * de_dr;
            glam[a] += weight * (-0.5 * r[a] * r[a] * self.e + k * (-r[a] * dg + dl));
        }
        weight * self.e
    }
}

/// Entry-wise `𝒜_s 𝒜'_{s'} κ` between every left and right jet. With
/// `symmetric`, the right side is the left side and only half is computed.
pub fn gram_from_jets(zl: &Mat, jl: &Mat, zr: &Mat, jr: &Mat, lam: &[f64], sf2: f64, symmetric: bool) -> Mat {
    let p = zl.ncols();
    let (nl, nr) = (zl.nrows(), zr.nrows());
    let rows = |m: &Mat| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    };
    let (zl_r, jl_r, zr_r, jr_r) = (rows(zl), rows(jl), rows(zr), rows(jr));
    let mut pair = Pair::new(p);
    let mut out = Mat::zeros(nl, nr);
    for j in 0..nr {
        let i_end = if symmetric { j + 1 } else { nl };
        for i in 0..i_end {
            let e = pair.eval(&zl_r[i], &jl_r[i], &zr_r[j], &jr_r[j], lam, sf2);
            out[(i, j)] = e;
            if symmetric {
                out[(j, i)] = e;
            }
        }
    }
    out
}

/// Tape node for [`gram_from_jets`]; parents are `[zl, jl, zr, jr, log_sf2,
/// log_ls]`, or `[z, j, log_sf2, log_ls]` when symmetric.
struct OperatorGram {
    symmetric: bool,
}

fn hyper_values(log_sf2: &Mat, log_ls: &Mat) -> (f64, Vec<f64>) {
    let sf2 = log_sf2[(0, 0)].exp();
    let lam = log_ls.iter().map(|l| (-2.0 * l).exp()).collect();
    (sf2, lam)
}

impl CustomOp for OperatorGram {
    fn name(&self) -> &'static str {
        "operator_gram"
    }

    fn backward(&self, parents: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let (zl, jl, zr, jr, hs, hl) = if self.symmetric {
            (parents[0], parents[1], parents[0], parents[1], parents[2], parents[3])
        } else {
            (parents[0], parents[1], parents[2], parents[3], parents[4], parents[5])
        };
        let (sf2, lam) = hyper_values(hs, hl);
        let p = zl.ncols();
        let jw = jl.ncols();
        let (nl, nr) = (zl.nrows(), zr.nrows());
        let rows = |m: &Mat| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        let (zl_r, jl_r, zr_r, jr_r) = (rows(zl), rows(jl), rows(zr), rows(jr));
        let mut gzl = vec![vec![0.0; p]; nl];
        let mut gjl = vec![vec![0.0; jw]; nl];
        let mut gzr = vec![vec![0.0; p]; nr];
        let mut gjr = vec![vec![0.0; jw]; nr];
        let mut glam = vec![0.0; p];
        let mut gsf2 = 0.0;
        let mut pair = Pair::new(p);
        for j in 0..nr {
            let i_end = if self.symmetric { j + 1 } else { nl };
            for i in 0..i_end {
                let weight = if self.symmetric && i != j {
                    grad[(i, j)] + grad[(j, i)]
                } else {
                    grad[(i, j)]
                };
                if weight == 0.0 {
                    continue;
                }
                pair.eval(&zl_r[i], &jl_r[i], &zr_r[j], &jr_r[j], &lam, sf2);
                if self.symmetric {
                    // left and right adjoints land on the same rows
                    let mut tl = vec![0.0; jw];
                    let mut tr = vec![0.0; jw];
                    let mut tzl = vec![0.0; p];
                    let mut tzr = vec![0.0; p];
                    gsf2 += pair.backward(
                        weight, &jl_r[i], &jr_r[j], &lam, &mut tl, &mut tr, &mut tzl, &mut tzr,
                        &mut glam,
                    );
                    for x in 0..jw {
                        gjl[i][x] += tl[x];
                        gjl[j][x] += tr[x];
                    }
                    for x in 0..p {
                        gzl[i][x] += tzl[x];
                        gzl[j][x] += tzr[x];
                    }
                } else {
                    gsf2 += pair.backward(
                        weight,
                        &jl_r[i],
                        &jr_r[j],
                        &lam,
                        &mut gjl[i],
                        &mut gjr[j],
                        &mut gzl[i],
                        &mut gzr[j],
                        &mut glam,
                    );
                }
            }
        }
        let to_mat = |v: &[Vec<f64>], cols: usize| {
            Mat::from_fn(v.len(), cols, |i, c| v[i][c])
        };
        let g_hs = Mat::from_element(1, 1, gsf2);
        let g_hl = Mat::from_fn(1, p, |_, a| -2.0 * lam[a] * glam[a]);
        if self.symmetric {
            vec![Some(to_mat(&gzl, p)), Some(to_mat(&gjl, jw)), Some(g_hs), Some(g_hl)]
        } else {
            vec![
                Some(to_mat(&gzl, p)),
                Some(to_mat(&gjl, jw)),
                Some(to_mat(&gzr, p)),
                Some(to_mat(&gjr, jw)),
                Some(g_hs),
                Some(g_hl),
            ]
        }
    }
}

/// Gram block on the tape. `right = None` means the block is square and
/// symmetric over the left points.
pub fn tape_gram(tape: &mut Tape, left: (Var, Var), right: Option<(Var, Var)>, log_sf2: Var, log_ls: Var) -> Var {
    let (sf2, lam) = hyper_values(tape.value(log_sf2), tape.value(log_ls));
    match right {
        None => {
            let z = tape.value(left.0);
            let j = tape.value(left.1);
            let value = gram_from_jets(z, j, z, j, &lam, sf2, true);
            tape.custom(&[left.0, left.1, log_sf2, log_ls], value, OperatorGram { symmetric: true })
        }
        Some(right) => {
            let value = gram_from_jets(
                tape.value(left.0),
                tape.value(left.1),
                tape.value(right.0),
                tape.value(right.1),
                &lam,
                sf2,
                false,
            );
            tape.custom(
                &[left.0, left.1, right.0, right.1, log_sf2, log_ls],
                value,
                OperatorGram { symmetric: false },
            )
        }
    }
}
