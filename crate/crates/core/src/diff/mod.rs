//! Reverse-mode differentiation and central-difference stencils.

mod cholesky;
mod stencil;
mod tape;

pub use cholesky::{cho_solve, cholesky_pullback, inverse_from_factor};
pub use stencil::{fd_derivative, tableau, Accuracy, Stencil};
pub use tape::{gradient_at, sigmoid, CustomOp, Gradients, Mat, Tape, Var};

pub(crate) use cholesky::symmetrize;

#[cfg(test)]
pub(crate) mod testing {
    use super::{Mat, Tape, Var};
    use rand::Rng;

    pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize, lo: f64, hi: f64) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.gen_range(lo..hi))
    }

    /// Compares reverse-mode gradients of `build` against five-point central
    /// differences on every input entry.
    pub fn assert_grad_matches_fd<F>(inputs: &[Mat], build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |vals: &[Mat]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|m| t.param(m.clone())).collect();
            let root = build(&mut t, &vars);
            t.scalar_value(root)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| t.param(m.clone())).collect();
        let root = build(&mut t, &vars);
        let grads = t.gradient(root).unwrap();

        let h = 1e-3;
        for (k, v) in vars.iter().enumerate() {
            let g = grads.wrt(*v);
            for idx in 0..inputs[k].len() {
                let shifted = |delta: f64| {
                    let mut vals = inputs.to_vec();
                    vals[k][idx] += delta;
                    eval(&vals)
                };
                let fd = (-shifted(2.0 * h) + 8.0 * shifted(h) - 8.0 * shifted(-h)
                    + shifted(-2.0 * h))
                    / (12.0 * h);
                let an = g[idx];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-2);
                assert!(rel < 1e-6, "input {k} entry {idx}: fd {fd} vs tape {an}");
            }
        }
    }
}
