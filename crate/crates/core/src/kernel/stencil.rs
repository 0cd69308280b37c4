use crate::diff::{fd_derivative, Accuracy, Stencil};
use crate::error::Result;
use crate::kernel::{deep_kernel, KernelHyper, OperatorTag};
use crate::nn::Embedding;
use crate::pde::LinearOperatorSpec;

/// Relative step of the kernel stencils, per unit of coordinate range.
pub const KERNEL_STEP: f64 = 1e-2;

fn side_terms(op: &LinearOperatorSpec, s: &[f64], phi: &[f64], active: bool) -> Vec<(f64, Vec<u8>)> {
    if !active {
        return vec![(1.0, vec![0; op.dim()])];
    }
    op.terms()
        .iter()
        .map(|t| (t.coef.eval(s, phi), t.partial.orders(op.dim())))
        .filter(|(c, _)| *c != 0.0)
        .collect()
}

/// Operator-applied deep kernel by tensor-product sixth-order central
/// differences over both arguments.
pub fn stencil_operator_kernel(
    s: &[f64],
    sp: &[f64],
    emb: &Embedding,
    psi: &KernelHyper,
    phi: &[f64],
    op: &LinearOperatorSpec,
    tag: OperatorTag,
) -> Result<f64> {
    let dim = op.dim();
    let mut joint = s.to_vec();
    joint.extend_from_slice(sp);
    let mut steps: Vec<f64> = op.ranges().iter().map(|r| KERNEL_STEP * r).collect();
    steps.extend_from_within(..);
    let field = |x: &[f64]| deep_kernel(&x[..dim], &x[dim..], emb, psi).unwrap_or(f64::NAN);

    let mut acc = 0.0;
    for (cl, a) in side_terms(op, s, phi, tag.left()) {
        for (cr, b) in side_terms(op, sp, phi, tag.right()) {
            let mut orders = a.clone();
            orders.extend_from_slice(&b);
            let st = Stencil::new(orders, steps.clone(), Accuracy::Sixth)?;
            acc += cl * cr * fd_derivative(field, &joint, &st)?;
        }
    }
    Ok(acc)
}
