//! ARD-RBF base kernel, deep kernel and operator-transformed kernels.

mod analytic;
mod jets;
mod pair;
mod stencil;

pub use analytic::analytic_operator_kernel;
pub use jets::{jet_layout, tape_operator_jets, OperatorJets};
pub use pair::{gram_from_jets, jet_width, plain_jets, tape_gram};
pub use stencil::stencil_operator_kernel;

use serde::{Deserialize, Serialize};

use crate::diff::Mat;
use crate::error::{Error, Result};
use crate::nn::Embedding;
use crate::pde::LinearOperatorSpec;

/// `ψ`: log signal variance and log ARD lengthscales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub log_sf2: f64,
    pub log_ls: Vec<f64>,
}

impl KernelHyper {
    pub fn unit(p: usize) -> Self {
        Self {
            log_sf2: 0.0,
            log_ls: vec![0.0; p],
        }
    }

    pub fn sf2(&self) -> f64 {
        self.log_sf2.exp()
    }

    /// Inverse squared lengthscales.
    pub fn lambda(&self) -> Vec<f64> {
        self.log_ls.iter().map(|l| (-2.0 * l).exp()).collect()
    }

    pub fn dim(&self) -> usize {
        self.log_ls.len()
    }

    /// `[log σ², log ℓ_1..]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.log_sf2];
        v.extend_from_slice(&self.log_ls);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            log_sf2: v[0],
            log_ls: v[1..].to_vec(),
        }
    }
}

/// Which kernel argument(s) the operator is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorTag {
    None,
    Left,
    Right,
    Both,
}

impl OperatorTag {
    pub fn left(self) -> bool {
        matches!(self, OperatorTag::Left | OperatorTag::Both)
    }

    pub fn right(self) -> bool {
        matches!(self, OperatorTag::Right | OperatorTag::Both)
    }
}

/// How operator-applied kernels are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// Central differences of the deep kernel in both arguments.
    Stencil,
    /// Closed-form RBF derivatives; identity feature map only.
    Analytic,
    /// Forward-mode network jets contracted with RBF derivatives.
    Jet,
}

pub fn base_rbf(z: &[f64], zp: &[f64], psi: &KernelHyper) -> Result<f64> {
    if z.len() != zp.len() || z.len() != psi.dim() {
        return Err(Error::DimensionMismatch {
            what: "rbf features",
            expected: psi.dim(),
            got: if z.len() != psi.dim() { z.len() } else { zp.len() },
        });
    }
    let quad: f64 = z
        .iter()
        .zip(zp)
        .zip(psi.lambda())
        .map(|((a, b), l)| l * (a - b) * (a - b))
        .sum();
    Ok(psi.sf2() * (-0.5 * quad).exp())
}

pub fn deep_kernel(s: &[f64], sp: &[f64], emb: &Embedding, psi: &KernelHyper) -> Result<f64> {
    base_rbf(&emb.features(s)?, &emb.features(sp)?, psi)
}

/// One operator-applied kernel entry.
#[allow(clippy::too_many_arguments)]
pub fn operator_kernel(
    s: &[f64],
    sp: &[f64],
    emb: &Embedding,
    psi: &KernelHyper,
    phi: &[f64],
    op: &LinearOperatorSpec,
    tag: OperatorTag,
    backend: Backend,
) -> Result<f64> {
    if tag == OperatorTag::None {
        return deep_kernel(s, sp, emb, psi);
    }
    match backend {
        Backend::Stencil => stencil_operator_kernel(s, sp, emb, psi, phi, op, tag),
        Backend::Analytic => {
            if !matches!(emb, Embedding::Identity(_)) {
                return Err(Error::InvalidArgument(
                    "analytic backend requires the identity feature map".into(),
                ));
            }
            analytic_operator_kernel(s, sp, psi, phi, op, tag)
        }
        Backend::Jet => {
            let g = gram(
                (&[s.to_vec()], tag.left()),
                (&[sp.to_vec()], tag.right()),
                emb,
                psi,
                phi,
                op,
            )?;
            Ok(g[(0, 0)])
        }
    }
}

/// Features and jets of a point set; `with_op = false` gives identity jets.
pub fn side_jets(
    emb: &Embedding,
    points: &[Vec<f64>],
    with_op: bool,
    phi: &[f64],
    op: &LinearOperatorSpec,
) -> Result<(Mat, Mat)> {
    if with_op {
        let j = OperatorJets::build(emb, points, op)?;
        let jet = j.combine(phi);
        Ok((j.z, jet))
    } else {
        let z = emb.feature_matrix(points)?;
        let n = z.nrows();
        let p = z.ncols();
        Ok((z, plain_jets(n, p)))
    }
}

/// Kernel matrix between two point sets; the flag on each side says whether
/// the operator acts on that argument.
pub fn gram(
    rows: (&[Vec<f64>], bool),
    cols: (&[Vec<f64>], bool),
    emb: &Embedding,
    psi: &KernelHyper,
    phi: &[f64],
    op: &LinearOperatorSpec,
) -> Result<Mat> {
    let (zl, jl) = side_jets(emb, rows.0, rows.1, phi, op)?;
    let (zr, jr) = side_jets(emb, cols.0, cols.1, phi, op)?;
    check_psi(psi, zl.ncols())?;
    Ok(gram_from_jets(&zl, &jl, &zr, &jr, &psi.lambda(), psi.sf2(), false))
}

/// Entry-by-entry gram through a chosen backend.
pub fn gram_with_backend(
    rows: (&[Vec<f64>], OperatorTag),
    cols: &[Vec<f64>],
    emb: &Embedding,
    psi: &KernelHyper,
    phi: &[f64],
    op: &LinearOperatorSpec,
    backend: Backend,
) -> Result<Mat> {
    let mut out = Mat::zeros(rows.0.len(), cols.len());
    for (i, s) in rows.0.iter().enumerate() {
        for (j, sp) in cols.iter().enumerate() {
            out[(i, j)] = operator_kernel(s, sp, emb, psi, phi, op, rows.1, backend)?;
        }
    }
    Ok(out)
}

pub(crate) fn check_psi(psi: &KernelHyper, p: usize) -> Result<()> {
    if psi.dim() != p {
        return Err(Error::DimensionMismatch {
            what: "kernel lengthscales",
            expected: p,
            got: psi.dim(),
        });
    }
    Ok(())
}

/// `K_joint = [[K_uu, K_uf], [K_fu, K_ff]]` without noise.
pub fn joint_covariance(
    s_u: &[Vec<f64>],
    s_f: &[Vec<f64>],
    emb: &Embedding,
    psi: &KernelHyper,
    phi: &[f64],
    op: &LinearOperatorSpec,
) -> Result<Mat> {
    let (zu, ju) = side_jets(emb, s_u, false, phi, op)?;
    let (zf, jf) = side_jets(emb, s_f, true, phi, op)?;
    check_psi(psi, zu.ncols())?;
    let (lam, sf2) = (psi.lambda(), psi.sf2());
    let (nu, nf) = (s_u.len(), s_f.len());
    let mut k = Mat::zeros(nu + nf, nu + nf);
    k.view_mut((0, 0), (nu, nu))
        .copy_from(&gram_from_jets(&zu, &ju, &zu, &ju, &lam, sf2, true));
    if nf > 0 {
        let kuf = gram_from_jets(&zu, &ju, &zf, &jf, &lam, sf2, false);
        k.view_mut((0, nu), (nu, nf)).copy_from(&kuf);
        k.view_mut((nu, 0), (nf, nu)).copy_from(&kuf.transpose());
        k.view_mut((nu, nu), (nf, nf))
            .copy_from(&gram_from_jets(&zf, &jf, &zf, &jf, &lam, sf2, true));
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init, Architecture, InputScaling};
    use crate::pde::{make_problem, ProblemOverrides};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rbf_values() {
        let psi = KernelHyper::unit(1);
        assert_eq!(base_rbf(&[0.3], &[0.3], &psi).unwrap(), 1.0);
        assert!((base_rbf(&[0.0], &[1.0], &psi).unwrap() - 0.606531).abs() < 1e-6);
        assert!(base_rbf(&[0.0], &[1.0, 2.0], &psi).is_err());
    }

    fn network(d: usize, p: usize, seed: u64) -> Embedding {
        Embedding::Network {
            params: init(&Architecture::mlp(d + 1, &[8, 8], p).unwrap(), seed),
            scaling: InputScaling::identity(d + 1),
        }
    }

    #[test]
    fn deep_kernel_properties() {
        let emb = network(1, 2, 1);
        let psi = KernelHyper {
            log_sf2: 0.4,
            log_ls: vec![-0.3, 0.2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = [rng.gen::<f64>(), rng.gen::<f64>()];
            let sp = [rng.gen::<f64>(), rng.gen::<f64>()];
            let a = deep_kernel(&s, &sp, &emb, &psi).unwrap();
            let b = deep_kernel(&sp, &s, &emb, &psi).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a <= psi.sf2() + 1e-15);
            assert!((deep_kernel(&s, &s, &emb, &psi).unwrap() - psi.sf2()).abs() < 1e-15);
        }
        let id = Embedding::Identity(2);
        let psi2 = KernelHyper::unit(2);
        let v = deep_kernel(&[0.1, 0.2], &[0.5, -0.3], &id, &psi2).unwrap();
        assert_eq!(v, base_rbf(&[0.1, 0.2], &[0.5, -0.3], &psi2).unwrap());
    }

    #[test]
    fn none_tag_is_deep_kernel() {
        let p = make_problem("heat1d", &ProblemOverrides::default()).unwrap();
        let emb = network(1, 2, 3);
        let psi = KernelHyper::unit(2);
        for backend in [Backend::Stencil, Backend::Jet] {
            let v = operator_kernel(&[0.2, 0.3], &[0.6, 0.9], &emb, &psi, &[1.0], &p.operator, OperatorTag::None, backend)
                .unwrap();
            assert_eq!(v, deep_kernel(&[0.2, 0.3], &[0.6, 0.9], &emb, &psi).unwrap());
        }
    }

    #[test]
    fn jet_backend_matches_stencil_on_network() {
        for (name, dim) in [("heat1d", None), ("heat50d", Some(3)), ("adr50d", Some(2))] {
            let o = ProblemOverrides {
                dim,
                ..Default::default()
            };
            let prob = make_problem(name, &o).unwrap();
            let d = prob.dx;
            let emb = Embedding::Network {
                params: init(&Architecture::mlp(d + 1, &[8, 8], 3).unwrap(), 9),
                scaling: InputScaling::to_unit_box(&prob.domain.lo, &prob.domain.hi),
            };
            let psi = KernelHyper {
                log_sf2: 0.2,
                log_ls: vec![-0.2, 0.1, 0.3],
            };
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let pts = prob.domain.sample(&mut rng, 6);
            for tag in [OperatorTag::Left, OperatorTag::Right, OperatorTag::Both] {
                for k in 0..3 {
                    let (s, sp) = (&pts[2 * k], &pts[2 * k + 1]);
                    let a = operator_kernel(s, sp, &emb, &psi, &prob.phi_true, &prob.operator, tag, Backend::Jet)
                        .unwrap();
                    let b = operator_kernel(s, sp, &emb, &psi, &prob.phi_true, &prob.operator, tag, Backend::Stencil)
                        .unwrap();
                    let rel = (a - b).abs() / b.abs().max(psi.sf2());
                    assert!(rel < 1e-5, "{name} {tag:?}: jet {a} vs stencil {b}");
                }
            }
        }
    }

    #[test]
    fn joint_covariance_blocks() {
        let prob = make_problem("heat1d", &ProblemOverrides::default()).unwrap();
        let emb = network(1, 2, 4);
        let psi = KernelHyper::unit(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let su = prob.domain.sample(&mut rng, 4);
        let sf = prob.domain.sample(&mut rng, 3);
        let k = joint_covariance(&su, &sf, &emb, &psi, &[0.7], &prob.operator).unwrap();
        assert!((&k - k.transpose()).amax() < 1e-12);
        for i in 0..4 {
            for j in 0..3 {
                let e = operator_kernel(&su[i], &sf[j], &emb, &psi, &[0.7], &prob.operator, OperatorTag::Right, Backend::Jet)
                    .unwrap();
                assert!((k[(i, 4 + j)] - e).abs() < 1e-12);
            }
        }
    }
}
