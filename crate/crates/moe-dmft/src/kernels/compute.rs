use nalgebra::DMatrix;

use super::{KernelGrid, OneTimeMixture, TwoTimeKernel};
use crate::dynamics::Trace;
use crate::error::{Error, Result};
use crate::model::{FieldState, Model};

/// Field snapshots on a time grid, borrowed from a trace or collected by an
/// observer during a run.
pub struct Frames<'a> {
    pub model: &'a Model,
    pub times: Vec<usize>,
    pub fields: Vec<&'a FieldState>,
}

impl<'a> Frames<'a> {
    pub fn new(model: &'a Model, times: Vec<usize>, fields: Vec<&'a FieldState>) -> Result<Self> {
        if times.len() != fields.len() || times.is_empty() {
            return Err(Error::Shape(format!("{} times for {} field snapshots", times.len(), fields.len())));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("frame times must be strictly increasing"));
        }
        let d = &model.dims;
        for fs in &fields {
            if fs.h0.shape() != (d.n, d.p) || fs.u.len() != d.e || !fs.backward_done {
                return Err(Error::Shape("field snapshot does not match the model".into()));
            }
        }
        Ok(Frames { model, times, fields })
    }

    /// Snapshots of `trace` on `grid`.
    pub fn from_trace(trace: &'a Trace, grid: &KernelGrid) -> Result<Self> {
        let steps = trace.len().checked_sub(1).ok_or_else(|| Error::Capability("empty trace".into()))?;
        let times = grid.times(steps);
        let fields = times.iter().map(|&n| trace.fields(n)).collect::<Result<Vec<_>>>()?;
        Frames::new(&trace.model, times, fields)
    }

    pub fn p(&self) -> usize {
        self.model.dims.p
    }

    fn kernel(&self, tag: &str, mat: DMatrix<f64>) -> TwoTimeKernel {
        TwoTimeKernel { tag: tag.to_string(), p: self.p(), times: self.times.clone(), mat }
    }

    /// Stack `pick(frame)` (rows × P each) into rows × (nt·P).
    fn stack(&self, pick: impl Fn(&FieldState) -> DMatrix<f64>) -> DMatrix<f64> {
        let p = self.p();
        let blocks: Vec<_> = self.fields.iter().map(|fs| pick(fs)).collect();
        let mut out = DMatrix::zeros(blocks[0].nrows(), p * blocks.len());
        for (t, b) in blocks.iter().enumerate() {
            out.columns_mut(t * p, p).copy_from(b);
        }
        out
    }
}

/// `scale · FᵀF`.
fn gram(f: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(f.ncols(), f.ncols());
    k.gemm_tr(scale, f, f, 0.0);
    // Symmetrize so the stored kernel is exactly symmetric.
    for i in 0..k.nrows() {
        for j in 0..i {
            let v = 0.5 * (k[(i, j)] + k[(j, i)]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn scale_columns(f: &mut DMatrix<f64>, c: &[f64]) {
    for (mut col, &s) in f.column_iter_mut().zip(c) {
        col *= s;
    }
}

/// `(H0, H3, G)` with `H0 = ⟨h0, h0⟩/N`, `H3 = ⟨φ(h3), φ(h3)⟩/N` and
/// `G = ⟨g, g⟩/N`, or `⟨g̃, g̃⟩/N = N²·G` when `use_gtilde`.
pub fn global_kernels(frames: &Frames, use_gtilde: bool) -> (TwoTimeKernel, TwoTimeKernel, TwoTimeKernel) {
    let inv_n = 1.0 / frames.model.dims.n as f64;
    let phi = &frames.model.act.phi;
    let h0 = gram(&frames.stack(|fs| fs.h0.clone()), inv_n);
    let h3 = gram(&frames.stack(|fs| fs.h3.map(|v| phi.value(v))), inv_n);
    let (g, tag) = if use_gtilde {
        (gram(&frames.stack(|fs| fs.gtilde.clone()), inv_n), "Gt")
    } else {
        (gram(&frames.stack(|fs| fs.g.clone()), inv_n), "G")
    };
    (frames.kernel("H0", h0), frames.kernel("H3", h3), frames.kernel(tag, g))
}

/// Within-expert kernels `Φ¹ᵏ = ⟨φ(u_k), φ(u_k)⟩/N_e` and
/// `Ψᵏ = ⟨δ_k, δ_k⟩/N_e`.
pub fn expert_kernels(frames: &Frames, k: usize) -> Result<(TwoTimeKernel, TwoTimeKernel)> {
    let d = &frames.model.dims;
    if k >= d.e {
        return Err(Error::Index(format!("expert {k} out of range (E = {})", d.e)));
    }
    let inv = 1.0 / d.n_e as f64;
    let phi1 = gram(&frames.stack(|fs| fs.phi_u[k].clone()), inv);
    let psi = gram(&frames.stack(|fs| fs.delta[k].clone()), inv);
    Ok((frames.kernel(&format!("Phi1/{k}"), phi1), frames.kernel(&format!("Psi/{k}"), psi)))
}

/// Gated expert averages.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixtures {
    /// `(1/E) Σ_k w_k⊗w_k ⊙ Φ¹ᵏ`.
    pub phi: TwoTimeKernel,
    /// `(1/E) Σ_k w_k⊗w_k ⊙ Ψᵏ`.
    pub psi: TwoTimeKernel,
    /// `(1/E) Σ_k A_k σ'(p_k)`.
    pub a: OneTimeMixture,
    /// `(1/E) Σ_k (A_k σ'(p_k)) ⊗ (A_k σ'(p_k))`.
    pub aa: TwoTimeKernel,
}

/// Mixture kernels. With `tilde_alignment` the alignment is taken as
/// `Ã = ⟨g̃, m⟩/N = N·A`, the order-one normalization.
pub fn mixture_kernels(frames: &Frames, tilde_alignment: bool) -> Mixtures {
    let d = &frames.model.dims;
    let (p, nt) = (d.p, frames.times.len());
    let inv_e = 1.0 / d.e as f64;
    let inv_ne = 1.0 / d.n_e as f64;
    let a_scale = if tilde_alignment { d.n as f64 } else { 1.0 };
    let dim = p * nt;

    let mut mphi = DMatrix::zeros(dim, dim);
    let mut mpsi = DMatrix::zeros(dim, dim);
    let mut ma = DMatrix::zeros(p, nt);
    let mut ad = DMatrix::zeros(d.e, dim);
    for k in 0..d.e {
        let w: Vec<f64> = frames.fields.iter().flat_map(|fs| (0..p).map(move |mu| fs.w[(k, mu)])).collect();
        let mut f = frames.stack(|fs| fs.phi_u[k].clone());
        scale_columns(&mut f, &w);
        mphi.gemm_tr(inv_ne * inv_e, &f, &f, 1.0);
        let mut f = frames.stack(|fs| fs.delta[k].clone());
        scale_columns(&mut f, &w);
        mpsi.gemm_tr(inv_ne * inv_e, &f, &f, 1.0);
        for (t, fs) in frames.fields.iter().enumerate() {
            for mu in 0..p {
                let v = a_scale * fs.a[(k, mu)] * fs.dw[(k, mu)];
                ad[(k, t * p + mu)] = v;
                ma[(mu, t)] += inv_e * v;
            }
        }
    }
    let maa = gram(&ad, inv_e);
    let sfx = if tilde_alignment { "t" } else { "" };
    let sym = |m: DMatrix<f64>| 0.5 * (&m + m.transpose());
    Mixtures {
        phi: frames.kernel("MPhi", sym(mphi)),
        psi: frames.kernel("MPsi", sym(mpsi)),
        a: OneTimeMixture { tag: format!("MA{sfx}"), times: frames.times.clone(), vals: ma },
        aa: frames.kernel(&format!("MAA{sfx}"), maa),
    }
}

/// Global field vector of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaFields {
    pub h0: TwoTimeKernel,
    pub h3: TwoTimeKernel,
    pub g: TwoTimeKernel,
    pub m_phi: TwoTimeKernel,
    pub m_a: OneTimeMixture,
    pub m_aa: TwoTimeKernel,
    /// Training signal, P×nt.
    pub delta: DMatrix<f64>,
}

/// All global fields. `tilde` selects `G̃` and `Ã` over `G` and `A`.
pub fn gamma_fields(frames: &Frames, tilde: bool) -> GammaFields {
    let (h0, h3, g) = global_kernels(frames, tilde);
    let mx = mixture_kernels(frames, tilde);
    let delta = DMatrix::from_fn(frames.p(), frames.times.len(), |mu, t| frames.fields[t].drive[mu]);
    GammaFields { h0, h3, g, m_phi: mx.phi, m_a: mx.a, m_aa: mx.aa, delta }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{run_trajectory, LearningRates, TrainConfig};
    use crate::kernels::KernelGrid;
    use crate::model::{Activations, Dataset, GateMode, LossKind, ModelDims, ParamState};

    fn trace(e: usize) -> Trace {
        let dims = ModelDims::new(2, 6, e, 4, 3).with_steps(5, 0.05);
        let model = Model::new(dims, Activations::default(), GateMode::Soft).unwrap();
        run_trajectory(&TrainConfig::new(model, Dataset::probe_task(2, 3, 1), LearningRates::uniform(1.0))).unwrap()
    }

    #[test]
    fn ones_give_unit_h0() {
        let dims = ModelDims::new(1, 3, 1, 1, 2);
        let model = Model::new(dims.clone(), Activations::identity(), GateMode::Soft).unwrap();
        let data = Dataset::from_rows(&[vec![1.0], vec![1.0]], &[0.0, 0.0]).unwrap();
        let mut ps = ParamState::zeros(&dims);
        ps.w0.fill(1.0);
        let fs = model.evaluate(&ps, &data, &LossKind::HalfMse).unwrap();
        let frames = Frames::new(&model, vec![0, 1], vec![&fs, &fs]).unwrap();
        let (h0, _, _) = global_kernels(&frames, false);
        assert!(h0.mat.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn gtilde_is_n_squared_g() {
        let t = trace(3);
        let fr = Frames::from_trace(&t, &KernelGrid::default()).unwrap();
        let (_, _, g) = global_kernels(&fr, false);
        let (_, _, gt) = global_kernels(&fr, true);
        let n2 = 36.0;
        for (a, b) in g.mat.iter().zip(gt.mat.iter()) {
            assert!((a * n2 - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn equal_time_phi1_matches_brute_gram() {
        let t = trace(3);
        let fr = Frames::from_trace(&t, &KernelGrid::default()).unwrap();
        let (phi1, _) = expert_kernels(&fr, 1).unwrap();
        let fs = t.fields(0).unwrap();
        let pu = &fs.phi_u[1];
        for mu in 0..3 {
            for nu in 0..3 {
                let brute: f64 = (0..4).map(|a| pu[(a, mu)] * pu[(a, nu)]).sum::<f64>() / 4.0;
                assert!((phi1.get(mu, nu, 0, 0) - brute).abs() < 1e-12);
            }
        }
        assert!(expert_kernels(&fr, 3).is_err());
    }

    #[test]
    fn kernels_are_symmetric_and_psd() {
        let t = trace(3);
        let fr = Frames::from_trace(&t, &KernelGrid::default()).unwrap();
        let (h0, h3, g) = global_kernels(&fr, true);
        let (phi1, psi) = expert_kernels(&fr, 0).unwrap();
        let mx = mixture_kernels(&fr, true);
        for k in [&h0, &h3, &g, &phi1, &psi, &mx.phi, &mx.psi, &mx.aa] {
            assert!(k.symmetry_error() <= 1e-12, "{}", k.tag);
        }
        for k in [&h0, &h3, &g, &phi1] {
            assert!(k.min_equal_time_eigenvalue() >= -1e-10, "{}", k.tag);
        }
    }

    #[test]
    fn h3_diagonal_matches_fields() {
        let t = trace(2);
        let fr = Frames::from_trace(&t, &KernelGrid::default()).unwrap();
        let (_, h3, _) = global_kernels(&fr, false);
        for (i, &n) in h3.times.iter().enumerate() {
            let fs = t.fields(n).unwrap();
            for mu in 0..3 {
                let direct = fs.h3.column(mu).iter().map(|v| v.tanh().powi(2)).sum::<f64>() / 6.0;
                assert!((h3.get(mu, mu, i, i) - direct).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mixture_equals_external_assembly() {
        let t = trace(3);
        let fr = Frames::from_trace(&t, &KernelGrid::default()).unwrap();
        let mx = mixture_kernels(&fr, false);
        let p = 3;
        let dim = p * fr.times.len();
        let mut manual = DMatrix::zeros(dim, dim);
        for k in 0..3 {
            let (phi1, _) = expert_kernels(&fr, k).unwrap();
            for r in 0..dim {
                for c in 0..dim {
                    let wr = fr.fields[r / p].w[(k, r % p)];
                    let wc = fr.fields[c / p].w[(k, c % p)];
                    manual[(r, c)] += wr * wc * phi1.mat[(r, c)] / 3.0;
                }
            }
        }
        assert!((&manual - &mx.phi.mat).amax() < 1e-12);
    }

    fn hand_fields(e: usize, w: f64, phi_u: f64, a: f64, dw: f64) -> (Model, FieldState) {
        let dims = ModelDims::new(1, 1, e, 1, 1);
        let model = Model::new(dims.clone(), Activations::identity(), GateMode::Soft).unwrap();
        let data = Dataset::from_rows(&[vec![1.0]], &[0.0]).unwrap();
        let mut fs = model.evaluate(&ParamState::zeros(&dims), &data, &LossKind::HalfMse).unwrap();
        fs.w.fill(w);
        fs.phi_u.iter_mut().for_each(|m| m.fill(phi_u));
        fs.a.fill(a);
        fs.dw.fill(dw);
        (model, fs)
    }

    #[test]
    fn single_expert_product() {
        let (model, fs) = hand_fields(1, 2.0, 3f64.sqrt(), 1.0, 0.0);
        let fr = Frames::new(&model, vec![0, 1], vec![&fs, &fs]).unwrap();
        let mx = mixture_kernels(&fr, false);
        assert!(mx.phi.mat.iter().all(|&v| (v - 12.0).abs() < 1e-12));
        assert!(mx.a.vals.iter().all(|&v| v == 0.0));
        assert!(mx.aa.mat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_experts_by_hand() {
        let (model, mut fs) = hand_fields(2, 1.0, 1.0, 1.0, 1.0);
        fs.w[(0, 0)] = 2.0;
        fs.w[(1, 0)] = 0.5;
        fs.phi_u[0].fill(1.0);
        fs.phi_u[1].fill(2.0);
        fs.a[(0, 0)] = 0.3;
        fs.a[(1, 0)] = -0.1;
        fs.dw[(0, 0)] = 0.5;
        fs.dw[(1, 0)] = 2.0;
        let fr = Frames::new(&model, vec![0], vec![&fs]).unwrap();
        let mx = mixture_kernels(&fr, false);
        let phi = (4.0 * 1.0 + 0.25 * 4.0) / 2.0;
        assert!((mx.phi.get(0, 0, 0, 0) - phi).abs() < 1e-15);
        let (x0, x1) = (0.3 * 0.5, -0.1 * 2.0);
        assert!((mx.a.get(0, 0) - (x0 + x1) / 2.0).abs() < 1e-15);
        assert!((mx.aa.get(0, 0, 0, 0) - (x0 * x0 + x1 * x1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn frames_need_backward_fields() {
        let dims = ModelDims::new(1, 2, 1, 1, 1);
        let model = Model::new(dims.clone(), Activations::identity(), GateMode::Soft).unwrap();
        let data = Dataset::from_rows(&[vec![1.0]], &[0.0]).unwrap();
        let fs = model.forward(&ParamState::zeros(&dims), &data).unwrap();
        assert!(Frames::new(&model, vec![0], vec![&fs]).is_err());
        assert!(Frames::new(&model, vec![], vec![]).is_err());
    }
}
