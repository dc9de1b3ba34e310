use nalgebra::DMatrix;

use super::LearningRates;
use crate::error::{Error, Result};
use crate::model::{Dataset, FieldState, GateMode, Model, ParamState};

/// Gradient of the empirical risk, one array per parameter block.
///
/// Stored as `∇_θ 𝓛 = −⟨Δ_μ ∇_θ f_μ⟩`, so gradient flow reads `θ̇ = −η_θ ∇_θ 𝓛`.
pub type GradState = ParamState;

/// Exact per-block gradients from a completed forward/backward pass.
pub fn grad_blocks(model: &Model, ps: &ParamState, data: &Dataset, fs: &FieldState) -> Result<GradState> {
    if !fs.backward_done {
        return Err(Error::State("gradients need backward fields".into()));
    }
    let d = &model.dims;
    ps.check_shapes(d)?;
    let (n, e, np) = (d.n as f64, d.e as f64, d.p);
    let c: Vec<f64> = fs.drive.iter().map(|&v| v / np as f64).collect();
    let phi = &model.act.phi;
    let mut gr = ParamState::zeros(d);

    for mu in 0..np {
        for i in 0..d.n {
            gr.w3[i] -= c[mu] * phi.value(fs.h3[(i, mu)]) / n;
        }
    }

    let mut scaled_g = DMatrix::zeros(d.n, np);
    let mut scaled_delta = DMatrix::zeros(d.n_e, np);
    for k in 0..d.e {
        for mu in 0..np {
            let s = c[mu] * fs.w[(k, mu)];
            scaled_g.column_mut(mu).copy_from(&(fs.g.column(mu) * s));
            scaled_delta.column_mut(mu).copy_from(&(fs.delta[k].column(mu) * s));
        }
        gr.w2[k] = &scaled_g * fs.phi_u[k].transpose() * (-1.0 / (e * (d.n_e as f64).sqrt()));
        gr.w1[k] = &scaled_delta * fs.h0.transpose() * (-1.0 / (e * n.sqrt()));
    }

    let router = DMatrix::from_fn(d.e, np, |k, mu| c[mu] * fs.a[(k, mu)] * fs.dw[(k, mu)]);
    gr.r = router * fs.h0.transpose() * (-n.powf(1.0 - d.gamma) / e);

    if model.gate == GateMode::Soft {
        for k in 0..d.e {
            gr.b[k] = -(n / e) * (0..np).map(|mu| c[mu] * fs.a[(k, mu)]).sum::<f64>();
        }
    }

    let mut scaled_q = fs.q.clone();
    for mu in 0..np {
        scaled_q.column_mut(mu).scale_mut(c[mu]);
    }
    gr.w0 = scaled_q * data.x.transpose() * (-1.0 / (d.d as f64).sqrt());
    Ok(gr)
}

fn axpy_block(theta: &mut DMatrix<f64>, g: &DMatrix<f64>, s: f64) {
    if s != 0.0 {
        theta.zip_apply(g, |t, gv| *t -= s * gv);
    }
}

/// In-place explicit Euler step `θ ← θ − η_θ Δt ∇_θ 𝓛`.
pub fn apply_euler(ps: &mut ParamState, gr: &GradState, lrs: &LearningRates, dt: f64, step: usize) -> Result<()> {
    let eta = lrs.effective();
    axpy_block(&mut ps.w0, &gr.w0, eta[0] * dt);
    for k in 0..ps.w1.len() {
        axpy_block(&mut ps.w1[k], &gr.w1[k], eta[1] * dt);
        axpy_block(&mut ps.w2[k], &gr.w2[k], eta[2] * dt);
    }
    if eta[3] != 0.0 {
        ps.w3.axpy(-eta[3] * dt, &gr.w3, 1.0);
    }
    axpy_block(&mut ps.r, &gr.r, eta[4] * dt);
    if eta[5] != 0.0 {
        ps.b.axpy(-eta[5] * dt, &gr.b, 1.0);
    }
    if !ps.is_finite() {
        return Err(Error::Divergence { step, reason: "non-finite parameter after update".into() });
    }
    Ok(())
}

/// Euler step returning a new state.
pub fn euler_step(ps: &ParamState, gr: &GradState, lrs: &LearningRates, dt: f64, step: usize) -> Result<ParamState> {
    if !(dt > 0.0) {
        return Err(Error::config("dt must be positive"));
    }
    let mut out = ps.clone();
    apply_euler(&mut out, gr, lrs, dt, step)?;
    Ok(out)
}
