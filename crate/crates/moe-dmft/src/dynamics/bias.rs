use nalgebra::DVector;

/// Load-balancing bias update `b'_k = b_k − η Δt (Load_k − κ)`.
pub fn bias_balance_step(b: &DVector<f64>, loads: &DVector<f64>, kappa: f64, eta_bias: f64, dt: f64) -> DVector<f64> {
    DVector::from_fn(b.len(), |k, _| b[k] - eta_bias * dt * (loads[k] - kappa))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_load_example() {
        let b = DVector::zeros(4);
        let loads = DVector::from_vec(vec![0.5, 0.5, 0.0, 0.0]);
        let out = bias_balance_step(&b, &loads, 0.25, 1.0, 0.1);
        let want = [-0.025, -0.025, 0.025, 0.025];
        for k in 0..4 {
            assert!((out[k] - want[k]).abs() < 1e-16);
        }
    }

    #[test]
    fn balanced_loads_are_a_fixed_point() {
        let b = DVector::from_vec(vec![0.3, -1.2, 4.0]);
        let loads = DVector::from_element(3, 0.5);
        assert_eq!(bias_balance_step(&b, &loads, 0.5, 2.0, 0.3), b);
    }

    #[test]
    fn frozen_loads_give_linear_drift() {
        // With loads held fixed, bias differences move by exactly n·ηΔt·(ΔLoad).
        let mut b = DVector::from_vec(vec![0.0, 1.0]);
        let loads = DVector::from_vec(vec![0.9, 0.1]);
        let (eta, dt) = (0.5, 0.2);
        for n in 1..=50 {
            b = bias_balance_step(&b, &loads, 0.5, eta, dt);
            let diff = b[1] - b[0];
            let want = 1.0 + n as f64 * eta * dt * 0.8;
            assert!((diff - want).abs() < 1e-12);
        }
    }
}
