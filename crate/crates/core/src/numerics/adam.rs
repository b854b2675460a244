use serde::{Deserialize, Serialize};

use super::{NumericsError, Result};

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    let n = params.len();
    for (what, len) in [
        ("grads", grads.len()),
        ("first_moment", state.first_moment.len()),
        ("second_moment", state.second_moment.len()),
    ] {
        if len != n {
            return Err(NumericsError::LengthMismatch {
                what,
                got: len,
                expected: n,
            });
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NumericsError::NonFinite { op: "adam_step" });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    for i in 0..n {
        let g = grads[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![0.5, -2.0, 3.0];
        let g = vec![4.0, -0.01, 250.0];
        let mut s = AdamState::new(3, 1e-3);
        s.epsilon = 0.0;
        adam_step(&mut p, &g, &mut s).unwrap();
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 1e-3)).abs() < 1e-15);
        assert!((p[2] - (3.0 - 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2, 0.1);
        s.first_moment = vec![0.5, -0.5];
        s.second_moment = vec![0.25, 0.25];
        s.step_count = 3;
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(s.step_count, 4);
        assert!((s.first_moment[0] - 0.45).abs() < 1e-15);
        assert!((s.second_moment[1] - 0.24975).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2, 0.0);
        adam_step(&mut p, &[3.0, -1.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn fresh_state_zero_gradient_is_identity() {
        let mut p = vec![1.0, -7.5];
        let mut s = AdamState::new(2, 0.1);
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -7.5]);
        assert_eq!(s.step_count, 1);
        assert_eq!(s.first_moment, vec![0.0, 0.0]);
    }

    #[test]
    fn two_steps_on_square_match_hand_recurrence() {
        // f(theta) = theta^2, theta0 = 1, lr = 0.1.
        // step 1: g = 2, m = 0.2, v = 0.004, m_hat = 2, v_hat = 4 -> theta = 1 - 0.1 * 2 / (2 + 1e-8)
        let th1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        // step 2: g = 2 * th1
        let g2 = 2.0 * th1;
        let m2 = 0.9 * 0.2 + 0.1 * g2;
        let v2 = 0.999 * 0.004 + 0.001 * g2 * g2;
        let m_hat = m2 / (1.0 - 0.81);
        let v_hat = v2 / (1.0 - 0.999f64 * 0.999);
        let th2 = th1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);

        let mut p = vec![1.0];
        let mut s = AdamState::new(1, 0.1);
        let g = 2.0 * p[0];
        adam_step(&mut p, &[g], &mut s).unwrap();
        assert!((p[0] - th1).abs() < 1e-12);
        let g = 2.0 * p[0];
        adam_step(&mut p, &[g], &mut s).unwrap();
        assert!((p[0] - th2).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_and_nan_rejected() {
        let mut s = AdamState::new(2, 0.1);
        assert!(adam_step(&mut [0.0, 0.0], &[1.0], &mut s).is_err());
        assert!(matches!(
            adam_step(&mut [0.0, 0.0], &[1.0, f64::NAN], &mut s),
            Err(NumericsError::NonFinite { .. })
        ));
        assert_eq!(s.step_count, 0);
    }
}
