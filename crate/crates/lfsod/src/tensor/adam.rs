//! Adam optimizer state for one parameter tensor.

use super::TensorError;

/// First/second moment estimates plus the step counter. One instance per
/// parameter tensor; the caller keeps them aligned with its parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState { m: vec![0.0; numel], v: vec![0.0; numel], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update, in place. A non-finite gradient
    /// element rejects the whole step: parameters, moments and the step
    /// counter stay exactly as they were.
    pub fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64) -> Result<(), TensorError> {
        if param.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {}, grad {}, state {}", param.len(), grad.len(), self.m.len()),
            });
        }
        if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { what: format!("gradient element {pos}") });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            param[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_signed_lr() {
        // bias correction makes step one behave like -lr * g/|g|
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, 1.0, 1.0];
        st.step(&mut p, &[0.5, -2.0, 0.0], 0.1).unwrap();
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p[1] - (1.0 + 0.1)).abs() < 1e-6);
        assert_eq!(p[2], 1.0); // zero grad, zero move
        assert_eq!(st.steps_taken(), 1);
    }

    #[test]
    fn constant_gradient_keeps_unit_direction() {
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        for _ in 0..10 {
            st.step(&mut p, &[3.0], 0.01).unwrap();
        }
        // every step is close to -lr for a constant gradient
        assert!((p[0] + 0.1).abs() < 1e-3, "p = {}", p[0]);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut st = AdamState::new(2);
        let before = st.clone();
        let mut p = vec![1.0, 2.0];
        let err = st.step(&mut p, &[1.0, f64::NAN], 0.1).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st, before);
    }

    #[test]
    fn mismatched_lengths_error() {
        let mut st = AdamState::new(2);
        let mut p = vec![0.0; 3];
        assert!(st.step(&mut p, &[0.0; 3], 0.1).is_err());
    }

    #[test]
    fn steps_are_bit_deterministic() {
        let run = || {
            let mut st = AdamState::new(4);
            let mut p = vec![0.1, -0.2, 0.3, -0.4];
            for k in 0..25 {
                let g: Vec<f64> = p.iter().map(|v| v * 2.0 + k as f64 * 1e-3).collect();
                st.step(&mut p, &g, 0.05).unwrap();
            }
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
