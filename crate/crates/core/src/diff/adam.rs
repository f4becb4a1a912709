//! Bias-corrected Adam.

use ndarray::Array2;

/// Optimizer hyperparameters; the learning rate is supplied per step.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment state aligned with a flat parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One in-place update over a flat view of the parameters; `grads` must be
/// index-aligned with `params` and the saved state.
pub fn adam_step(
    params: &mut [&mut Array2<f64>],
    grads: &[Array2<f64>],
    state: &mut AdamState,
    lr: f64,
    hp: AdamParams,
) {
    assert_eq!(params.len(), grads.len(), "param/grad arity mismatch");
    assert_eq!(params.len(), state.m.len(), "state arity mismatch");
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - hp.beta1.powf(t);
    let bc2 = 1.0 - hp.beta2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.dim(), g.dim(), "param/grad shape mismatch");
        m.zip_mut_with(g, |mv, &gv| *mv = hp.beta1 * *mv + (1.0 - hp.beta1) * gv);
        v.zip_mut_with(g, |vv, &gv| *vv = hp.beta2 * *vv + (1.0 - hp.beta2) * gv * gv);
        ndarray::Zip::from(&mut **p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
            let m_hat = mv / bc1;
            let v_hat = vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// From-scratch scalar Adam used as the oracle.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: u64,
    }

    impl ScalarAdam {
        fn step(&mut self, p: &mut f64, g: f64, lr: f64, hp: AdamParams) {
            self.t += 1;
            self.m = hp.beta1 * self.m + (1.0 - hp.beta1) * g;
            self.v = hp.beta2 * self.v + (1.0 - hp.beta2) * g * g;
            let m_hat = self.m / (1.0 - hp.beta1.powf(self.t as f64));
            let v_hat = self.v / (1.0 - hp.beta2.powf(self.t as f64));
            *p -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Array2::from_elem((2, 2), 1.5);
        let g = Array2::zeros((2, 2));
        let mut st = AdamState::new(&[(2, 2)]);
        adam_step(&mut [&mut p], &[g], &mut st, 1e-3, AdamParams::default());
        assert!(p.iter().all(|&v| v == 1.5));
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn matches_scalar_oracle_over_steps() {
        let hp = AdamParams::default();
        let mut p = Array2::from_elem((1, 1), 0.7);
        let mut st = AdamState::new(&[(1, 1)]);
        let mut oracle_p = 0.7;
        let mut oracle = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
        for _ in 0..2 {
            let g = Array2::from_elem((1, 1), 1.0);
            adam_step(&mut [&mut p], &[g], &mut st, 1e-3, hp);
            oracle.step(&mut oracle_p, 1.0, 1e-3, hp);
        }
        assert!((p[[0, 0]] - oracle_p).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        let hp = AdamParams::default();
        let mut p = Array2::from_elem((1, 1), 0.0);
        let mut st = AdamState::new(&[(1, 1)]);
        adam_step(&mut [&mut p], &[Array2::from_elem((1, 1), 1.0)], &mut st, 1e-3, hp);
        // First bias-corrected step is -lr * g / (|g| + eps') with eps' tiny.
        assert!((p[[0, 0]] + 1e-3).abs() < 1e-6, "delta {}", p[[0, 0]]);
    }
}
