//! Adam with bias correction, over flat parameter buffers.

/// Per-parameter first/second moment buffers plus hyperparameters. Buffers are
/// aligned by position with the parameter list they were created for.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    /// Defaults beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(lr: f64, param_sizes: &[usize]) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `params[i]` and `grads[i]` must match the sizes given at
    /// construction; moment arithmetic runs in f64 and is stored back in f32.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count changed");
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), self.m[pi].len(), "parameter {pi} size changed");
            assert_eq!(g.len(), self.m[pi].len(), "gradient {pi} size changed");
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p[i] = (p[i] as f64 - self.lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut state = AdamState::new(1e-4, &[1]);
        let mut p = vec![1.0f32];
        state.step(&mut [&mut p], &[&[1.0]]);
        // Bias-corrected first step: lr·g/(sqrt(g²)+eps) ≈ lr, up to f32
        // quantization of the stored parameter.
        let moved = 1.0 - p[0] as f64;
        assert!((moved - 1e-4).abs() < 1e-7, "moved {moved}");
    }

    #[test]
    fn zero_grad_is_noop_on_values() {
        let mut state = AdamState::new(1e-3, &[3]);
        let mut p = vec![0.5f32, -0.25, 2.0];
        let orig = p.clone();
        state.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]);
        assert_eq!(p, orig);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn descends_quadratic() {
        // f(x) = x², grad = 2x, from x = 1.
        let mut state = AdamState::new(0.05, &[1]);
        let mut p = vec![1.0f32];
        for _ in 0..100 {
            let g = [2.0 * p[0]];
            state.step(&mut [&mut p], &[&g]);
        }
        assert!(p[0].abs() < 1.0, "|x| did not decrease: {}", p[0]);
    }
}
