use crate::scalar::Scalar;

/// Adam moments for one parameter tensor.
///
/// Positions flagged in `frozen` are skipped entirely: neither the value nor
/// its moments change, so a frozen weight cannot drift through stale state.
#[derive(Debug, Clone)]
pub struct AdamParam<F> {
    m: Vec<F>,
    v: Vec<F>,
    steps: i32,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper<F> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Scalar> Default for AdamHyper<F> {
    fn default() -> Self {
        Self {
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
        }
    }
}

impl<F: Scalar> AdamParam<F> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            steps: 0,
        }
    }

    pub fn step(&mut self, hp: &AdamHyper<F>, params: &mut [F], grads: &[F], frozen: Option<&[u8]>, lr: F) {
        self.steps += 1;
        let c1 = F::one() - hp.beta1.powi(self.steps);
        let c2 = F::one() - hp.beta2.powi(self.steps);
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i] != 0) {
                continue;
            }
            let g = grads[i];
            self.m[i] = hp.beta1 * self.m[i] + (F::one() - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (F::one() - hp.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
}
