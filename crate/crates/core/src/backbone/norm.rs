//! Per-channel batch normalization over `[batch, channels, h, w]` activations.

use crate::scalar::Scalar;

/// Normalization parameters and running statistics for one conv block.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationState<F> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub scale: Vec<F>,
    pub shift: Vec<F>,
    pub momentum: F,
    pub eps: F,
    pub frozen: bool,
}

/// Whether normalization uses the current batch or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Running,
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct NormTape<F> {
    pub mode: NormMode,
    pub normalized: Vec<F>,
    pub inv_std: Vec<F>,
    pub batch_mean: Vec<F>,
    /// Unbiased batch variance (what the running estimate tracks).
    pub batch_var_unbiased: Vec<F>,
}

impl<F: Scalar> NormalizationState<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            scale: vec![F::one(); channels],
            shift: vec![F::zero(); channels],
            momentum: F::of(0.1),
            eps: F::of(1e-5),
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Exact bitwise comparison of every field.
    pub fn bit_eq(&self, other: &Self) -> bool {
        fn same<F: Scalar>(a: &[F], b: &[F]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        }
        same(&self.running_mean, &other.running_mean)
            && same(&self.running_var, &other.running_var)
            && same(&self.scale, &other.scale)
            && same(&self.shift, &other.shift)
            && self.frozen == other.frozen
    }

    pub fn forward(&self, x: &[F], batch: usize, spatial: usize, mode: NormMode) -> (Vec<F>, NormTape<F>) {
        let c = self.channels();
        let count = batch * spatial;
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        let mut var_unbiased = vec![F::zero(); c];
        if mode == NormMode::Batch {
            let inv_n = F::one() / F::of(count as f64);
            for ch in 0..c {
                let mut sum = F::zero();
                for n in 0..batch {
                    let base = (n * c + ch) * spatial;
                    sum += x[base..base + spatial].iter().copied().sum::<F>();
                }
                let m = sum * inv_n;
                let mut sq = F::zero();
                for n in 0..batch {
                    let base = (n * c + ch) * spatial;
                    for &v in &x[base..base + spatial] {
                        sq += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = sq * inv_n;
                var_unbiased[ch] = if count > 1 { sq / F::of((count - 1) as f64) } else { F::zero() };
            }
        } else {
            mean.clone_from(&self.running_mean);
            var.clone_from(&self.running_var);
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + self.eps).sqrt()).collect();
        let mut normalized = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        for n in 0..batch {
            for ch in 0..c {
                let base = (n * c + ch) * spatial;
                for i in base..base + spatial {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = h;
                    out[i] = self.scale[ch] * h + self.shift[ch];
                }
            }
        }
        (
            out,
            NormTape {
                mode,
                normalized,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
            },
        )
    }

    /// Returns (grad_input, grad_scale, grad_shift).
    pub fn backward(&self, tape: &NormTape<F>, grad_out: &[F], batch: usize, spatial: usize) -> (Vec<F>, Vec<F>, Vec<F>) {
        let c = self.channels();
        let mut g_scale = vec![F::zero(); c];
        let mut g_shift = vec![F::zero(); c];
        for n in 0..batch {
            for ch in 0..c {
                let base = (n * c + ch) * spatial;
                for i in base..base + spatial {
                    g_scale[ch] += grad_out[i] * tape.normalized[i];
                    g_shift[ch] += grad_out[i];
                }
            }
        }
        let mut g_in = vec![F::zero(); grad_out.len()];
        let count = F::of((batch * spatial) as f64);
        for n in 0..batch {
            for ch in 0..c {
                let base = (n * c + ch) * spatial;
                let k = self.scale[ch] * tape.inv_std[ch];
                for i in base..base + spatial {
                    g_in[i] = match tape.mode {
                        NormMode::Running => k * grad_out[i],
                        // d/dx of (x - mean)/std with batch mean and std depending on x.
                        NormMode::Batch => {
                            k * (grad_out[i] - (g_shift[ch] + tape.normalized[i] * g_scale[ch]) / count)
                        }
                    };
                }
            }
        }
        (g_in, g_scale, g_shift)
    }

    /// Folds the batch statistics of one forward pass into the running estimates.
    /// No-op when frozen.
    pub fn absorb(&mut self, tape: &NormTape<F>) {
        if self.frozen || tape.mode != NormMode::Batch {
            return;
        }
        let keep = F::one() - self.momentum;
        for ch in 0..self.channels() {
            self.running_mean[ch] = keep * self.running_mean[ch] + self.momentum * tape.batch_mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + self.momentum * tape.batch_var_unbiased[ch];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_mode_normalizes_each_channel() {
        let bn = NormalizationState::<f64>::new(2);
        // batch 2, 2 channels, 2 spatial
        let x = [1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 20.0];
        let (y, tape) = bn.forward(&x, 2, 2, NormMode::Batch);
        assert!((tape.batch_mean[0] - 4.0).abs() < 1e-12);
        assert!((tape.batch_mean[1] - 15.0).abs() < 1e-12);
        let ch0: f64 = [y[0], y[1], y[4], y[5]].iter().sum();
        assert!(ch0.abs() < 1e-9);
    }

    #[test]
    fn frozen_state_ignores_absorb() {
        let mut bn = NormalizationState::<f32>::new(1);
        bn.frozen = true;
        let before = bn.clone();
        let (_, tape) = bn.forward(&[1.0, 2.0, 3.0], 3, 1, NormMode::Batch);
        bn.absorb(&tape);
        assert!(bn.bit_eq(&before));
    }

    #[test]
    fn batch_backward_matches_finite_differences() {
        let mut bn = NormalizationState::<f64>::new(1);
        bn.scale[0] = 1.7;
        bn.shift[0] = -0.3;
        let x = [0.3, -1.2, 2.5, 0.9];
        let weights = [0.5, -1.0, 2.0, 0.25];
        let loss = |x: &[f64]| -> f64 {
            let (y, _) = bn.forward(x, 4, 1, NormMode::Batch);
            y.iter().zip(weights).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = bn.forward(&x, 4, 1, NormMode::Batch);
        let (gx, _, _) = bn.backward(&tape, &weights, 4, 1);
        for i in 0..4 {
            let mut p = x;
            let mut m = x;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - gx[i]).abs() < 1e-6, "{i}: {fd} vs {}", gx[i]);
        }
    }
}
