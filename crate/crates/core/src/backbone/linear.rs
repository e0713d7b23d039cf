use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fully connected layer; `weight` is `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Tensor<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.weight.bit_eq(&other.weight)
            && self.bias.len() == other.bias.len()
            && self
                .bias
                .iter()
                .zip(&other.bias)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// `out[n, o] = bias[o] + sum_i weight[o, i] * input[n, i]`.
pub fn linear_forward<F: Scalar>(input: &[F], batch: usize, weight: &[F], bias: &[F]) -> Vec<F> {
    let out_f = bias.len();
    let in_f = weight.len() / out_f;
    let mut out = Vec::with_capacity(batch * out_f);
    for n in 0..batch {
        let row = &input[n * in_f..(n + 1) * in_f];
        for o in 0..out_f {
            let w = &weight[o * in_f..(o + 1) * in_f];
            let acc = w.iter().zip(row).fold(bias[o], |acc, (&a, &b)| acc + a * b);
            out.push(acc);
        }
    }
    out
}

/// Returns (grad_weight, grad_bias, grad_input).
pub fn linear_backward<F: Scalar>(
    input: &[F],
    batch: usize,
    weight: &[F],
    grad_out: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let out_f = grad_out.len() / batch;
    let in_f = weight.len() / out_f;
    let mut gw = vec![F::zero(); weight.len()];
    let mut gb = vec![F::zero(); out_f];
    let mut gx = vec![F::zero(); input.len()];
    for n in 0..batch {
        let row = &input[n * in_f..(n + 1) * in_f];
        for o in 0..out_f {
            let go = grad_out[n * out_f + o];
            if go == F::zero() {
                continue;
            }
            gb[o] += go;
            for i in 0..in_f {
                gw[o * in_f + i] += go * row[i];
                gx[n * in_f + i] += go * weight[o * in_f + i];
            }
        }
    }
    (gw, gb, gx)
}
