use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch.
///
/// Returns (loss, dL/dlogits, number of correct top-1 predictions).
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> (f64, Tensor<F>, usize) {
    let batch = labels.len();
    let k = logits.len() / batch.max(1);
    let mut grad = Vec::with_capacity(logits.len());
    let mut loss = 0.0;
    let mut correct = 0;
    let inv_b = F::one() / F::of(batch as f64);
    for (n, &y) in labels.iter().enumerate() {
        let row = &logits.data()[n * k..(n + 1) * k];
        if argmax(row) == y {
            correct += 1;
        }
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: F = exps.iter().copied().sum();
        loss += (sum.ln() + max - row[y]).as_f64();
        for (j, e) in exps.into_iter().enumerate() {
            let p = e / sum;
            let target = if j == y { F::one() } else { F::zero() };
            grad.push((p - target) * inv_b);
        }
    }
    (
        loss / batch.max(1) as f64,
        Tensor::from_vec(logits.shape().to_vec(), grad).expect("same shape as logits"),
        correct,
    )
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
