use crate::error::{DressError, Result};
use crate::tensor::{Real, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(DressError::shape(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (b, c) = (logits.rows(), logits.row_len());
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(DressError::shape(format!("label {} outside {} classes", bad, c)));
    }
    let inv_b = T::one() / T::from_usize(b.max(1)).unwrap();
    let mut grad = vec![T::zero(); b * c];
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let g = &mut grad[i * c..(i + 1) * c];
        for (j, &v) in row.iter().enumerate() {
            g[j] = (v - log_z).exp() * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((total * inv_b, Tensor::from_vec(&[b, c], grad)?))
}
