use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, k] = logits.shape() else {
        return Err(Error::ShapeMismatch(format!("logits {:?}", logits.shape())));
    };
    let (n, k) = (*n, *k);
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} logits", labels.len())));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        if label >= k {
            return Err(Error::ShapeMismatch(format!("label {label} with {k} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - log_sum).exp();
            grad[i * k + j] = (p - f64::from(j == label)) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}
