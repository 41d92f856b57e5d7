use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// the logits. The loss is accumulated in 64-bit.
pub fn softmax_cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<(f64, Tensor<E>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Parameter(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = vec![E::zero(); n * k];
    let mut loss = 0.0;
    for (i, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.widen()));
        let exps: Vec<f64> = row.iter().map(|v| (v.widen() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[labels[i]].widen() - max);
        for (j, e) in exps.iter().enumerate() {
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            grad[i * k + j] = E::lit((e / z - target) / n as f64);
        }
    }
    Ok((loss / n as f64, Tensor::new(logits.shape(), grad)?))
}
