//! Forward and backward kernels for the layer types the backbone uses.

use super::Matrix;
use crate::error::{Error, Result};

/// Mean of token embeddings per sequence, one row per sequence.
pub fn mean_pool_embed(embedding: &Matrix, batch: &[&[u32]]) -> Result<Matrix> {
    let vocab = embedding.rows();
    let d = embedding.cols();
    let mut out = Matrix::zeros(batch.len(), d);
    for (b, seq) in batch.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::Input(format!("sequence {b} is empty")));
        }
        let row = out.row_mut(b);
        for &tok in seq.iter() {
            if tok as usize >= vocab {
                return Err(Error::Input(format!(
                    "token {tok} in sequence {b} is out of range for vocabulary of {vocab}"
                )));
            }
            for (dst, v) in row.iter_mut().zip(embedding.row(tok as usize)) {
                *dst += v;
            }
        }
        let inv = 1.0 / seq.len() as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Accumulates the embedding gradient given the gradient of the pooled rows.
pub fn mean_pool_embed_backward(grad_pooled: &Matrix, batch: &[&[u32]], grad_embedding: &mut Matrix) {
    for (b, seq) in batch.iter().enumerate() {
        let inv = 1.0 / seq.len() as f64;
        let g = grad_pooled.row(b);
        for &tok in seq.iter() {
            for (dst, v) in grad_embedding.row_mut(tok as usize).iter_mut().zip(g) {
                *dst += v * inv;
            }
        }
    }
}

/// `x · w + b`
pub fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    y.add_row_vector(b)?;
    Ok(y)
}

pub struct LinearGrads {
    pub weight: Matrix,
    pub bias: Matrix,
    pub input: Option<Matrix>,
}

/// Gradients of `x · w + b` with respect to its weight, bias and, when
/// `need_input` is set, its input.
pub fn linear_backward(x: &Matrix, w: &Matrix, grad_out: &Matrix, need_input: bool) -> Result<LinearGrads> {
    Ok(LinearGrads {
        weight: x.t_matmul(grad_out)?,
        bias: grad_out.sum_rows(),
        input: if need_input {
            Some(grad_out.matmul_t(w)?)
        } else {
            None
        },
    })
}

pub fn tanh(x: &Matrix) -> Matrix {
    x.map(f64::tanh)
}

/// Gradient through `tanh`, given its output `y`.
pub fn tanh_backward(y: &Matrix, grad_out: &Matrix) -> Matrix {
    let mut g = grad_out.clone();
    for (d, v) in g.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *d *= 1.0 - v * v;
    }
    g
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for {n} rows", labels.len())));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Input(format!("label {label} out of range for {c} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.row_mut(i);
        for (j, v) in row.iter().enumerate() {
            g[j] = (v - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Matrix::zeros(3, 6);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 5]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_same_loss() {
        let logits = Matrix::from_rows(&[&[0.3, -1.0, 2.0], &[1.5, 0.2, -0.7]]);
        let doubled = Matrix::vstack(&[&logits, &logits]).unwrap();
        let (a, _) = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        let (b, _) = softmax_cross_entropy(&doubled, &[2, 0, 2, 0]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.1, 2.0, -1.0]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax(&[-1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn pooling_rejects_out_of_range() {
        let emb = Matrix::zeros(4, 2);
        let seq: &[u32] = &[1, 4];
        assert!(matches!(mean_pool_embed(&emb, &[seq]), Err(Error::Input(_))));
    }
}
