//! Dense building blocks used outside the tape.

use super::params::{Grads, ParamId, ParamStore};
use super::NnError;

/// `y = x W + b` for a single row; `W` is `[in, out]`.
pub fn linear(store: &ParamStore, w: ParamId, b: ParamId, x: &[f64]) -> Result<Vec<f64>, NnError> {
    let shape = store.shape(w);
    if shape.len() != 2 || shape[0] != x.len() || store.value(b).len() != shape[1] {
        return Err(NnError::Shape(format!(
            "linear: input {} against weight {:?}",
            x.len(),
            shape
        )));
    }
    let out = shape[1];
    let wv = store.value(w);
    let mut y = store.value(b).to_vec();
    for (j, &xj) in x.iter().enumerate() {
        for (yk, wk) in y.iter_mut().zip(&wv[j * out..(j + 1) * out]) {
            *yk += xj * wk;
        }
    }
    Ok(y)
}

/// Accumulates weight and bias gradients of [`linear`] and returns `dL/dx`.
pub fn linear_backward(
    store: &ParamStore,
    w: ParamId,
    b: ParamId,
    x: &[f64],
    dy: &[f64],
    grads: &mut Grads,
) -> Vec<f64> {
    let out = dy.len();
    for (g, d) in grads.get_mut(b).iter_mut().zip(dy) {
        *g += d;
    }
    let gw = grads.get_mut(w);
    for (j, &xj) in x.iter().enumerate() {
        for (g, d) in gw[j * out..(j + 1) * out].iter_mut().zip(dy) {
            *g += xj * d;
        }
    }
    let wv = store.value(w);
    (0..x.len())
        .map(|j| wv[j * out..(j + 1) * out].iter().zip(dy).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter().zip(dy).map(|(x, d)| if *x > 0.0 { *d } else { 0.0 }).collect()
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Cross-entropy averaged over unmasked rows. `logits` is `rows × classes`.
/// Returns the loss and `dL/dlogits` (zero on masked rows).
pub fn masked_cross_entropy(
    logits: &[f64],
    classes: usize,
    labels: &[usize],
    mask: &[bool],
) -> Result<(f64, Vec<f64>), NnError> {
    let rows = labels.len();
    if logits.len() != rows * classes || mask.len() != rows {
        return Err(NnError::Shape(format!(
            "cross-entropy: {} logits for {rows} rows × {classes}",
            logits.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![0.0; logits.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let row = &logits[r * classes..(r + 1) * classes];
        if labels[r] >= classes {
            return Err(NnError::Shape(format!("label {} out of range", labels[r])));
        }
        let ls = log_softmax(row);
        loss -= ls[labels[r]];
        for c in 0..classes {
            let p = ls[c].exp();
            grad[r * classes + c] = (p - if c == labels[r] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0; 4]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -3.0, 2.5, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_form() {
        let (l, _) = masked_cross_entropy(&[3f64.ln(), 0.0], 2, &[0], &[true]).unwrap();
        assert!((l - (4.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_one_hot_has_zero_loss() {
        let (l, g) = masked_cross_entropy(&[0.0, 800.0, 800.0, 0.0], 2, &[1, 0], &[true, true]).unwrap();
        assert!(l.abs() < 1e-300 || l == 0.0);
        assert!(g.iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn masked_rows_ignored() {
        let (a, g) = masked_cross_entropy(&[1.0, 2.0, 50.0, -50.0], 2, &[0, 1], &[true, false]).unwrap();
        let (b, _) = masked_cross_entropy(&[1.0, 2.0], 2, &[0], &[true]).unwrap();
        assert_eq!(a, b);
        assert_eq!(&g[2..], &[0.0, 0.0]);
    }

    #[test]
    fn linear_shape_error() {
        let mut s = ParamStore::new();
        let w = s.add("w", &[3, 2], vec![0.0; 6]).unwrap();
        let b = s.add("b", &[2], vec![0.0; 2]).unwrap();
        assert!(linear(&s, w, b, &[1.0, 2.0]).is_err());
        assert_eq!(linear(&s, w, b, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }
}
