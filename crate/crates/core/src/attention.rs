//! Reference scaled-dot-product attention with an additive bias.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// `Q Kᵀ / √d_k`.
pub fn scaled_logits(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::invalid(format!(
            "query width {} does not match key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    Ok(q.dot(&k.t()) * scale)
}

/// Numerically stable row-wise softmax, in place.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Post-softmax attention probabilities `softmax(Q Kᵀ / √d_k + bias)`.
pub fn attention_probs(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    bias: Option<ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    let mut logits = scaled_logits(q, k)?;
    if let Some(bias) = bias {
        if bias.dim() != logits.dim() {
            return Err(Error::invalid(format!(
                "bias shape {:?} does not match logits shape {:?}",
                bias.dim(),
                logits.dim()
            )));
        }
        logits += &bias;
    }
    softmax_rows(&mut logits);
    Ok(logits)
}

/// `softmax(Q Kᵀ / √d_k + bias) · V`.
pub fn biased_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    bias: Option<ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    if k.nrows() != v.nrows() {
        return Err(Error::invalid(format!(
            "{} keys but {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    Ok(attention_probs(q, k, bias)?.dot(&v))
}
