use super::mask::SegmentMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Projections of one attention head: queries come from the music features,
/// keys and values from the condition.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `d_model x d_key`
    pub wq: Tensor,
    /// `d_cond x d_key`
    pub wk: Tensor,
    /// `d_cond x d_val`
    pub wv: Tensor,
    /// `d_val x d_model`
    pub wo: Tensor,
}

impl AttentionParams {
    fn check(&self, d_model: usize, d_cond: usize) -> Result<(usize, usize)> {
        let (qm, dk) = self.wq.dims2()?;
        let (kc, kk) = self.wk.dims2()?;
        let (vc, dv) = self.wv.dims2()?;
        let (ov, om) = self.wo.dims2()?;
        if qm != d_model || om != d_model || kc != d_cond || vc != d_cond || kk != dk || ov != dv {
            return Err(Error::Shape(format!(
                "attention params {:?}/{:?}/{:?}/{:?} do not fit d_model {d_model}, d_cond {d_cond}",
                self.wq.shape(),
                self.wk.shape(),
                self.wv.shape(),
                self.wo.shape()
            )));
        }
        Ok((dk, dv))
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dims2().expect("matrix");
    let (_, m) = b.dims2().expect("matrix");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let x = a.data()[i * k + l];
            for j in 0..m {
                out[i * m + j] += x * b.data()[l * m + j];
            }
        }
    }
    Tensor::from_vec(&[n, m], out).expect("shape")
}

/// Row-softmax of the masked, scaled query-key logits. Masked entries get a
/// `-inf` logit and therefore weight exactly zero.
pub fn attention_weights(x: &Tensor, fc: &Tensor, params: &AttentionParams, mask: &SegmentMask) -> Result<Tensor> {
    let (len, d_model) = x.dims2()?;
    let (clen, d_cond) = fc.dims2()?;
    if len != clen || mask.size() != len {
        return Err(Error::Shape(format!(
            "sequence lengths differ: x {len}, condition {clen}, mask {}",
            mask.size()
        )));
    }
    let (dk, _) = params.check(d_model, d_cond)?;
    let q = matmul(x, &params.wq);
    let k = matmul(fc, &params.wk);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut w = vec![0.0; len * len];
    for i in 0..len {
        let row = &mut w[i * len..(i + 1) * len];
        for (j, z) in row.iter_mut().enumerate() {
            *z = if mask.allows(i, j) {
                q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale
            } else {
                f64::NEG_INFINITY
            };
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            total += *z;
        }
        for z in row.iter_mut() {
            *z /= total;
        }
    }
    Tensor::from_vec(&[len, len], w)
}

/// Segment-aware cross-attention: `x + softmax(mask(Q K^T / sqrt(d_key))) V W_o`
/// with `Q = x W_q`, `K = Fc W_k`, `V = Fc W_v`.
pub fn segment_cross_attention(
    x: &Tensor,
    fc: &Tensor,
    params: &AttentionParams,
    mask: &SegmentMask,
) -> Result<Tensor> {
    let w = attention_weights(x, fc, params, mask)?;
    let v = matmul(fc, &params.wv);
    let mixed = matmul(&matmul(&w, &v), &params.wo);
    let data = x.data().iter().zip(mixed.data()).map(|(a, b)| a + b).collect();
    Tensor::from_vec(x.shape(), data)
}
