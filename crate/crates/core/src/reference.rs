//! Naive f64 reference implementations used as independent test oracles.
//!
//! Everything here is written with plain index loops and deliberately shares
//! no code with the production paths it checks.

use crate::tensor::{Scalar, Tensor};

/// Single-loop multi-head attention over `[batch.., L, d]` operands.
pub fn naive_attention<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    heads: usize,
) -> Tensor<E> {
    let r = q.rank();
    let d = q.shape()[r - 1];
    let dv = v.shape()[r - 1];
    let lq = q.shape()[r - 2];
    let lk = k.shape()[r - 2];
    let dh = d / heads;
    let dvh = dv / heads;
    let batch: usize = q.shape()[..r - 2].iter().product();
    let qd: Vec<f64> = q.data().iter().map(|x| x.as_f64()).collect();
    let kd: Vec<f64> = k.data().iter().map(|x| x.as_f64()).collect();
    let vd: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
    let mut out = vec![0.0f64; batch * lq * dv];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..lq {
                // scores for query i against every key
                let mut scores = vec![0.0f64; lk];
                for (j, score) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        let qv = qd[b * lq * d + i * d + h * dh + c];
                        let kv = kd[b * lk * d + j * d + h * dh + c];
                        dot += qv * kv;
                    }
                    *score = dot / (dh as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut den = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    den += *s;
                }
                for j in 0..lk {
                    let w = scores[j] / den;
                    for c in 0..dvh {
                        out[b * lq * dv + i * dv + h * dvh + c] +=
                            w * vd[b * lk * dv + j * dv + h * dvh + c];
                    }
                }
            }
        }
    }
    let mut shape = q.shape()[..r - 2].to_vec();
    shape.push(lq);
    shape.push(dv);
    Tensor::new(shape, out.into_iter().map(E::from_f64).collect()).unwrap()
}
