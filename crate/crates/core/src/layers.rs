//! Fused kernels used by the encoder: per-feature tokenizer and single-head
//! self-attention over feature tokens.

use crate::error::{MathError, MathResult};
use crate::exec;
use crate::graph::Kernel;
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

/// `x (n×F), w (F×k), b (F×k) → tokens (n×F×k)` with
/// `tokens[i,f] = x[i,f]·w[f] + b[f]`.
pub struct Tokenize;

impl Kernel for Tokenize {
    fn name(&self) -> &'static str {
        "tokenize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> MathResult<(Tensor, Vec<Vec<f64>>)> {
        let [x, w, b] = inputs else {
            return Err(MathError::Usage("tokenize takes x, w, b".into()));
        };
        let (n, nf) = x.dims2()?;
        let (wf, k) = w.dims2()?;
        if wf != nf || b.shape() != w.shape() {
            return Err(MathError::Dimension(format!(
                "tokenize: x {:?}, w {:?}, b {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; n * nf * k];
        for i in 0..n {
            for f in 0..nf {
                let xv = x.data()[i * nf + f];
                let o = &mut out[(i * nf + f) * k..(i * nf + f + 1) * k];
                for j in 0..k {
                    o[j] = xv * w.data()[f * k + j] + b.data()[f * k + j];
                }
            }
        }
        Ok((Tensor::new(vec![n, nf, k], out)?, Vec::new()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _saved: &[Vec<f64>],
        grad: &[f64],
    ) -> MathResult<Vec<Option<Vec<f64>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, nf) = x.dims2()?;
        let k = w.shape()[1];
        let mut gx = vec![0.0; n * nf];
        let mut gw = vec![0.0; nf * k];
        let mut gb = vec![0.0; nf * k];
        for i in 0..n {
            for f in 0..nf {
                let xv = x.data()[i * nf + f];
                let g = &grad[(i * nf + f) * k..(i * nf + f + 1) * k];
                let mut acc = 0.0;
                for j in 0..k {
                    acc += g[j] * w.data()[f * k + j];
                    gw[f * k + j] += g[j] * xv;
                    gb[f * k + j] += g[j];
                }
                gx[i * nf + f] = acc;
            }
        }
        Ok(vec![Some(gx), Some(gw), Some(gb)])
    }
}

/// Single-head scaled dot-product self-attention applied independently to
/// every row: `tokens (n×F×k), Wq, Wk, Wv, Wo (k×k) → n×F×k`, computing
/// `softmax(Q·Kᵀ/√k)·V·Wo` with `Q = T·Wq`, `K = T·Wk`, `V = T·Wv`.
///
/// The attention weights are kept for the adjoint.
pub struct SelfAttention;

/// Per-row saved block: `[attn F×F | q | k | v | o | out]`, the last five
/// F×k each.
fn row_stride(nf: usize, k: usize) -> usize {
    nf * nf + 5 * nf * k
}

fn attention_row(t: &[f64], w: [&[f64]; 4], nf: usize, k: usize, block: &mut [f64]) {
    let (attn, rest) = block.split_at_mut(nf * nf);
    let (q, rest) = rest.split_at_mut(nf * k);
    let (kk, rest) = rest.split_at_mut(nf * k);
    let (v, rest) = rest.split_at_mut(nf * k);
    let (o, out) = rest.split_at_mut(nf * k);
    q.copy_from_slice(&matmul_raw(t, w[0], nf, k, k));
    kk.copy_from_slice(&matmul_raw(t, w[1], nf, k, k));
    v.copy_from_slice(&matmul_raw(t, w[2], nf, k, k));
    let scale = 1.0 / (k as f64).sqrt();
    for i in 0..nf {
        let qi = &q[i * k..(i + 1) * k];
        let row = &mut attn[i * nf..(i + 1) * nf];
        let mut max = f64::NEG_INFINITY;
        for (s, kj) in row.iter_mut().zip(kk.chunks_exact(k)) {
            *s = scale * dot(qi, kj);
            if *s > max {
                max = *s;
            }
        }
        // softmax fused with the value average
        let oi = &mut o[i * k..(i + 1) * k];
        oi.iter_mut().for_each(|x| *x = 0.0);
        let mut total = 0.0;
        for (s, vj) in row.iter_mut().zip(v.chunks_exact(k)) {
            *s = (*s - max).exp();
            total += *s;
            for (x, y) in oi.iter_mut().zip(vj) {
                *x += *s * y;
            }
        }
        let inv = 1.0 / total;
        row.iter_mut().for_each(|s| *s *= inv);
        oi.iter_mut().for_each(|x| *x *= inv);
    }
    out.copy_from_slice(&matmul_raw(o, w[3], nf, k, k));
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SelfAttention {
    fn dims(inputs: &[&Tensor]) -> MathResult<(usize, usize, usize)> {
        if inputs.len() != 5 {
            return Err(MathError::Usage("attention takes tokens, Wq, Wk, Wv, Wo".into()));
        }
        let &[n, nf, k] = inputs[0].shape() else {
            return Err(MathError::Dimension(format!(
                "attention tokens must be n×F×k, got {:?}",
                inputs[0].shape()
            )));
        };
        for w in &inputs[1..] {
            if w.shape() != [k, k] {
                return Err(MathError::Dimension(format!(
                    "attention weight {:?} for token width {k}",
                    w.shape()
                )));
            }
        }
        Ok((n, nf, k))
    }
}

impl Kernel for SelfAttention {
    fn name(&self) -> &'static str {
        "self_attention"
    }

    fn forward(&self, inputs: &[&Tensor]) -> MathResult<(Tensor, Vec<Vec<f64>>)> {
        let (n, nf, k) = Self::dims(inputs)?;
        let t = inputs[0].data();
        let w = [
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        ];
        let stride = row_stride(nf, k);
        let mut saved = vec![0.0; n * stride];
        exec::for_each_chunk(&mut saved, stride, |i, block| {
            attention_row(&t[i * nf * k..(i + 1) * nf * k], w, nf, k, block);
        });
        let mut out = Vec::with_capacity(n * nf * k);
        for block in saved.chunks_exact(stride) {
            out.extend_from_slice(&block[stride - nf * k..]);
        }
        Ok((Tensor::new(vec![n, nf, k], out)?, vec![saved]))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        saved: &[Vec<f64>],
        grad: &[f64],
    ) -> MathResult<Vec<Option<Vec<f64>>>> {
        let (n, nf, k) = Self::dims(inputs)?;
        let t = inputs[0].data();
        let (wq, wk, wv, wo) = (
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let [saved] = saved else {
            return Err(MathError::Usage("attention adjoint lost its buffers".into()));
        };
        let stride = row_stride(nf, k);
        let scale = 1.0 / (k as f64).sqrt();
        let per_row = exec::map_indexed(n, |i| {
            let tk = i * nf * k..(i + 1) * nf * k;
            let block = &saved[i * stride..(i + 1) * stride];
            let (a, rest) = block.split_at(nf * nf);
            let part = |p: usize| &rest[p * nf * k..(p + 1) * nf * k];
            let (ti, qi, ki, vi, oi) = (&t[tk.clone()], part(0), part(1), part(2), part(3));
            let dy = &grad[tk];
            let d_wo = matmul_tn_raw(oi, dy, nf, k, k);
            let d_o = matmul_nt_raw(dy, wo, nf, k, k);
            let mut d_q = vec![0.0; nf * k];
            let mut d_k = vec![0.0; nf * k];
            let mut d_v = vec![0.0; nf * k];
            let mut ds = vec![0.0; nf];
            for r in 0..nf {
                let a_row = &a[r * nf..(r + 1) * nf];
                let dor = &d_o[r * k..(r + 1) * k];
                let mut weighted = 0.0;
                for (j, (d, vj)) in ds.iter_mut().zip(vi.chunks_exact(k)).enumerate() {
                    *d = dot(dor, vj);
                    weighted += a_row[j] * *d;
                    for (x, y) in d_v[j * k..(j + 1) * k].iter_mut().zip(dor) {
                        *x += a_row[j] * y;
                    }
                }
                let qr = &qi[r * k..(r + 1) * k];
                let dqr = &mut d_q[r * k..(r + 1) * k];
                for j in 0..nf {
                    let gs = a_row[j] * (ds[j] - weighted) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    let kj = &ki[j * k..(j + 1) * k];
                    for t in 0..k {
                        dqr[t] += gs * kj[t];
                        d_k[j * k + t] += gs * qr[t];
                    }
                }
            }
            let d_wq = matmul_tn_raw(ti, &d_q, nf, k, k);
            let d_wk = matmul_tn_raw(ti, &d_k, nf, k, k);
            let d_wv = matmul_tn_raw(ti, &d_v, nf, k, k);
            let mut d_t = matmul_nt_raw(&d_q, wq, nf, k, k);
            let from_k = matmul_nt_raw(&d_k, wk, nf, k, k);
            let from_v = matmul_nt_raw(&d_v, wv, nf, k, k);
            for ((x, y), z) in d_t.iter_mut().zip(from_k).zip(from_v) {
                *x += y + z;
            }
            (d_t, [d_wq, d_wk, d_wv, d_wo])
        });
        let mut d_tokens = Vec::with_capacity(n * nf * k);
        let mut d_w = vec![vec![0.0; k * k]; 4];
        for (d_t, dws) in per_row {
            d_tokens.extend_from_slice(&d_t);
            for (acc, dw) in d_w.iter_mut().zip(dws) {
                acc.iter_mut().zip(dw).for_each(|(a, b)| *a += b);
            }
        }
        let mut out = vec![Some(d_tokens)];
        out.extend(d_w.into_iter().map(Some));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check_many;
    use crate::graph::Graph;
    use std::sync::Arc;

    fn seq(shape: &[usize], start: f64, step: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| start + step * ((i * 7 % 11) as f64 - 5.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn token_is_affine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let w = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let t = g.custom(Arc::new(Tokenize), &[x, w, b]).unwrap();
        assert_eq!(g.value(t).data(), &[3.0, 1.0]);
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let t = seq(&[2, 5, 2], 0.1, 0.3);
        let w = seq(&[2, 2], 0.2, 0.1);
        let (_, saved) = SelfAttention
            .forward(&[&t, &w, &w, &w, &w])
            .unwrap();
        let stride = row_stride(5, 2);
        for block in saved[0].chunks(stride) {
            for row in block[..25].chunks(5) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tokenize_gradients_match_finite_differences() {
        let params = [seq(&[3, 4], 0.5, 0.2), seq(&[4, 2], 0.1, 0.3), seq(&[4, 2], -0.2, 0.1)];
        let r = gradient_check_many(
            |g, p| {
                let t = g.custom(Arc::new(Tokenize), p)?;
                let s = g.sigmoid(t)?;
                g.sum(s)
            },
            &params,
            1e-5,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let params = [
            seq(&[2, 6, 2], 0.3, 0.4),
            seq(&[2, 2], 0.2, 0.3),
            seq(&[2, 2], -0.1, 0.25),
            seq(&[2, 2], 0.4, 0.2),
            seq(&[2, 2], 0.1, 0.35),
        ];
        let r = gradient_check_many(
            |g, p| {
                let y = g.custom(Arc::new(SelfAttention), p)?;
                let s = g.tanh(y)?;
                g.sum(s)
            },
            &params,
            1e-5,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }
}
