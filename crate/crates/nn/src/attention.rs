//! Multi-head scaled dot-product attention with a boolean key mask.
//!
//! Disallowed logits never enter the softmax: their probability is exactly
//! zero, so a masked key contributes nothing to the output or the gradient.

use crate::error::{shape_err, NnError, Result};
use crate::gemm::{gemm, Mat};
use crate::tensor::Tensor;

/// `allow[i * key_len + j]` is true when query `i` may attend to key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    query_len: usize,
    key_len: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(query_len: usize, key_len: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != query_len * key_len {
            return shape_err(
                "AttentionMask::new",
                format!("{} entries for {query_len}x{key_len}", allow.len()),
            );
        }
        for row in 0..query_len {
            if !allow[row * key_len..(row + 1) * key_len].iter().any(|&a| a) {
                return Err(NnError::EmptyMaskRow { row });
            }
        }
        Ok(Self {
            query_len,
            key_len,
            allow,
        })
    }

    pub fn full(query_len: usize, key_len: usize) -> Self {
        Self {
            query_len,
            key_len,
            allow: vec![true; query_len * key_len],
        }
    }

    /// Every query sees exactly the participating keys.
    pub fn from_key_participation(query_len: usize, keys: &[bool]) -> Result<Self> {
        let mut allow = Vec::with_capacity(query_len * keys.len());
        for _ in 0..query_len {
            allow.extend_from_slice(keys);
        }
        Self::new(query_len, keys.len(), allow)
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.key_len + k]
    }
}

/// Row offsets of one independent attention problem inside stacked Q/K/V.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub q_off: usize,
    pub k_off: usize,
    pub mask: AttentionMask,
}

pub(crate) fn blocks_for(masks: &[AttentionMask]) -> Vec<Block> {
    let mut q_off = 0;
    let mut k_off = 0;
    masks
        .iter()
        .map(|m| {
            let b = Block {
                q_off,
                k_off,
                mask: m.clone(),
            };
            q_off += m.query_len;
            k_off += m.key_len;
            b
        })
        .collect()
}

pub(crate) fn check_shapes(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, masks: &[AttentionMask]) -> Result<()> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 {
        return shape_err("attention", format!("dim {d} not divisible by {heads} heads"));
    }
    if k.cols() != d || v.cols() != d {
        return shape_err("attention", format!("q/k/v widths {d}/{}/{}", k.cols(), v.cols()));
    }
    if k.rows() != v.rows() {
        return shape_err("attention", "key and value row counts differ");
    }
    let nq: usize = masks.iter().map(|m| m.query_len).sum();
    let nk: usize = masks.iter().map(|m| m.key_len).sum();
    if nq != q.rows() || nk != k.rows() {
        return shape_err(
            "attention",
            format!("masks cover {nq}x{nk}, tensors are {}x{}", q.rows(), k.rows()),
        );
    }
    Ok(())
}

/// Returns the attention output and the per-block, per-head probabilities.
pub(crate) fn forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, blocks: &[Block]) -> (Tensor, Vec<Vec<f64>>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[q.rows(), d]);
    let mut all_probs = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (n, m) = (b.mask.query_len, b.mask.key_len);
        let mut probs = vec![0.0; heads * n * m];
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            let qa = Mat { data: q.data(), offset: b.q_off * d + h * dh, rs: d, cs: 1 };
            let kt = Mat { data: k.data(), offset: b.k_off * d + h * dh, rs: 1, cs: d };
            gemm(n, dh, m, scale, qa, kt, 0.0, p, 0, m, 1);
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                let allow = &b.mask.allow[i * m..(i + 1) * m];
                let mut mx = f64::NEG_INFINITY;
                for (&s, &a) in row.iter().zip(allow) {
                    if a && s > mx {
                        mx = s;
                    }
                }
                let mut z = 0.0;
                for (s, &a) in row.iter_mut().zip(allow) {
                    *s = if a { (*s - mx).exp() } else { 0.0 };
                    z += *s;
                }
                let inv = 1.0 / z;
                for s in row.iter_mut() {
                    *s *= inv;
                }
            }
            let pa = Mat::rm(p, m);
            let va = Mat { data: v.data(), offset: b.k_off * d + h * dh, rs: d, cs: 1 };
            gemm(n, m, dh, 1.0, pa, va, 0.0, out.data_mut(), b.q_off * d + h * dh, d, 1);
        }
        all_probs.push(probs);
    }
    (out, all_probs)
}

pub(crate) struct AttnGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    blocks: &[Block],
    probs: &[Vec<f64>],
    dout: &Tensor,
) -> AttnGrads {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[q.rows(), d]);
    let mut dk = Tensor::zeros(&[k.rows(), d]);
    let mut dv = Tensor::zeros(&[v.rows(), d]);
    for (b, bp) in blocks.iter().zip(probs) {
        let (n, m) = (b.mask.query_len, b.mask.key_len);
        let mut dp = vec![0.0; n * m];
        for h in 0..heads {
            let p = &bp[h * n * m..(h + 1) * n * m];
            let do_h = Mat { data: dout.data(), offset: b.q_off * d + h * dh, rs: d, cs: 1 };
            // dV_h = P^T dO_h
            gemm(m, n, dh, 1.0, Mat::rm_t(p, m), do_h, 0.0, dv.data_mut(), b.k_off * d + h * dh, d, 1);
            // dP = dO_h V_h^T
            let vt = Mat { data: v.data(), offset: b.k_off * d + h * dh, rs: 1, cs: d };
            gemm(n, dh, m, 1.0, do_h, vt, 0.0, &mut dp, 0, m, 1);
            for i in 0..n {
                let pr = &p[i * m..(i + 1) * m];
                let dr = &mut dp[i * m..(i + 1) * m];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (g, &pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            let ka = Mat { data: k.data(), offset: b.k_off * d + h * dh, rs: d, cs: 1 };
            gemm(n, m, dh, scale, Mat::rm(&dp, m), ka, 0.0, dq.data_mut(), b.q_off * d + h * dh, d, 1);
            let qa = Mat { data: q.data(), offset: b.q_off * d + h * dh, rs: d, cs: 1 };
            gemm(m, n, dh, scale, Mat::rm_t(&dp, m), qa, 0.0, dk.data_mut(), b.k_off * d + h * dh, d, 1);
        }
    }
    AttnGrads { dq, dk, dv }
}

/// Multi-head masked attention on plain tensors (`q: n x d`, `k, v: m x d`).
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask, heads: usize) -> Result<Tensor> {
    let masks = std::slice::from_ref(mask);
    check_shapes(q, k, v, heads, masks)?;
    let (out, _) = forward(q, k, v, heads, &blocks_for(masks));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct single-head attention over an explicit key subset, no masking involved.
    fn reference(q: &Tensor, k: &Tensor, v: &Tensor, keys: &[usize]) -> Tensor {
        let d = q.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Tensor::zeros(&[q.rows(), d]);
        for i in 0..q.rows() {
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for (wi, &j) in w.iter().zip(keys) {
                for c in 0..d {
                    out.row_mut(i)[c] += wi / z * v.get2(j, c);
                }
            }
        }
        out
    }

    #[test]
    fn uniform_keys_average_values() {
        let q = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![5.0, 8.0]]).unwrap();
        let out = masked_attention(&q, &k, &v, &AttentionMask::full(1, 3), 1).unwrap();
        assert!((out.get2(0, 0) - 3.0).abs() < 1e-15);
        assert!((out.get2(0, 1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_permitted_key_copies_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mask = AttentionMask::from_key_participation(2, &[false, true, false]).unwrap();
        let out = masked_attention(&q, &k, &v, &mask, 2).unwrap();
        assert_eq!(out.row(0), v.row(1));
        assert_eq!(out.row(1), v.row(1));
    }

    #[test]
    fn masked_key_matches_reduced_key_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = Tensor::randn(&[2, 5], 1.0, &mut rng);
            let k = Tensor::randn(&[3, 5], 1.0, &mut rng);
            let v = Tensor::randn(&[3, 5], 1.0, &mut rng);
            let mask = AttentionMask::from_key_participation(2, &[true, false, true]).unwrap();
            let out = masked_attention(&q, &k, &v, &mask, 1).unwrap();
            let expect = reference(&q, &k, &v, &[0, 2]);
            assert!(out.max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn empty_row_is_rejected() {
        let err = AttentionMask::new(2, 2, vec![true, false, false, false]).unwrap_err();
        assert!(matches!(err, NnError::EmptyMaskRow { row: 1 }));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let q = Tensor::zeros(&[2, 4]);
        let k = Tensor::zeros(&[3, 4]);
        let v = Tensor::zeros(&[3, 4]);
        assert!(masked_attention(&q, &k, &v, &AttentionMask::full(2, 2), 1).is_err());
        assert!(masked_attention(&q, &k, &v, &AttentionMask::full(2, 3), 3).is_err());
    }
}
