//! Multi-head attention and layer normalization, each with a forward pass
//! that records what its backward pass needs.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::linalg::{softmax_in_place, Mat};
use crate::params::{TensorMut, TensorRef};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Scaled dot-product attention with `heads` heads over model width `D`.
/// Projection matrices are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    xq: Mat,
    xkv: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per-head attention weights, `N_q x N`.
    pub weights: Vec<Mat>,
    concat: Mat,
}

impl MultiHeadAttention {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            heads,
            wq: Mat::zeros(dim, dim),
            bq: vec![0.0; dim],
            wk: Mat::zeros(dim, dim),
            bk: vec![0.0; dim],
            wv: Mat::zeros(dim, dim),
            bv: vec![0.0; dim],
            wo: Mat::zeros(dim, dim),
            bo: vec![0.0; dim],
        }
    }

    pub fn init(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let mut a = Self::zeros(dim, heads);
        let bound = 1.0 / (dim as f64).sqrt();
        for m in [&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo] {
            for v in m.as_mut_slice() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        a
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// Queries come from `xq` (`N_q x D`), keys and values from `xkv` (`N x D`).
    pub fn forward(&self, xq: &Mat, xkv: &Mat) -> Result<(Mat, AttnCache)> {
        let d = self.dim();
        if xq.cols() != d || xkv.cols() != d {
            return Err(shape_err("attention input width", d, format!("{} / {}", xq.cols(), xkv.cols())));
        }
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = affine(xq, &self.wq, &self.bq)?;
        let k = affine(xkv, &self.wk, &self.bk)?;
        let v = affine(xkv, &self.wv, &self.bv)?;
        let mut concat = Mat::zeros(xq.rows(), d);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.col_block(h * dh, dh);
            let kh = k.col_block(h * dh, dh);
            let vh = v.col_block(h * dh, dh);
            let mut s = qh.matmul_t(&kh)?;
            s.scale(scale);
            for r in 0..s.rows() {
                softmax_in_place(s.row_mut(r));
            }
            concat.set_col_block(h * dh, &s.matmul(&vh)?);
            weights.push(s);
        }
        let out = affine(&concat, &self.wo, &self.bo)?;
        Ok((
            out,
            AttnCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                weights,
                concat,
            },
        ))
    }

    /// Returns `(dL/dxq, dL/dxkv)` and accumulates parameter gradients.
    pub fn backward(&self, c: &AttnCache, d_out: &Mat, grad: &mut MultiHeadAttention) -> Result<(Mat, Mat)> {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        grad.wo.add_assign(&d_out.t_matmul(&c.concat)?)?;
        add_into(&mut grad.bo, &d_out.col_sums());
        let d_concat = d_out.matmul(&self.wo)?;

        let mut dq = Mat::zeros(c.q.rows(), c.q.cols());
        let mut dk = Mat::zeros(c.k.rows(), c.k.cols());
        let mut dv = Mat::zeros(c.v.rows(), c.v.cols());
        for h in 0..self.heads {
            let a = &c.weights[h];
            let qh = c.q.col_block(h * dh, dh);
            let kh = c.k.col_block(h * dh, dh);
            let vh = c.v.col_block(h * dh, dh);
            let doh = d_concat.col_block(h * dh, dh);
            let da = doh.matmul_t(&vh)?;
            dv.set_col_block(h * dh, &a.t_matmul(&doh)?);
            // softmax Jacobian, row by row
            let mut ds = Mat::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                let (ar, dar) = (a.row(r), da.row(r));
                let inner: f64 = ar.iter().zip(dar).map(|(p, g)| p * g).sum();
                for ((o, p), g) in ds.row_mut(r).iter_mut().zip(ar).zip(dar) {
                    *o = p * (g - inner) * scale;
                }
            }
            dq.set_col_block(h * dh, &ds.matmul(&kh)?);
            dk.set_col_block(h * dh, &ds.t_matmul(&qh)?);
        }

        grad.wq.add_assign(&dq.t_matmul(&c.xq)?)?;
        add_into(&mut grad.bq, &dq.col_sums());
        grad.wk.add_assign(&dk.t_matmul(&c.xkv)?)?;
        add_into(&mut grad.bk, &dk.col_sums());
        grad.wv.add_assign(&dv.t_matmul(&c.xkv)?)?;
        add_into(&mut grad.bv, &dv.col_sums());

        let dxq = dq.matmul(&self.wq)?;
        let mut dxkv = dk.matmul(&self.wk)?;
        dxkv.add_assign(&dv.matmul(&self.wv)?)?;
        Ok((dxq, dxkv))
    }

    pub(crate) fn tensors_with<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        for (n, m, b) in [
            ("q", &self.wq, &self.bq),
            ("k", &self.wk, &self.bk),
            ("v", &self.wv, &self.bv),
            ("o", &self.wo, &self.bo),
        ] {
            out.push(TensorRef::mat(format!("{prefix}.w{n}"), m));
            out.push(TensorRef::vec(format!("{prefix}.b{n}"), b));
        }
    }

    pub(crate) fn tensors_mut_with<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        for (n, m, b) in [
            ("q", &mut self.wq, &mut self.bq),
            ("k", &mut self.wk, &mut self.bk),
            ("v", &mut self.wv, &mut self.bv),
            ("o", &mut self.wo, &mut self.bo),
        ] {
            out.push(TensorMut::mat(format!("{prefix}.w{n}"), m));
            out.push(TensorMut::vec(format!("{prefix}.b{n}"), b));
        }
    }
}

/// Row-wise layer normalization with learnable gain and offset.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            offset: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, LnCache)> {
        let d = self.gain.len();
        if x.cols() != d {
            return Err(shape_err("layer norm width", d, x.cols()));
        }
        let mut xhat = Mat::zeros(x.rows(), d);
        let mut out = Mat::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (k, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[(r, k)] = h;
                out[(r, k)] = self.gain[k] * h + self.offset[k];
            }
        }
        Ok((out, LnCache { xhat, inv_std }))
    }

    pub fn backward(&self, c: &LnCache, d_out: &Mat, grad: &mut LayerNorm) -> Mat {
        let d = self.gain.len();
        let mut dx = Mat::zeros(d_out.rows(), d);
        for r in 0..d_out.rows() {
            let (dy, xh) = (d_out.row(r), c.xhat.row(r));
            let mut dxhat = vec![0.0; d];
            for k in 0..d {
                grad.gain[k] += dy[k] * xh[k];
                grad.offset[k] += dy[k];
                dxhat[k] = dy[k] * self.gain[k];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = c.inv_std[r] * (dxhat[k] - mean_d - xh[k] * mean_dx);
            }
        }
        dx
    }

    pub(crate) fn tensors_with<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef::vec(format!("{prefix}.gain"), &self.gain));
        out.push(TensorRef::vec(format!("{prefix}.offset"), &self.offset));
    }

    pub(crate) fn tensors_mut_with<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        out.push(TensorMut::vec(format!("{prefix}.gain"), &mut self.gain));
        out.push(TensorMut::vec(format!("{prefix}.offset"), &mut self.offset));
    }
}

/// `x · wᵀ + b`
pub(crate) fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Result<Mat> {
    let mut y = x.matmul_t(w)?;
    y.add_row_vector(b)?;
    Ok(y)
}

pub(crate) fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn weighted_sum(m: &Mat, w: &Mat) -> f64 {
        m.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 6);
        let (y, _) = LayerNorm::new(6).forward(&x).unwrap();
        for r in 0..3 {
            let mean = y.row(r).iter().sum::<f64>() / 6.0;
            let var = y.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ln = LayerNorm::new(5);
        for (g, o) in ln.gain.iter_mut().zip(&mut ln.offset) {
            *g = rng.random_range(0.5..1.5);
            *o = rng.random_range(-0.5..0.5);
        }
        let x = rand_mat(&mut rng, 3, 5);
        let w = rand_mat(&mut rng, 3, 5);
        let (_, c) = ln.forward(&x).unwrap();
        let mut grad = LayerNorm { gain: vec![0.0; 5], offset: vec![0.0; 5] };
        let dx = ln.backward(&c, &w, &mut grad);
        let h = 1e-6;
        for k in 0..15 {
            let mut xp = x.clone();
            xp.as_mut_slice()[k] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[k] -= h;
            let fd = (weighted_sum(&ln.forward(&xp).unwrap().0, &w) - weighted_sum(&ln.forward(&xm).unwrap().0, &w)) / (2.0 * h);
            assert!((fd - dx.as_slice()[k]).abs() < 1e-6, "{fd} vs {}", dx.as_slice()[k]);
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut attn = MultiHeadAttention::init(4, 2, &mut rng);
        attn.bq = vec![0.1, -0.2, 0.3, 0.0];
        attn.bv = vec![0.2, 0.1, -0.1, 0.3];
        let xq = rand_mat(&mut rng, 2, 4);
        let xkv = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 2, 4);
        let (_, c) = attn.forward(&xq, &xkv).unwrap();
        let mut grad = MultiHeadAttention::zeros(4, 2);
        let (dxq, dxkv) = attn.backward(&c, &w, &mut grad).unwrap();
        let f = |a: &MultiHeadAttention, q: &Mat, kv: &Mat| weighted_sum(&a.forward(q, kv).unwrap().0, &w);
        let h = 1e-6;
        for k in 0..8 {
            let mut p = xq.clone();
            p.as_mut_slice()[k] += h;
            let mut m = xq.clone();
            m.as_mut_slice()[k] -= h;
            let fd = (f(&attn, &p, &xkv) - f(&attn, &m, &xkv)) / (2.0 * h);
            assert!((fd - dxq.as_slice()[k]).abs() < 1e-7);
        }
        for k in 0..12 {
            let mut p = xkv.clone();
            p.as_mut_slice()[k] += h;
            let mut m = xkv.clone();
            m.as_mut_slice()[k] -= h;
            let fd = (f(&attn, &xq, &p) - f(&attn, &xq, &m)) / (2.0 * h);
            assert!((fd - dxkv.as_slice()[k]).abs() < 1e-7);
        }
        for k in 0..16 {
            let mut p = attn.clone();
            p.wk.as_mut_slice()[k] += h;
            let mut m = attn.clone();
            m.wk.as_mut_slice()[k] -= h;
            let fd = (f(&p, &xq, &xkv) - f(&m, &xq, &xkv)) / (2.0 * h);
            assert!((fd - grad.wk.as_slice()[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn single_key_gets_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = MultiHeadAttention::init(4, 2, &mut rng);
        let (_, c) = attn.forward(&rand_mat(&mut rng, 3, 4), &rand_mat(&mut rng, 1, 4)).unwrap();
        for w in &c.weights {
            assert!(w.as_slice().iter().all(|v| *v == 1.0));
        }
    }
}
