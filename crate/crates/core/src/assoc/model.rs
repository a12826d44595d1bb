//! One post-norm encoder layer and one post-norm decoder layer, without
//! positional encoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{AttnCache, LayerNorm, LnCache, MultiHeadAttention};
use crate::error::{shape_err, Error, Result};
use crate::features::{EncoderParams, FeatureDims, Mlp, MlpCache};
use crate::linalg::Mat;
use crate::params::{Parameters, TensorMut, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssocConfig {
    /// Model width `D`; must equal the fused feature length.
    pub dim: usize,
    pub heads: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
}

impl AssocConfig {
    /// `D_ff = 4 D`.
    pub fn new(dim: usize, heads: usize) -> Self {
        Self { dim, heads, d_ff: 4 * dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) || self.d_ff == 0 {
            return Err(Error::Config(format!(
                "model dim {} must be a positive multiple of heads {} (d_ff {})",
                self.dim, self.heads, self.d_ff
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    pub ln3: LayerNorm,
}

/// Weights of the association transformer. The null score is the constant 0
/// and has no parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AssocModelParams {
    pub heads: usize,
    pub encoder: EncoderLayer,
    pub decoder: DecoderLayer,
}

impl AssocModelParams {
    pub fn init(cfg: &AssocConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, f) = (cfg.dim, cfg.heads, cfg.d_ff);
        let mlp = |rng: &mut ChaCha8Rng| {
            let mut m = Mlp::init(d, f, d, rng);
            m.b1.fill(0.0);
            m.b2.fill(0.0);
            m
        };
        Ok(Self {
            heads: h,
            encoder: EncoderLayer {
                self_attn: MultiHeadAttention::init(d, h, &mut rng),
                ln1: LayerNorm::new(d),
                ffn: mlp(&mut rng),
                ln2: LayerNorm::new(d),
            },
            decoder: DecoderLayer {
                self_attn: MultiHeadAttention::init(d, h, &mut rng),
                ln1: LayerNorm::new(d),
                cross_attn: MultiHeadAttention::init(d, h, &mut rng),
                ln2: LayerNorm::new(d),
                ffn: mlp(&mut rng),
                ln3: LayerNorm::new(d),
            },
        })
    }

    pub fn config(&self) -> AssocConfig {
        AssocConfig {
            dim: self.encoder.ln1.gain.len(),
            heads: self.heads,
            d_ff: self.encoder.ffn.w1.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.ln1.gain.len()
    }
}

impl Parameters for AssocModelParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        let e = &self.encoder;
        e.self_attn.tensors_with("assoc.encoder.self_attn", &mut out);
        e.ln1.tensors_with("assoc.encoder.ln1", &mut out);
        push_mlp(&e.ffn, "assoc.encoder.ffn", &mut out);
        e.ln2.tensors_with("assoc.encoder.ln2", &mut out);
        let d = &self.decoder;
        d.self_attn.tensors_with("assoc.decoder.self_attn", &mut out);
        d.ln1.tensors_with("assoc.decoder.ln1", &mut out);
        d.cross_attn.tensors_with("assoc.decoder.cross_attn", &mut out);
        d.ln2.tensors_with("assoc.decoder.ln2", &mut out);
        push_mlp(&d.ffn, "assoc.decoder.ffn", &mut out);
        d.ln3.tensors_with("assoc.decoder.ln3", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let e = &mut self.encoder;
        e.self_attn.tensors_mut_with("assoc.encoder.self_attn", &mut out);
        e.ln1.tensors_mut_with("assoc.encoder.ln1", &mut out);
        push_mlp_mut(&mut e.ffn, "assoc.encoder.ffn", &mut out);
        e.ln2.tensors_mut_with("assoc.encoder.ln2", &mut out);
        let d = &mut self.decoder;
        d.self_attn.tensors_mut_with("assoc.decoder.self_attn", &mut out);
        d.ln1.tensors_mut_with("assoc.decoder.ln1", &mut out);
        d.cross_attn.tensors_mut_with("assoc.decoder.cross_attn", &mut out);
        d.ln2.tensors_mut_with("assoc.decoder.ln2", &mut out);
        push_mlp_mut(&mut d.ffn, "assoc.decoder.ffn", &mut out);
        d.ln3.tensors_mut_with("assoc.decoder.ln3", &mut out);
        out
    }
}

fn push_mlp<'a>(m: &'a Mlp, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
    out.push(TensorRef::mat(format!("{prefix}.w1"), &m.w1));
    out.push(TensorRef::vec(format!("{prefix}.b1"), &m.b1));
    out.push(TensorRef::mat(format!("{prefix}.w2"), &m.w2));
    out.push(TensorRef::vec(format!("{prefix}.b2"), &m.b2));
}

fn push_mlp_mut<'a>(m: &'a mut Mlp, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
    out.push(TensorMut::mat(format!("{prefix}.w1"), &mut m.w1));
    out.push(TensorMut::vec(format!("{prefix}.b1"), &mut m.b1));
    out.push(TensorMut::mat(format!("{prefix}.w2"), &mut m.w2));
    out.push(TensorMut::vec(format!("{prefix}.b2"), &mut m.b2));
}

/// Everything learnable: the two feature encoders plus the transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct GmtParams {
    pub features: EncoderParams,
    pub assoc: AssocModelParams,
}

impl GmtParams {
    pub fn init(features: &FeatureDims, heads: usize, seed: u64) -> Result<Self> {
        let cfg = AssocConfig::new(features.fused(), heads);
        Ok(Self {
            features: EncoderParams::init(features, seed),
            assoc: AssocModelParams::init(&cfg, seed.wrapping_add(0x9e37_79b9))?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.assoc.config().validate()?;
        if self.features.fused_dim() != self.assoc.dim() {
            return Err(shape_err("fused feature vs model dim", self.assoc.dim(), self.features.fused_dim()));
        }
        Ok(())
    }

    /// Hand-set weights that score a query against a key by the correlation
    /// of their raw appearance vectors, shifted so that correlations below
    /// `threshold` give negative scores: `G ≈ D (corr - threshold)`.
    ///
    /// The appearance encoder is an exact identity (split into positive and
    /// negative parts by the rectifier), the spatio-temporal encoder and every
    /// attention and feed-forward block output zero, and the last layer norms
    /// of encoder and decoder place `∓c` on the final coordinate.
    pub fn appearance_matcher(dims: &FeatureDims, heads: usize, threshold: f64) -> Result<Self> {
        let d_raw = dims.d_raw;
        if dims.hidden_roi < 2 * d_raw || dims.d_roi < d_raw || dims.d_st == 0 {
            return Err(Error::Config(format!(
                "appearance matcher needs hidden_roi >= 2 d_raw, d_roi >= d_raw and d_st >= 1 (got {dims:?})"
            )));
        }
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::Config(format!("matcher threshold {threshold} outside [0, 1)")));
        }
        let mut features = EncoderParams::zeros(dims);
        for i in 0..d_raw {
            features.app.w1[(i, i)] = 1.0;
            features.app.w1[(d_raw + i, i)] = -1.0;
            features.app.w2[(i, i)] = 1.0;
            features.app.w2[(i, d_raw + i)] = -1.0;
        }
        let d = dims.fused();
        let cfg = AssocConfig::new(d, heads);
        cfg.validate()?;
        let zero_mlp = || Mlp::zeros(d, cfg.d_ff, d);
        let k = d - 1;
        let c = (threshold * d as f64).sqrt();
        let mut enc_ln2 = LayerNorm::new(d);
        enc_ln2.gain[k] = 0.0;
        enc_ln2.offset[k] = -c;
        let mut dec_ln3 = LayerNorm::new(d);
        dec_ln3.gain[k] = 0.0;
        dec_ln3.offset[k] = c;
        Ok(Self {
            features,
            assoc: AssocModelParams {
                heads,
                encoder: EncoderLayer {
                    self_attn: MultiHeadAttention::zeros(d, heads),
                    ln1: LayerNorm::new(d),
                    ffn: zero_mlp(),
                    ln2: enc_ln2,
                },
                decoder: DecoderLayer {
                    self_attn: MultiHeadAttention::zeros(d, heads),
                    ln1: LayerNorm::new(d),
                    cross_attn: MultiHeadAttention::zeros(d, heads),
                    ln2: LayerNorm::new(d),
                    ffn: zero_mlp(),
                    ln3: dec_ln3,
                },
            },
        })
    }

    /// A zero-valued copy with the same shapes, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

impl Parameters for GmtParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut t = self.features.tensors();
        t.extend(self.assoc.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut t = self.features.tensors_mut();
        t.extend(self.assoc.tensors_mut());
        t
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub attn: AttnCache,
    ln1: LnCache,
    ffn: MlpCache,
    ln2: LnCache,
}

/// `F_e = LN2(Z + FFN(Z))`, `Z = LN1(F + SelfAttn(F))`.
pub fn encoder_forward(f: &Mat, p: &AssocModelParams) -> Result<(Mat, EncoderCache)> {
    if f.rows() == 0 {
        return Err(shape_err("encoder input rows", ">= 1", 0));
    }
    let e = &p.encoder;
    let (sa, attn) = e.self_attn.forward(f, f)?;
    let (z, ln1) = e.ln1.forward(&f.add(&sa)?)?;
    let (ff, ffn) = e.ffn.forward(&z)?;
    let (out, ln2) = e.ln2.forward(&z.add(&ff)?)?;
    Ok((out, EncoderCache { attn, ln1, ffn, ln2 }))
}

/// Returns `dL/dF` and accumulates into `grad.encoder`.
pub fn encoder_backward(p: &AssocModelParams, c: &EncoderCache, d_out: &Mat, grad: &mut AssocModelParams) -> Result<Mat> {
    let e = &p.encoder;
    let g = &mut grad.encoder;
    let d_r2 = e.ln2.backward(&c.ln2, d_out, &mut g.ln2);
    let mut d_z = e.ffn.backward(&c.ffn, &d_r2, &mut g.ffn)?;
    d_z.add_assign(&d_r2)?;
    let d_r1 = e.ln1.backward(&c.ln1, &d_z, &mut g.ln1);
    let (dq, dkv) = e.self_attn.backward(&c.attn, &d_r1, &mut g.self_attn)?;
    let mut d_f = d_r1;
    d_f.add_assign(&dq)?;
    d_f.add_assign(&dkv)?;
    Ok(d_f)
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    pub self_attn: AttnCache,
    ln1: LnCache,
    pub cross_attn: AttnCache,
    ln2: LnCache,
    ffn: MlpCache,
    ln3: LnCache,
}

/// Self-attention over the queries, cross-attention into `f_e`, then the
/// feed-forward block; each followed by residual + layer norm.
pub fn decoder_forward(q: &Mat, f_e: &Mat, p: &AssocModelParams) -> Result<(Mat, DecoderCache)> {
    if q.rows() == 0 || f_e.rows() == 0 {
        return Err(shape_err("decoder input rows", ">= 1", format!("{} / {}", q.rows(), f_e.rows())));
    }
    let d = &p.decoder;
    let (sa, self_attn) = d.self_attn.forward(q, q)?;
    let (a, ln1) = d.ln1.forward(&q.add(&sa)?)?;
    let (ca, cross_attn) = d.cross_attn.forward(&a, f_e)?;
    let (b, ln2) = d.ln2.forward(&a.add(&ca)?)?;
    let (ff, ffn) = d.ffn.forward(&b)?;
    let (out, ln3) = d.ln3.forward(&b.add(&ff)?)?;
    Ok((
        out,
        DecoderCache {
            self_attn,
            ln1,
            cross_attn,
            ln2,
            ffn,
            ln3,
        },
    ))
}

/// Returns `(dL/dQ, dL/dF_e)` and accumulates into `grad.decoder`.
pub fn decoder_backward(p: &AssocModelParams, c: &DecoderCache, d_out: &Mat, grad: &mut AssocModelParams) -> Result<(Mat, Mat)> {
    let d = &p.decoder;
    let g = &mut grad.decoder;
    let d_r3 = d.ln3.backward(&c.ln3, d_out, &mut g.ln3);
    let mut d_b = d.ffn.backward(&c.ffn, &d_r3, &mut g.ffn)?;
    d_b.add_assign(&d_r3)?;
    let d_r2 = d.ln2.backward(&c.ln2, &d_b, &mut g.ln2);
    let (d_a_cross, d_fe) = d.cross_attn.backward(&c.cross_attn, &d_r2, &mut g.cross_attn)?;
    let mut d_a = d_r2;
    d_a.add_assign(&d_a_cross)?;
    let d_r1 = d.ln1.backward(&c.ln1, &d_a, &mut g.ln1);
    let (dq1, dq2) = d.self_attn.backward(&c.self_attn, &d_r1, &mut g.self_attn)?;
    let mut d_q = d_r1;
    d_q.add_assign(&dq1)?;
    d_q.add_assign(&dq2)?;
    Ok((d_q, d_fe))
}

/// `G = Q_d · F_eᵀ`, unscaled.
pub fn similarity_scores(q_d: &Mat, f_e: &Mat) -> Result<Mat> {
    q_d.matmul_t(f_e)
}

/// Runs encoder, decoder and the similarity product; returns `G`.
pub fn association_scores(q: &Mat, f: &Mat, p: &AssocModelParams) -> Result<Mat> {
    let (f_e, _) = encoder_forward(f, p)?;
    let (q_d, _) = decoder_forward(q, &f_e, p)?;
    similarity_scores(&q_d, &f_e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_mat(seed: u64, r: usize, c: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small(seed: u64) -> AssocModelParams {
        AssocModelParams::init(&AssocConfig { dim: 4, heads: 2, d_ff: 6 }, seed).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(AssocConfig::new(72, 8).validate().is_ok());
        assert!(AssocConfig::new(10, 4).validate().is_err());
        assert!(AssocConfig::new(0, 1).validate().is_err());
    }

    #[test]
    fn single_element_self_attention_weight_is_one() {
        let p = small(1);
        let (_, c) = encoder_forward(&rand_mat(2, 1, 4), &p).unwrap();
        assert!(c.attn.weights.iter().all(|w| w.as_slice() == [1.0]));
    }

    #[test]
    fn encoder_is_row_permutation_equivariant() {
        let p = small(3);
        let f = rand_mat(4, 5, 4);
        let perm = [3, 0, 4, 1, 2];
        let (out, _) = encoder_forward(&f, &p).unwrap();
        let (out_p, _) = encoder_forward(&f.select_rows(&perm), &p).unwrap();
        let expect = out.select_rows(&perm);
        for (a, b) in out_p.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_invariant_to_memory_order() {
        let p = small(5);
        let q = rand_mat(6, 3, 4);
        let fe = rand_mat(7, 5, 4);
        let (a, _) = decoder_forward(&q, &fe, &p).unwrap();
        let (b, _) = decoder_forward(&q, &fe.select_rows(&[4, 2, 0, 3, 1]), &p).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_memory_element_cross_weight_is_one() {
        let p = small(8);
        let (_, c) = decoder_forward(&rand_mat(9, 1, 4), &rand_mat(10, 1, 4), &p).unwrap();
        assert!(c.cross_attn.weights.iter().all(|w| w.as_slice() == [1.0]));
    }

    #[test]
    fn similarity_examples() {
        let q = Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let f = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(similarity_scores(&q, &f).unwrap().as_slice(), &[1.0, 0.0]);
        let q = Mat::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let f = Mat::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(similarity_scores(&q, &f).unwrap().as_slice(), &[11.0]);
        assert!(similarity_scores(&q, &Mat::zeros(1, 3)).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = small(1);
        assert!(encoder_forward(&Mat::zeros(2, 3), &p).is_err());
        assert!(encoder_forward(&Mat::zeros(0, 4), &p).is_err());
        assert!(decoder_forward(&Mat::zeros(1, 4), &Mat::zeros(1, 5), &p).is_err());
    }

    #[test]
    fn gmt_params_tensor_names_are_unique() {
        let p = GmtParams::init(&FeatureDims::desk(), 8, 1).unwrap();
        p.validate().unwrap();
        let names: Vec<_> = p.tensors().into_iter().map(|t| t.name).collect();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(p.tensors().len(), p.clone().tensors_mut().len());
    }

    #[test]
    fn appearance_matcher_separates_by_correlation() {
        let dims = FeatureDims::desk();
        let p = GmtParams::appearance_matcher(&dims, 8, 0.5).unwrap();
        p.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..dims.d_raw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..dims.d_raw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let enc = |v: &[f64]| {
            let app = crate::features::encode_app(v, &p.features).unwrap();
            assert_eq!(&app[..dims.d_raw], v);
            crate::features::fuse(&app, &vec![0.0; dims.d_st])
        };
        let f = Mat::from_rows(&[enc(&a), enc(&b)], dims.fused()).unwrap();
        let q = Mat::from_rows(&[enc(&a)], dims.fused()).unwrap();
        let g = association_scores(&q, &f, &p.assoc).unwrap();
        let d = dims.fused() as f64;
        // perfect correlation: D - 0.5 D, up to the layer-norm epsilon and the
        // zeroed coordinate
        assert!((g[(0, 0)] - 0.5 * d).abs() < 0.05 * d, "{g:?}");
        assert!(g[(0, 1)] < 0.0, "{g:?}");
        assert!(GmtParams::appearance_matcher(&dims, 8, 1.5).is_err());
    }
}
