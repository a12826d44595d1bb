//! Target features: the normalized spatio-temporal 6-vector, the appearance
//! and spatio-temporal encoders, and their concatenation into the fused
//! feature consumed by the association model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::geom::{SceneDims, TargetObs};
use crate::linalg::Mat;
use crate::params::{Parameters, TensorMut, TensorRef};

pub const ST_DIM: usize = 6;

/// `(x1/w, y1/h, x2/w, y2/h, t/T, c/C)`
pub type StFeature = [f64; ST_DIM];

pub fn spatiotemporal_feature(obs: &TargetObs, dims: &SceneDims) -> Result<StFeature> {
    dims.validate()?;
    let b = &obs.bbox;
    Ok([
        b.x1 / dims.width,
        b.y1 / dims.height,
        b.x2 / dims.width,
        b.y2 / dims.height,
        obs.frame.time as f64 / dims.horizon as f64,
        obs.frame.camera as f64 / dims.cameras as f64,
    ])
}

/// Dimensions of the feature pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub d_raw: usize,
    pub d_roi: usize,
    pub d_st: usize,
    pub hidden_roi: usize,
    pub hidden_st: usize,
}

impl FeatureDims {
    /// Small dimensions used for tests and desk-scale runs.
    pub fn desk() -> Self {
        Self {
            d_raw: 32,
            d_roi: 64,
            d_st: 8,
            hidden_roi: 64,
            hidden_st: 8,
        }
    }

    /// Output sizes reported for the full-scale model (1024 + 128).
    pub fn full_scale(d_raw: usize) -> Self {
        Self {
            d_raw,
            d_roi: 1024,
            d_st: 128,
            hidden_roi: 1024,
            hidden_st: 128,
        }
    }

    pub fn fused(&self) -> usize {
        self.d_roi + self.d_st
    }
}

/// Two affine layers with a rectifier in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `hidden x in`
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// `out x hidden`
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// Activations kept from [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Mat,
    hidden: Mat,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Mat::zeros(hidden, input),
            b1: vec![0.0; hidden],
            w2: Mat::zeros(output, hidden),
            b2: vec![0.0; output],
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` per layer.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(input, hidden, output);
        fill_uniform(m.w1.as_mut_slice(), input, rng);
        fill_uniform(&mut m.b1, input, rng);
        fill_uniform(m.w2.as_mut_slice(), hidden, rng);
        fill_uniform(&mut m.b2, hidden, rng);
        m
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    /// Row-wise forward pass over `x` (`N x in`).
    pub fn forward(&self, x: &Mat) -> Result<(Mat, MlpCache)> {
        if x.cols() != self.input_dim() {
            return Err(shape_err("Mlp::forward", self.input_dim(), x.cols()));
        }
        let mut hidden = x.matmul_t(&self.w1)?;
        hidden.add_row_vector(&self.b1)?;
        for v in hidden.as_mut_slice() {
            *v = v.max(0.0);
        }
        let mut out = hidden.matmul_t(&self.w2)?;
        out.add_row_vector(&self.b2)?;
        Ok((
            out,
            MlpCache {
                input: x.clone(),
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, d_out: &Mat, grad: &mut Mlp) -> Result<Mat> {
        grad.w2.add_assign(&d_out.t_matmul(&cache.hidden)?)?;
        add_into(&mut grad.b2, &d_out.col_sums());
        let mut d_hidden = d_out.matmul(&self.w2)?;
        for (d, h) in d_hidden.as_mut_slice().iter_mut().zip(cache.hidden.as_slice()) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        grad.w1.add_assign(&d_hidden.t_matmul(&cache.input)?)?;
        add_into(&mut grad.b1, &d_hidden.col_sums());
        d_hidden.matmul(&self.w1)
    }

    fn tensors_with<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef::mat(format!("{prefix}.w1"), &self.w1));
        out.push(TensorRef::vec(format!("{prefix}.b1"), &self.b1));
        out.push(TensorRef::mat(format!("{prefix}.w2"), &self.w2));
        out.push(TensorRef::vec(format!("{prefix}.b2"), &self.b2));
    }

    fn tensors_mut_with<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        out.push(TensorMut::mat(format!("{prefix}.w1"), &mut self.w1));
        out.push(TensorMut::vec(format!("{prefix}.b1"), &mut self.b1));
        out.push(TensorMut::mat(format!("{prefix}.w2"), &mut self.w2));
        out.push(TensorMut::vec(format!("{prefix}.b2"), &mut self.b2));
    }
}

/// Appearance encoder `H_roi` and spatio-temporal encoder `H_st`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub app: Mlp,
    pub st: Mlp,
}

impl EncoderParams {
    pub fn zeros(dims: &FeatureDims) -> Self {
        Self {
            app: Mlp::zeros(dims.d_raw, dims.hidden_roi, dims.d_roi),
            st: Mlp::zeros(ST_DIM, dims.hidden_st, dims.d_st),
        }
    }

    pub fn init(dims: &FeatureDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            app: Mlp::init(dims.d_raw, dims.hidden_roi, dims.d_roi, &mut rng),
            st: Mlp::init(ST_DIM, dims.hidden_st, dims.d_st, &mut rng),
        }
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            d_raw: self.app.input_dim(),
            d_roi: self.app.output_dim(),
            d_st: self.st.output_dim(),
            hidden_roi: self.app.w1.rows(),
            hidden_st: self.st.w1.rows(),
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.dims().fused()
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.app.tensors_with("features.app", &mut out);
        self.st.tensors_with("features.st", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        self.app.tensors_mut_with("features.app", &mut out);
        self.st.tensors_mut_with("features.st", &mut out);
        out
    }
}

pub fn encode_app(raw: &[f64], params: &EncoderParams) -> Result<Vec<f64>> {
    let x = Mat::from_rows(&[raw], params.app.input_dim())?;
    Ok(params.app.forward(&x)?.0.into_vec())
}

pub fn encode_st(st: &StFeature, params: &EncoderParams) -> Result<Vec<f64>> {
    let x = Mat::from_rows(&[st.as_slice()], ST_DIM)?;
    Ok(params.st.forward(&x)?.0.into_vec())
}

/// Concatenation, appearance part first.
pub fn fuse(app_enc: &[f64], st_enc: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(app_enc.len() + st_enc.len());
    out.extend_from_slice(app_enc);
    out.extend_from_slice(st_enc);
    out
}

/// Raw encoder inputs for a batch of targets.
#[derive(Debug, Clone)]
pub struct RawBatch {
    /// `N x d_raw`
    pub app: Mat,
    /// `N x 6`
    pub st: Mat,
}

impl RawBatch {
    pub fn from_obs(obs: &[&TargetObs], dims: &SceneDims, d_raw: usize) -> Result<Self> {
        let mut app = Vec::with_capacity(obs.len());
        let mut st = Vec::with_capacity(obs.len());
        for o in obs {
            if o.app.len() != d_raw {
                return Err(shape_err("appearance vector", d_raw, o.app.len()));
            }
            app.push(o.app.as_slice());
            st.push(spatiotemporal_feature(o, dims)?);
        }
        Ok(Self {
            app: Mat::from_rows(&app, d_raw)?,
            st: Mat::from_rows(&st, ST_DIM)?,
        })
    }

    pub fn len(&self) -> usize {
        self.app.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct FusedCache {
    app: MlpCache,
    st: MlpCache,
}

/// Fused features `N x (D_roi + D_st)` for a batch.
pub fn fused_batch(batch: &RawBatch, params: &EncoderParams) -> Result<(Mat, FusedCache)> {
    let (a, app) = params.app.forward(&batch.app)?;
    let (s, st) = params.st.forward(&batch.st)?;
    let mut out = Mat::zeros(batch.len(), a.cols() + s.cols());
    out.set_col_block(0, &a);
    out.set_col_block(a.cols(), &s);
    Ok((out, FusedCache { app, st }))
}

/// Backward through [`fused_batch`], accumulating into `grad`.
pub fn fused_backward(params: &EncoderParams, cache: &FusedCache, d_fused: &Mat, grad: &mut EncoderParams) -> Result<()> {
    let d_roi = params.app.output_dim();
    let d_st = params.st.output_dim();
    if d_fused.cols() != d_roi + d_st {
        return Err(shape_err("fused_backward", d_roi + d_st, d_fused.cols()));
    }
    params.app.backward(&cache.app, &d_fused.col_block(0, d_roi), &mut grad.app)?;
    params.st.backward(&cache.st, &d_fused.col_block(d_roi, d_st), &mut grad.st)?;
    Ok(())
}

/// Fused features of individual observations.
pub fn fused_features(obs: &[&TargetObs], dims: &SceneDims, params: &EncoderParams) -> Result<Mat> {
    let batch = RawBatch::from_obs(obs, dims, params.app.input_dim())?;
    Ok(fused_batch(&batch, params)?.0)
}

fn fill_uniform(xs: &mut [f64], fan_in: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for x in xs {
        *x = rng.random_range(-bound..=bound);
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}
