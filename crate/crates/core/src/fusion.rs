//! Fusion of CLIP token grids with diffusion token grids: channel
//! concatenation or cross-attention (CLIP queries, diffusion keys/values),
//! each followed by a two-layer projector.

use candle_core::{DType, Device, Tensor, D};
use ndarray::{Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::array::Element;
use crate::backbone::FeatureTensor;
use crate::error::{Error, Result};

pub const GRID: usize = 16;
pub const N_TOKENS: usize = GRID * GRID;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenSource {
    Clip,
    Diffusion,
    Fused,
}

/// Row-major flattened `(rows, cols)` grid of `D`-wide tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Array2<f64>,
    pub source: TokenSource,
    pub grid_shape: (usize, usize),
}

impl TokenGrid {
    pub fn new(tokens: Array2<f64>, source: TokenSource, grid_shape: (usize, usize)) -> Result<Self> {
        if tokens.nrows() != grid_shape.0 * grid_shape.1 {
            return Err(Error::Shape(format!(
                "{} tokens for a {}x{} grid",
                tokens.nrows(),
                grid_shape.0,
                grid_shape.1
            )));
        }
        Ok(Self {
            tokens,
            source,
            grid_shape,
        })
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Bilinear resize of `(H, W, C)` with half-pixel centers and edge clamping.
pub fn resize_bilinear(values: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = values.dim();
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Array3::zeros((out_h, out_w, c));
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            for k in 0..c {
                let top = values[[y0, x0, k]] * (1.0 - fx) + values[[y0, x1, k]] * fx;
                let bottom = values[[y1, x0, k]] * (1.0 - fx) + values[[y1, x1, k]] * fx;
                out[[y, x, k]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Resizes a feature map to 16x16 and flattens it to 256 diffusion tokens.
pub fn resize_tokens<T: Element>(feature: &FeatureTensor<T>) -> Result<TokenGrid> {
    let (h, w, c) = feature.dims();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Shape(format!("cannot resize a {h}x{w}x{c} feature")));
    }
    let values = feature.values.mapv(|v| v.to_f64().unwrap());
    let out = if (h, w) == (GRID, GRID) {
        values
    } else {
        resize_bilinear(values.view(), GRID, GRID)
    };
    let tokens = out.into_shape_with_order((N_TOKENS, c)).unwrap();
    TokenGrid::new(tokens, TokenSource::Diffusion, (GRID, GRID))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Concat,
    CrossAttn,
}

/// Carried for downstream trainers; nothing here consumes it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptPolicy {
    #[default]
    NoPrompt,
    QuestionPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub d_clip: usize,
    pub d_diff: usize,
    pub d_out: usize,
    /// Cross-attention only.
    pub heads: usize,
    /// Layer-normalize both streams before the attention projections.
    pub pre_norm: bool,
    pub prompt_policy: PromptPolicy,
}

impl FusionConfig {
    pub fn new(mode: FusionMode, d_clip: usize, d_diff: usize, d_out: usize) -> Self {
        Self {
            mode,
            d_clip,
            d_diff,
            d_out,
            heads: 8,
            pre_norm: true,
            prompt_policy: PromptPolicy::NoPrompt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_clip == 0 || self.d_diff == 0 || self.d_out == 0 {
            return Err(Error::InvalidArgument("fusion widths must be positive".into()));
        }
        if self.mode == FusionMode::CrossAttn && (self.heads == 0 || self.d_out % self.heads != 0) {
            return Err(Error::InvalidArgument(format!(
                "d_out {} is not divisible by {} heads",
                self.d_out, self.heads
            )));
        }
        Ok(())
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).unwrap();
    let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, (rows, cols), &Device::Cpu)?)
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    Ok(t.dims2()?)
}

/// `0.5 x (1 + erf(x / sqrt 2))`. Composed from `erf` because the fused
/// op's backward is only accurate to about 1e-7.
fn gelu(x: &Tensor) -> Result<Tensor> {
    let cdf = ((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
    Ok(((x * cdf)? * 0.5)?)
}

/// `linear -> GELU (erf) -> linear`, weights stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Projector {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Projector {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let (_, h) = dims2(&w1)?;
        let (h2, out) = dims2(&w2)?;
        if h != h2 || b1.dims() != [h] || b2.dims() != [out] {
            return Err(Error::Shape(format!(
                "projector weights {:?} {:?} {:?} {:?} are inconsistent",
                w1.dims(),
                b1.dims(),
                w2.dims(),
                b2.dims()
            )));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(
            randn(rng, d_in, d_hidden, 1.0 / (d_in as f64).sqrt())?,
            Tensor::zeros(d_hidden, DType::F64, &Device::Cpu)?,
            randn(rng, d_hidden, d_out, 1.0 / (d_hidden as f64).sqrt())?,
            Tensor::zeros(d_out, DType::F64, &Device::Cpu)?,
        )
    }

    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        let z = |s: &[usize]| Tensor::zeros(s, DType::F64, &Device::Cpu);
        Self::new(z(&[d_in, d_hidden])?, z(&[d_hidden])?, z(&[d_hidden, d_out])?, z(&[d_out])?)
    }

    pub fn d_in(&self) -> usize {
        self.w1.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w2.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dims2()?.1 != self.d_in() {
            return Err(Error::Shape(format!("projector expects width {}, got {:?}", self.d_in(), x.dims())));
        }
        let h = gelu(&x.matmul(&self.w1)?.broadcast_add(&self.b1)?)?;
        Ok(h.matmul(&self.w2)?.broadcast_add(&self.b2)?)
    }
}

/// Single cross-attention layer; the output is added back to the CLIP stream.
#[derive(Debug, Clone)]
pub struct CrossAttnParams {
    pub heads: usize,
    /// `(gamma, beta)` per stream when pre-normalizing.
    pub norm_q: Option<(Tensor, Tensor)>,
    pub norm_kv: Option<(Tensor, Tensor)>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl CrossAttnParams {
    pub fn init(config: &FusionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (dc, dd, dm) = (config.d_clip, config.d_diff, config.d_out);
        let norm = |d: usize| -> Result<Option<(Tensor, Tensor)>> {
            Ok(config.pre_norm.then_some((
                Tensor::ones(d, DType::F64, &Device::Cpu)?,
                Tensor::zeros(d, DType::F64, &Device::Cpu)?,
            )))
        };
        Ok(Self {
            heads: config.heads,
            norm_q: norm(dc)?,
            norm_kv: norm(dd)?,
            wq: randn(rng, dc, dm, 1.0 / (dc as f64).sqrt())?,
            wk: randn(rng, dd, dm, 1.0 / (dd as f64).sqrt())?,
            wv: randn(rng, dd, dm, 1.0 / (dd as f64).sqrt())?,
            wo: randn(rng, dm, dc, 1.0 / (dm as f64).sqrt())?,
        })
    }
}

fn layer_norm(x: &Tensor, params: &Option<(Tensor, Tensor)>) -> Result<Tensor> {
    let Some((gamma, beta)) = params else {
        return Ok(x.clone());
    };
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    Ok(x.reshape((n, heads, d / heads))?.transpose(0, 1)?.contiguous()?)
}

/// Attention probabilities `(heads, n_clip, n_diff)`.
pub fn attention_probs(clip: &Tensor, diff: &Tensor, p: &CrossAttnParams) -> Result<Tensor> {
    let q = split_heads(&layer_norm(clip, &p.norm_q)?.matmul(&p.wq)?, p.heads)?;
    let kv_in = layer_norm(diff, &p.norm_kv)?;
    let k = split_heads(&kv_in.matmul(&p.wk)?, p.heads)?;
    let dh = q.dims3()?.2;
    let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
    softmax_last(&scores)
}

fn check_pair(clip: &Tensor, diff: &Tensor) -> Result<()> {
    let (nc, _) = clip.dims2()?;
    let (nd, _) = diff.dims2()?;
    if nc != nd {
        return Err(Error::Shape(format!("{nc} CLIP tokens vs {nd} diffusion tokens")));
    }
    Ok(())
}

pub fn concat_fuse_tensor(clip: &Tensor, diff: &Tensor, projector: &Projector) -> Result<Tensor> {
    check_pair(clip, diff)?;
    projector.forward(&Tensor::cat(&[clip, diff], 1)?)
}

pub fn cross_attn_fuse_tensor(clip: &Tensor, diff: &Tensor, p: &CrossAttnParams, projector: &Projector) -> Result<Tensor> {
    check_pair(clip, diff)?;
    if p.wq.dims2()?.1 % p.heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "attention width {} is not divisible by {} heads",
            p.wq.dims2()?.1,
            p.heads
        )));
    }
    let probs = attention_probs(clip, diff, p)?;
    let v = split_heads(&layer_norm(diff, &p.norm_kv)?.matmul(&p.wv)?, p.heads)?;
    let o = probs.matmul(&v)?;
    let (h, n, dh) = o.dims3()?;
    let attended = o.transpose(0, 1)?.contiguous()?.reshape((n, h * dh))?;
    let stream = (clip + attended.matmul(&p.wo)?)?;
    projector.forward(&stream)
}

pub fn to_tensor(a: &Array2<f64>) -> Result<Tensor> {
    let (r, c) = a.dim();
    Ok(Tensor::from_iter(a.iter().copied(), &Device::Cpu)?.reshape((r, c))?)
}

pub fn from_tensor(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    Ok(Array2::from_shape_vec((r, c), t.flatten_all()?.to_vec1::<f64>()?).unwrap())
}

fn fused(out: &Tensor, grid: (usize, usize)) -> Result<TokenGrid> {
    TokenGrid::new(from_tensor(out)?, TokenSource::Fused, grid)
}

pub fn projector(tokens: &Array2<f64>, p: &Projector) -> Result<Array2<f64>> {
    from_tensor(&p.forward(&to_tensor(tokens)?)?)
}

pub fn concat_fuse(clip: &TokenGrid, diff: &TokenGrid, p: &Projector) -> Result<TokenGrid> {
    fused(&concat_fuse_tensor(&to_tensor(&clip.tokens)?, &to_tensor(&diff.tokens)?, p)?, clip.grid_shape)
}

pub fn cross_attn_fuse(clip: &TokenGrid, diff: &TokenGrid, attn: &CrossAttnParams, p: &Projector) -> Result<TokenGrid> {
    fused(
        &cross_attn_fuse_tensor(&to_tensor(&clip.tokens)?, &to_tensor(&diff.tokens)?, attn, p)?,
        clip.grid_shape,
    )
}

/// Seeded parameters for one configured fusion path.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub attn: Option<CrossAttnParams>,
    pub projector: Projector,
}

impl FusionModel {
    pub fn init(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (attn, d_in) = match config.mode {
            FusionMode::Concat => (None, config.d_clip + config.d_diff),
            FusionMode::CrossAttn => (Some(CrossAttnParams::init(&config, &mut rng)?), config.d_clip),
        };
        let projector = Projector::init(d_in, config.d_out, config.d_out, &mut rng)?;
        Ok(Self {
            config,
            attn,
            projector,
        })
    }

    pub fn forward(&self, clip: &Tensor, diff: &Tensor) -> Result<Tensor> {
        match &self.attn {
            None => concat_fuse_tensor(clip, diff, &self.projector),
            Some(a) => cross_attn_fuse_tensor(clip, diff, a, &self.projector),
        }
    }

    pub fn fuse(&self, clip: &TokenGrid, diff: &TokenGrid) -> Result<TokenGrid> {
        fused(&self.forward(&to_tensor(&clip.tokens)?, &to_tensor(&diff.tokens)?)?, clip.grid_shape)
    }
}

/// One row of the `fuse-check` table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn check(name: &str, value: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        value,
        tolerance,
        passed: value.is_finite() && value <= tolerance,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<Tensor> {
    randn(rng, n, d, 1.0)
}

/// Max elementwise relative error between autograd and central differences
/// of `sum(w * f(clip, diff))` with respect to both inputs.
pub fn gradient_error(model: &FusionModel, clip: &Tensor, diff: &Tensor, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, _) = clip.dims2()?;
    let weights = randn(&mut rng, n, model.config.d_out, 1.0)?;
    let loss = |c: &Tensor, d: &Tensor| -> Result<f64> {
        Ok((model.forward(c, d)? * &weights)?.sum_all()?.to_scalar::<f64>()?)
    };
    let cv = candle_core::Var::from_tensor(clip)?;
    let dv = candle_core::Var::from_tensor(diff)?;
    let out = (model.forward(cv.as_tensor(), dv.as_tensor())? * &weights)?.sum_all()?;
    let grads = out.backward()?;
    let h = 1e-3;
    let mut worst = 0.0f64;
    for (var, is_clip) in [(&cv, true), (&dv, false)] {
        let analytic = from_tensor(grads.get(var).expect("input gradient"))?;
        let base = from_tensor(var.as_tensor())?;
        for idx in ndarray::indices(base.dim()) {
            let shifted = |delta: f64| -> Result<f64> {
                let mut m = base.clone();
                m[idx] += delta;
                let t = to_tensor(&m)?;
                if is_clip {
                    loss(&t, diff)
                } else {
                    loss(clip, &t)
                }
            };
            // Five-point stencil, O(h^4) truncation.
            let numeric = (8.0 * (shifted(h)? - shifted(-h)?) - (shifted(2.0 * h)? - shifted(-2.0 * h)?)) / (12.0 * h);
            let a = analytic[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

/// Shape, gradient and permutation checks at a small seeded configuration.
pub fn run_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for mode in [FusionMode::Concat, FusionMode::CrossAttn] {
        let mut cfg = FusionConfig::new(mode, 12, 20, 16);
        cfg.heads = 8;
        let model = FusionModel::init(cfg, seed)?;
        let clip = random_tokens(&mut rng, N_TOKENS, 12)?;
        let diff = random_tokens(&mut rng, N_TOKENS, 20)?;
        let y = model.forward(&clip, &diff)?;
        let ok = y.dims() == [N_TOKENS, 16];
        out.push(check(&format!("{mode:?} shape (256, d_out)"), if ok { 0.0 } else { 1.0 }, 0.0));
    }

    for mode in [FusionMode::Concat, FusionMode::CrossAttn] {
        let mut cfg = FusionConfig::new(mode, 6, 6, 6);
        cfg.heads = 2;
        let model = FusionModel::init(cfg, seed ^ 1)?;
        let clip = random_tokens(&mut rng, 8, 6)?;
        let diff = random_tokens(&mut rng, 8, 6)?;
        out.push(check(
            &format!("{mode:?} gradient vs finite differences"),
            gradient_error(&model, &clip, &diff, seed)?,
            1e-4,
        ));
    }

    let mut cfg = FusionConfig::new(FusionMode::CrossAttn, 6, 6, 6);
    cfg.heads = 2;
    let model = FusionModel::init(cfg, seed ^ 2)?;
    let attn = model.attn.as_ref().unwrap();
    let clip = random_tokens(&mut rng, 8, 6)?;
    let diff = random_tokens(&mut rng, 8, 6)?;
    let rows = attention_probs(&clip, &diff, attn)?.sum(D::Minus1)?.flatten_all()?.to_vec1::<f64>()?;
    out.push(check(
        "CrossAttn weights sum to 1",
        rows.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max),
        1e-6,
    ));

    let perm: Vec<u32> = [3u32, 7, 0, 5, 1, 6, 2, 4].to_vec();
    let idx = Tensor::new(perm.as_slice(), &Device::Cpu)?;
    let diff_p = diff.index_select(&idx, 0)?;
    let base = from_tensor(&model.forward(&clip, &diff)?)?;
    let permuted = from_tensor(&model.forward(&clip, &diff_p)?)?;
    out.push(check(
        "CrossAttn invariant to diffusion-token permutation",
        (&base - &permuted).iter().map(|v| v.abs()).fold(0.0, f64::max),
        1e-6,
    ));

    let mut cfg = FusionConfig::new(FusionMode::Concat, 6, 6, 6);
    cfg.heads = 2;
    let concat = FusionModel::init(cfg, seed ^ 3)?;
    let a = from_tensor(&concat.forward(&clip, &diff)?)?;
    let b = from_tensor(&concat.forward(&clip, &diff_p)?)?;
    let moved = (&a - &b).iter().map(|v| v.abs()).fold(0.0, f64::max);
    // Passes when the permutation changes the output.
    out.push(check("Concat sensitive to diffusion-token permutation", if moved > 1e-9 { 0.0 } else { 1.0 }, 0.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Provenance;
    use proptest::prelude::*;

    fn feature(values: Array3<f64>) -> FeatureTensor<f64> {
        FeatureTensor::new(
            values,
            Provenance {
                image_id: "i".into(),
                block: "U-L1-R1-B0-Cross-Q".parse().unwrap(),
                timestep: 50,
                guidance_scale: 1.0,
                prompt_hash: String::new(),
                seed: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn resize_identity_constant_and_ramp() {
        let v = Array3::from_shape_fn((16, 16, 3), |(i, j, k)| ((i * 31 + j * 7 + k) as f64).sin());
        let g = resize_tokens(&feature(v.clone())).unwrap();
        assert_eq!(g.tokens, v.into_shape_with_order((256, 3)).unwrap());

        let g = resize_tokens(&feature(Array3::from_elem((32, 32, 2), 0.7))).unwrap();
        assert!(g.tokens.iter().all(|&x| x == 0.7));

        // A linear ramp is reproduced at the half-pixel source coordinate.
        let ramp = |y: f64, x: f64, k: usize| 0.3 * y - 1.1 * x + k as f64;
        let v = Array3::from_shape_fn((32, 32, 2), |(i, j, k)| ramp(i as f64, j as f64, k));
        let g = resize_tokens(&feature(v)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                for k in 0..2 {
                    let want = ramp(2.0 * y as f64 + 0.5, 2.0 * x as f64 + 0.5, k);
                    assert!((g.tokens[[y * 16 + x, k]] - want).abs() < 1e-10);
                }
            }
        }
        let small = resize_tokens(&feature(Array3::from_elem((2, 3, 4), 1.0))).unwrap();
        assert_eq!(small.tokens.dim(), (256, 4));
    }

    #[test]
    fn projector_zero_and_shape_errors() {
        let p = Projector::zeros(4, 5, 3).unwrap();
        let out = projector(&Array2::from_elem((7, 4), 2.0), &p).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(projector(&Array2::zeros((7, 3)), &p).is_err());
        let bad = Projector::new(
            Tensor::zeros((4, 5), DType::F64, &Device::Cpu).unwrap(),
            Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap(),
            Tensor::zeros((5, 3), DType::F64, &Device::Cpu).unwrap(),
            Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap(),
        );
        assert!(bad.is_err());
    }

    /// GELU(x) for x >= 0 sits within 0.17 of x, so an identity-weighted
    /// projector on positive inputs is near the identity.
    #[test]
    fn identity_projector_is_near_identity() {
        let eye = Tensor::eye(4, DType::F64, &Device::Cpu).unwrap();
        let z = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        let p = Projector::new(eye.clone(), z.clone(), eye, z).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| 1.0 + (i + j) as f64);
        let y = projector(&x, &p).unwrap();
        assert!((&y - &x).iter().all(|d| d.abs() < 0.17));
    }

    #[test]
    fn concat_block_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip_only = Projector::init(4, 6, 5, &mut rng).unwrap();
        // Concat projector whose diffusion rows are zero.
        let w1 = Tensor::cat(&[&clip_only.w1, &Tensor::zeros((3, 6), DType::F64, &Device::Cpu).unwrap()], 0).unwrap();
        let p = Projector::new(w1, clip_only.b1.clone(), clip_only.w2.clone(), clip_only.b2.clone()).unwrap();
        let clip = TokenGrid::new(Array2::from_shape_fn((256, 4), |(i, j)| ((i * 4 + j) as f64).cos()), TokenSource::Clip, (16, 16)).unwrap();
        let diff = TokenGrid::new(Array2::zeros((256, 3)), TokenSource::Diffusion, (16, 16)).unwrap();
        let fused = concat_fuse(&clip, &diff, &p).unwrap();
        let direct = projector(&clip.tokens, &clip_only).unwrap();
        assert_eq!(fused.tokens.dim(), (256, 5));
        assert!((&fused.tokens - &direct).iter().all(|d| d.abs() < 1e-12));
        let short = TokenGrid::new(Array2::zeros((4, 3)), TokenSource::Diffusion, (2, 2)).unwrap();
        assert!(matches!(concat_fuse(&clip, &short, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_keys_collapse_to_single_token() {
        let mut cfg = FusionConfig::new(FusionMode::CrossAttn, 6, 5, 8);
        cfg.heads = 2;
        let model = FusionModel::init(cfg, 3).unwrap();
        let attn = model.attn.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clip = random_tokens(&mut rng, 256, 6).unwrap();
        let one = random_tokens(&mut rng, 1, 5).unwrap();
        let many = one.broadcast_as((256, 5)).unwrap().contiguous().unwrap();
        let probs = from_tensor(&attention_probs(&clip, &many, attn).unwrap().get(0).unwrap()).unwrap();
        assert!(probs.iter().all(|&p| (p - 1.0 / 256.0).abs() < 1e-15));

        // Against one token attended with probability 1.
        let v = layer_norm(&one, &attn.norm_kv).unwrap().matmul(&attn.wv).unwrap();
        let expected = (&clip + v.matmul(&attn.wo).unwrap().broadcast_as((256, 6)).unwrap()).unwrap();
        let want = from_tensor(&model.projector.forward(&expected).unwrap()).unwrap();
        let got = from_tensor(&model.forward(&clip, &many).unwrap()).unwrap();
        assert!((&got - &want).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn head_divisibility() {
        let mut cfg = FusionConfig::new(FusionMode::CrossAttn, 6, 6, 10);
        cfg.heads = 4;
        assert!(FusionModel::init(cfg.clone(), 0).is_err());
        cfg.mode = FusionMode::Concat;
        assert!(FusionModel::init(cfg, 0).is_ok());
    }

    #[test]
    fn built_in_checks_pass() {
        for r in run_checks(11).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn gradients_and_permutation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for mode in [FusionMode::Concat, FusionMode::CrossAttn] {
                let mut cfg = FusionConfig::new(mode, 6, 6, 6);
                cfg.heads = 2;
                let model = FusionModel::init(cfg, seed).unwrap();
                let clip = random_tokens(&mut rng, 8, 6).unwrap();
                let diff = random_tokens(&mut rng, 8, 6).unwrap();
                let err = gradient_error(&model, &clip, &diff, seed).unwrap();
                prop_assert!(err < 1e-4, "{mode:?}: {err}");
            }
            let mut cfg = FusionConfig::new(FusionMode::CrossAttn, 6, 4, 6);
            cfg.heads = 3;
            let model = FusionModel::init(cfg, seed).unwrap();
            let clip = random_tokens(&mut rng, 8, 6).unwrap();
            let diff = random_tokens(&mut rng, 8, 4).unwrap();
            let mut order: Vec<u32> = (0..8).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let idx = Tensor::new(order.as_slice(), &Device::Cpu).unwrap();
            let a = from_tensor(&model.forward(&clip, &diff).unwrap()).unwrap();
            let b = from_tensor(&model.forward(&clip, &diff.index_select(&idx, 0).unwrap()).unwrap()).unwrap();
            prop_assert!((&a - &b).iter().all(|d| d.abs() < 1e-6));
        }
    }
}
