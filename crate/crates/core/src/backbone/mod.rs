//! Turns a latent text-to-image denoiser into a feature extractor.
//!
//! A [`DenoiserBackend`] encodes images to latents, embeds prompts and runs a
//! single noised forward pass while capturing activations at registered
//! [`BlockAddress`]es and, optionally, cross-attention probabilities. The
//! [`Extractor`] drives a backend over timesteps and noise trials and attaches
//! provenance to everything it returns.

pub mod address;
pub mod preprocess;
pub mod schedule;
pub mod sd;

use std::collections::VecDeque;
use std::path::PathBuf;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use address::{parse_block_address, BlockAddress, FeatureType, Stage};
pub use schedule::{noised_latent, NoiseSchedule, NoiseSpec, SchedulerConfig};

use crate::array::{Dtype, Element};
use crate::error::{Error, Result};
use crate::hashing::prompt_hash;

/// Who, where and when a feature map came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub block: BlockAddress,
    pub timestep: usize,
    /// 0 for unconditional passes, 1 for raw conditional passes, `s` for
    /// guidance-amplified features.
    pub guidance_scale: f64,
    pub prompt_hash: String,
    pub seed: u64,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/t{}/s{}/{}/seed{}",
            self.image_id, self.block, self.timestep, self.guidance_scale, self.prompt_hash, self.seed
        )
    }
}

/// One captured activation map, `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor<T = f32> {
    pub values: Array3<T>,
    pub provenance: Provenance,
}

impl<T: Element> FeatureTensor<T> {
    pub fn new(values: Array3<T>, provenance: Provenance) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite feature values at {}",
                provenance.block
            )));
        }
        Ok(Self { values, provenance })
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn to_f64(&self) -> FeatureTensor<f64> {
        FeatureTensor {
            values: self.values.mapv(|v| v.to_f64().unwrap()),
            provenance: self.provenance.clone(),
        }
    }
}

/// Cross-attention probabilities of one transformer block, `(heads, H, W, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub id: String,
    pub probs: Array4<f32>,
}

/// All admitted cross-attention layers of one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnStack {
    pub image_id: String,
    pub prompt_hash: String,
    pub timestep: usize,
    pub seed: u64,
    /// True for real prompt tokens; start, end and padding positions are false.
    pub token_mask: Vec<bool>,
    pub layers: Vec<AttentionLayer>,
}

impl CrossAttnStack {
    pub fn n_tokens(&self) -> usize {
        self.token_mask.len()
    }

    /// Largest deviation from 1 of any per-position distribution over tokens.
    pub fn max_row_sum_error(&self) -> f32 {
        self.layers
            .iter()
            .flat_map(|l| {
                l.probs
                    .sum_axis(Axis(3))
                    .iter()
                    .map(|s| (s - 1.0).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f32::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRequest {
    pub image_id: String,
    /// Empty string means unconditional.
    pub prompt: String,
    pub timesteps: Vec<usize>,
    pub guidance_scale: f64,
    pub taps: Vec<BlockAddress>,
    /// Number of distinct noise seeds; trial `k` uses `base_seed + k`.
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub capture_cross_attn: bool,
}

impl ExtractionRequest {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        if self.timesteps.is_empty() {
            return Err(Error::InvalidArgument("timesteps must be non-empty".into()));
        }
        if self.taps.is_empty() && !self.capture_cross_attn {
            return Err(Error::InvalidArgument(
                "taps must be non-empty unless cross-attention capture is requested".into(),
            ));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "guidance scale {} must be a finite value >= 0",
                self.guidance_scale
            )));
        }
        if self.capture_cross_attn && self.prompt.is_empty() {
            return Err(Error::InvalidArgument(
                "cross-attention capture requires a prompt".into(),
            ));
        }
        Ok(())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.trials as u64).map(|k| self.base_seed + k)
    }
}

/// Encoded prompt: `(n_tokens, hidden)` states plus the real-token mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub hidden: Array2<f32>,
    pub token_mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLayerInfo {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PassOutput {
    pub features: Vec<(BlockAddress, Array3<f32>)>,
    pub attention: Vec<(String, Array4<f32>)>,
}

/// A latent denoiser that can be tapped. Implementations need not be
/// shareable across threads; run one handle per worker.
pub trait DenoiserBackend {
    /// Model identity, recorded in stores and results.
    fn backend_id(&self) -> &str;
    fn schedule(&self) -> &NoiseSchedule;
    /// Square input resolution in pixels.
    fn image_size(&self) -> usize;
    /// `(channels, height, width)` of the latent.
    fn latent_shape(&self) -> [usize; 3];
    /// Output shape of a tap, or the reason it does not exist in this model.
    fn resolve_tap(&self, tap: &BlockAddress) -> std::result::Result<TapShape, String>;
    fn attention_layers(&self) -> Vec<AttentionLayerInfo>;
    /// `(3, S, S)` pixels in `[-1, 1]` to a latent of [`Self::latent_shape`].
    fn encode_image(&mut self, pixels: &Array3<f32>) -> Result<Array3<f32>>;
    fn embed_prompt(&mut self, prompt: &str) -> Result<PromptEmbedding>;
    /// One forward pass on an already-noised latent. Attention is captured
    /// for layers whose spatial size equals `attention_resolution`.
    fn denoise_pass(
        &mut self,
        noised: &Array3<f32>,
        timestep: usize,
        prompt: &PromptEmbedding,
        taps: &[BlockAddress],
        attention_resolution: Option<usize>,
    ) -> Result<PassOutput>;
}

/// Taps validated against a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct TapSet {
    taps: Vec<(BlockAddress, TapShape)>,
}

impl TapSet {
    pub fn register<B: DenoiserBackend + ?Sized>(backend: &B, taps: &[BlockAddress]) -> Result<Self> {
        let mut out: Vec<(BlockAddress, TapShape)> = Vec::with_capacity(taps.len());
        for tap in taps {
            if out.iter().any(|(a, _)| a == tap) {
                continue;
            }
            let shape = backend.resolve_tap(tap).map_err(|reason| Error::UnresolvableTap {
                address: tap.to_string(),
                backend: backend.backend_id().to_string(),
                reason,
            })?;
            out.push((*tap, shape));
        }
        Ok(Self { taps: out })
    }

    pub fn addresses(&self) -> Vec<BlockAddress> {
        self.taps.iter().map(|(a, _)| *a).collect()
    }

    pub fn shape(&self, tap: &BlockAddress) -> Option<TapShape> {
        self.taps.iter().find(|(a, _)| a == tap).map(|(_, s)| *s)
    }
}

#[derive(Debug, Clone)]
pub enum ImageInput {
    Path(PathBuf),
    /// `(3, S, S)` in `[-1, 1]`.
    Pixels(Array3<f32>),
    /// Already-encoded latent.
    Latent(Array3<f32>),
}

#[derive(Debug, Clone)]
pub struct ExtractorOptions {
    /// Spatial size of attention layers admitted into a [`CrossAttnStack`].
    pub attention_resolution: usize,
    /// Number of encoded latents kept, keyed by image id.
    pub latent_cache: usize,
}

impl Default for ExtractorOptions {
    fn default() -> Self {
        Self {
            attention_resolution: 16,
            latent_cache: 8,
        }
    }
}

/// Everything produced by [`Extractor::extract`].
#[derive(Debug, Clone, Default)]
pub struct Extraction {
    /// One tensor per (trial, timestep, tap), in that nesting order. Conditional
    /// when the prompt is non-empty, unconditional otherwise.
    pub features: Vec<FeatureTensor>,
    /// Matching unconditional tensors, present when the prompt is non-empty
    /// and the guidance scale is positive.
    pub unconditional: Vec<FeatureTensor>,
    pub attention: Vec<CrossAttnStack>,
}

/// Standard-normal noise for one trial seed.
pub fn trial_noise(seed: u64, shape: [usize; 3]) -> Array3<f32> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

pub struct Extractor<B> {
    backend: B,
    options: ExtractorOptions,
    latents: VecDeque<(String, Array3<f32>)>,
}

impl<B: DenoiserBackend> Extractor<B> {
    pub fn new(backend: B) -> Self {
        Self::with_options(backend, ExtractorOptions::default())
    }

    pub fn with_options(backend: B, options: ExtractorOptions) -> Self {
        Self {
            backend,
            options,
            latents: VecDeque::new(),
        }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    pub fn options(&self) -> &ExtractorOptions {
        &self.options
    }

    /// Encodes (or fetches from cache) the latent of an image.
    pub fn latent(&mut self, image_id: &str, image: &ImageInput) -> Result<Array3<f32>> {
        if let Some((_, l)) = self.latents.iter().find(|(id, _)| id == image_id) {
            return Ok(l.clone());
        }
        let latent = match image {
            ImageInput::Latent(l) => l.clone(),
            ImageInput::Pixels(p) => self.backend.encode_image(p)?,
            ImageInput::Path(path) => {
                let pixels = preprocess::prepare_image(path, self.backend.image_size())?;
                self.backend.encode_image(&pixels)?
            }
        };
        let expected = self.backend.latent_shape();
        if latent.shape() != expected {
            return Err(Error::Shape(format!(
                "latent {:?}, backend expects {:?}",
                latent.shape(),
                expected
            )));
        }
        if self.options.latent_cache > 0 {
            if self.latents.len() >= self.options.latent_cache {
                self.latents.pop_front();
            }
            self.latents.push_back((image_id.to_string(), latent.clone()));
        }
        Ok(latent)
    }

    pub fn extract(&mut self, request: &ExtractionRequest, image: &ImageInput) -> Result<Extraction> {
        self.extract_inner(request, image).map_err(|e| Error::Extraction {
            image_id: request.image_id.clone(),
            prompt_hash: prompt_hash(&request.prompt),
            source: Box::new(e),
        })
    }

    /// Cross-attention stacks only: one per (trial, timestep).
    pub fn capture_attention(&mut self, request: &ExtractionRequest, image: &ImageInput) -> Result<Vec<CrossAttnStack>> {
        if request.prompt.is_empty() {
            return Err(Error::InvalidArgument(
                "cross-attention capture requires a prompt".into(),
            ));
        }
        let req = ExtractionRequest {
            taps: Vec::new(),
            capture_cross_attn: true,
            guidance_scale: 0.0,
            ..request.clone()
        };
        Ok(self.extract(&req, image)?.attention)
    }

    fn extract_inner(&mut self, request: &ExtractionRequest, image: &ImageInput) -> Result<Extraction> {
        request.validate()?;
        let taps = TapSet::register(&self.backend, &request.taps)?;
        let tap_list = taps.addresses();
        let attn_res = request.capture_cross_attn.then_some(self.options.attention_resolution);
        if attn_res.is_some() {
            let admitted = self
                .backend
                .attention_layers()
                .into_iter()
                .filter(|l| l.height == self.options.attention_resolution && l.width == l.height)
                .count();
            if admitted == 0 {
                return Err(Error::InvalidArgument(format!(
                    "no cross-attention layers at {0}x{0} in backend `{1}`",
                    self.options.attention_resolution,
                    self.backend.backend_id()
                )));
            }
        }
        let schedule_len = self.backend.schedule().len();
        if let Some(t) = request.timesteps.iter().find(|&&t| t >= schedule_len) {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [0, {schedule_len})"
            )));
        }

        let latent = self.latent(&request.image_id, image)?.into_dyn();
        let cond_hash = prompt_hash(&request.prompt);
        let uncond_hash = prompt_hash("");
        let conditional = !request.prompt.is_empty();
        let cond_emb = self.backend.embed_prompt(&request.prompt)?;
        let uncond_emb = if conditional && request.guidance_scale > 0.0 && !tap_list.is_empty() {
            Some(self.backend.embed_prompt("")?)
        } else {
            None
        };

        let mut out = Extraction::default();
        for seed in request.seeds() {
            let noise = trial_noise(seed, self.backend.latent_shape()).into_dyn();
            for &t in &request.timesteps {
                let spec = self.backend.schedule().noise_spec(t, seed)?;
                let noised = to3(noised_latent(&latent, &spec, &noise)?)?;
                let pass = self
                    .backend
                    .denoise_pass(&noised, t, &cond_emb, &tap_list, attn_res)?;
                let scale = if conditional { 1.0 } else { 0.0 };
                self.collect(&mut out.features, &taps, pass.features, &request.image_id, t, scale, &cond_hash, seed)?;
                if attn_res.is_some() {
                    out.attention.push(CrossAttnStack {
                        image_id: request.image_id.clone(),
                        prompt_hash: cond_hash.clone(),
                        timestep: t,
                        seed,
                        token_mask: cond_emb.token_mask.clone(),
                        layers: pass
                            .attention
                            .into_iter()
                            .map(|(id, probs)| AttentionLayer { id, probs })
                            .collect(),
                    });
                }
                if let Some(u) = &uncond_emb {
                    let pass = self.backend.denoise_pass(&noised, t, u, &tap_list, None)?;
                    self.collect(&mut out.unconditional, &taps, pass.features, &request.image_id, t, 0.0, &uncond_hash, seed)?;
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn collect(
        &self,
        sink: &mut Vec<FeatureTensor>,
        taps: &TapSet,
        mut captured: Vec<(BlockAddress, Array3<f32>)>,
        image_id: &str,
        timestep: usize,
        guidance_scale: f64,
        prompt_hash: &str,
        seed: u64,
    ) -> Result<()> {
        for tap in taps.addresses() {
            let idx = captured
                .iter()
                .position(|(a, _)| *a == tap)
                .ok_or_else(|| Error::Model(format!("backend did not capture tap {tap}")))?;
            let (_, values) = captured.swap_remove(idx);
            let expected = taps.shape(&tap).unwrap();
            let (h, w, c) = values.dim();
            if (h, w, c) != (expected.height, expected.width, expected.channels) {
                return Err(Error::Shape(format!(
                    "tap {tap} captured ({h}, {w}, {c}), expected ({}, {}, {})",
                    expected.height, expected.width, expected.channels
                )));
            }
            sink.push(FeatureTensor::new(
                values,
                Provenance {
                    image_id: image_id.to_string(),
                    block: tap,
                    timestep,
                    guidance_scale,
                    prompt_hash: prompt_hash.to_string(),
                    seed,
                },
            )?);
        }
        Ok(())
    }
}

fn to3(a: ArrayD<f32>) -> Result<Array3<f32>> {
    a.into_dimensionality()
        .map_err(|e| Error::Shape(format!("expected a 3-d latent: {e}")))
}
