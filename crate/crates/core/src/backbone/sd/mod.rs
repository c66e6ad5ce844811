//! Stable Diffusion (1.x/2.x U-Net topology) backend on candle.
//!
//! Loads a diffusers-layout model directory:
//!
//! ```text
//! <root>/unet/{config.json, diffusion_pytorch_model.safetensors}
//! <root>/vae/{config.json, diffusion_pytorch_model.safetensors}
//! <root>/text_encoder/{config.json, model.safetensors}
//! <root>/tokenizer/{tokenizer.json, tokenizer_config.json}
//! <root>/scheduler/scheduler_config.json
//! ```

mod blocks;
mod capture;
mod clip;
pub mod config;
mod unet;
mod vae;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use ndarray::{Array2, Array3, Array4};

use self::capture::Capture;
use self::config::{read_json, TextConfig, TokenizerConfig, UNetConfig, VaeConfig};
use super::{
    AttentionLayerInfo, BlockAddress, DenoiserBackend, FeatureType, NoiseSchedule, PassOutput,
    PromptEmbedding, Stage, TapShape,
};
use crate::error::{Error, Result};

/// Where the model lives and how to run it.
#[derive(Debug, Clone)]
pub struct SdOptions {
    pub root: PathBuf,
    /// `cpu`, `cuda` or `cuda:N`.
    pub device: String,
    /// Overrides the input resolution (defaults to `sample_size * vae factor`).
    pub image_size: Option<usize>,
    /// Overrides the backend id (defaults to the directory name).
    pub backend_id: Option<String>,
}

impl SdOptions {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            device: "cpu".into(),
            image_size: None,
            backend_id: None,
        }
    }
}

pub fn parse_device(spec: &str) -> Result<Device> {
    match spec {
        "cpu" => Ok(Device::Cpu),
        "cuda" => Ok(Device::new_cuda(0)?),
        s if s.starts_with("cuda:") => {
            let n: usize = s[5..]
                .parse()
                .map_err(|_| Error::Config(format!("bad device `{s}`")))?;
            Ok(Device::new_cuda(n)?)
        }
        other => Err(Error::Config(format!("unknown device `{other}` (cpu, cuda, cuda:N)"))),
    }
}

/// Shape of a tap for a U-Net config at a given latent size, or why it does
/// not exist.
pub fn resolve_tap_shape(cfg: &UNetConfig, latent_hw: usize, tap: &BlockAddress) -> std::result::Result<TapShape, String> {
    let n = cfg.block_out_channels.len();
    let level = tap.level as usize;
    if level >= n {
        return Err(format!("level {level} >= {n} levels"));
    }
    let (channels, down_factor, has_attn, repeats, depth_level) = match tap.stage {
        Stage::Down => (
            cfg.block_out_channels[level],
            level,
            cfg.has_cross_attention(level),
            cfg.layers_per_block,
            level,
        ),
        Stage::Up => (
            cfg.block_out_channels[n - 1 - level],
            n - 1 - level,
            cfg.up_has_cross_attention(level),
            cfg.layers_per_block + 1,
            n - 1 - level,
        ),
    };
    if tap.repeat as usize >= repeats {
        return Err(format!("repeat {} >= {repeats} resnets at this level", tap.repeat));
    }
    if tap.feature_type != FeatureType::ResOut {
        if !has_attn {
            return Err("level has no cross-attention transformer".into());
        }
        let depth = cfg.transformer_layers_per_block.get(depth_level);
        if tap.block as usize >= depth {
            return Err(format!("block {} >= {depth} transformer blocks", tap.block));
        }
    }
    let side = latent_hw >> down_factor;
    if side == 0 {
        return Err("latent too small for this level".into());
    }
    Ok(TapShape {
        height: side,
        width: side,
        channels,
    })
}

/// Every cross-attention layer with its spatial size.
pub fn attention_layer_infos(cfg: &UNetConfig, latent_hw: usize) -> Vec<AttentionLayerInfo> {
    let n = cfg.block_out_channels.len();
    let mut out = Vec::new();
    for level in 0..n {
        if !cfg.has_cross_attention(level) {
            continue;
        }
        for r in 0..cfg.layers_per_block {
            for b in 0..cfg.transformer_layers_per_block.get(level) {
                out.push(AttentionLayerInfo {
                    id: format!("D-L{level}-R{r}-B{b}"),
                    height: latent_hw >> level,
                    width: latent_hw >> level,
                    heads: cfg.heads(level),
                });
            }
        }
    }
    for b in 0..cfg.transformer_layers_per_block.get(n - 1) {
        out.push(AttentionLayerInfo {
            id: format!("M-R0-B{b}"),
            height: latent_hw >> (n - 1),
            width: latent_hw >> (n - 1),
            heads: cfg.heads(n - 1),
        });
    }
    for level in 0..n {
        if !cfg.up_has_cross_attention(level) {
            continue;
        }
        let cfg_level = n - 1 - level;
        for r in 0..=cfg.layers_per_block {
            for b in 0..cfg.transformer_layers_per_block.get(cfg_level) {
                out.push(AttentionLayerInfo {
                    id: format!("U-L{level}-R{r}-B{b}"),
                    height: latent_hw >> cfg_level,
                    width: latent_hw >> cfg_level,
                    heads: cfg.heads(cfg_level),
                });
            }
        }
    }
    out
}

fn weights_file(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for stem in stems {
        for suffix in [".safetensors", ".fp16.safetensors"] {
            let p = dir.join(format!("{stem}{suffix}"));
            if p.exists() {
                return Ok(p);
            }
        }
    }
    Err(Error::Config(format!(
        "no {}.safetensors weights in {}",
        stems[0],
        dir.display()
    )))
}

fn var_builder(file: &Path, device: &Device) -> Result<VarBuilder<'static>> {
    // SAFETY: the weight file is memory-mapped read-only and must not be
    // modified while the model is loaded.
    unsafe { Ok(VarBuilder::from_mmaped_safetensors(&[file], DType::F32, device)?) }
}

pub struct StableDiffusion {
    id: String,
    device: Device,
    unet_cfg: UNetConfig,
    unet: unet::UNet,
    vae: vae::VaeEncoder,
    text: clip::TextEncoder,
    tokenizer: tokenizers::Tokenizer,
    bos: u32,
    eos: u32,
    pad: u32,
    schedule: NoiseSchedule,
    image_size: usize,
    latent_shape: [usize; 3],
}

impl StableDiffusion {
    pub fn load(opts: &SdOptions) -> Result<Self> {
        let root = &opts.root;
        if !root.is_dir() {
            return Err(Error::Config(format!("model directory {} not found", root.display())));
        }
        let device = parse_device(&opts.device)?;
        let unet_cfg: UNetConfig = read_json(&root.join("unet/config.json"))?;
        unet_cfg.validate()?;
        let vae_cfg: VaeConfig = read_json(&root.join("vae/config.json"))?;
        let text_cfg: TextConfig = read_json(&root.join("text_encoder/config.json"))?;
        let schedule = NoiseSchedule::from_file(&root.join("scheduler/scheduler_config.json"))?;

        let unet = unet::UNet::new(
            &unet_cfg,
            var_builder(&weights_file(&root.join("unet"), &["diffusion_pytorch_model"])?, &device)?,
        )?;
        let vae = vae::VaeEncoder::new(
            &vae_cfg,
            var_builder(&weights_file(&root.join("vae"), &["diffusion_pytorch_model"])?, &device)?,
        )?;
        let text = clip::TextEncoder::new(
            &text_cfg,
            var_builder(&weights_file(&root.join("text_encoder"), &["model"])?, &device)?,
        )?;

        let tok_dir = root.join("tokenizer");
        let tokenizer = tokenizers::Tokenizer::from_file(tok_dir.join("tokenizer.json")).map_err(|e| {
            Error::Config(format!(
                "{}: {e} (convert vocab.json/merges.txt with a fast CLIP tokenizer first)",
                tok_dir.join("tokenizer.json").display()
            ))
        })?;
        let tok_cfg: TokenizerConfig = if tok_dir.join("tokenizer_config.json").exists() {
            read_json(&tok_dir.join("tokenizer_config.json"))?
        } else {
            TokenizerConfig::default()
        };
        let lookup = |tok: Option<&config::SpecialToken>, fallback: &str| -> Result<u32> {
            let s = tok.map(|t| t.content()).unwrap_or(fallback);
            tokenizer
                .token_to_id(s)
                .ok_or_else(|| Error::Config(format!("tokenizer has no `{s}` token")))
        };
        let bos = lookup(tok_cfg.bos_token.as_ref(), "<|startoftext|>")?;
        let eos = lookup(tok_cfg.eos_token.as_ref(), "<|endoftext|>")?;
        let pad = lookup(tok_cfg.pad_token.as_ref(), "<|endoftext|>")?;

        let factor = 1usize << (vae_cfg.block_out_channels.len() - 1);
        let image_size = opts
            .image_size
            .unwrap_or(unet_cfg.sample_size.unwrap_or(64) * factor);
        if image_size % (factor << (unet_cfg.block_out_channels.len() - 1)) != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} not divisible by the total downsampling factor"
            )));
        }
        let latent_hw = image_size / factor;
        let id = opts.backend_id.clone().unwrap_or_else(|| {
            root.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "stable-diffusion".into())
        });
        Ok(Self {
            id,
            device,
            latent_shape: [unet_cfg.in_channels, latent_hw, latent_hw],
            unet_cfg,
            unet,
            vae,
            text,
            tokenizer,
            bos,
            eos,
            pad,
            schedule,
            image_size,
        })
    }

    /// Token ids `[bos, words.., eos, pad..]` padded to the text context
    /// length, plus the real-word mask.
    pub fn tokenize(&self, prompt: &str) -> Result<(Vec<u32>, Vec<bool>)> {
        let max = self.text.max_len;
        let enc = self
            .tokenizer
            .encode(prompt, false)
            .map_err(|e| Error::Model(format!("tokenizer: {e}")))?;
        let words: Vec<u32> = enc.get_ids().iter().copied().take(max - 2).collect();
        let mut ids = Vec::with_capacity(max);
        ids.push(self.bos);
        ids.extend_from_slice(&words);
        ids.push(self.eos);
        let mut mask = vec![false; max];
        for m in mask.iter_mut().skip(1).take(words.len()) {
            *m = true;
        }
        ids.resize(max, self.pad);
        Ok((ids, mask))
    }

    pub fn unet_config(&self) -> &UNetConfig {
        &self.unet_cfg
    }

    /// Full pass returning the predicted noise too (used by parity tests).
    pub fn predict_noise(&self, noised: &Array3<f32>, timestep: usize, prompt: &PromptEmbedding) -> Result<Array3<f32>> {
        let sample = self.to_tensor3(noised)?.unsqueeze(0)?;
        let ctx = self.context(prompt)?;
        let mut cap = Capture::new(&[], None).full_pass();
        let eps = self
            .unet
            .forward(&sample, timestep, &ctx, &mut cap)?
            .ok_or_else(|| Error::Model("forward pass stopped early".into()))?;
        from_tensor3(&eps.get(0)?)
    }

    fn to_tensor3(&self, a: &Array3<f32>) -> Result<Tensor> {
        let (c, h, w) = a.dim();
        Ok(Tensor::from_iter(a.iter().copied(), &self.device)?.reshape((c, h, w))?)
    }

    fn context(&self, prompt: &PromptEmbedding) -> Result<Tensor> {
        let (n, d) = prompt.hidden.dim();
        Ok(Tensor::from_iter(prompt.hidden.iter().copied(), &self.device)?.reshape((1, n, d))?)
    }
}

fn from_tensor3(t: &Tensor) -> Result<Array3<f32>> {
    let (a, b, c) = t.dims3()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array3::from_shape_vec((a, b, c), v).map_err(|e| Error::Shape(e.to_string()))
}

fn from_tensor4(t: &Tensor) -> Result<Array4<f32>> {
    let (a, b, c, d) = t.dims4()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array4::from_shape_vec((a, b, c, d), v).map_err(|e| Error::Shape(e.to_string()))
}

impl DenoiserBackend for StableDiffusion {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn image_size(&self) -> usize {
        self.image_size
    }

    fn latent_shape(&self) -> [usize; 3] {
        self.latent_shape
    }

    fn resolve_tap(&self, tap: &BlockAddress) -> std::result::Result<TapShape, String> {
        resolve_tap_shape(&self.unet_cfg, self.latent_shape[1], tap)
    }

    fn attention_layers(&self) -> Vec<AttentionLayerInfo> {
        attention_layer_infos(&self.unet_cfg, self.latent_shape[1])
    }

    fn encode_image(&mut self, pixels: &Array3<f32>) -> Result<Array3<f32>> {
        let s = self.image_size;
        if pixels.dim() != (3, s, s) {
            return Err(Error::Shape(format!(
                "pixels {:?}, expected (3, {s}, {s})",
                pixels.dim()
            )));
        }
        let x = self.to_tensor3(pixels)?.unsqueeze(0)?;
        let latent = self.vae.encode(&x)?;
        from_tensor3(&latent.get(0)?)
    }

    fn embed_prompt(&mut self, prompt: &str) -> Result<PromptEmbedding> {
        let (ids, mask) = self.tokenize(prompt)?;
        let n = ids.len();
        let ids = Tensor::from_vec(ids, (1, n), &self.device)?;
        let hidden = self.text.forward(&ids)?.get(0)?;
        let (n, d) = hidden.dims2()?;
        let v = hidden.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(PromptEmbedding {
            hidden: Array2::from_shape_vec((n, d), v).map_err(|e| Error::Shape(e.to_string()))?,
            token_mask: mask,
        })
    }

    fn denoise_pass(
        &mut self,
        noised: &Array3<f32>,
        timestep: usize,
        prompt: &PromptEmbedding,
        taps: &[BlockAddress],
        attention_resolution: Option<usize>,
    ) -> Result<PassOutput> {
        if noised.shape() != self.latent_shape {
            return Err(Error::Shape(format!(
                "noised latent {:?}, expected {:?}",
                noised.shape(),
                self.latent_shape
            )));
        }
        let sample = self.to_tensor3(noised)?.unsqueeze(0)?;
        let ctx = self.context(prompt)?;
        let mut cap = Capture::new(taps, attention_resolution);
        self.unet.forward(&sample, timestep, &ctx, &mut cap)?;
        let features = cap
            .features
            .iter()
            .map(|(a, t)| Ok((*a, from_tensor3(t)?)))
            .collect::<Result<_>>()?;
        let attention = cap
            .attention
            .iter()
            .map(|(id, t)| Ok((id.clone(), from_tensor4(t)?)))
            .collect::<Result<_>>()?;
        Ok(PassOutput {
            features,
            attention,
        })
    }
}
