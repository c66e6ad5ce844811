//! Conditional U-Net with tap capture, following the diffusers
//! `UNet2DConditionModel` layout for SD 1.x/2.x checkpoints.

use candle_core::{Device, Module, Result, Tensor};
use candle_nn::{Conv2d, GroupNorm, Linear, VarBuilder};

use super::blocks::{conv, ResnetBlock, SpatialTransformer, SpatialTransformerConfig};
use super::capture::{Capture, Site};
use super::config::UNetConfig;

struct DownLevel {
    resnets: Vec<ResnetBlock>,
    attentions: Vec<SpatialTransformer>,
    downsample: Option<Conv2d>,
}

struct UpLevel {
    resnets: Vec<ResnetBlock>,
    attentions: Vec<SpatialTransformer>,
    upsample: Option<Conv2d>,
}

pub(crate) struct UNet {
    conv_in: Conv2d,
    time_linear_1: Linear,
    time_linear_2: Linear,
    down: Vec<DownLevel>,
    mid_resnets: [ResnetBlock; 2],
    mid_attention: SpatialTransformer,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    time_channels: usize,
    flip_sin_to_cos: bool,
    freq_shift: f64,
}

impl UNet {
    pub fn new(cfg: &UNetConfig, vb: VarBuilder) -> Result<Self> {
        let ch = &cfg.block_out_channels;
        let n = ch.len();
        let temb = ch[0] * 4;
        let groups = cfg.norm_num_groups;
        let eps = cfg.norm_eps;
        let st_cfg = |level: usize, channels: usize| SpatialTransformerConfig {
            channels,
            heads: cfg.heads(level),
            depth: cfg.transformer_layers_per_block.get(level),
            context_dim: cfg.cross_attention_dim,
            groups,
            linear_projection: cfg.use_linear_projection,
        };

        let mut down = Vec::with_capacity(n);
        let mut out_ch = ch[0];
        for i in 0..n {
            let in_ch = out_ch;
            out_ch = ch[i];
            let vbd = vb.pp("down_blocks").pp(i.to_string());
            let mut resnets = Vec::new();
            let mut attentions = Vec::new();
            for j in 0..cfg.layers_per_block {
                let site = Site::Down {
                    level: i as u32,
                    repeat: j as u32,
                };
                let cin = if j == 0 { in_ch } else { out_ch };
                resnets.push(ResnetBlock::new(
                    cin,
                    out_ch,
                    Some(temb),
                    groups,
                    eps,
                    Some(site),
                    vbd.pp("resnets").pp(j.to_string()),
                )?);
                if cfg.has_cross_attention(i) {
                    attentions.push(SpatialTransformer::new(
                        &st_cfg(i, out_ch),
                        site,
                        vbd.pp("attentions").pp(j.to_string()),
                    )?);
                }
            }
            let downsample = if i + 1 < n {
                Some(conv(out_ch, out_ch, 3, 2, 1, vbd.pp("downsamplers").pp("0").pp("conv"))?)
            } else {
                None
            };
            down.push(DownLevel {
                resnets,
                attentions,
                downsample,
            });
        }

        let mid_ch = ch[n - 1];
        let vbm = vb.pp("mid_block");
        let mid_resnets = [
            ResnetBlock::new(mid_ch, mid_ch, Some(temb), groups, eps, None, vbm.pp("resnets").pp("0"))?,
            ResnetBlock::new(mid_ch, mid_ch, Some(temb), groups, eps, None, vbm.pp("resnets").pp("1"))?,
        ];
        let mid_attention = SpatialTransformer::new(
            &st_cfg(n - 1, mid_ch),
            Site::Mid { repeat: 0 },
            vbm.pp("attentions").pp("0"),
        )?;

        let rev: Vec<usize> = ch.iter().rev().copied().collect();
        let mut up = Vec::with_capacity(n);
        let mut prev_out = rev[0];
        for i in 0..n {
            let out_ch = rev[i];
            let in_ch = rev[(i + 1).min(n - 1)];
            let level_cfg = n - 1 - i;
            let vbu = vb.pp("up_blocks").pp(i.to_string());
            let mut resnets = Vec::new();
            let mut attentions = Vec::new();
            for j in 0..=cfg.layers_per_block {
                let site = Site::Up {
                    level: i as u32,
                    repeat: j as u32,
                };
                let skip = if j == cfg.layers_per_block { in_ch } else { out_ch };
                let cin = if j == 0 { prev_out } else { out_ch };
                resnets.push(ResnetBlock::new(
                    cin + skip,
                    out_ch,
                    Some(temb),
                    groups,
                    eps,
                    Some(site),
                    vbu.pp("resnets").pp(j.to_string()),
                )?);
                if cfg.up_has_cross_attention(i) {
                    attentions.push(SpatialTransformer::new(
                        &st_cfg(level_cfg, out_ch),
                        site,
                        vbu.pp("attentions").pp(j.to_string()),
                    )?);
                }
            }
            let upsample = if i + 1 < n {
                Some(conv(out_ch, out_ch, 3, 1, 1, vbu.pp("upsamplers").pp("0").pp("conv"))?)
            } else {
                None
            };
            prev_out = out_ch;
            up.push(UpLevel {
                resnets,
                attentions,
                upsample,
            });
        }

        Ok(Self {
            conv_in: conv(cfg.in_channels, ch[0], 3, 1, 1, vb.pp("conv_in"))?,
            time_linear_1: candle_nn::linear(ch[0], temb, vb.pp("time_embedding").pp("linear_1"))?,
            time_linear_2: candle_nn::linear(temb, temb, vb.pp("time_embedding").pp("linear_2"))?,
            down,
            mid_resnets,
            mid_attention,
            up,
            norm_out: candle_nn::group_norm(groups, ch[0], eps, vb.pp("conv_norm_out"))?,
            conv_out: conv(ch[0], cfg.out_channels, 3, 1, 1, vb.pp("conv_out"))?,
            time_channels: ch[0],
            flip_sin_to_cos: cfg.flip_sin_to_cos,
            freq_shift: cfg.freq_shift,
        })
    }

    /// Sinusoidal timestep features, computed in f32 the same way diffusers does.
    fn timestep_features(&self, timestep: usize, device: &Device) -> Result<Tensor> {
        let half = self.time_channels / 2;
        let log_max = -(10000f64.ln()) as f32;
        let denom = (half as f64 - self.freq_shift) as f32;
        let args: Vec<f32> = (0..half)
            .map(|i| {
                let exponent = log_max * i as f32 / denom;
                timestep as f32 * exponent.exp()
            })
            .collect();
        let sin: Vec<f32> = args.iter().map(|a| a.sin()).collect();
        let cos: Vec<f32> = args.iter().map(|a| a.cos()).collect();
        let mut v = if self.flip_sin_to_cos {
            [cos, sin].concat()
        } else {
            [sin, cos].concat()
        };
        v.resize(self.time_channels, 0.0);
        Tensor::from_vec(v, (1, self.time_channels), device)
    }

    /// Runs one denoising pass. Returns the predicted noise, or `None` when the
    /// capture finished early and the remainder of the network was skipped.
    pub fn forward(
        &self,
        sample: &Tensor,
        timestep: usize,
        context: &Tensor,
        cap: &mut Capture,
    ) -> Result<Option<Tensor>> {
        let dtype = sample.dtype();
        let t = self.timestep_features(timestep, sample.device())?.to_dtype(dtype)?;
        let emb = self
            .time_linear_2
            .forward(&candle_nn::ops::silu(&self.time_linear_1.forward(&t)?)?)?;

        let mut x = self.conv_in.forward(sample)?;
        let mut skips = vec![x.clone()];
        for level in &self.down {
            for (j, resnet) in level.resnets.iter().enumerate() {
                x = resnet.forward(&x, Some(&emb), cap)?;
                if let Some(attn) = level.attentions.get(j) {
                    x = attn.forward(&x, context, cap)?;
                }
                skips.push(x.clone());
            }
            if let Some(ds) = &level.downsample {
                x = ds.forward(&x)?;
                skips.push(x.clone());
            }
            if cap.complete() {
                return Ok(None);
            }
        }

        x = self.mid_resnets[0].forward(&x, Some(&emb), cap)?;
        x = self.mid_attention.forward(&x, context, cap)?;
        x = self.mid_resnets[1].forward(&x, Some(&emb), cap)?;

        for level in &self.up {
            for (j, resnet) in level.resnets.iter().enumerate() {
                let skip = skips.pop().expect("skip connection count matches block layout");
                x = Tensor::cat(&[&x, &skip], 1)?;
                x = resnet.forward(&x, Some(&emb), cap)?;
                if let Some(attn) = level.attentions.get(j) {
                    x = attn.forward(&x, context, cap)?;
                }
            }
            if let Some(us) = &level.upsample {
                let (_, _, h, w) = x.dims4()?;
                x = us.forward(&x.upsample_nearest2d(h * 2, w * 2)?)?;
            }
            if cap.complete() {
                return Ok(None);
            }
        }

        let x = candle_nn::ops::silu(&self.norm_out.forward(&x)?)?;
        Ok(Some(self.conv_out.forward(&x)?))
    }
}
