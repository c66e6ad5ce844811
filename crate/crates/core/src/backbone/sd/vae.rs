//! VAE encoder: pixels in `[-1, 1]` to the scaled latent posterior mean.

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{Conv2d, GroupNorm, VarBuilder};

use super::blocks::{conv, ResnetBlock, SpatialSelfAttention};
use super::capture::Capture;
use super::config::VaeConfig;

const EPS: f64 = 1e-6;

struct EncoderLevel {
    resnets: Vec<ResnetBlock>,
    downsample: Option<Conv2d>,
}

pub(crate) struct VaeEncoder {
    conv_in: Conv2d,
    levels: Vec<EncoderLevel>,
    mid_resnets: [ResnetBlock; 2],
    mid_attention: SpatialSelfAttention,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    quant_conv: Option<Conv2d>,
    latent_channels: usize,
    scaling_factor: f64,
}

impl VaeEncoder {
    pub fn new(cfg: &VaeConfig, vb: VarBuilder) -> Result<Self> {
        let enc = vb.pp("encoder");
        let ch = &cfg.block_out_channels;
        let g = cfg.norm_num_groups;
        let mut levels = Vec::new();
        let mut out_ch = ch[0];
        for i in 0..ch.len() {
            let in_ch = out_ch;
            out_ch = ch[i];
            let vbl = enc.pp("down_blocks").pp(i.to_string());
            let resnets = (0..cfg.layers_per_block)
                .map(|j| {
                    let cin = if j == 0 { in_ch } else { out_ch };
                    ResnetBlock::new(cin, out_ch, None, g, EPS, None, vbl.pp("resnets").pp(j.to_string()))
                })
                .collect::<Result<_>>()?;
            let downsample = if i + 1 < ch.len() {
                Some(conv(out_ch, out_ch, 3, 2, 0, vbl.pp("downsamplers").pp("0").pp("conv"))?)
            } else {
                None
            };
            levels.push(EncoderLevel { resnets, downsample });
        }
        let top = *ch.last().unwrap();
        let mid = enc.pp("mid_block");
        let quant_conv = if cfg.use_quant_conv {
            Some(conv(2 * cfg.latent_channels, 2 * cfg.latent_channels, 1, 1, 0, vb.pp("quant_conv"))?)
        } else {
            None
        };
        Ok(Self {
            conv_in: conv(cfg.in_channels, ch[0], 3, 1, 1, enc.pp("conv_in"))?,
            levels,
            mid_resnets: [
                ResnetBlock::new(top, top, None, g, EPS, None, mid.pp("resnets").pp("0"))?,
                ResnetBlock::new(top, top, None, g, EPS, None, mid.pp("resnets").pp("1"))?,
            ],
            mid_attention: SpatialSelfAttention::new(top, g, EPS, mid.pp("attentions").pp("0"))?,
            norm_out: candle_nn::group_norm(g, top, EPS, enc.pp("conv_norm_out"))?,
            conv_out: conv(top, 2 * cfg.latent_channels, 3, 1, 1, enc.pp("conv_out"))?,
            quant_conv,
            latent_channels: cfg.latent_channels,
            scaling_factor: cfg.scaling_factor,
        })
    }

    /// `(B, 3, H, W)` pixels to `(B, latent_channels, H/f, W/f)` scaled means.
    pub fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        let mut cap = Capture::default();
        let mut x = self.conv_in.forward(pixels)?;
        for level in &self.levels {
            for r in &level.resnets {
                x = r.forward(&x, None, &mut cap)?;
            }
            if let Some(ds) = &level.downsample {
                let padded = x.pad_with_zeros(D::Minus1, 0, 1)?.pad_with_zeros(D::Minus2, 0, 1)?;
                x = ds.forward(&padded)?;
            }
        }
        x = self.mid_resnets[0].forward(&x, None, &mut cap)?;
        x = self.mid_attention.forward(&x)?;
        x = self.mid_resnets[1].forward(&x, None, &mut cap)?;
        x = self.conv_out.forward(&candle_nn::ops::silu(&self.norm_out.forward(&x)?)?)?;
        if let Some(q) = &self.quant_conv {
            x = q.forward(&x)?;
        }
        x.narrow(1, 0, self.latent_channels)? * self.scaling_factor
    }
}
