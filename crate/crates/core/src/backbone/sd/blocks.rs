//! Building blocks shared by the U-Net and the VAE encoder.

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, LayerNorm, Linear, VarBuilder};

use super::capture::{Capture, Site};
use crate::backbone::address::FeatureType;

/// Largest query chunk for self-attention score matrices.
const QUERY_CHUNK: usize = 1024;

pub(crate) fn conv(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    candle_nn::conv2d(cin, cout, k, cfg, vb)
}

pub(crate) struct ResnetBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_emb_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    site: Option<Site>,
}

impl ResnetBlock {
    pub fn new(
        cin: usize,
        cout: usize,
        temb: Option<usize>,
        groups: usize,
        eps: f64,
        site: Option<Site>,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            norm1: candle_nn::group_norm(groups, cin, eps, vb.pp("norm1"))?,
            conv1: conv(cin, cout, 3, 1, 1, vb.pp("conv1"))?,
            time_emb_proj: match temb {
                Some(t) => Some(candle_nn::linear(t, cout, vb.pp("time_emb_proj"))?),
                None => None,
            },
            norm2: candle_nn::group_norm(groups, cout, eps, vb.pp("norm2"))?,
            conv2: conv(cout, cout, 3, 1, 1, vb.pp("conv2"))?,
            shortcut: if cin != cout {
                Some(conv(cin, cout, 1, 1, 0, vb.pp("conv_shortcut"))?)
            } else {
                None
            },
            site,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>, cap: &mut Capture) -> Result<Tensor> {
        let mut h = self.conv1.forward(&candle_nn::ops::silu(&self.norm1.forward(x)?)?)?;
        if let (Some(proj), Some(t)) = (&self.time_emb_proj, temb) {
            let t = proj.forward(&candle_nn::ops::silu(t)?)?;
            h = h.broadcast_add(&t.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?)?;
        }
        let h = self.conv2.forward(&candle_nn::ops::silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        let out = (skip + h)?;
        let addr = self.site.and_then(|s| s.address(0, FeatureType::ResOut));
        if cap.wants(&addr) {
            cap.record_map(addr.unwrap(), &out)?;
        }
        Ok(out)
    }
}

/// Multi-head attention; `context` switches it to cross-attention.
pub(crate) struct Attention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
    scale: f64,
}

impl Attention {
    pub fn new(query_dim: usize, context_dim: usize, heads: usize, head_dim: usize, vb: VarBuilder) -> Result<Self> {
        let inner = heads * head_dim;
        Ok(Self {
            to_q: candle_nn::linear_no_bias(query_dim, inner, vb.pp("to_q"))?,
            to_k: candle_nn::linear_no_bias(context_dim, inner, vb.pp("to_k"))?,
            to_v: candle_nn::linear_no_bias(context_dim, inner, vb.pp("to_v"))?,
            to_out: candle_nn::linear(inner, query_dim, vb.pp("to_out").pp("0"))?,
            heads,
            scale: (head_dim as f64).powf(-0.5),
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// Returns the output and, when `keep_probs` is set, the attention
    /// probabilities `(B, heads, Lq, Lk)`.
    pub fn forward_with_query(
        &self,
        q_raw: &Tensor,
        context: &Tensor,
        keep_probs: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let (b, n, inner) = q_raw.dims3()?;
        let q = self.split_heads(q_raw)?;
        let k = self.split_heads(&self.to_k.forward(context)?)?;
        let v = self.split_heads(&self.to_v.forward(context)?)?;
        let kt = k.t()?.contiguous()?;
        let mut outs = Vec::new();
        let mut probs_all = Vec::new();
        let mut start = 0;
        while start < n {
            let len = QUERY_CHUNK.min(n - start);
            let qc = q.narrow(2, start, len)?;
            let scores = (qc.matmul(&kt)? * self.scale)?;
            let probs = candle_nn::ops::softmax_last_dim(&scores)?;
            outs.push(probs.matmul(&v)?);
            if keep_probs {
                probs_all.push(probs);
            }
            start += len;
        }
        let out = Tensor::cat(&outs, 2)?
            .transpose(1, 2)?
            .reshape((b, n, inner))?;
        let probs = if keep_probs {
            Some(Tensor::cat(&probs_all, 2)?)
        } else {
            None
        };
        Ok((self.to_out.forward(&out)?, probs))
    }

    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let q = self.to_q.forward(x)?;
        Ok(self.forward_with_query(&q, context.unwrap_or(x), false)?.0)
    }

    pub fn query(&self, x: &Tensor) -> Result<Tensor> {
        self.to_q.forward(x)
    }
}

struct GeGlu {
    proj: Linear,
    out: Linear,
}

impl GeGlu {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        let inner = dim * 4;
        Ok(Self {
            proj: candle_nn::linear(dim, inner * 2, vb.pp("net").pp("0").pp("proj"))?,
            out: candle_nn::linear(inner, dim, vb.pp("net").pp("2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.proj.forward(x)?;
        let half = h.dim(D::Minus1)? / 2;
        let hidden = h.narrow(D::Minus1, 0, half)?;
        let gate = h.narrow(D::Minus1, half, half)?;
        self.out.forward(&(hidden * gate.gelu_erf()?)?)
    }
}

struct TransformerBlock {
    norm1: LayerNorm,
    attn1: Attention,
    norm2: LayerNorm,
    attn2: Attention,
    norm3: LayerNorm,
    ff: GeGlu,
    index: u32,
}

impl TransformerBlock {
    fn new(dim: usize, context_dim: usize, heads: usize, index: u32, vb: VarBuilder) -> Result<Self> {
        let head_dim = dim / heads;
        Ok(Self {
            norm1: candle_nn::layer_norm(dim, 1e-5, vb.pp("norm1"))?,
            attn1: Attention::new(dim, dim, heads, head_dim, vb.pp("attn1"))?,
            norm2: candle_nn::layer_norm(dim, 1e-5, vb.pp("norm2"))?,
            attn2: Attention::new(dim, context_dim, heads, head_dim, vb.pp("attn2"))?,
            norm3: candle_nn::layer_norm(dim, 1e-5, vb.pp("norm3"))?,
            ff: GeGlu::new(dim, vb.pp("ff"))?,
            index,
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor, site: Site, h: usize, w: usize, cap: &mut Capture) -> Result<Tensor> {
        let x = (self.attn1.forward(&self.norm1.forward(x)?, None)? + x)?;

        let q = self.attn2.query(&self.norm2.forward(&x)?)?;
        let q_addr = site.address(self.index, FeatureType::CrossQ);
        if cap.wants(&q_addr) {
            cap.record_tokens(q_addr.unwrap(), &q, h, w)?;
        }
        let keep = cap.wants_attention(h, w);
        let (a, probs) = self.attn2.forward_with_query(&q, context, keep)?;
        if let Some(p) = probs {
            cap.record_attention(site.layer_id(self.index), &p, h, w)?;
        }
        let x = (a + x)?;

        let x = (self.ff.forward(&self.norm3.forward(&x)?)? + x)?;
        let out_addr = site.address(self.index, FeatureType::Out);
        if cap.wants(&out_addr) {
            cap.record_tokens(out_addr.unwrap(), &x, h, w)?;
        }
        Ok(x)
    }
}

enum Projection {
    Linear(Linear),
    Conv(Conv2d),
}

/// Spatial transformer: group norm, projection in, transformer blocks,
/// projection out, residual.
pub(crate) struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: Projection,
    blocks: Vec<TransformerBlock>,
    proj_out: Projection,
    site: Site,
}

pub(crate) struct SpatialTransformerConfig {
    pub channels: usize,
    pub heads: usize,
    pub depth: usize,
    pub context_dim: usize,
    pub groups: usize,
    pub linear_projection: bool,
}

impl SpatialTransformer {
    pub fn new(cfg: &SpatialTransformerConfig, site: Site, vb: VarBuilder) -> Result<Self> {
        let c = cfg.channels;
        let (proj_in, proj_out) = if cfg.linear_projection {
            (
                Projection::Linear(candle_nn::linear(c, c, vb.pp("proj_in"))?),
                Projection::Linear(candle_nn::linear(c, c, vb.pp("proj_out"))?),
            )
        } else {
            (
                Projection::Conv(conv(c, c, 1, 1, 0, vb.pp("proj_in"))?),
                Projection::Conv(conv(c, c, 1, 1, 0, vb.pp("proj_out"))?),
            )
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(
                    c,
                    cfg.context_dim,
                    cfg.heads,
                    i as u32,
                    vb.pp("transformer_blocks").pp(i.to_string()),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            norm: candle_nn::group_norm(cfg.groups, c, 1e-6, vb.pp("norm"))?,
            proj_in,
            blocks,
            proj_out,
            site,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor, cap: &mut Capture) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let residual = x;
        let x = self.norm.forward(x)?;
        let to_tokens = |t: &Tensor| -> Result<Tensor> {
            t.permute((0, 2, 3, 1))?.reshape((b, h * w, c))
        };
        let mut x = match &self.proj_in {
            Projection::Linear(l) => l.forward(&to_tokens(&x)?)?,
            Projection::Conv(cv) => to_tokens(&cv.forward(&x)?)?,
        };
        for blk in &self.blocks {
            x = blk.forward(&x, context, self.site, h, w, cap)?;
        }
        let to_map = |t: &Tensor| -> Result<Tensor> {
            t.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()
        };
        let x = match &self.proj_out {
            Projection::Linear(l) => to_map(&l.forward(&x)?)?,
            Projection::Conv(cv) => cv.forward(&to_map(&x)?)?,
        };
        x + residual
    }
}

/// Single-head self-attention over spatial positions with group norm, as in
/// the VAE mid block. Accepts both current (`to_q`) and legacy (`query`)
/// parameter names.
pub(crate) struct SpatialSelfAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    scale: f64,
}

fn linear_any(c: usize, vb: &VarBuilder, names: &[&str]) -> Result<Linear> {
    for name in names {
        let sub = vb.pp(*name);
        if sub.contains_tensor("weight") {
            let w = sub.get_unchecked_dtype("weight", vb.dtype())?;
            let w = if w.rank() == 4 { w.squeeze(3)?.squeeze(2)? } else { w };
            let b = sub.get(c, "bias")?;
            return Ok(Linear::new(w, Some(b)));
        }
    }
    candle_nn::linear(c, c, vb.pp(names[0]))
}

impl SpatialSelfAttention {
    pub fn new(c: usize, groups: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: candle_nn::group_norm(groups, c, eps, vb.pp("group_norm"))?,
            q: linear_any(c, &vb, &["to_q", "query"])?,
            k: linear_any(c, &vb, &["to_k", "key"])?,
            v: linear_any(c, &vb, &["to_v", "value"])?,
            out: linear_any(c, &vb, &["to_out.0", "proj_attn"])?,
            scale: (c as f64).powf(-0.5),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let t = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = self.q.forward(&t)?;
        let k = self.k.forward(&t)?;
        let v = self.v.forward(&t)?;
        let kt = k.t()?.contiguous()?;
        let n = h * w;
        let mut outs = Vec::new();
        let mut start = 0;
        while start < n {
            let len = QUERY_CHUNK.min(n - start);
            let scores = (q.narrow(1, start, len)?.matmul(&kt)? * self.scale)?;
            outs.push(candle_nn::ops::softmax_last_dim(&scores)?.matmul(&v)?);
            start += len;
        }
        let a = self.out.forward(&Tensor::cat(&outs, 1)?)?;
        let a = a.transpose(1, 2)?.reshape((b, c, h, w))?;
        a + x
    }
}

