//! CLIP text transformer (transformers `CLIPTextModel` layout).

use candle_core::{DType, Device, Module, Result, Tensor, D};
use candle_nn::{Embedding, LayerNorm, Linear, VarBuilder};

use super::config::TextConfig;

#[derive(Clone, Copy)]
enum Activation {
    Gelu,
    QuickGelu,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Gelu => x.gelu_erf(),
            Activation::QuickGelu => x * candle_nn::ops::sigmoid(&(x * 1.702)?)?,
        }
    }
}

struct EncoderLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderLayer {
    fn new(cfg: &TextConfig, vb: VarBuilder) -> Result<Self> {
        let d = cfg.hidden_size;
        let attn = vb.pp("self_attn");
        Ok(Self {
            ln1: candle_nn::layer_norm(d, cfg.layer_norm_eps, vb.pp("layer_norm1"))?,
            q: candle_nn::linear(d, d, attn.pp("q_proj"))?,
            k: candle_nn::linear(d, d, attn.pp("k_proj"))?,
            v: candle_nn::linear(d, d, attn.pp("v_proj"))?,
            out: candle_nn::linear(d, d, attn.pp("out_proj"))?,
            ln2: candle_nn::layer_norm(d, cfg.layer_norm_eps, vb.pp("layer_norm2"))?,
            fc1: candle_nn::linear(d, cfg.intermediate_size, vb.pp("mlp").pp("fc1"))?,
            fc2: candle_nn::linear(cfg.intermediate_size, d, vb.pp("mlp").pp("fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor, heads: usize, act: Activation) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / heads;
        let h = self.ln1.forward(x)?;
        let split = |t: Tensor| -> Result<Tensor> {
            t.reshape((b, n, heads, hd))?.transpose(1, 2)?.contiguous()
        };
        let q = split((self.q.forward(&h)? * (hd as f64).powf(-0.5))?)?;
        let k = split(self.k.forward(&h)?)?;
        let v = split(self.v.forward(&h)?)?;
        let scores = q.matmul(&k.t()?.contiguous()?)?.broadcast_add(mask)?;
        let probs = candle_nn::ops::softmax_last_dim(&scores)?;
        let a = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        let x = (self.out.forward(&a)? + x)?;
        let h = self.fc2.forward(&act.apply(&self.fc1.forward(&self.ln2.forward(&x)?)?)?)?;
        x + h
    }
}

pub(crate) struct TextEncoder {
    token_embedding: Embedding,
    position_embedding: Embedding,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    heads: usize,
    act: Activation,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new(cfg: &TextConfig, vb: VarBuilder) -> Result<Self> {
        // Older checkpoints nest everything under `text_model.`.
        let tm = if vb.contains_tensor("text_model.embeddings.token_embedding.weight") {
            vb.pp("text_model")
        } else {
            vb
        };
        let act = match cfg.hidden_act.as_str() {
            "gelu" => Activation::Gelu,
            "quick_gelu" => Activation::QuickGelu,
            other => candle_core::bail!("unsupported text activation `{other}`"),
        };
        let emb = tm.pp("embeddings");
        Ok(Self {
            token_embedding: candle_nn::embedding(cfg.vocab_size, cfg.hidden_size, emb.pp("token_embedding"))?,
            position_embedding: candle_nn::embedding(
                cfg.max_position_embeddings,
                cfg.hidden_size,
                emb.pp("position_embedding"),
            )?,
            layers: (0..cfg.num_hidden_layers)
                .map(|i| EncoderLayer::new(cfg, tm.pp("encoder").pp("layers").pp(i.to_string())))
                .collect::<Result<_>>()?,
            final_norm: candle_nn::layer_norm(cfg.hidden_size, cfg.layer_norm_eps, tm.pp("final_layer_norm"))?,
            heads: cfg.num_attention_heads,
            act,
            max_len: cfg.max_position_embeddings,
        })
    }

    fn causal_mask(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = (0..n)
            .flat_map(|i| (0..n).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
            .collect();
        Tensor::from_vec(v, (n, n), device)?.to_dtype(dtype)
    }

    /// `(B, n)` token ids to `(B, n, hidden)` final-layer-normed states.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let n = ids.dim(D::Minus1)?;
        let positions = Tensor::arange(0u32, n as u32, ids.device())?.unsqueeze(0)?;
        let mut x = self
            .token_embedding
            .forward(ids)?
            .broadcast_add(&self.position_embedding.forward(&positions)?)?;
        let mask = Self::causal_mask(n, x.dtype(), ids.device())?;
        for layer in &self.layers {
            x = layer.forward(&x, &mask, self.heads, self.act)?;
        }
        self.final_norm.forward(&x)
    }
}
