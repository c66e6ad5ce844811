use candle_core::{Result, Tensor};

use crate::backbone::address::{BlockAddress, FeatureType, Stage};

/// Location of a resnet/attention pair inside the U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Site {
    Down { level: u32, repeat: u32 },
    Mid { repeat: u32 },
    Up { level: u32, repeat: u32 },
}

impl Site {
    pub fn address(&self, block: u32, ft: FeatureType) -> Option<BlockAddress> {
        match *self {
            Site::Down { level, repeat } => {
                Some(BlockAddress::new(Stage::Down, level, repeat, block, ft))
            }
            Site::Up { level, repeat } => Some(BlockAddress::new(Stage::Up, level, repeat, block, ft)),
            Site::Mid { .. } => None,
        }
    }

    pub fn layer_id(&self, block: u32) -> String {
        match *self {
            Site::Down { level, repeat } => format!("D-L{level}-R{repeat}-B{block}"),
            Site::Up { level, repeat } => format!("U-L{level}-R{repeat}-B{block}"),
            Site::Mid { repeat } => format!("M-R{repeat}-B{block}"),
        }
    }
}

/// Per-pass capture buffer threaded through the U-Net forward.
#[derive(Debug, Default)]
pub(crate) struct Capture {
    taps: Vec<BlockAddress>,
    attention_resolution: Option<usize>,
    full_pass: bool,
    pub features: Vec<(BlockAddress, Tensor)>,
    pub attention: Vec<(String, Tensor)>,
}

impl Capture {
    pub fn new(taps: &[BlockAddress], attention_resolution: Option<usize>) -> Self {
        Self {
            taps: taps.to_vec(),
            attention_resolution,
            full_pass: false,
            features: Vec::new(),
            attention: Vec::new(),
        }
    }

    pub fn wants(&self, addr: &Option<BlockAddress>) -> bool {
        matches!(addr, Some(a) if self.taps.contains(a))
    }

    /// Stores batch item 0 of a `(B, H*W, C)` token tensor as `(H, W, C)`.
    pub fn record_tokens(&mut self, addr: BlockAddress, x: &Tensor, h: usize, w: usize) -> Result<()> {
        let c = x.dim(2)?;
        let t = x.get(0)?.reshape((h, w, c))?;
        self.features.push((addr, t));
        Ok(())
    }

    /// Stores batch item 0 of a `(B, C, H, W)` map as `(H, W, C)`.
    pub fn record_map(&mut self, addr: BlockAddress, x: &Tensor) -> Result<()> {
        let t = x.get(0)?.permute((1, 2, 0))?.contiguous()?;
        self.features.push((addr, t));
        Ok(())
    }

    pub fn wants_attention(&self, h: usize, w: usize) -> bool {
        matches!(self.attention_resolution, Some(r) if r == h && r == w)
    }

    /// Stores batch item 0 of `(B, heads, H*W, T)` probabilities as `(heads, H, W, T)`.
    pub fn record_attention(&mut self, id: String, probs: &Tensor, h: usize, w: usize) -> Result<()> {
        let p = probs.get(0)?;
        let (heads, _, t) = p.dims3()?;
        self.attention.push((id, p.reshape((heads, h, w, t))?));
        Ok(())
    }

    /// Runs to the output regardless of what has been captured.
    pub fn full_pass(mut self) -> Self {
        self.full_pass = true;
        self
    }

    /// All requested features captured and no attention wanted, so the
    /// remaining forward pass can be skipped.
    pub fn complete(&self) -> bool {
        !self.full_pass && self.attention_resolution.is_none() && self.features.len() >= self.taps.len()
    }
}
