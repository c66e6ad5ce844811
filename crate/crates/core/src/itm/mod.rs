//! Image-text matching from cross-attention: aggregate attention maps over
//! layers, pool tokens, and reduce with LogSumExp.

mod eval;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::CrossAttnStack;
use crate::error::{Error, Result};
use crate::hashing::hex16;

pub use eval::{
    evaluate_benchmark, itm_score, score_stacks, BenchmarkResult, DiffusionScorer, RecordOutcome, Summary, TextImageScorer,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenPolicy {
    /// Mean over real word tokens (start, end and padding excluded).
    #[default]
    NonPaddingMean,
    AllTokensMean,
}

/// How per-(timestep, trial) maps become one score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ensemble {
    /// Pool each timestep separately and average the scores.
    #[default]
    MeanOfScores,
    /// Sum the maps of all timesteps of a trial, then pool once.
    SumBeforePool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItmConfig {
    pub timesteps: Vec<usize>,
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Spatial size of admitted attention layers.
    pub resolution: usize,
    pub token_policy: TokenPolicy,
    pub temperature: f64,
    #[serde(default)]
    pub ensemble: Ensemble,
}

impl Default for ItmConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![189, 389, 589, 789, 989],
            trials: 3,
            base_seed: 0,
            resolution: 16,
            token_policy: TokenPolicy::NonPaddingMean,
            temperature: 1.0,
            ensemble: Ensemble::MeanOfScores,
        }
    }
}

impl ItmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(Error::InvalidArgument("ITM timesteps must be non-empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("ITM trials must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.resolution == 0 {
            return Err(Error::InvalidArgument("resolution must be > 0".into()));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        hex16(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItmScore {
    pub value: f64,
    /// Trial-averaged pooled score per timestep.
    pub per_timestep: BTreeMap<usize, f64>,
    /// Score of each trial on its own, in seed order.
    pub per_trial: Vec<f64>,
    pub config_hash: String,
}

/// Sums head-averaged maps over layers and stacks, per token: `(H, W, T)`.
pub fn aggregate_per_token(stacks: &[CrossAttnStack], resolution: usize) -> Result<Array3<f64>> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no attention stacks to aggregate".into()))?;
    let n_tokens = first.n_tokens();
    let mut acc = Array3::<f64>::zeros((resolution, resolution, n_tokens));
    let mut admitted = 0;
    for stack in stacks {
        if stack.token_mask != first.token_mask || stack.prompt_hash != first.prompt_hash {
            return Err(Error::InvalidArgument(
                "attention stacks come from different prompts".into(),
            ));
        }
        for layer in &stack.layers {
            let (heads, h, w, t) = layer.probs.dim();
            if h != resolution || w != resolution {
                return Err(Error::Shape(format!(
                    "layer {} is {h}x{w}, expected {resolution}x{resolution}",
                    layer.id
                )));
            }
            if t != n_tokens || heads == 0 {
                return Err(Error::Shape(format!("layer {} has {heads} heads and {t} tokens", layer.id)));
            }
            let mean = layer.probs.mapv(|v| v as f64).mean_axis(Axis(0)).unwrap();
            acc += &mean;
            admitted += 1;
        }
    }
    if admitted == 0 {
        return Err(Error::InvalidArgument("no admitted attention layers".into()));
    }
    Ok(acc)
}

/// Aggregated attention pooled over tokens to one `(H, W)` map.
pub fn aggregate_attention(stacks: &[CrossAttnStack], resolution: usize, policy: TokenPolicy) -> Result<Array2<f64>> {
    let per_token = aggregate_per_token(stacks, resolution)?;
    let mask = &stacks[0].token_mask;
    match policy {
        TokenPolicy::AllTokensMean => Ok(per_token.mean_axis(Axis(2)).unwrap()),
        TokenPolicy::NonPaddingMean => {
            let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
            if idx.is_empty() {
                return Err(Error::InvalidArgument("prompt has no real tokens".into()));
            }
            let mut out = Array2::<f64>::zeros((resolution, resolution));
            for &i in &idx {
                out += &per_token.index_axis(Axis(2), i);
            }
            Ok(out / idx.len() as f64)
        }
    }
}

/// `tau * log(sum(exp(x / tau)))`, shifted by the max for stability.
pub fn lse_pool(map: ArrayView2<f64>, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be > 0")));
    }
    if map.is_empty() {
        return Err(Error::InvalidArgument("empty map".into()));
    }
    if !map.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in map".into()));
    }
    let m = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = map.iter().map(|&v| ((v - m) / temperature).exp()).sum();
    Ok(m + temperature * s.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinogroundDecision {
    pub text_correct: bool,
    pub image_correct: bool,
    pub group_correct: bool,
}

/// `s_ij` is the score of image `i` with caption `j`. Ties are incorrect.
pub fn score_winoground(s00: f64, s01: f64, s10: f64, s11: f64) -> WinogroundDecision {
    let text_correct = s00 > s01 && s11 > s10;
    let image_correct = s00 > s10 && s11 > s01;
    WinogroundDecision {
        text_correct,
        image_correct,
        group_correct: text_correct && image_correct,
    }
}

/// Both images must prefer their own statement. Ties are incorrect.
pub fn score_mmvp_vlm(sa_ta: f64, sa_tb: f64, sb_ta: f64, sb_tb: f64) -> bool {
    sa_ta > sa_tb && sb_tb > sb_ta
}
