//! Forward-diffusion noise schedule, read from the model's own scheduler config.

use std::path::Path;

use ndarray::{ArrayD, Zip};
use serde::Deserialize;

use crate::array::Element;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
pub struct SchedulerConfig {
    #[serde(default = "default_train_steps")]
    pub num_train_timesteps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_beta_schedule")]
    pub beta_schedule: String,
    #[serde(default)]
    pub trained_betas: Option<Vec<f64>>,
}

fn default_train_steps() -> usize {
    1000
}
fn default_beta_start() -> f64 {
    0.0001
}
fn default_beta_end() -> f64 {
    0.02
}
fn default_beta_schedule() -> String {
    "linear".into()
}

/// Cumulative products of `1 - beta_t` for every training timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_config(cfg: &SchedulerConfig) -> Result<Self> {
        let n = cfg.num_train_timesteps;
        if n == 0 {
            return Err(Error::Config("num_train_timesteps must be positive".into()));
        }
        let betas: Vec<f64> = if let Some(b) = &cfg.trained_betas {
            b.clone()
        } else {
            match cfg.beta_schedule.as_str() {
                "linear" => linspace(cfg.beta_start, cfg.beta_end, n),
                "scaled_linear" => linspace(cfg.beta_start.sqrt(), cfg.beta_end.sqrt(), n)
                    .into_iter()
                    .map(|b| b * b)
                    .collect(),
                "squaredcos_cap_v2" => {
                    let f = |t: f64| ((t + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
                    (0..n)
                        .map(|i| {
                            let t1 = i as f64 / n as f64;
                            let t2 = (i + 1) as f64 / n as f64;
                            (1.0 - f(t2) / f(t1)).min(0.999)
                        })
                        .collect()
                }
                other => {
                    return Err(Error::Config(format!("unsupported beta_schedule `{other}`")));
                }
            }
        };
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { alphas_cumprod })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: SchedulerConfig = serde_json::from_str(&text)?;
        Self::from_config(&cfg)
    }

    /// Number of training timesteps (`T_max`).
    pub fn len(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas_cumprod.is_empty()
    }

    pub fn alpha_bar(&self, timestep: usize) -> Result<f64> {
        self.alphas_cumprod.get(timestep).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "timestep {timestep} outside [0, {})",
                self.alphas_cumprod.len()
            ))
        })
    }

    pub fn noise_spec(&self, timestep: usize, seed: u64) -> Result<NoiseSpec> {
        Ok(NoiseSpec {
            timestep,
            seed,
            alpha_bar: self.alpha_bar(timestep)?,
        })
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Noise level of a single forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub timestep: usize,
    pub seed: u64,
    pub alpha_bar: f64,
}

/// `sqrt(alpha_bar) * latent + sqrt(1 - alpha_bar) * noise`, element-wise.
pub fn noised_latent<T: Element>(
    latent: &ArrayD<T>,
    spec: &NoiseSpec,
    noise: &ArrayD<T>,
) -> Result<ArrayD<T>> {
    if latent.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "latent {:?} vs noise {:?}",
            latent.shape(),
            noise.shape()
        )));
    }
    let a = spec.alpha_bar;
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_bar {a} outside (0, 1]")));
    }
    let signal = T::lit(a.sqrt());
    let sigma = T::lit((1.0 - a).sqrt());
    Ok(Zip::from(latent)
        .and(noise)
        .map_collect(|&x, &e| signal * x + sigma * e))
}
