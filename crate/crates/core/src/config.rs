//! Run configuration in sectioned `key = value` form.
//!
//! ```ini
//! [run]
//! backend_id = sd-2-1-base
//! seed = 0
//!
//! [itm]
//! timesteps = 189,389,589,789,989
//! trials = 3
//! ```

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};

use crate::backbone::BlockAddress;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode, PromptPolicy};
use crate::hashing::substream_seed;
use crate::itm::{Ensemble, ItmConfig, TokenPolicy};

/// Environment variable that overrides `run.model_dir`.
pub const MODEL_DIR_ENV: &str = "DIFFTAP_MODEL_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    /// Empty means the model directory name.
    pub backend_id: String,
    pub model_dir: PathBuf,
    pub device: String,
    pub store_path: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSection {
    pub timesteps: Vec<usize>,
    pub taps: Vec<BlockAddress>,
    pub trials: usize,
    pub guidance_scale: f64,
    pub attention_resolution: usize,
    pub capture_cross_attn: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageSection {
    pub dropout_probability: f64,
    pub captioner_cmd: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetsSection {
    pub mmvp_vlm: PathBuf,
    pub winoground: PathBuf,
    pub coco_captions: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    pub extraction: ExtractionSection,
    pub itm: ItmConfig,
    pub leakage: LeakageSection,
    pub fusion: FusionConfig,
    pub datasets: DatasetsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection {
                backend_id: String::new(),
                model_dir: PathBuf::from("models/stable-diffusion-2-1-base"),
                device: "cpu".into(),
                store_path: PathBuf::from("store"),
                output_dir: PathBuf::from("out"),
                seed: 0,
                workers: 1,
            },
            extraction: ExtractionSection {
                timesteps: vec![50],
                taps: vec!["U-L1-R1-B0-Cross-Q".parse().unwrap()],
                trials: 1,
                guidance_scale: 1.0,
                attention_resolution: 16,
                capture_cross_attn: false,
            },
            itm: ItmConfig::default(),
            leakage: LeakageSection {
                dropout_probability: 0.3,
                captioner_cmd: String::new(),
            },
            fusion: FusionConfig::new(FusionMode::CrossAttn, 1024, 1280, 4096),
            datasets: DatasetsSection {
                mmvp_vlm: PathBuf::from("data/mmvp_vlm"),
                winoground: PathBuf::from("data/winoground"),
                coco_captions: PathBuf::from("data/coco_captions"),
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn enum_from<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.trim().to_string()))
        .map_err(|_| Error::Config(format!("{key} = `{value}` is not a recognised value")))
}

fn enum_to<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).unwrap().as_str().unwrap().to_string()
}

impl RunConfig {
    /// Sets `section.key` from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "run.backend_id" => self.run.backend_id = v.trim().to_string(),
            "run.model_dir" => self.run.model_dir = PathBuf::from(v.trim()),
            "run.device" => self.run.device = v.trim().to_string(),
            "run.store_path" => self.run.store_path = PathBuf::from(v.trim()),
            "run.output_dir" => self.run.output_dir = PathBuf::from(v.trim()),
            "run.seed" => self.run.seed = parse(key, v)?,
            "run.workers" => self.run.workers = parse(key, v)?,
            "extraction.timesteps" => self.extraction.timesteps = parse_list(key, v)?,
            "extraction.taps" => self.extraction.taps = parse_list(key, v)?,
            "extraction.trials" => self.extraction.trials = parse(key, v)?,
            "extraction.guidance_scale" => self.extraction.guidance_scale = parse(key, v)?,
            "extraction.attention_resolution" => self.extraction.attention_resolution = parse(key, v)?,
            "extraction.capture_cross_attn" => self.extraction.capture_cross_attn = parse(key, v)?,
            "itm.timesteps" => self.itm.timesteps = parse_list(key, v)?,
            "itm.trials" => self.itm.trials = parse(key, v)?,
            "itm.resolution" => self.itm.resolution = parse(key, v)?,
            "itm.temperature" => self.itm.temperature = parse(key, v)?,
            "itm.token_policy" => self.itm.token_policy = enum_from::<TokenPolicy>(key, v)?,
            "itm.ensemble" => self.itm.ensemble = enum_from::<Ensemble>(key, v)?,
            "leakage.dropout_probability" => self.leakage.dropout_probability = parse(key, v)?,
            "leakage.captioner_cmd" => self.leakage.captioner_cmd = v.trim().to_string(),
            "fusion.mode" => self.fusion.mode = enum_from::<FusionMode>(key, v)?,
            "fusion.d_clip" => self.fusion.d_clip = parse(key, v)?,
            "fusion.d_diff" => self.fusion.d_diff = parse(key, v)?,
            "fusion.d_out" => self.fusion.d_out = parse(key, v)?,
            "fusion.heads" => self.fusion.heads = parse(key, v)?,
            "fusion.pre_norm" => self.fusion.pre_norm = parse(key, v)?,
            "fusion.prompt_policy" => self.fusion.prompt_policy = enum_from::<PromptPolicy>(key, v)?,
            "datasets.mmvp_vlm" => self.datasets.mmvp_vlm = PathBuf::from(v.trim()),
            "datasets.winoground" => self.datasets.winoground = PathBuf::from(v.trim()),
            "datasets.coco_captions" => self.datasets.coco_captions = PathBuf::from(v.trim()),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current text form, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = |p: &Path| p.display().to_string();
        vec![
            ("run.backend_id", self.run.backend_id.clone()),
            ("run.model_dir", p(&self.run.model_dir)),
            ("run.device", self.run.device.clone()),
            ("run.store_path", p(&self.run.store_path)),
            ("run.output_dir", p(&self.run.output_dir)),
            ("run.seed", self.run.seed.to_string()),
            ("run.workers", self.run.workers.to_string()),
            ("extraction.timesteps", join(&self.extraction.timesteps)),
            ("extraction.taps", join(&self.extraction.taps)),
            ("extraction.trials", self.extraction.trials.to_string()),
            ("extraction.guidance_scale", self.extraction.guidance_scale.to_string()),
            ("extraction.attention_resolution", self.extraction.attention_resolution.to_string()),
            ("extraction.capture_cross_attn", self.extraction.capture_cross_attn.to_string()),
            ("itm.timesteps", join(&self.itm.timesteps)),
            ("itm.trials", self.itm.trials.to_string()),
            ("itm.resolution", self.itm.resolution.to_string()),
            ("itm.temperature", self.itm.temperature.to_string()),
            ("itm.token_policy", enum_to(&self.itm.token_policy)),
            ("itm.ensemble", enum_to(&self.itm.ensemble)),
            ("leakage.dropout_probability", self.leakage.dropout_probability.to_string()),
            ("leakage.captioner_cmd", self.leakage.captioner_cmd.clone()),
            ("fusion.mode", enum_to(&self.fusion.mode)),
            ("fusion.d_clip", self.fusion.d_clip.to_string()),
            ("fusion.d_diff", self.fusion.d_diff.to_string()),
            ("fusion.d_out", self.fusion.d_out.to_string()),
            ("fusion.heads", self.fusion.heads.to_string()),
            ("fusion.pre_norm", self.fusion.pre_norm.to_string()),
            ("fusion.prompt_policy", enum_to(&self.fusion.prompt_policy)),
            ("datasets.mmvp_vlm", p(&self.datasets.mmvp_vlm)),
            ("datasets.winoground", p(&self.datasets.winoground)),
            ("datasets.coco_captions", p(&self.datasets.coco_captions)),
        ]
    }

    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => return Err(Error::Config(format!("key `{k}` outside a section"))),
                };
                cfg.set(&key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_ini_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_ini_string(&self) -> String {
        let mut ini = Ini::new();
        for (key, value) in self.entries() {
            let (section, k) = key.split_once('.').unwrap();
            ini.with_section(Some(section)).set(k, value);
        }
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("config is UTF-8")
    }

    /// Writes the resolved config as `config.ini` in `dir`.
    pub fn freeze(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.ini");
        crate::store::write_atomic(&path, self.to_ini_string().as_bytes())?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run.workers == 0 {
            return bad("run.workers must be >= 1".into());
        }
        if self.extraction.trials == 0 || self.extraction.timesteps.is_empty() {
            return bad("extraction needs >= 1 trial and >= 1 timestep".into());
        }
        if !(self.extraction.guidance_scale >= 0.0 && self.extraction.guidance_scale.is_finite()) {
            return bad(format!("extraction.guidance_scale {} must be >= 0", self.extraction.guidance_scale));
        }
        if !(0.0..=1.0).contains(&self.leakage.dropout_probability) {
            return bad(format!("leakage.dropout_probability {} outside [0, 1]", self.leakage.dropout_probability));
        }
        self.itm.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.fusion.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Seed of a named random stream (`extraction`, `trials`, `mismatch`,
    /// `dropout`, ...) derived from `run.seed`.
    pub fn substream(&self, name: &str) -> u64 {
        substream_seed(self.run.seed, name)
    }

    /// `run.model_dir`, unless the environment override is set.
    pub fn model_dir(&self) -> PathBuf {
        match std::env::var_os(MODEL_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.run.model_dir.clone(),
        }
    }
}
