//! Artifact writing. Everything for one command is rendered in memory first
//! and written only once the command has succeeded.

use std::path::{Path, PathBuf};

use difftap::config::RunConfig;
use difftap::store::write_atomic;
use image::{Rgb, RgbImage};
use ndarray::{Array3, Axis};
use serde::Serialize;

use crate::CmdResult;

/// Smallest side, in pixels, of written PCA images.
const MIN_PNG_SIDE: usize = 256;

#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CmdResult {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(difftap::Error::from)?;
        bytes.push(b'\n');
        self.files.push((name.to_string(), bytes));
        Ok(())
    }

    pub fn text(&mut self, name: &str, text: String) {
        self.files.push((name.to_string(), text.into_bytes()));
    }

    pub fn png(&mut self, name: &str, rgb: &Array3<f64>) -> CmdResult {
        let img = render(rgb);
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| difftap::Error::InvalidArgument(format!("encoding {name}: {e}")))?;
        self.files.push((name.to_string(), bytes));
        Ok(())
    }

    /// Writes every file plus the frozen config into the output directory.
    pub fn commit(self, cfg: &RunConfig) -> CmdResult<PathBuf> {
        let dir = &cfg.run.output_dir;
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (name, bytes) in &self.files {
            write_atomic(&dir.join(name), bytes)?;
        }
        cfg.freeze(dir)?;
        Ok(dir.clone())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> difftap::Error {
    difftap::Error::Io {
        context: format!("creating {}", path.display()),
        source: e,
    }
}

/// `(H, W, k)` in `[0, 1]` to an RGB image, nearest-neighbour upscaled. Fewer
/// than three components are shown as grey from the first.
fn render(rgb: &Array3<f64>) -> RgbImage {
    let (h, w, k) = rgb.dim();
    let scale = MIN_PNG_SIDE.div_ceil(h.min(w).max(1)).max(1);
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let px = rgb.index_axis(Axis(0), y as usize / scale);
        let px = px.index_axis(Axis(0), x as usize / scale);
        let c = |i: usize| to_u8(px[i.min(k.saturating_sub(1))]);
        if k >= 3 {
            Rgb([c(0), c(1), c(2)])
        } else {
            Rgb([c(0); 3])
        }
    })
}
