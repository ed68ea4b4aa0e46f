//! Drawing images from a checkpoint and writing them as binary PGM.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, TrainingSnapshot};
use crate::diffusion::sample_loop;
use crate::error::{Error, Result};
use crate::model::{BoundModel, DiffussmModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSettings {
    pub count: usize,
    /// `None` samples unconditionally (null class).
    pub class: Option<usize>,
    pub guidance_w: f64,
    pub steps: usize,
    pub seed: u64,
    /// Use the EMA weights (default) instead of the live ones.
    pub use_ema: bool,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings {
            count: 8,
            class: None,
            guidance_w: 1.0,
            steps: 250,
            seed: 0,
            use_ema: true,
        }
    }
}

/// Runs the reverse process and returns `[count, H, W, C]` images.
pub fn generate(model: &DiffussmModel, store: &ParamStore<f32>, s: &SampleSettings) -> Result<Tensor<f32>> {
    let cfg = &model.cfg;
    let schedule = cfg.schedule()?;
    if s.steps == 0 || s.steps > schedule.steps() {
        return Err(Error::invalid(format!(
            "sampling steps must be in 1..={}, got {}",
            schedule.steps(),
            s.steps
        )));
    }
    let classes = s.class.map(|c| vec![c; s.count]);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let denoiser = BoundModel { model, store };
    sample_loop(
        &denoiser,
        &cfg.image_shape(s.count),
        classes.as_deref(),
        s.guidance_w,
        s.steps,
        &schedule,
        &mut rng,
    )
}

/// Pixel byte for a value in `[-1, 1]`.
pub fn to_byte(v: f32) -> u8 {
    (127.5 * (v as f64 + 1.0)).round().clamp(0.0, 255.0) as u8
}

/// Binary P5 image, maxval 255.
pub fn pgm_bytes(pixels: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    if pixels.len() != height * width {
        return Err(Error::invalid(format!(
            "{} pixels cannot form a {height}x{width} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn sample_filename(idx: usize, class: Option<usize>) -> String {
    match class {
        Some(c) => format!("sample_{idx}_{c}.pgm"),
        None => format!("sample_{idx}_null.pgm"),
    }
}

/// Writes one PGM per image of a `[N, H, W, 1]` batch.
pub fn write_pgms(images: &Tensor<f32>, class: Option<usize>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let &[n, h, w, c] = images.shape() else {
        return Err(Error::invalid(format!(
            "expected [N, H, W, C] images, got {:?}",
            images.shape()
        )));
    };
    if c != 1 {
        return Err(Error::invalid(format!("PGM output needs one channel, got {c}")));
    }
    std::fs::create_dir_all(out_dir)?;
    let per = h * w;
    (0..n)
        .map(|i| {
            let path = out_dir.join(sample_filename(i, class));
            std::fs::write(&path, pgm_bytes(&images.data()[i * per..(i + 1) * per], h, w)?)?;
            Ok(path)
        })
        .collect()
}

/// Loads a checkpoint, samples, and writes the PGM files.
pub fn sample_checkpoint(ckpt: &Path, s: &SampleSettings, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (model, snap) = TrainingSnapshot::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let store = if s.use_ema { &snap.ema } else { &snap.live };
    let images = generate(&model, store, s)?;
    write_pgms(&images, s.class, out_dir)
}
