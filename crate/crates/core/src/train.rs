//! Training loop: AdamW on `loss_simple + loss_full`, EMA tracking,
//! periodic checkpoints and CSV metrics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::TrainingSnapshot;
use crate::data::Dataset;
use crate::diffusion::{ema_update, loss_full, loss_simple, q_sample, NoiseSchedule, DEFAULT_EMA_DECAY};
use crate::error::{Error, Result};
use crate::model::{DiffussmModel, ModelConfig};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Probability of replacing a label with the null class.
    pub class_dropout: f64,
    /// Checkpoint period in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 2000,
            batch_size: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            ema_decay: DEFAULT_EMA_DECAY,
            class_dropout: 0.1,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
}

impl TrainConfig {
    /// Model S with the desk training settings.
    pub fn desk_small() -> Self {
        TrainConfig {
            model: ModelConfig::small(),
            train: TrainSettings {
                ema_decay: 0.995,
                ..TrainSettings::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.class_dropout) {
            return Err(Error::Config(format!(
                "class_dropout must be in [0, 1], got {}",
                t.class_dropout
            )));
        }
        if !(0.0..1.0).contains(&t.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must be in [0, 1), got {}",
                t.ema_decay
            )));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", t.lr)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that `data` can feed this model.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let m = &self.model;
        let s = &data.spec;
        if m.channels != 1 || s.height != m.height || s.width != m.width {
            return Err(Error::Config(format!(
                "dataset images are {}x{}x1, model expects {}x{}x{}",
                s.height, s.width, m.height, m.width, m.channels
            )));
        }
        if s.num_classes != m.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model has {}",
                s.num_classes, m.num_classes
            )));
        }
        if data.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss_simple: f64,
    pub loss_vlb: f64,
}

/// Live state of a training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: DiffussmModel,
    pub live: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub step: u64,
    schedule: NoiseSchedule,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let (model, live) = DiffussmModel::new::<f32, _>(&cfg.model, &mut rng)?;
        let t = &cfg.train;
        let opt = AdamW::new(&live, t.lr, (t.beta1, t.beta2), t.weight_decay)?;
        Ok(Trainer {
            schedule: cfg.model.schedule()?,
            cfg: cfg.clone(),
            model,
            ema: live.clone(),
            live,
            opt,
            step: 0,
            rng,
        })
    }

    /// Draws a batch, takes one optimizer step and updates the EMA.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepStats> {
        let b = self.cfg.train.batch_size;
        let per = data.pixels_per_image();
        let big_t = self.schedule.steps();
        let null = self.model.null_class();
        let mut x0 = Vec::with_capacity(b * per);
        let mut t = Vec::with_capacity(b);
        let mut y = Vec::with_capacity(b);
        for _ in 0..b {
            let i = self.rng.random_range(0..data.len());
            x0.extend_from_slice(data.image(i));
            t.push(self.rng.random_range(1..=big_t));
            let drop = self.rng.random::<f64>() < self.cfg.train.class_dropout;
            y.push(if drop { null } else { data.labels[i] as usize });
        }
        let shape = self.cfg.model.image_shape(b);
        let x0 = Tensor::new(&shape, x0)?;
        let eps = Tensor::<f32>::randn(&shape, 1.0, &mut self.rng);
        let x_t = q_sample(&x0, &t, &eps, &self.schedule)?;

        let step = self.step + 1;
        let tape = Tape::new();
        let p = self.live.bind(&tape, true);
        let (eps_pred, v) = self.model.forward(&p, tape.constant(x_t.clone()), &t, &y)?;
        let ls = loss_simple(eps_pred, &eps)?;
        let lv = loss_full(&x0, &x_t, &t, eps_pred, v, &self.schedule)?;
        let (ls_val, lv_val) = (ls.value().item() as f64, lv.value().item() as f64);
        if !ls_val.is_finite() || !lv_val.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: format!("loss (simple {ls_val}, vlb {lv_val})"),
            });
        }
        let mut grads = tape.backward(ls.add(lv)?)?;
        let g: Vec<Tensor<f32>> = p.vars().iter().map(|&v| grads.take_or_zeros(v)).collect();
        drop(grads);
        drop(tape);
        self.opt.step(&mut self.live, &g)?;
        ema_update(&mut self.ema, &self.live, self.cfg.train.ema_decay)?;
        self.step = step;
        Ok(StepStats {
            step,
            loss_simple: ls_val,
            loss_vlb: lv_val,
        })
    }

    pub fn snapshot(&self) -> TrainingSnapshot {
        TrainingSnapshot {
            config: self.cfg.model.clone(),
            step: self.step,
            live: self.live.clone(),
            ema: self.ema.clone(),
        }
    }
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:07}.dssm"))
}

/// Summary of a finished run.
pub struct TrainOutcome {
    pub stats: Vec<StepStats>,
    pub final_checkpoint: PathBuf,
    pub trainer: Trainer,
}

/// Runs the configured number of steps, writing `metrics.csv`
/// (step, loss_simple, loss_vlb), `timing.csv` (step, wall_ms), the
/// resolved `config.toml`, and checkpoints into `out_dir`. The final step
/// is always checkpointed.
pub fn train(cfg: &TrainConfig, data: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_dataset(data)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let mut metrics = BufWriter::new(File::create(out_dir.join("metrics.csv"))?);
    let mut timing = BufWriter::new(File::create(out_dir.join("timing.csv"))?);
    writeln!(metrics, "step,loss_simple,loss_vlb")?;
    writeln!(timing, "step,wall_ms")?;

    let mut trainer = Trainer::new(cfg)?;
    let mut stats = Vec::with_capacity(cfg.train.steps as usize);
    let every = cfg.train.checkpoint_every;
    let mut final_checkpoint = checkpoint_path(out_dir, 0);
    let mut saved_at = None;
    if cfg.train.steps == 0 {
        trainer.snapshot().to_checkpoint().save(&final_checkpoint)?;
        saved_at = Some(0);
    }
    let start = Instant::now();
    while trainer.step < cfg.train.steps {
        let t0 = Instant::now();
        let s = trainer.train_step(data)?;
        writeln!(metrics, "{},{:e},{:e}", s.step, s.loss_simple, s.loss_vlb)?;
        writeln!(timing, "{},{:.3}", s.step, t0.elapsed().as_secs_f64() * 1e3)?;
        if (every > 0 && s.step % every == 0) || s.step == cfg.train.steps {
            final_checkpoint = checkpoint_path(out_dir, s.step);
            trainer.snapshot().to_checkpoint().save(&final_checkpoint)?;
            saved_at = Some(s.step);
            metrics.flush()?;
            timing.flush()?;
        }
        if s.step % 100 == 0 {
            log::info!(
                "step {} loss_simple {:.5} loss_vlb {:.5} elapsed {:.1}s",
                s.step,
                s.loss_simple,
                s.loss_vlb,
                start.elapsed().as_secs_f64()
            );
        }
        stats.push(s);
    }
    debug_assert_eq!(saved_at, Some(cfg.train.steps));
    metrics.flush()?;
    timing.flush()?;
    Ok(TrainOutcome {
        stats,
        final_checkpoint,
        trainer,
    })
}

/// Mean `loss_simple` over the first and last `window` steps.
pub fn loss_windows(stats: &[StepStats], window: usize) -> Option<(f64, f64)> {
    if window == 0 || stats.len() < window {
        return None;
    }
    let mean = |s: &[StepStats]| s.iter().map(|x| x.loss_simple).sum::<f64>() / s.len() as f64;
    Some((mean(&stats[..window]), mean(&stats[stats.len() - window..])))
}
