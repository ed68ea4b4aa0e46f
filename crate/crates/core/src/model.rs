//! Whole denoising network: patching, embeddings, the block stack and the
//! output head.
//!
//! The residual stream runs at the shortened length `J = L/M`: the `L` patch
//! vectors are grouped `M` at a time (consecutive positions) before the input
//! embedding, and the decoder emits `M` positions per stream token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::block::{block_param_formula, BlockConfig, DiffussmBlock, LN_EPS};
use crate::diffusion::{Denoiser, ModelOutput, NoiseSchedule};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::Tape;

/// Architecture and diffusion settings. Every field is explicit in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of blocks `K`.
    pub depth: usize,
    /// Model width `D`.
    pub d_model: usize,
    /// Hourglass ratio `M`.
    pub ratio: usize,
    /// SSM state size `N`.
    pub state: usize,
    /// Patch size `p`; 1 disables patching.
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Diffusion steps `T`.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ModelConfig {
    /// Desk-scale model S on 16×16 grayscale.
    pub fn small() -> Self {
        ModelConfig {
            depth: 4,
            d_model: 64,
            ratio: 2,
            state: 16,
            patch: 1,
            height: 16,
            width: 16,
            channels: 1,
            num_classes: 2,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    /// Desk-scale model M on 32×32 grayscale.
    pub fn medium() -> Self {
        ModelConfig {
            depth: 8,
            d_model: 128,
            height: 32,
            width: 32,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("depth, height, width and channels must be positive".into());
        }
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model must be even and >= 2, got {}", self.d_model));
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!(
                "patch size {} must divide height {} and width {}",
                self.patch, self.height, self.width
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        self.block_config().validate()?;
        self.schedule().map(|_| ())
    }

    /// Patch-sequence length `L = (H/p)(W/p)`.
    pub fn seq_len(&self) -> usize {
        (self.height / self.patch.max(1)) * (self.width / self.patch.max(1))
    }

    /// Patch vector width `p²C`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            seq_len: self.seq_len(),
            ratio: self.ratio,
            state: self.state,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.height, self.width, self.channels]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn patch_dims(shape: &[usize], p: usize) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] if p > 0 && h % p == 0 && w % p == 0 => Ok((b, h, w, c)),
        _ => Err(Error::invalid(format!(
            "patch size {p} incompatible with image batch {shape:?}"
        ))),
    }
}

/// `[B, H, W, C] → [B, L, p²C]`, patches in row-major order, each flattened
/// as `(row, col, channel)`.
pub fn patchify<T: Real>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = patch_dims(x.shape(), p)?;
    let (gh, gw) = (h / p, w / p);
    x.reshape(&[b, gh, p, gw, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, gh * gw, p * p * c])
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(s: &Tensor<T>, p: usize, h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    let b = check_seq(s.shape(), p, h, w, c)?;
    let (gh, gw) = (h / p, w / p);
    s.reshape(&[b, gh, gw, p, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, w, c])
}

fn check_seq(shape: &[usize], p: usize, h: usize, w: usize, c: usize) -> Result<usize> {
    match *shape {
        [b, l, d] if p > 0 && h.is_multiple_of(p) && w.is_multiple_of(p) && l * p * p == h * w && d == p * p * c => {
            Ok(b)
        }
        _ => Err(Error::invalid(format!(
            "sequence batch {shape:?} cannot form {h}x{w}x{c} images with patch size {p}"
        ))),
    }
}

fn patchify_var<'t, T: Real>(x: Var<'t, T>, p: usize) -> Result<Var<'t, T>> {
    let (b, h, w, c) = patch_dims(&x.shape(), p)?;
    if p == 1 {
        return x.reshape(&[b, h * w, c]);
    }
    let (gh, gw) = (h / p, w / p);
    x.reshape(&[b, gh, p, gw, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, gh * gw, p * p * c])
}

fn unpatchify_var<'t, T: Real>(s: Var<'t, T>, p: usize, h: usize, w: usize, c: usize) -> Result<Var<'t, T>> {
    let b = check_seq(&s.shape(), p, h, w, c)?;
    if p == 1 {
        return s.reshape(&[b, h, w, c]);
    }
    let (gh, gw) = (h / p, w / p);
    s.reshape(&[b, gh, gw, p, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, w, c])
}

/// `[cos(t·f_i) ∥ sin(t·f_i)]` with `f_i = 10000^{−i/(D/2)}`, one row per `t`.
pub fn sinusoidal_embedding(t: &[usize], dim: usize) -> Tensor<f64> {
    let half = dim / 2;
    Tensor::from_fn(&[t.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        let k = col % half;
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        let arg = t[row] as f64 * freq;
        if col < half {
            arg.cos()
        } else {
            arg.sin()
        }
    })
}

/// Parameter handles of the full network.
#[derive(Clone, Debug)]
pub struct DiffussmModel {
    pub cfg: ModelConfig,
    pub embed: Linear,
    pub t_mlp1: Linear,
    pub t_mlp2: Linear,
    /// `[num_classes + 1, D]`; the last row is the null class.
    pub class_table: ParamId,
    pub blocks: Vec<DiffussmBlock>,
    /// `silu(c) → [shift, scale]` for the final norm, zero-initialized.
    pub final_ada: Linear,
    pub decoder: Linear,
}

/// Per-module scalar counts next to the formula figure.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
    /// `K·(9D² + 2MD²)`.
    pub formula: u64,
    pub delta: i64,
}

impl std::fmt::Display for ParamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, n) in &self.modules {
            writeln!(f, "{name:<16} {n:>12}")?;
        }
        writeln!(f, "{:<16} {:>12}", "total", self.total)?;
        writeln!(f, "{:<16} {:>12}", "K(9D^2+2MD^2)", self.formula)?;
        write!(f, "{:<16} {:>12}", "delta", self.delta)
    }
}

impl DiffussmModel {
    /// Builds the network and its freshly initialized parameters.
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let m = cfg.ratio;
        let normal = Init::Normal(0.02);
        let embed = Linear::new(&mut store, "embed", m * cfg.patch_dim(), d, Init::XavierUniform, rng);
        let t_mlp1 = Linear::new(&mut store, "t_embed.mlp1", d, d, normal, rng);
        let t_mlp2 = Linear::new(&mut store, "t_embed.mlp2", d, d, normal, rng);
        let class_table = store.add("y_embed.table", Tensor::randn(&[cfg.num_classes + 1, d], 0.02, rng));
        let blocks = (0..cfg.depth)
            .map(|k| DiffussmBlock::new(&mut store, &format!("blocks.{k}"), cfg.block_config(), rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ada = Linear::new(&mut store, "final.adaln", d, 2 * d, Init::Zeros, rng);
        let decoder = Linear::new(
            &mut store,
            "final.decoder",
            d,
            m * 2 * cfg.patch_dim(),
            Init::Zeros,
            rng,
        );
        let model = DiffussmModel {
            cfg: cfg.clone(),
            embed,
            t_mlp1,
            t_mlp2,
            class_table,
            blocks,
            final_ada,
            decoder,
        };
        Ok((model, store))
    }

    pub fn null_class(&self) -> usize {
        self.cfg.num_classes
    }

    /// Timestep embedding `[B, D]`.
    pub fn embed_timestep<'t, T: Real>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, t: &[usize]) -> Result<Var<'t, T>> {
        if let Some(&bad) = t.iter().find(|&&ti| ti == 0 || ti > self.cfg.diffusion_steps) {
            return Err(Error::invalid(format!(
                "timestep {bad} outside 1..={}",
                self.cfg.diffusion_steps
            )));
        }
        let base = tape.constant(sinusoidal_embedding(t, self.cfg.d_model).cast());
        self.t_mlp2.forward(p, self.t_mlp1.forward(p, base)?.silu())
    }

    /// Class embedding `[B, D]`; id `num_classes` is the null class.
    pub fn embed_class<'t, T: Real>(&self, p: &Bound<'t, T>, y: &[usize]) -> Result<Var<'t, T>> {
        if let Some(&bad) = y.iter().find(|&&c| c > self.cfg.num_classes) {
            return Err(Error::invalid(format!(
                "class id {bad} unknown; valid ids are 0..{} plus null {}",
                self.cfg.num_classes, self.cfg.num_classes
            )));
        }
        p[self.class_table].gather_rows(y)
    }

    /// Shared conditioning `t_emb + y_emb`.
    pub fn conditioning<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        tape: &'t Tape<T>,
        t: &[usize],
        y: &[usize],
    ) -> Result<Var<'t, T>> {
        self.embed_timestep(p, tape, t)?.add(self.embed_class(p, y)?)
    }

    /// Returns `(ε_pred, v)`, each shaped like `x_t: [B, H, W, C]`.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x_t: Var<'t, T>,
        t: &[usize],
        y: &[usize],
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let cfg = &self.cfg;
        let shape = x_t.shape();
        if shape.len() != 4 || shape[1..] != [cfg.height, cfg.width, cfg.channels] {
            return Err(Error::shape("model input", &cfg.image_shape(0)[1..], &shape));
        }
        let b = shape[0];
        if t.len() != b || y.len() != b {
            return Err(Error::invalid(format!(
                "batch of {b} needs as many timesteps and labels, got {} and {}",
                t.len(),
                y.len()
            )));
        }
        let tape = x_t.tape();
        let (l, m, d, pd) = (cfg.seq_len(), cfg.ratio, cfg.d_model, cfg.patch_dim());
        let j = l / m;
        let cond = self.conditioning(p, tape, t, y)?;

        let seq = patchify_var(x_t, cfg.patch)?.reshape(&[b, j, m * pd])?;
        let mut h = self.embed.forward(p, seq)?;
        for block in &self.blocks {
            h = block.forward(p, h, cond)?;
        }
        let ada = self.final_ada.forward(p, cond.silu())?;
        let shift = ada.narrow(1, 0, d)?.reshape(&[b, 1, d])?;
        let scale = ada.narrow(1, d, d)?.reshape(&[b, 1, d])?;
        let h = h
            .layer_norm(T::of(LN_EPS))?
            .mul(scale.add_scalar(T::one()))?
            .add(shift)?;
        let out = self.decoder.forward(p, h)?.reshape(&[b, l, 2 * pd])?;
        let eps = unpatchify_var(out.narrow(2, 0, pd)?, cfg.patch, cfg.height, cfg.width, cfg.channels)?;
        let v = unpatchify_var(out.narrow(2, pd, pd)?, cfg.patch, cfg.height, cfg.width, cfg.channels)?;
        Ok((eps, v))
    }

    /// Evaluates without recording gradients.
    pub fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        t: &[usize],
        y: &[usize],
    ) -> Result<ModelOutput<T>> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let (eps, v) = self.forward(&p, tape.constant(x.clone()), t, y)?;
        Ok(ModelOutput {
            eps: (*eps.value()).clone(),
            v: (*v.value()).clone(),
        })
    }

    pub fn report_params<T: Real>(&self, store: &ParamStore<T>) -> ParamReport {
        let mut modules = vec![
            ("embed".to_string(), store.count_prefix("embed.")),
            ("t_embed".to_string(), store.count_prefix("t_embed.")),
            ("y_embed".to_string(), store.count_prefix("y_embed.")),
        ];
        for b in &self.blocks {
            modules.push((b.prefix.clone(), b.count_params_actual(store)));
        }
        modules.push(("final".to_string(), store.count_prefix("final.")));
        let total = store.num_scalars();
        let formula = report_formula(&self.cfg);
        ParamReport {
            modules,
            total,
            formula,
            delta: total as i64 - formula as i64,
        }
    }
}

/// Parameter report of a freshly built model.
pub fn param_report(cfg: &ModelConfig) -> Result<ParamReport> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let (model, store) = DiffussmModel::new::<f32, _>(cfg, &mut rng)?;
    Ok(model.report_params(&store))
}

/// `K·(9D² + 2MD²)` for a config.
pub fn report_formula(cfg: &ModelConfig) -> u64 {
    cfg.depth as u64 * block_param_formula(cfg.d_model as u64, cfg.ratio as u64)
}

/// A model and the weights to run it with.
pub struct BoundModel<'a, T: Real> {
    pub model: &'a DiffussmModel,
    pub store: &'a ParamStore<T>,
}

impl<T: Real> Denoiser<T> for BoundModel<'_, T> {
    fn denoise(&self, x: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<ModelOutput<T>> {
        self.model.predict(self.store, x, t, y)
    }

    fn num_classes(&self) -> usize {
        self.model.cfg.num_classes
    }
}
