//! Fast invariant battery behind the `selfcheck` subcommand.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::block::{BlockConfig, DiffussmBlock};
use crate::checkpoint::{Checkpoint, TrainingSnapshot};
use crate::diffusion::{loss_full, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gradcheck::{check, max_rel_error};
use crate::model::{patchify, unpatchify, DiffussmModel, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::ssm::{apply_ssm, discretize, init_s4d, scan_reference, SsmParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub property: &'static str,
    pub seed: u64,
    /// Observed deviation; compared against `tolerance`.
    pub delta: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}::{} seed={} delta={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.module,
            self.property,
            self.seed,
            self.delta,
            self.tolerance
        )?;
        if !self.note.is_empty() {
            write!(f, " ({})", self.note)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub results: Vec<CheckResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    fn record(
        &mut self,
        module: &'static str,
        property: &'static str,
        seed: u64,
        outcome: Result<f64>,
        tolerance: f64,
    ) {
        let (delta, note) = match outcome {
            Ok(d) => (d, String::new()),
            Err(e) => (f64::INFINITY, e.to_string()),
        };
        self.results.push(CheckResult {
            module,
            property,
            seed,
            delta,
            tolerance,
            passed: delta <= tolerance,
            note,
        });
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.results.len(), failed)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randomize(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += scale * (2.0 * r.random::<f64>() - 1.0);
        }
    }
}

fn scan_vs_fft(len: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let p: SsmParams<f64> = init_s4d(3, 4, &mut r)?;
    let u = Tensor::randn(&[2, len, 3], 1.0, &mut r);
    let tape = Tape::new();
    let y = apply_ssm(tape.constant(u.clone()), &p.bind(&tape, false), false)?.value();
    let oracle = scan_reference(&u, &discretize(&p))?;
    let diff = y
        .data()
        .iter()
        .zip(oracle.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(diff / oracle.max_abs().max(1e-300))
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        depth: 1,
        d_model: 8,
        ratio: 2,
        state: 2,
        patch: 1,
        height: 4,
        width: 4,
        channels: 1,
        num_classes: 2,
        diffusion_steps: 100,
        beta_start: 1e-4,
        beta_end: 0.02,
    }
}

fn block_grads(seed: u64) -> Result<f64> {
    let mut store = ParamStore::<f64>::new();
    let block = DiffussmBlock::new(&mut store, "blk", BlockConfig::new(4, 4, 2, 2)?, &mut rng(seed))?;
    randomize(&mut store, 0.3, seed + 1);
    let mut r = rng(seed + 2);
    let input = Tensor::<f64>::randn(&[2, 2, 4], 1.0, &mut r);
    let cond = Tensor::<f64>::randn(&[2, 4], 1.0, &mut r);
    let proj = Tensor::<f64>::randn(&[2, 2, 4], 1.0, &mut r);
    let mut inputs = vec![input, cond];
    inputs.extend(store.tensors().iter().cloned());
    let reports = check(
        move |tape, v| {
            let p = Bound::from_vars(v[2..].to_vec());
            Ok(block.forward(&p, v[0], v[1])?.mul(tape.constant(proj.clone()))?.sum())
        },
        &inputs,
        1e-5,
        Some(4),
    )?;
    Ok(max_rel_error(&reports))
}

fn model_grads(seed: u64) -> Result<f64> {
    let (model, mut store) = DiffussmModel::new::<f64, _>(&tiny_model(), &mut rng(seed))?;
    randomize(&mut store, 0.1, seed + 1);
    let mut r = rng(seed + 2);
    let x = Tensor::<f64>::randn(&[1, 4, 4, 1], 1.0, &mut r);
    let proj = Tensor::<f64>::randn(&[1, 4, 4, 1], 1.0, &mut r);
    let mut inputs = vec![x];
    inputs.extend(store.tensors().iter().cloned());
    let reports = check(
        move |tape, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let (eps, var) = model.forward(&p, v[0], &[17], &[1])?;
            let pr = tape.constant(proj.clone());
            eps.mul(pr)?.sum().add(var.mul(pr)?.sum())
        },
        &inputs,
        1e-5,
        None,
    )?;
    Ok(max_rel_error(&reports))
}

fn schedule_invariants() -> Result<f64> {
    let s = NoiseSchedule::default_linear();
    let mut worst = 0.0f64;
    for t in 1..=s.steps() {
        // ᾱ strictly decreasing, posterior variance within [0, β]
        if t > 1 && s.alpha_bar(t) >= s.alpha_bar(t - 1) {
            return Err(Error::invalid(format!("alpha_bar not decreasing at t={t}")));
        }
        let pv = s.posterior_variance(t);
        worst = worst.max((pv - s.beta(t)).max(0.0)).max((-pv).max(0.0));
        let prod: f64 = (1..=t).map(|k| 1.0 - s.beta(k)).product();
        worst = worst.max((prod - s.alpha_bar(t)).abs());
    }
    let (ts, sub) = s.respace(s.steps())?;
    worst = worst.max((ts.len() as f64 - s.steps() as f64).abs());
    for t in 1..=s.steps() {
        worst = worst.max((sub.beta(t) - s.beta(t)).abs());
    }
    Ok(worst)
}

fn patchify_roundtrip(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut mismatches = 0usize;
    for p in [1usize, 2, 4] {
        let x = Tensor::<f64>::randn(&[2, 8, 8, 2], 1.0, &mut r);
        let back = unpatchify(&patchify(&x, p)?, p, 8, 8, 2)?;
        mismatches += x
            .data()
            .iter()
            .zip(back.data())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
    }
    Ok(mismatches as f64)
}

fn identity_at_init(seed: u64) -> Result<f64> {
    let mut store = ParamStore::<f64>::new();
    let block = DiffussmBlock::new(&mut store, "blk", BlockConfig::new(8, 16, 2, 4)?, &mut rng(seed))?;
    let mut r = rng(seed + 1);
    let input = Tensor::<f64>::randn(&[2, 8, 8], 1.0, &mut r);
    let cond = Tensor::<f64>::randn(&[2, 8], 1.0, &mut r);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let out = block
        .forward(&p, tape.constant(input.clone()), tape.constant(cond))?
        .value();
    let block_delta = out
        .data()
        .iter()
        .zip(input.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let (model, store) = DiffussmModel::new::<f64, _>(&tiny_model(), &mut rng(seed + 2))?;
    let x = Tensor::<f64>::randn(&[2, 4, 4, 1], 1.0, &mut r);
    let o = model.predict(&store, &x, &[1, 60], &[0, 2])?;
    Ok(block_delta.max(o.eps.max_abs()).max(o.v.max_abs()))
}

fn stop_gradient(seed: u64) -> Result<f64> {
    let s = NoiseSchedule::default_linear();
    let mut r = rng(seed);
    let shape = [3, 2, 2, 1];
    let x0 = Tensor::<f64>::uniform(&shape, 1.0, &mut r);
    let xt = Tensor::<f64>::randn(&shape, 1.0, &mut r);
    let tape = Tape::new();
    let eps = tape.param(Tensor::randn(&shape, 1.0, &mut r));
    let v = tape.param(Tensor::uniform(&shape, 1.0, &mut r));
    let loss = loss_full(&x0, &xt, &[2, 500, 1000], eps, v, &s)?;
    let mut g = tape.backward(loss)?;
    let ge = g.take_or_zeros(eps).max_abs();
    if g.take_or_zeros(v).max_abs() == 0.0 {
        return Err(Error::invalid("loss_full has no gradient to v"));
    }
    Ok(ge)
}

/// Returns the byte offset reported when one byte of a checkpoint is flipped;
/// the delta is the distance between the flipped byte and the reported offset
/// within the damaged tensor's span.
fn checkpoint_fault(seed: u64) -> Result<f64> {
    let (_, live) = DiffussmModel::new::<f32, _>(&tiny_model(), &mut rng(seed))?;
    let snap = TrainingSnapshot {
        config: tiny_model(),
        step: 1,
        ema: live.clone(),
        live,
    };
    let bytes = snap.to_checkpoint().to_bytes();
    let again = Checkpoint::from_bytes(&bytes)?.to_bytes();
    if again != bytes {
        return Err(Error::invalid("save-load-save is not byte-identical"));
    }
    let pos = bytes.len() - 1 - rng(seed).random_range(0..64);
    let mut bad = bytes.clone();
    bad[pos] ^= 0x55;
    match Checkpoint::from_bytes(&bad) {
        Err(Error::Format { offset, .. }) if offset as usize <= pos => Ok(0.0),
        Err(Error::Format { offset, .. }) => Err(Error::invalid(format!(
            "corruption at byte {pos} reported at offset {offset}"
        ))),
        Err(e) => Err(e),
        Ok(_) => Err(Error::invalid(format!("corruption at byte {pos} not detected"))),
    }
}

/// Runs every check with seeds derived from `seed`.
pub fn run(seed: u64) -> Report {
    let mut report = Report::default();
    for (i, len) in [1usize, 17, 64, 256].into_iter().enumerate() {
        let s = seed + i as u64;
        report.record("ssm", "fft_matches_scan", s, scan_vs_fft(len, s), 1e-6);
    }
    report.record("block", "gradient_vs_finite_difference", seed, block_grads(seed), 1e-3);
    report.record("model", "gradient_vs_finite_difference", seed, model_grads(seed), 1e-3);
    report.record("diffusion", "schedule_invariants", seed, schedule_invariants(), 1e-12);
    report.record("diffusion", "loss_full_stop_gradient", seed, stop_gradient(seed), 0.0);
    report.record("model", "patchify_roundtrip", seed, patchify_roundtrip(seed), 0.0);
    report.record("model", "identity_at_init", seed, identity_at_init(seed), 0.0);
    report.record("checkpoint", "corruption_detected", seed, checkpoint_fault(seed), 0.0);
    report
}
