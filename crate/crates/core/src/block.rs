//! Gated bidirectional SSM hourglass block with adaLN-Zero conditioning.
//!
//! Shapes for one sequence, with `J = L/M`, `D_m = 2D/M`:
//!
//! ```text
//! I  [J, D]  --layer_norm, modulate-->  x [J, D]
//! x  --σ(W⁰·)-->  h [J, D]  --σ(W↑_m·) for m in 0..M-->  U [L, D]
//! U  --bidirectional SSM-->  Y [L, 2D]
//! Y  --σ(W↓_m ·) per within-group offset, concatenated-->  I' [J, 2D]
//! core = W³(σ(W² I') ⊙ σ(W¹ x))  [J, D]
//! O = I + g ⊙ core
//! ```
//!
//! `σ` is GELU. Position `l` of the long sequence belongs to group
//! `j = l / M` at offset `m = l mod M`; `W↑_m` and `W↓_m` are selected by `m`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, GroupedLinear, Init, Linear, ParamStore, SsmLayer};
use crate::ssm::bidirectional_ssm;
use crate::tensor::Real;

pub const LN_EPS: f64 = 1e-6;

/// Dimensions of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Model width `D`.
    pub d_model: usize,
    /// Full sequence length `L`.
    pub seq_len: usize,
    /// Down/upscale ratio `M`.
    pub ratio: usize,
    /// SSM state size `N`.
    pub state: usize,
}

impl BlockConfig {
    pub fn new(d_model: usize, seq_len: usize, ratio: usize, state: usize) -> Result<Self> {
        let cfg = BlockConfig {
            d_model,
            seq_len,
            ratio,
            state,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.seq_len == 0 {
            return bad(format!("block dimensions must be positive: {self:?}"));
        }
        if self.ratio == 0 {
            return bad("hourglass ratio M must be >= 1".into());
        }
        if !self.seq_len.is_multiple_of(self.ratio) {
            return bad(format!("M={} does not divide L={}", self.ratio, self.seq_len));
        }
        if !(2 * self.d_model).is_multiple_of(self.ratio) {
            return bad(format!("M={} does not divide 2D={}", self.ratio, 2 * self.d_model));
        }
        if self.state < 2 || !self.state.is_multiple_of(2) {
            return bad(format!("SSM state size must be even and >= 2, got {}", self.state));
        }
        Ok(())
    }

    /// Shortened length `J = L/M`.
    pub fn short_len(&self) -> usize {
        self.seq_len / self.ratio
    }

    /// Per-offset downsample width `D_m = 2D/M`.
    pub fn d_m(&self) -> usize {
        2 * self.d_model / self.ratio
    }

    /// Gating width `D_g = 2D`.
    pub fn d_gate(&self) -> usize {
        2 * self.d_model
    }
}

/// Parameter handles of one block.
#[derive(Clone, Debug)]
pub struct DiffussmBlock {
    pub cfg: BlockConfig,
    pub prefix: String,
    pub w0: Linear,
    pub up: GroupedLinear,
    pub ssm_fwd: SsmLayer,
    pub ssm_bwd: SsmLayer,
    pub mix: Linear,
    pub down: GroupedLinear,
    pub w1: Linear,
    pub w2: Linear,
    pub w3: Linear,
    /// `silu(c) → [γ, β, g]`, zero-initialized.
    pub ada: Linear,
}

/// Per-sample modulation `(γ, β, g)`, each `[B, D]`.
pub struct Modulation<'t, T: Real> {
    pub scale: Var<'t, T>,
    pub shift: Var<'t, T>,
    pub gate: Var<'t, T>,
}

impl DiffussmBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let m = cfg.ratio;
        let xavier = Init::XavierUniform;
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(DiffussmBlock {
            cfg,
            prefix: prefix.to_string(),
            w0: Linear::new(store, &n("w0"), d, d, xavier, rng),
            up: GroupedLinear::new(store, &n("w_up"), m, d, d, true, xavier, rng),
            ssm_fwd: SsmLayer::new(store, &n("ssm_fwd"), d, cfg.state, rng)?,
            ssm_bwd: SsmLayer::new(store, &n("ssm_bwd"), d, cfg.state, rng)?,
            mix: Linear::new(store, &n("ssm_mix"), 2 * d, 2 * d, xavier, rng),
            down: GroupedLinear::new(store, &n("w_down"), m, 2 * d, cfg.d_m(), false, xavier, rng),
            w1: Linear::new(store, &n("w1"), d, cfg.d_gate(), xavier, rng),
            w2: Linear::new(store, &n("w2"), 2 * d, cfg.d_gate(), xavier, rng),
            w3: Linear::new(store, &n("w3"), cfg.d_gate(), d, xavier, rng),
            ada: Linear::new(store, &n("adaln"), d, 3 * d, Init::Zeros, rng),
        })
    }

    /// `(γ, β, g)` from the conditioning vector `c: [B, D]`.
    pub fn adaln_modulation<'t, T: Real>(&self, p: &Bound<'t, T>, cond: Var<'t, T>) -> Result<Modulation<'t, T>> {
        let d = self.cfg.d_model;
        let out = self.ada.forward(p, cond.silu())?;
        let axis = out.shape().len() - 1;
        Ok(Modulation {
            scale: out.narrow(axis, 0, d)?,
            shift: out.narrow(axis, d, d)?,
            gate: out.narrow(axis, 2 * d, d)?,
        })
    }

    /// `[B, J, D] → [B, L, D]`, `U_{jM+m} = σ(W↑_m σ(W⁰ I_j))`.
    pub fn hourglass_upsample<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (batch, j, d) = dims3(&x.shape(), self.cfg.d_model)?;
        let h = self.w0.forward(p, x)?.gelu();
        let u = self.up.forward(p, h)?.gelu();
        u.reshape(&[batch, j * self.cfg.ratio, d])
    }

    /// `[B, L, 2D] → [B, J, 2D]`, segment `m` of row `j` is `σ(W↓_m Y_{jM+m})`.
    pub fn hourglass_downsample<'t, T: Real>(&self, p: &Bound<'t, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        let m = self.cfg.ratio;
        let (batch, l, w) = dims3(&y.shape(), 2 * self.cfg.d_model)?;
        if l % m != 0 {
            return Err(Error::shape("hourglass_downsample", &[batch, l, w], &[m]));
        }
        let grouped = y.reshape(&[batch, l / m, m * w])?;
        Ok(self.down.forward(p, grouped)?.gelu())
    }

    /// Full block on `I: [B, J, D]` with conditioning `c: [B, D]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, input: Var<'t, T>, cond: Var<'t, T>) -> Result<Var<'t, T>> {
        let (batch, _, d) = dims3(&input.shape(), self.cfg.d_model)?;
        let cshape = cond.shape();
        if cshape != [batch, d] {
            return Err(Error::shape("block conditioning", &[batch, d], &cshape));
        }
        let md = self.adaln_modulation(p, cond)?;
        let per_row = |v: Var<'t, T>| v.reshape(&[batch, 1, d]);
        let x = input
            .layer_norm(T::of(LN_EPS))?
            .mul(per_row(md.scale)?.add_scalar(T::one()))?
            .add(per_row(md.shift)?)?;
        let u = self.hourglass_upsample(p, x)?;
        let y = bidirectional_ssm(
            u,
            &self.ssm_fwd.vars(p),
            &self.ssm_bwd.vars(p),
            p[self.mix.w],
            p[self.mix.b],
        )?;
        let i_prime = self.hourglass_downsample(p, y)?;
        let gated = self.w2.forward(p, i_prime)?.gelu().mul(self.w1.forward(p, x)?.gelu())?;
        let core = self.w3.forward(p, gated)?;
        input.add(per_row(md.gate)?.mul(core)?)
    }

    /// Exact number of trainable scalars in this block.
    pub fn count_params_actual<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.count_prefix(&format!("{}.", self.prefix))
    }
}

fn dims3(shape: &[usize], width: usize) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, j, d] if d == width => Ok((b, j, d)),
        _ => Err(Error::shape("block input", shape, &[0, 0, width])),
    }
}

/// Dominant linear-weight count `9D² + 2MD²` of one block.
pub fn block_param_formula(d: u64, m: u64) -> u64 {
    9 * d * d + 2 * m * d * d
}

/// Per-block FLOPs `13·(L/M)·D² + L·D² + α·2·L·log₂L·D`.
pub fn block_flops_formula(l: f64, d: f64, m: f64, alpha: f64) -> f64 {
    13.0 * (l / m) * d * d + l * d * d + alpha * 2.0 * l * l.log2() * d
}

/// Extra FLOPs of full-length self-attention, `2·D·L²`.
pub fn attention_extra_flops(l: f64, d: f64) -> f64 {
    2.0 * d * l * l
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{check, max_rel_error};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn build(d: usize, l: usize, m: usize, n: usize, seed: u64) -> (ParamStore<f64>, DiffussmBlock) {
        let mut store = ParamStore::new();
        let cfg = BlockConfig::new(d, l, m, n).unwrap();
        let block = DiffussmBlock::new(&mut store, "blk", cfg, &mut rng(seed)).unwrap();
        (store, block)
    }

    /// Fill the zero-initialized tensors so every path is live.
    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut r = rng(seed);
        for t in store.tensors_mut() {
            let noise = Tensor::<f64>::randn(t.shape(), 0.2, &mut r);
            *t = t.zip_map(&noise, |a, b| a + b).unwrap();
        }
    }

    #[test]
    fn config_validation() {
        assert!(BlockConfig::new(4, 6, 2, 4).is_ok());
        assert!(BlockConfig::new(4, 7, 2, 4).is_err());
        assert!(BlockConfig::new(3, 9, 3, 4).is_ok());
        assert!(BlockConfig::new(4, 9, 3, 4).is_err());
        assert!(BlockConfig::new(4, 8, 0, 4).is_err());
        assert!(BlockConfig::new(4, 8, 1, 3).is_err());
        let c = BlockConfig::new(4, 6, 2, 4).unwrap();
        assert_eq!((c.short_len(), c.d_m(), c.d_gate()), (3, 4, 8));
    }

    #[test]
    fn modulation_is_zero_at_init() {
        let (store, block) = build(8, 8, 2, 4, 0);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let c = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng(1)));
        let md = block.adaln_modulation(&p, c).unwrap();
        for v in [md.scale, md.shift, md.gate] {
            assert!(v.value().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn identity_at_init() {
        for &j in &[1usize, 8, 64] {
            let (store, block) = build(8, 2 * j, 2, 4, j as u64);
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let mut r = rng(7);
            let input = Tensor::<f64>::randn(&[2, j, 8], 1.0, &mut r);
            let out = block
                .forward(
                    &p,
                    tape.constant(input.clone()),
                    tape.constant(Tensor::randn(&[2, 8], 1.0, &mut r)),
                )
                .unwrap();
            assert_eq!(out.shape(), vec![2, j, 8]);
            assert_eq!(*out.value(), input, "J={j}");
        }
    }

    #[test]
    fn upsample_degenerate_and_locality() {
        let (mut store, block) = build(4, 3, 1, 4, 2);
        randomize(&mut store, 3);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = Tensor::<f64>::randn(&[1, 3, 4], 1.0, &mut rng(4));
        let u = block.hourglass_upsample(&p, tape.constant(x.clone())).unwrap();
        assert_eq!(u.shape(), vec![1, 3, 4]);
        // explicit σ(W↑₀ σ(W⁰ I_l) + ...) per position
        let w0 = store.get(block.w0.w);
        let wu = store.get(block.up.w).reshape(&[4, 4]).unwrap();
        let (b0, bu) = (store.get(block.w0.b), store.get(block.up.b));
        for l in 0..3 {
            let row = Tensor::new(&[1, 4], x.data()[l * 4..(l + 1) * 4].to_vec()).unwrap();
            let h = row
                .matmul2d(w0)
                .unwrap()
                .zip_map(&b0.reshape(&[1, 4]).unwrap(), |a, b| a + b)
                .unwrap();
            let h = tape.constant(h).gelu().value();
            let o = h
                .matmul2d(&wu)
                .unwrap()
                .zip_map(&bu.reshape(&[1, 4]).unwrap(), |a, b| a + b)
                .unwrap();
            let o = tape.constant(o).gelu().value();
            for k in 0..4 {
                assert!((o.data()[k] - u.value().data()[l * 4 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_perturbation_touches_exactly_its_group() {
        let (mut store, block) = build(4, 6, 2, 4, 5);
        randomize(&mut store, 6);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = Tensor::<f64>::randn(&[1, 3, 4], 1.0, &mut rng(8));
        let base = block.hourglass_upsample(&p, tape.constant(x.clone())).unwrap().value();
        assert_eq!(base.shape(), &[1, 6, 4]);
        for j in 0..3 {
            let mut bumped = x.clone();
            bumped.data_mut()[j * 4 + 1] += 0.5;
            let out = block.hourglass_upsample(&p, tape.constant(bumped)).unwrap().value();
            for l in 0..6 {
                let changed = (0..4).any(|k| out.data()[l * 4 + k] != base.data()[l * 4 + k]);
                assert_eq!(changed, l / 2 == j, "j={j} l={l}");
            }
        }
    }

    #[test]
    fn downsample_index_bookkeeping() {
        let (mut store, block) = build(4, 4, 2, 4, 9);
        randomize(&mut store, 10);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let y = Tensor::<f64>::randn(&[1, 4, 8], 1.0, &mut rng(11));
        let out = block
            .hourglass_downsample(&p, tape.constant(y.clone()))
            .unwrap()
            .value();
        assert_eq!(out.shape(), &[1, 2, 8]);
        let w = store.get(block.down.w);
        let b = store.get(block.down.b);
        for j in 0..2 {
            for m in 0..2 {
                let row = &y.data()[(j * 2 + m) * 8..(j * 2 + m + 1) * 8];
                for o in 0..4 {
                    let mut s = b.data()[m * 4 + o];
                    for (i, &r) in row.iter().enumerate() {
                        s += r * w.data()[(m * 8 + i) * 4 + o];
                    }
                    let expect = tape.constant(Tensor::scalar(s)).gelu().value().item();
                    assert!((out.data()[j * 8 + m * 4 + o] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn downsample_sees_within_group_order_only_when_grouped() {
        // M=2: swapping the two members of a group changes the output
        let (mut store, block) = build(4, 4, 2, 4, 12);
        randomize(&mut store, 13);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let mut r = rng(14);
        let mut found = false;
        for _ in 0..10 {
            let y = Tensor::<f64>::randn(&[1, 4, 8], 1.0, &mut r);
            let mut swapped = y.clone();
            for k in 0..8 {
                swapped.data_mut().swap(k, 8 + k);
            }
            let a = block.hourglass_downsample(&p, tape.constant(y)).unwrap().value();
            let b = block.hourglass_downsample(&p, tape.constant(swapped)).unwrap().value();
            if a.data()[..8] != b.data()[..8] {
                found = true;
                break;
            }
        }
        assert!(found, "no counterexample at M=2");
        // M=1: each group has one member, so there is nothing to permute and
        // a plain positionwise map results
        let (mut store, block) = build(4, 4, 1, 4, 15);
        randomize(&mut store, 16);
        let p = store.bind(&tape, false);
        let y = Tensor::<f64>::randn(&[1, 4, 8], 1.0, &mut r);
        let out = block
            .hourglass_downsample(&p, tape.constant(y.clone()))
            .unwrap()
            .value();
        assert_eq!(out.shape(), &[1, 4, 8]);
        let single = block
            .hourglass_downsample(
                &p,
                tape.constant(Tensor::new(&[1, 1, 8], y.data()[8..16].to_vec()).unwrap()),
            )
            .unwrap()
            .value();
        assert_eq!(&out.data()[8..16], single.data());
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let (mut store, block) = build(8, 8, 2, 4, 20);
        for seed in 0..10 {
            randomize(&mut store, 100 + seed);
            let mut r = rng(200 + seed);
            let input = Tensor::<f64>::randn(&[1, 4, 8], 1.0, &mut r);
            let cond = Tensor::<f64>::randn(&[1, 8], 1.0, &mut r);
            let proj = Tensor::<f64>::randn(&[1, 4, 8], 1.0, &mut r);
            let s = store.clone();
            let b = block.clone();
            let reports = check(
                move |tape, v| {
                    let p = s.bind(tape, false);
                    let o = b.forward(&p, v[0], v[1])?;
                    Ok(o.mul(tape.constant(proj.clone()))?.sum())
                },
                &[input, cond],
                1e-5,
                None,
            )
            .unwrap();
            let err = max_rel_error(&reports);
            assert!(err < 1e-4, "seed {seed}: {reports:?}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (mut store, block) = build(4, 4, 2, 2, 30);
        randomize(&mut store, 31);
        let mut r = rng(32);
        let input = Tensor::<f64>::randn(&[2, 2, 4], 1.0, &mut r);
        let cond = Tensor::<f64>::randn(&[2, 4], 1.0, &mut r);
        let b = block.clone();
        let reports = check(
            move |tape, v| {
                let p = Bound::from_vars(v.to_vec());
                let o = b.forward(&p, tape.constant(input.clone()), tape.constant(cond.clone()))?;
                Ok(o.square().sum())
            },
            store.tensors(),
            1e-4,
            None,
        )
        .unwrap();
        let err = max_rel_error(&reports);
        assert!(err < 1e-4, "{reports:?}");
    }

    /// One plain gradient step on `Σ proj ⊙ O` from the initial weights.
    fn one_step(
        store: &mut ParamStore<f64>,
        block: &DiffussmBlock,
        input: &Tensor<f64>,
        cond: &Tensor<f64>,
        seed: u64,
    ) {
        let proj = Tensor::<f64>::randn(input.shape(), 1.0, &mut rng(seed));
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let o = block
            .forward(&p, tape.constant(input.clone()), tape.constant(cond.clone()))
            .unwrap();
        let loss = o.mul(tape.constant(proj)).unwrap().sum();
        let mut g = tape.backward(loss).unwrap();
        let grads: Vec<Tensor<f64>> = p.vars().iter().map(|&v| g.take_or_zeros(v)).collect();
        for (t, gr) in store.tensors_mut().iter_mut().zip(&grads) {
            *t = t.zip_map(gr, |a, b| a - 0.05 * b).unwrap();
        }
    }

    #[test]
    fn distinct_conditionings_modulate_differently_after_one_step() {
        let (mut store, block) = build(8, 16, 2, 4, 50);
        let mut r = rng(51);
        let input = Tensor::<f64>::randn(&[2, 8, 8], 1.0, &mut r);
        // stand-ins for two class embeddings
        let cond = Tensor::<f64>::randn(&[2, 8], 1.0, &mut r);
        let modulation = |store: &ParamStore<f64>| {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let md = block.adaln_modulation(&p, tape.constant(cond.clone())).unwrap();
            let mut rows = [Vec::new(), Vec::new()];
            for v in [md.scale, md.shift, md.gate] {
                let v = v.value();
                rows[0].extend_from_slice(&v.data()[..8]);
                rows[1].extend_from_slice(&v.data()[8..]);
            }
            rows
        };
        let [a, b] = modulation(&store);
        assert_eq!(a, b);
        one_step(&mut store, &block, &input, &cond, 52);
        let [a, b] = modulation(&store);
        assert_ne!(a, b);
    }

    #[test]
    fn global_receptive_field_after_one_step() {
        let (mut store, block) = build(8, 16, 2, 4, 60);
        let mut r = rng(61);
        let input = Tensor::<f64>::randn(&[1, 8, 8], 1.0, &mut r);
        let cond = Tensor::<f64>::randn(&[1, 8], 1.0, &mut r);
        let run = |store: &ParamStore<f64>, x: &Tensor<f64>| {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let o = block
                .forward(&p, tape.constant(x.clone()), tape.constant(cond.clone()))
                .unwrap();
            (*o.value()).clone()
        };
        let touched = |store: &ParamStore<f64>, j: usize| -> Vec<usize> {
            let base = run(store, &input);
            let mut bumped = input.clone();
            bumped.data_mut()[j * 8] += 1e-3;
            let out = run(store, &bumped);
            (0..8)
                .filter(|&k| k != j && (0..8).any(|c| out.data()[k * 8 + c] != base.data()[k * 8 + c]))
                .collect()
        };
        assert!(touched(&store, 3).is_empty(), "identity block leaks across positions");
        one_step(&mut store, &block, &input, &cond, 62);
        for j in [0usize, 3, 7] {
            let others = touched(&store, j);
            assert_eq!(others.len(), 7, "perturbing {j} reached only {others:?}");
        }
    }

    #[test]
    fn counts_and_formulas() {
        assert_eq!(block_param_formula(1152, 2), 13 * 1152 * 1152);
        assert_eq!(block_param_formula(1152, 2), 17_252_352);
        assert_eq!(block_param_formula(4, 2), 208);
        assert_eq!(block_param_formula(1, 1), 11);

        let (d, m, n) = (8usize, 2usize, 4usize);
        let (store, block) = build(d, 8, m, n, 40);
        let dm = 2 * d / m;
        let dg = 2 * d;
        let hand = (d * d + d)                    // W⁰
            + m * (d * d + d)                     // W↑
            + 2 * d * (6 * n + 2)                 // two SSMs
            + (2 * d * 2 * d + 2 * d)             // mixing linear
            + m * (2 * d * dm + dm)               // W↓
            + (d * dg + dg)                       // W¹
            + (2 * d * dg + dg)                   // W²
            + (dg * d + d)                        // W³
            + (d * 3 * d + 3 * d); // adaLN
        assert_eq!(block.count_params_actual(&store), hand);
        let (store2, block2) = build(d, 8, m, n, 41);
        assert_eq!(block2.count_params_actual(&store2), hand);

        let f = block_flops_formula(1024.0, 1152.0, 2.0, 1.0);
        let approx = 7.5 * 1024.0 * 1152.0 * 1152.0;
        assert!((f / approx - 1.0).abs() < 0.01);
        let big = block_flops_formula(4096.0, 1024.0, 2.0, 1.0) / (4096.0 * 1024.0 * 1024.0);
        assert!((big - 7.5).abs() < 0.2);
        let (l, dd) = (1024.0, 1024.0);
        assert_eq!(attention_extra_flops(l, dd), 2.0 * l * dd * dd);
        let (l, dd) = (4096.0, 1024.0);
        assert_eq!(attention_extra_flops(l, dd), 8.0 * l * dd * dd);
    }
}
