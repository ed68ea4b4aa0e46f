//! DDPM schedule, corruption, training objectives and ancestral sampling.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `ᾱ_0 ≡ 1`.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_EMA_DECAY: f64 = 0.9999;
/// Half the width of one 8-bit pixel bin for data in `[-1, 1]`.
pub const PIXEL_HALF_BIN: f64 = 1.0 / 255.0;

/// Precomputed tables for a variance schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// `T` betas linearly spaced from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion step count T must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alpha_bar,
            posterior_var,
        })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `ᾱ_{t-1}`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    /// `β̃_t`; exactly zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    /// Coefficients `(c₀, c_t)` of `μ̃ = c₀·x₀ + c_t·x_t`.
    pub fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let prev = self.alpha_bar_prev(t);
        let c0 = prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - prev) / (1.0 - ab);
        (c0, ct)
    }

    /// Schedule over an evenly strided subset of `steps` timesteps, with
    /// betas recomputed from ratios of `ᾱ`. Returns the subset (original,
    /// ascending, 1-based) alongside the respaced schedule.
    pub fn respace(&self, steps: usize) -> Result<(Vec<usize>, NoiseSchedule)> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::invalid(format!(
                "sampling steps must be in 1..={total}, got {steps}"
            )));
        }
        let ts: Vec<usize> = if steps == 1 {
            vec![total]
        } else {
            (0..steps)
                .map(|i| 1 + ((i * (total - 1)) as f64 / (steps - 1) as f64).round() as usize)
                .collect()
        };
        let mut prev = 1.0;
        let betas = ts
            .iter()
            .map(|&t| {
                let ab = self.alpha_bar(t);
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Ok((ts, NoiseSchedule::from_betas(betas)?))
    }
}

/// Per-sample scalars laid out as `[B, 1, ..., 1]` to broadcast against `shape`.
fn per_sample<T: Real>(shape: &[usize], vals: impl Iterator<Item = f64>) -> Tensor<T> {
    let mut s = vec![1; shape.len()];
    s[0] = shape[0];
    Tensor::from_f64(&s, &vals.collect::<Vec<_>>()).expect("one value per sample")
}

fn check_batch(s: &NoiseSchedule, shape: &[usize], t: &[usize]) -> Result<()> {
    if shape.is_empty() || shape[0] != t.len() {
        return Err(Error::shape("timesteps per sample", shape, &[t.len()]));
    }
    t.iter().try_for_each(|&ti| s.check_t(ti))
}

/// `x_t = √ᾱ_t x₀ + √(1−ᾱ_t) ε`, with one timestep per leading-axis sample.
pub fn q_sample<T: Real>(x0: &Tensor<T>, t: &[usize], eps: &Tensor<T>, s: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    check_batch(s, x0.shape(), t)?;
    let per = x0.numel() / t.len().max(1);
    let mut out = x0.clone();
    for (i, (o, e)) in out.data_mut().iter_mut().zip(eps.data()).enumerate() {
        let ab = s.alpha_bar(t[i / per]);
        *o = T::of(ab.sqrt() * o.f64() + (1.0 - ab).sqrt() * e.f64());
    }
    Ok(out)
}

/// Posterior mean `μ̃` and variance `β̃_t` of `q(x_{t−1} | x_t, x₀)`.
pub fn q_posterior<T: Real>(x_t: &Tensor<T>, x0: &Tensor<T>, t: usize, s: &NoiseSchedule) -> Result<(Tensor<T>, f64)> {
    s.check_t(t)?;
    let (c0, ct) = s.posterior_coefs(t);
    let mean = x0.zip_map(x_t, |a, b| T::of(c0 * a.f64() + ct * b.f64()))?;
    Ok((mean, s.posterior_variance(t)))
}

/// Mean squared error between predicted and true noise.
pub fn loss_simple<'t, T: Real>(eps_pred: Var<'t, T>, eps: &Tensor<T>) -> Result<Var<'t, T>> {
    if eps_pred.shape() != eps.shape() {
        return Err(Error::shape("loss_simple", &eps_pred.shape(), eps.shape()));
    }
    let target = eps_pred.tape().constant(eps.clone());
    Ok(eps_pred.sub(target)?.square().mean())
}

/// `KL(N(μ₁, σ₁²) ‖ N(μ₂, σ₂²))` for one element.
pub fn kl_gaussian_diag(mu1: f64, var1: f64, mu2: f64, var2: f64) -> Result<f64> {
    if !(var1 > 0.0 && var2 > 0.0) {
        return Err(Error::invalid(format!(
            "variances must be positive, got {var1} and {var2}"
        )));
    }
    Ok(0.5 * ((var2 / var1).ln() + (var1 + (mu1 - mu2).powi(2)) / var2 - 1.0))
}

/// `σ² = exp(v′ log β_t + (1−v′) log β̃_t)` with `v′ = clamp((v+1)/2, 0, 1)`;
/// `β_1` at `t = 1`.
pub fn variance_from_v(v: f64, t: usize, s: &NoiseSchedule) -> Result<f64> {
    s.check_t(t)?;
    let (lb, lt) = log_variance_endpoints(t, s);
    let w = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
    Ok((w * lb + (1.0 - w) * lt).exp())
}

/// `(log β_t, log β̃_t)`, collapsing both to `log β_1` at `t = 1`.
fn log_variance_endpoints(t: usize, s: &NoiseSchedule) -> (f64, f64) {
    let lb = s.beta(t).ln();
    if t == 1 {
        (lb, lb)
    } else {
        (lb, s.posterior_variance(t).ln())
    }
}

/// `μ_θ = (x_t − β_t/√(1−ᾱ_t) · ε)/√α_t`.
fn model_mean(x_t: f64, eps: f64, t: usize, s: &NoiseSchedule) -> f64 {
    (x_t - s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt() * eps) / s.alpha(t).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `−log` of the probability mass a Gaussian assigns to the pixel bin of `x`,
/// with open-ended outermost bins.
pub fn discretized_gaussian_nll(x: f64, mean: f64, log_var: f64) -> f64 {
    let inv_std = (-0.5 * log_var).exp();
    let upper = (x - mean + PIXEL_HALF_BIN) * inv_std;
    let lower = (x - mean - PIXEL_HALF_BIN) * inv_std;
    let p = if x < -0.999 {
        std_normal_cdf(upper)
    } else if x > 0.999 {
        std_normal_cdf(-lower)
    } else {
        std_normal_cdf(upper) - std_normal_cdf(lower)
    };
    -p.max(1e-12).ln()
}

/// Variational-bound term in nats, averaged over all elements.
///
/// For samples with `t ≥ 2` this is `KL(q(x_{t−1}|x_t,x₀) ‖ N(μ_θ, σ²))`;
/// at `t = 1` it is the discretized Gaussian NLL of `x₀`. `μ_θ` is built from
/// a detached `eps_pred`, so only `v` receives gradient.
pub fn loss_full<'t, T: Real>(
    x0: &Tensor<T>,
    x_t: &Tensor<T>,
    t: &[usize],
    eps_pred: Var<'t, T>,
    v: Var<'t, T>,
    s: &NoiseSchedule,
) -> Result<Var<'t, T>> {
    let shape = x0.shape().to_vec();
    if x_t.shape() != shape.as_slice() {
        return Err(Error::shape("loss_full x_t", &shape, x_t.shape()));
    }
    for (what, got) in [("loss_full eps", eps_pred.shape()), ("loss_full v", v.shape())] {
        if got != shape {
            return Err(Error::shape(what, &shape, &got));
        }
    }
    check_batch(s, &shape, t)?;
    let tape = v.tape();
    let eps = eps_pred.detach().value();
    let per = x0.numel() / t.len();

    // Constant parts: C = β̃ + (μ̃ − μ_θ)² for KL rows, the NLL for t = 1 rows.
    let mut c = vec![T::zero(); x0.numel()];
    let mut nll = vec![T::zero(); x0.numel()];
    for i in 0..x0.numel() {
        let ti = t[i / per];
        let (x0i, xti) = (x0.data()[i].f64(), x_t.data()[i].f64());
        let mu = model_mean(xti, eps.data()[i].f64(), ti, s);
        if ti == 1 {
            nll[i] = T::of(discretized_gaussian_nll(x0i, mu, s.beta(1).ln()));
        } else {
            let (c0, ct) = s.posterior_coefs(ti);
            let diff = c0 * x0i + ct * xti - mu;
            c[i] = T::of(s.posterior_variance(ti) + diff * diff);
        }
    }
    let kl_mask = per_sample::<T>(&shape, t.iter().map(|&ti| if ti == 1 { 0.0 } else { 1.0 }));
    let log_beta = per_sample::<T>(&shape, t.iter().map(|&ti| log_variance_endpoints(ti, s).0));
    let log_tilde = per_sample::<T>(&shape, t.iter().map(|&ti| log_variance_endpoints(ti, s).1));
    let span = log_beta.broadcast_zip(&log_tilde, |a, b| a - b)?;

    let half = T::of(0.5);
    let w = v.add_scalar(T::one()).scale(half).clamp(T::zero(), T::one());
    let log_var = w.mul(tape.constant(span))?.add(tape.constant(log_tilde.clone()))?;
    let c = tape.constant(Tensor::new(&shape, c)?);
    let kl = log_var
        .sub(tape.constant(log_tilde))?
        .add(c.mul(log_var.neg().exp())?)?
        .add_scalar(-T::one())
        .scale(half);
    let terms = kl
        .mul(tape.constant(kl_mask))?
        .add(tape.constant(Tensor::new(&shape, nll)?))?;
    Ok(terms.mean())
}

/// Model prediction at one denoising step.
#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub eps: Tensor<T>,
    pub v: Tensor<T>,
}

/// One ancestral step `x_t → x_{t−1}` on schedule `s`, same `t` for the batch.
/// At `t = 1` the mean is returned without noise.
pub fn p_sample_step<T: Real, R: Rng + ?Sized>(
    x_t: &Tensor<T>,
    t: usize,
    out: &ModelOutput<T>,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    s.check_t(t)?;
    for other in [&out.eps, &out.v] {
        if other.shape() != x_t.shape() {
            return Err(Error::shape("p_sample_step", x_t.shape(), other.shape()));
        }
    }
    let (lb, lt) = log_variance_endpoints(t, s);
    let noise = if t > 1 {
        Some(Tensor::<T>::randn(x_t.shape(), 1.0, rng))
    } else {
        None
    };
    let mut x = x_t.clone();
    for (i, xi) in x.data_mut().iter_mut().enumerate() {
        let mu = model_mean(xi.f64(), out.eps.data()[i].f64(), t, s);
        *xi = T::of(match &noise {
            Some(z) => {
                let w = ((out.v.data()[i].f64() + 1.0) / 2.0).clamp(0.0, 1.0);
                let std = (0.5 * (w * lb + (1.0 - w) * lt)).exp();
                mu + std * z.data()[i].f64()
            }
            None => mu,
        });
    }
    Ok(x)
}

/// `ε̂ = ε_u + w (ε_c − ε_u)`.
pub fn cfg_combine<T: Real>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    eps_cond.zip_map(eps_uncond, |c, u| T::of(u.f64() + w * (c.f64() - u.f64())))
}

/// Anything that predicts `(ε, v)` for noisy inputs.
pub trait Denoiser<T: Real> {
    /// `t` holds original 1-based timesteps, `y` class ids (the null class
    /// is `num_classes()`), one per leading-axis sample.
    fn denoise(&self, x: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<ModelOutput<T>>;
    fn num_classes(&self) -> usize;
}

/// Ancestral sampling from pure noise over `steps` evenly strided timesteps.
///
/// With `classes = None` the null class is used and guidance is skipped.
/// Otherwise guidance with weight `w` mixes conditional and null-class
/// predictions; `w = 1` needs only the conditional pass. The variance is
/// always taken from the conditional prediction.
pub fn sample_loop<T: Real, R: Rng + ?Sized>(
    model: &dyn Denoiser<T>,
    shape: &[usize],
    classes: Option<&[usize]>,
    guidance_w: f64,
    steps: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let batch = *shape
        .first()
        .ok_or_else(|| Error::invalid("sample shape needs a batch axis"))?;
    let null = model.num_classes();
    let cond: Vec<usize> = match classes {
        Some(c) => {
            if c.len() != batch {
                return Err(Error::shape("sample classes", shape, &[c.len()]));
            }
            if let Some(&bad) = c.iter().find(|&&y| y >= null) {
                return Err(Error::invalid(format!(
                    "unknown class id {bad}; model has {null} classes"
                )));
            }
            c.to_vec()
        }
        None => vec![null; batch],
    };
    let guided = classes.is_some() && guidance_w != 1.0;
    let (ts, sub) = s.respace(steps)?;
    let mut x = Tensor::<T>::randn(shape, 1.0, rng);
    let per = x.numel() / batch.max(1);
    for k in (1..=ts.len()).rev() {
        let orig = ts[k - 1];
        let out = if guided {
            let mut both = x.data().to_vec();
            both.extend_from_slice(x.data());
            let mut s2 = shape.to_vec();
            s2[0] *= 2;
            let ys: Vec<usize> = cond.iter().copied().chain(std::iter::repeat_n(null, batch)).collect();
            let o = model.denoise(&Tensor::new(&s2, both)?, &vec![orig; 2 * batch], &ys)?;
            let split = |t: &Tensor<T>, half: usize| {
                Tensor::new(shape, t.data()[half * batch * per..(half + 1) * batch * per].to_vec())
            };
            let (ec, eu) = (split(&o.eps, 0)?, split(&o.eps, 1)?);
            ModelOutput {
                eps: cfg_combine(&ec, &eu, guidance_w)?,
                v: split(&o.v, 0)?,
            }
        } else {
            model.denoise(&x, &vec![orig; batch], &cond)?
        };
        x = p_sample_step(&x, k, &out, &sub, rng)?;
    }
    Ok(x)
}

/// `ema ← decay·ema + (1−decay)·live`, tensor by tensor.
pub fn ema_update<T: Real>(ema: &mut ParamStore<T>, live: &ParamStore<T>, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::invalid(format!("EMA decay must be in [0, 1), got {decay}")));
    }
    if !ema.congruent(live) {
        return Err(Error::invalid("EMA and live parameter sets are not congruent"));
    }
    let (d, r) = (T::of(decay), T::of(1.0 - decay));
    for (e, l) in ema.tensors_mut().iter_mut().zip(live.tensors()) {
        for (a, &b) in e.data_mut().iter_mut().zip(l.data()) {
            *a = d * *a + r * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn schedule_tables() {
        let one = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(one.beta(1), 0.3);
        assert_eq!(one.alpha_bar(1), 0.7);
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.steps(), 1000);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert_eq!(s.posterior_variance(1), 0.0);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.posterior_variance(t) > 0.0 && s.posterior_variance(t).is_finite());
        }
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!(NoiseSchedule::linear(10, 0.02, 0.01).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.01).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(s.check_t(0).is_err() && s.check_t(1001).is_err());
    }

    #[test]
    fn alpha_bar_product_oracle() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let mut prod = 1.0;
        for t in 1..=50 {
            let b = 1e-3 + (0.05 - 1e-3) * (t - 1) as f64 / 49.0;
            prod *= 1.0 - b;
            assert!((s.alpha_bar(t) - prod).abs() < 1e-14);
        }
    }

    #[test]
    fn q_sample_substitution() {
        // ᾱ_1 = 0.25
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let x = q_sample(
            &Tensor::<f64>::scalar(2.0).reshape(&[1]).unwrap(),
            &[1],
            &Tensor::ones(&[1]),
            &s,
        )
        .unwrap();
        assert!((x.item() - 1.8660254037844386).abs() < 1e-12);
        assert!(q_sample(&Tensor::<f64>::ones(&[1]), &[2], &Tensor::ones(&[1]), &s).is_err());
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        let s = NoiseSchedule::default_linear();
        let n = 100_000;
        let (x0, t) = (0.7, 300);
        let mut r = rng(1);
        let eps = Tensor::<f64>::randn(&[n], 1.0, &mut r);
        let x = q_sample(
            &Tensor::full(&[n, 1], x0),
            &vec![t; n],
            &eps.reshape(&[n, 1]).unwrap(),
            &s,
        )
        .unwrap();
        let ab = s.alpha_bar(t);
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_var = 1.0 - ab;
        assert!((mean - ab.sqrt() * x0).abs() < 3.0 * (want_var / n as f64).sqrt());
        // variance of the sample variance of a Gaussian is 2σ⁴/(n−1)
        assert!((var - want_var).abs() < 3.0 * want_var * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn posterior_closed_forms() {
        let s = NoiseSchedule::default_linear();
        let x0 = Tensor::<f64>::from_f64(&[2], &[0.3, -0.8]).unwrap();
        let xt = Tensor::<f64>::from_f64(&[2], &[1.1, 0.4]).unwrap();
        let (m, v) = q_posterior(&xt, &x0, 1, &s).unwrap();
        assert_eq!(v, 0.0);
        for i in 0..2 {
            assert!((m.data()[i] - x0.data()[i]).abs() < 1e-12);
        }
        // x₀ = x_t and β_t → 0 gives μ̃ → x_t
        let tiny = NoiseSchedule::from_betas(vec![0.1, 1e-12]).unwrap();
        let (m, _) = q_posterior(&xt, &xt, 2, &tiny).unwrap();
        for i in 0..2 {
            assert!((m.data()[i] - xt.data()[i]).abs() < 1e-9);
        }
        assert!(q_posterior(&xt, &x0, 0, &s).is_err());
    }

    #[test]
    fn posterior_matches_simulated_conditional_moments() {
        let s = NoiseSchedule::default_linear();
        let n = 100_000;
        let mut r = rng(2);
        for &t in &[2usize, 40, 700] {
            let x0 = 0.4;
            let (ab_prev, beta) = (s.alpha_bar_prev(t), s.beta(t));
            let (c0, ct) = s.posterior_coefs(t);
            let want = s.posterior_variance(t);
            let mut resid = Vec::with_capacity(n);
            for _ in 0..n {
                let z1: f64 = r.sample(StandardNormal);
                let z2: f64 = r.sample(StandardNormal);
                let prev = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * z1;
                let xt = (1.0 - beta).sqrt() * prev + beta.sqrt() * z2;
                resid.push(prev - (c0 * x0 + ct * xt));
            }
            let mean = resid.iter().sum::<f64>() / n as f64;
            let var = resid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 3.0 * (want / n as f64).sqrt(), "t={t} mean {mean}");
            assert!(
                (var - want).abs() < 3.0 * want * (2.0 / (n - 1) as f64).sqrt(),
                "t={t} var {var} vs {want}"
            );
        }
    }

    #[test]
    fn loss_simple_values() {
        let tape = Tape::<f64>::new();
        let mut r = rng(3);
        let eps = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        assert_eq!(
            loss_simple(tape.constant(eps.clone()), &eps).unwrap().value().item(),
            0.0
        );
        let plus = eps.map(|v| v + 1.0);
        assert!((loss_simple(tape.constant(plus), &eps).unwrap().value().item() - 1.0).abs() < 1e-12);
        let pred = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let mut acc = 0.0;
        for i in 0..12 {
            acc += (pred.data()[i] - eps.data()[i]).powi(2);
        }
        let got = loss_simple(tape.constant(pred), &eps).unwrap().value().item();
        assert!((got - acc / 12.0).abs() < 1e-12);
        assert!(loss_simple(tape.constant(Tensor::zeros(&[2])), &eps).is_err());
    }

    #[test]
    fn kl_values_and_quadrature() {
        assert_eq!(kl_gaussian_diag(0.3, 2.0, 0.3, 2.0).unwrap(), 0.0);
        assert!((kl_gaussian_diag(1.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_gaussian_diag(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(kl_gaussian_diag(0.0, 1.0, 0.0, -1.0).is_err());
        let pdf =
            |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let mut r = rng(4);
        for _ in 0..5 {
            let m1: f64 = r.random_range(-1.5..1.5);
            let m2: f64 = r.random_range(-1.5..1.5);
            let v1: f64 = r.random_range(0.5..2.0);
            let v2: f64 = r.random_range(0.5..2.0);
            let h = 1e-3;
            let n = (24.0 / h) as usize;
            let mut acc = 0.0;
            for i in 0..=n {
                let x = -12.0 + i as f64 * h;
                let q = pdf(x, m1, v1);
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                if q > 0.0 {
                    acc += w * q * (q / pdf(x, m2, v2)).ln();
                }
            }
            acc *= h;
            let kl = kl_gaussian_diag(m1, v1, m2, v2).unwrap();
            assert!((acc - kl).abs() < 1e-6, "{acc} vs {kl}");
        }
    }

    #[test]
    fn variance_endpoints() {
        let s = NoiseSchedule::default_linear();
        let t = 500;
        let (b, bt) = (s.beta(t), s.posterior_variance(t));
        assert!((variance_from_v(1.0, t, &s).unwrap() - b).abs() < 1e-15);
        assert!((variance_from_v(-1.0, t, &s).unwrap() - bt).abs() < 1e-15);
        assert!((variance_from_v(0.0, t, &s).unwrap() - (b * bt).sqrt()).abs() < 1e-15);
        assert!((variance_from_v(5.0, t, &s).unwrap() - b).abs() < 1e-15);
        assert!((variance_from_v(0.3, 1, &s).unwrap() - s.beta(1)).abs() < 1e-18);
        assert!(variance_from_v(0.0, 0, &s).is_err());
    }

    fn full_inputs(t: &[usize], seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let s = NoiseSchedule::default_linear();
        let mut r = rng(seed);
        let shape = [t.len(), 2, 3];
        let x0 = Tensor::<f64>::uniform(&shape, 1.0, &mut r);
        let eps = Tensor::<f64>::randn(&shape, 1.0, &mut r);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let v = Tensor::<f64>::uniform(&shape, 0.9, &mut r);
        (x0, xt, eps, v)
    }

    #[test]
    fn loss_full_zero_at_posterior() {
        let s = NoiseSchedule::default_linear();
        let t = [5usize, 900];
        let (x0, xt, _, _) = full_inputs(&t, 5);
        // choose ε so that μ_θ equals μ̃ exactly, and v = −1 so σ² = β̃
        let per = 6;
        let eps = Tensor::from_fn(x0.shape(), |i| {
            let ti = t[i / per];
            let (c0, ct) = s.posterior_coefs(ti);
            let mu = c0 * x0.data()[i] + ct * xt.data()[i];
            (xt.data()[i] - mu * s.alpha(ti).sqrt()) * (1.0 - s.alpha_bar(ti)).sqrt() / s.beta(ti)
        });
        let tape = Tape::new();
        let l = loss_full(
            &x0,
            &xt,
            &t,
            tape.constant(eps),
            tape.constant(Tensor::full(x0.shape(), -1.0)),
            &s,
        )
        .unwrap();
        assert!(l.value().item().abs() < 1e-9, "{}", l.value().item());
    }

    #[test]
    fn loss_full_matches_elementwise_oracle_and_is_nonnegative() {
        let s = NoiseSchedule::default_linear();
        for seed in 0..10 {
            let t = [1usize, 2, 37, 1000];
            let (x0, xt, _, v) = full_inputs(&t, 10 + seed);
            let eps = Tensor::<f64>::randn(x0.shape(), 1.0, &mut rng(seed));
            let tape = Tape::new();
            let got = loss_full(&x0, &xt, &t, tape.constant(eps.clone()), tape.constant(v.clone()), &s)
                .unwrap()
                .value()
                .item();
            let mut acc = 0.0;
            for i in 0..x0.numel() {
                let ti = t[i / 6];
                let mu = model_mean(xt.data()[i], eps.data()[i], ti, &s);
                let var = variance_from_v(v.data()[i], ti, &s).unwrap();
                let term = if ti == 1 {
                    discretized_gaussian_nll(x0.data()[i], mu, var.ln())
                } else {
                    let (m, pv) = q_posterior(&xt, &x0, ti, &s).unwrap();
                    let k = kl_gaussian_diag(m.data()[i], pv, mu, var).unwrap();
                    assert!(k >= 0.0);
                    k
                };
                acc += term;
            }
            acc /= x0.numel() as f64;
            assert!((got - acc).abs() < 1e-9 * acc.abs().max(1.0), "{got} vs {acc}");
            assert!(got.is_finite() && got >= 0.0);
        }
    }

    #[test]
    fn loss_full_gradient_contract() {
        let s = NoiseSchedule::default_linear();
        let t = [1usize, 3, 500];
        let (x0, xt, eps, v) = full_inputs(&t, 20);
        let tape = Tape::new();
        let e = tape.param(eps.map(|x| x + 0.3));
        let vv = tape.param(v);
        let l = loss_full(&x0, &xt, &t, e, vv, &s).unwrap();
        let mut g = tape.backward(l).unwrap();
        assert!(g.take_or_zeros(e).data().iter().all(|&x| x == 0.0));
        let gv = g.take_or_zeros(vv);
        assert!(gv.data()[6..].iter().all(|&x| x != 0.0));
        // the t = 1 sample uses a fixed variance
        assert!(gv.data()[..6].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_full_v_gradient_finite_differences() {
        let s = NoiseSchedule::default_linear();
        let t = [4usize, 250];
        let (x0, xt, eps, v) = full_inputs(&t, 30);
        let reports = crate::gradcheck::check(
            move |_, vars| loss_full(&x0, &xt, &t, vars[0], vars[1], &s),
            &[eps, v],
            1e-6,
            None,
        )
        .unwrap();
        assert!(reports[1].rel_error < 1e-4, "{reports:?}");
    }

    #[test]
    fn loss_full_rejects_bad_inputs() {
        let s = NoiseSchedule::default_linear();
        let tape = Tape::new();
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let c = tape.constant(x.clone());
        assert!(loss_full(&x, &x, &[1, 0], c, c, &s).is_err());
        assert!(loss_full(&x, &x, &[1], c, c, &s).is_err());
        assert!(loss_full(&x, &x, &[1, 1001], c, c, &s).is_err());
        let other = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(loss_full(&x, &x, &[1, 2], other, c, &s).is_err());
    }

    #[test]
    fn nll_bins() {
        // a very narrow Gaussian centred on the pixel puts nearly all mass in its bin
        assert!(discretized_gaussian_nll(0.2, 0.2, (1e-8f64).ln()) < 1e-6);
        // edge bins are open-ended
        assert!(discretized_gaussian_nll(-1.0, -5.0, 0.0) < 1e-4);
        assert!(discretized_gaussian_nll(1.0, 5.0, 0.0) < 1e-4);
        assert!(discretized_gaussian_nll(0.0, 50.0, 0.0).is_finite());
    }

    #[test]
    fn p_sample_roundtrip_and_determinism() {
        let s = NoiseSchedule::from_betas(vec![0.02]).unwrap();
        let mut r = rng(6);
        let x0 = Tensor::<f64>::uniform(&[2, 5], 1.0, &mut r);
        let eps = Tensor::<f64>::randn(&[2, 5], 1.0, &mut r);
        let x1 = q_sample(&x0, &[1, 1], &eps, &s).unwrap();
        let out = ModelOutput {
            eps,
            v: Tensor::zeros(&[2, 5]),
        };
        let a = p_sample_step(&x1, 1, &out, &s, &mut rng(1)).unwrap();
        let b = p_sample_step(&x1, 1, &out, &s, &mut rng(2)).unwrap();
        assert_eq!(a, b);
        for (p, q) in a.data().iter().zip(x0.data()) {
            assert!((p - q).abs() < 1e-9);
        }
        assert!(p_sample_step(&x1, 2, &out, &s, &mut r).is_err());
    }

    #[test]
    fn cfg_values() {
        let c = Tensor::<f64>::full(&[2], 2.0);
        let u = Tensor::<f64>::zeros(&[2]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &u, 1.5).unwrap().data(), &[3.0, 3.0]);
        assert!(cfg_combine(&c, &Tensor::zeros(&[3]), 1.0).is_err());
    }

    #[test]
    fn respacing() {
        let s = NoiseSchedule::default_linear();
        let (ts, full) = s.respace(1000).unwrap();
        assert_eq!(ts, (1..=1000).collect::<Vec<_>>());
        for t in 1..=1000 {
            assert!((full.beta(t) - s.beta(t)).abs() < 1e-12);
        }
        let (ts, sub) = s.respace(250).unwrap();
        assert_eq!((ts[0], *ts.last().unwrap(), ts.len()), (1, 1000, 250));
        for (k, &t) in ts.iter().enumerate() {
            assert!((sub.alpha_bar(k + 1) - s.alpha_bar(t)).abs() < 1e-12);
        }
        assert!(s.respace(1001).is_err());
        assert!(s.respace(0).is_err());
    }

    /// Knows the clean target and returns the exact noise of any input.
    struct Planted {
        x0: Tensor<f64>,
        s: NoiseSchedule,
        calls: std::cell::Cell<usize>,
    }

    impl Denoiser<f64> for Planted {
        fn denoise(&self, x: &Tensor<f64>, t: &[usize], _y: &[usize]) -> Result<ModelOutput<f64>> {
            self.calls.set(self.calls.get() + 1);
            let per = x.numel() / t.len();
            let n = self.x0.numel();
            let eps = Tensor::from_fn(x.shape(), |i| {
                let ab = self.s.alpha_bar(t[i / per]);
                (x.data()[i] - ab.sqrt() * self.x0.data()[i % n]) / (1.0 - ab).sqrt()
            });
            Ok(ModelOutput {
                eps,
                v: Tensor::full(x.shape(), -1.0),
            })
        }

        fn num_classes(&self) -> usize {
            2
        }
    }

    #[test]
    fn sample_loop_recovers_planted_answer() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        let x0 = Tensor::<f64>::uniform(&[1, 4, 4], 1.0, &mut rng(7));
        let model = Planted {
            x0: x0.clone(),
            s: s.clone(),
            calls: Default::default(),
        };
        for steps in [50, 10] {
            let out = sample_loop(&model, &[1, 4, 4], None, 1.0, steps, &s, &mut rng(8)).unwrap();
            assert_eq!(out.shape(), &[1, 4, 4]);
            let rms = (out
                .data()
                .iter()
                .zip(x0.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / 16.0)
                .sqrt();
            assert!(rms < 1e-2, "steps={steps} rms={rms}");
        }
        let a = sample_loop(&model, &[1, 4, 4], Some(&[1]), 2.0, 10, &s, &mut rng(9)).unwrap();
        let b = sample_loop(&model, &[1, 4, 4], Some(&[1]), 2.0, 10, &s, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        model.calls.set(0);
        sample_loop(&model, &[1, 4, 4], Some(&[0]), 1.0, 10, &s, &mut rng(9)).unwrap();
        assert_eq!(model.calls.get(), 10);
        assert!(sample_loop(&model, &[1, 4, 4], Some(&[2]), 1.0, 10, &s, &mut rng(9)).is_err());
        assert!(sample_loop(&model, &[1, 4, 4], None, 1.0, 51, &s, &mut rng(9)).is_err());
    }

    #[test]
    fn ema_values() {
        let mut r = rng(11);
        let mut live = ParamStore::<f64>::new();
        live.add("a", Tensor::randn(&[3, 2], 1.0, &mut r));
        live.add("b", Tensor::randn(&[4], 1.0, &mut r));
        let mut ema = live.clone();
        for t in ema.tensors_mut() {
            *t = t.map(|_| 0.0);
        }
        let start = ema.clone();
        ema_update(&mut ema, &live, 0.9).unwrap();
        for (i, (e, l)) in ema.tensors().iter().zip(live.tensors()).enumerate() {
            for (j, (&a, &b)) in e.data().iter().zip(l.data()).enumerate() {
                let want = 0.9 * start.tensors()[i].data()[j] + 0.1 * b;
                assert!((a - want).abs() < 1e-15);
            }
        }
        // k constant steps leave a gap of decay^k
        let mut ema = start.clone();
        for _ in 0..20 {
            ema_update(&mut ema, &live, 0.8).unwrap();
        }
        let gap = 0.8f64.powi(20);
        for (e, l) in ema.tensors().iter().zip(live.tensors()) {
            for (&a, &b) in e.data().iter().zip(l.data()) {
                assert!((b - a - gap * b).abs() < 1e-12);
            }
        }
        let mut ema = start.clone();
        ema_update(&mut ema, &live, 0.0).unwrap();
        assert_eq!(ema, live);
        assert!(ema_update(&mut ema, &live, 1.0).is_err());
        let mut other = ParamStore::<f64>::new();
        other.add("a", Tensor::zeros(&[3, 2]));
        assert!(ema_update(&mut other, &live, 0.5).is_err());
    }
}
