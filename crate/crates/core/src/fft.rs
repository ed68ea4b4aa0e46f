//! Iterative radix-2 FFT with explicit bit reversal, and the linear
//! convolution helpers built on it.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Complex array with split real/imaginary storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::invalid(format!(
                "complex array of shape {shape:?} needs {n} entries, got re={} im={}",
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexTensor {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn from_complex(shape: &[usize], values: &[Complex64]) -> Result<Self> {
        Self::new(
            shape,
            values.iter().map(|c| c.re).collect(),
            values.iter().map(|c| c.im).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn get(&self, i: usize) -> Complex64 {
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect()
    }
}

/// Precomputed twiddles and bit-reversal permutation for one length.
#[derive(Clone, Debug)]
pub struct FftPlan {
    n: usize,
    rev: Vec<u32>,
    twiddles: Vec<Complex64>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::invalid(format!("FFT length must be a power of two, got {n}")));
        }
        let bits = n.trailing_zeros();
        let rev = (0..n as u32)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (32 - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k as f64 / n as f64))
            .collect();
        Ok(FftPlan { n, rev, twiddles })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place forward transform, `X_k = Σ x_j e^{-2πi jk/n}`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, false);
    }

    /// In-place inverse transform including the `1/n` factor.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, true);
        let s = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        assert_eq!(buf.len(), n, "buffer length does not match plan");
        for i in 0..n {
            let j = self.rev[i] as usize;
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut half = 1;
        while half < n {
            let stride = n / (2 * half);
            for start in (0..n).step_by(2 * half) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let w = if inverse { w.conj() } else { w };
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            half *= 2;
        }
    }
}

/// Radix-2 transform along the rows of `[n, cols]` arrays in split
/// real/imaginary storage. Every butterfly combines two whole rows, so the
/// inner loops run over contiguous memory.
#[derive(Clone, Debug)]
pub struct ColumnFft<T> {
    n: usize,
    rev: Vec<u32>,
    tw_re: Vec<T>,
    tw_im: Vec<T>,
}

impl<T: Real> ColumnFft<T> {
    pub fn new(n: usize) -> Result<Self> {
        let plan = FftPlan::new(n)?;
        Ok(ColumnFft {
            n,
            rev: plan.rev,
            tw_re: plan.twiddles.iter().map(|w| T::of(w.re)).collect(),
            tw_im: plan.twiddles.iter().map(|w| T::of(w.im)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Forward transform of every column, no scaling.
    pub fn forward(&self, re: &mut [T], im: &mut [T], cols: usize) {
        self.transform(re, im, cols, false);
    }

    /// Inverse transform of every column, without the `1/n` factor.
    pub fn inverse_unscaled(&self, re: &mut [T], im: &mut [T], cols: usize) {
        self.transform(re, im, cols, true);
    }

    fn transform(&self, re: &mut [T], im: &mut [T], cols: usize, inverse: bool) {
        let n = self.n;
        assert!(
            re.len() == n * cols && im.len() == n * cols,
            "buffer does not match plan"
        );
        for i in 0..n {
            let j = self.rev[i] as usize;
            if i < j {
                swap_rows(re, i, j, cols);
                swap_rows(im, i, j, cols);
            }
        }
        let mut half = 1;
        while half < n {
            let stride = n / (2 * half);
            for start in (0..n).step_by(2 * half) {
                for k in 0..half {
                    let wr = self.tw_re[k * stride];
                    let wi = if inverse {
                        -self.tw_im[k * stride]
                    } else {
                        self.tw_im[k * stride]
                    };
                    let a = (start + k) * cols;
                    let b = (start + k + half) * cols;
                    let (ra, rb) = re.split_at_mut(b);
                    let (ia, ib) = im.split_at_mut(b);
                    let (ra, rb) = (&mut ra[a..a + cols], &mut rb[..cols]);
                    let (ia, ib) = (&mut ia[a..a + cols], &mut ib[..cols]);
                    let rows = ra.iter_mut().zip(ia.iter_mut()).zip(rb.iter_mut().zip(ib.iter_mut()));
                    if k == 0 {
                        for ((ar, ai), (br, bi)) in rows {
                            let (xr, xi) = (*br, *bi);
                            *br = *ar - xr;
                            *bi = *ai - xi;
                            *ar = *ar + xr;
                            *ai = *ai + xi;
                        }
                    } else {
                        for ((ar, ai), (br, bi)) in rows {
                            let xr = *br * wr - *bi * wi;
                            let xi = *br * wi + *bi * wr;
                            *br = *ar - xr;
                            *bi = *ai - xi;
                            *ar = *ar + xr;
                            *ai = *ai + xi;
                        }
                    }
                }
            }
            half *= 2;
        }
    }
}

fn swap_rows<T>(buf: &mut [T], i: usize, j: usize, cols: usize) {
    let (lo, hi) = buf.split_at_mut(j * cols);
    lo[i * cols..(i + 1) * cols].swap_with_slice(&mut hi[..cols]);
}

/// Spectrum of a real sequence whose length is a power of two.
pub fn fft_real(x: &[f64]) -> Result<ComplexTensor> {
    let plan = FftPlan::new(x.len())?;
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan.forward(&mut buf);
    ComplexTensor::from_complex(&[x.len()], &buf)
}

/// Real part of the inverse transform.
pub fn ifft_real(spec: &ComplexTensor) -> Result<Vec<f64>> {
    let plan = FftPlan::new(spec.re.len())?;
    let mut buf = spec.to_complex();
    plan.inverse(&mut buf);
    Ok(buf.into_iter().map(|c| c.re).collect())
}

/// Smallest power of two `≥ 2·len`: enough padding that circular convolution
/// of two length-`len` sequences equals linear convolution.
pub fn padded_len(len: usize) -> usize {
    (2 * len.max(1)).next_power_of_two()
}

/// First `signal.len()` outputs of the linear convolution `signal * kernel`.
pub fn causal_conv(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = padded_len(signal.len().max(kernel.len()));
    let plan = FftPlan::new(n).expect("padded length is a power of two");
    let mut a = vec![Complex64::new(0.0, 0.0); n];
    let mut b = vec![Complex64::new(0.0, 0.0); n];
    for (d, &s) in a.iter_mut().zip(signal) {
        d.re = s;
    }
    for (d, &k) in b.iter_mut().zip(kernel) {
        d.re = k;
    }
    plan.forward(&mut a);
    plan.forward(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    plan.inverse(&mut a);
    a[..signal.len()].iter().map(|c| c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn column_transform_matches_scalar_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(n, cols) in &[(1usize, 3usize), (2, 1), (8, 5), (64, 7)] {
            let data: Vec<Complex64> = (0..n * cols)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let mut re: Vec<f64> = data.iter().map(|z| z.re).collect();
            let mut im: Vec<f64> = data.iter().map(|z| z.im).collect();
            let cf = ColumnFft::<f64>::new(n).unwrap();
            cf.forward(&mut re, &mut im, cols);
            let plan = FftPlan::new(n).unwrap();
            for c in 0..cols {
                let mut col: Vec<Complex64> = (0..n).map(|r| data[r * cols + c]).collect();
                plan.forward(&mut col);
                for r in 0..n {
                    assert!((col[r] - Complex64::new(re[r * cols + c], im[r * cols + c])).norm() < 1e-12);
                }
            }
            cf.inverse_unscaled(&mut re, &mut im, cols);
            for (i, z) in data.iter().enumerate() {
                assert!((re[i] / n as f64 - z.re).abs() < 1e-12 && (im[i] / n as f64 - z.im).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let s = fft_real(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        for i in 0..4 {
            assert!((s.get(i) - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_has_only_dc() {
        let c = 2.5;
        let s = fft_real(&[c; 8]).unwrap();
        assert!((s.get(0).re - c * 8.0).abs() < 1e-12);
        for i in 1..8 {
            assert!(s.get(i).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(fft_real(&[1.0, 2.0, 3.0]).is_err());
        assert!(fft_real(&[]).is_err());
        assert!(fft_real(&[7.0]).is_ok());
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = fft_real(&x).unwrap();
        for k in 0..32 {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &v) in x.iter().enumerate() {
                acc += Complex64::from_polar(v, -2.0 * std::f64::consts::PI * (j * k) as f64 / 32.0);
            }
            assert!((acc - s.get(k)).norm() < 1e-10);
        }
    }

    #[test]
    fn roundtrip_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &n in &[1usize, 2, 16, 256] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let back = ifft_real(&fft_real(&x).unwrap()).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9);
            }
            let (a, b) = (0.7, -1.3);
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let (fx, fy, fm) = (fft_real(&x).unwrap(), fft_real(&y).unwrap(), fft_real(&mix).unwrap());
            for k in 0..n {
                assert!((fm.get(k) - (fx.get(k) * a + fy.get(k) * b)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn convolution_theorem_against_direct_circular() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (fa, fb) = (fft_real(&a).unwrap().to_complex(), fft_real(&b).unwrap().to_complex());
            let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
            let got = ifft_real(&ComplexTensor::from_complex(&[16], &prod).unwrap()).unwrap();
            for k in 0..16 {
                let direct: f64 = (0..16).map(|j| a[j] * b[(16 + k - j) % 16]).sum();
                assert!((direct - got[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn causal_conv_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &l in &[1usize, 3, 17, 64] {
            let u: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = causal_conv(&u, &k);
            for t in 0..l {
                let direct: f64 = (0..=t).map(|s| k[s] * u[t - s]).sum();
                assert!((direct - got[t]).abs() < 1e-9);
            }
        }
    }
}
