//! Full-reference image quality: PSNR and single-scale SSIM.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<T: Scalar>(op: &'static str, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_pair("mse", x, y)?;
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(s / x.len().max(1) as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at 100 dB when MSE < 1e-10.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(x, y)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for (i, t) in taps.iter().enumerate() {
            let src = &rows[(y + i) * wo..(y + i + 1) * wo];
            for (o, v) in out[y * wo..(y + 1) * wo].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean SSIM of one channel plane over all valid window positions.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let mxx = filter_valid(&prod(x, x), h, w, &taps);
    let myy = filter_valid(&prod(y, y), h, w, &taps);
    let mxy = filter_valid(&prod(x, y), h, w, &taps);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    total / n as f64
}

/// Mean over batch items and channels of per-plane SSIM (11x11 Gaussian
/// window, sigma 1.5, K1 = 0.01, K2 = 0.03, peak 1).
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_pair("ssim", x, y)?;
    let [n, c, h, w] = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let plane = h * w;
    let to64 = |t: &Tensor<T>, p: usize| t.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let mut total = 0.0;
    for p in 0..n * c {
        total += ssim_plane(&to64(x, p), &to64(y, p), h, w, 1.0);
    }
    Ok(total / (n * c) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
}

impl MetricReport {
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, output: &Tensor<T>, reference: &Tensor<T>) -> Result<()> {
        self.images.push(ImageScore {
            name: name.into(),
            psnr: psnr(output, reference, 1.0)?,
            ssim: ssim(output, reference)?,
        });
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.images.iter().map(|s| s.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.images.iter().map(|s| s.ssim))
    }

    /// `key=value` lines for scripts.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for img in &self.images {
            s += &format!("image={} psnr={:.6} ssim={:.6}\n", img.name, img.psnr, img.ssim);
        }
        s += &format!(
            "mean_psnr={:.6}\nmean_ssim={:.6}\ncount={}\n",
            self.mean_psnr(),
            self.mean_ssim(),
            self.images.len()
        );
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.images.iter().map(|s| s.name.len()).max().unwrap_or(4).max(4);
        writeln!(f, "{:width$}  {:>9}  {:>7}", "image", "PSNR(dB)", "SSIM")?;
        for s in &self.images {
            writeln!(f, "{:width$}  {:>9.3}  {:>7.4}", s.name, s.psnr, s.ssim)?;
        }
        write!(f, "{:width$}  {:>9.3}  {:>7.4}", "mean", self.mean_psnr(), self.mean_ssim())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_reference_values() {
        let a = Tensor::<f32>::full([1, 3, 8, 8], 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let b = Tensor::<f64>::full([1, 3, 8, 8], 0.5);
        let c = Tensor::<f64>::full([1, 3, 8, 8], 0.6);
        assert!((psnr(&b, &c, 1.0).unwrap() - 20.0).abs() < 1e-6);
        assert!((psnr(&c, &b, 1.0).unwrap() - psnr(&b, &c, 1.0).unwrap()).abs() < 1e-12);
        let z = Tensor::<f64>::zeros([1, 1, 4, 4]);
        let o = Tensor::<f64>::ones([1, 1, 4, 4]);
        assert_eq!(psnr(&z, &o, 1.0).unwrap(), 0.0);
        assert!(psnr(&z, &Tensor::zeros([1, 1, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn ssim_self_and_constants() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_fn([2, 3, 16, 13], |_| r.random());
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = Tensor::<f32>::full([1, 3, 12, 12], 0.4);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Tensor::<f32>::zeros([1, 3, 10, 20]), &Tensor::zeros([1, 3, 10, 20])).is_err());
    }

    #[test]
    fn report_formats() {
        let a = Tensor::<f32>::full([1, 3, 12, 12], 0.5);
        let b = Tensor::<f32>::full([1, 3, 12, 12], 0.6);
        let mut rep = MetricReport::default();
        rep.push("x", &a, &b).unwrap();
        rep.push("y", &a, &a).unwrap();
        assert!((rep.mean_psnr() - 60.0).abs() < 1e-3);
        assert!(rep.key_values().contains("count=2"));
        assert!(rep.to_string().lines().count() == 4);
    }
}
