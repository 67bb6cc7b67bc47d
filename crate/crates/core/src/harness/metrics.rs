//! PSNR, SSIM and the pooled lower-quartile patch PSNR.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imgio::{Image, CHANNELS, PATCH};

pub const PEAK: f64 = 255.0;
/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PATCH_PERCENTILE: f64 = 0.25;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len().max(1) as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode Gaussian filter of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..SSIM_WINDOW).map(|i| k[i] * plane[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let mut total = 0.0;
    for ch in 0..CHANNELS {
        let plane = |img: &Image| -> Vec<f64> { img.data().iter().skip(ch).step_by(CHANNELS).map(|v| *v as f64).collect() };
        let (x, y) = (plane(a), plane(b));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / CHANNELS as f64)
}

/// PSNR of every non-overlapping 8×8 patch, row-major.
pub fn patch_psnrs(a: &Image, b: &Image) -> Result<Vec<f64>> {
    check_dims(a, b)?;
    let mut out = Vec::new();
    for r0 in (0..=a.height().saturating_sub(PATCH)).step_by(PATCH) {
        for c0 in (0..=a.width().saturating_sub(PATCH)).step_by(PATCH) {
            if r0 + PATCH > a.height() || c0 + PATCH > a.width() {
                continue;
            }
            let mut sum = 0.0;
            for r in r0..r0 + PATCH {
                for c in c0..c0 + PATCH {
                    for ch in 0..CHANNELS {
                        sum += (a.get(r, c, ch) as f64 - b.get(r, c, ch) as f64).powi(2);
                    }
                }
            }
            out.push(psnr_from_mse(sum / (PATCH * PATCH * CHANNELS) as f64));
        }
    }
    Ok(out)
}

/// Linear-interpolated quantile at `q·(n−1)` of the sorted values.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub name: String,
    pub noisy_psnr: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean_noisy_psnr: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Lower quartile of PSNR over all 8×8 patches of the set.
    pub patch_psnr_p25: f64,
    /// `(stage, seconds)`.
    pub timings: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn add_timing(&mut self, stage: impl Into<String>, seconds: f64) {
        self.timings.push((stage.into(), seconds));
    }

    pub fn gain(&self) -> f64 {
        self.mean_psnr - self.mean_noisy_psnr
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>9}  {:>7}", "name", "noisy_psnr", "psnr", "ssim");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.4}  {:>9.4}  {:>7.5}",
                r.name, r.noisy_psnr, r.psnr, r.ssim
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.4}  {:>9.4}  {:>7.5}",
            "mean", self.mean_noisy_psnr, self.mean_psnr, self.mean_ssim
        );
        let _ = writeln!(out, "patch psnr p25: {:.4}", self.patch_psnr_p25);
        for (stage, secs) in &self.timings {
            let _ = writeln!(out, "time {stage}: {secs:.3} s");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,noisy_psnr,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.8}", r.name, r.noisy_psnr, r.psnr, r.ssim);
        }
        let _ = writeln!(
            out,
            "mean,{:.6},{:.6},{:.8}",
            self.mean_noisy_psnr, self.mean_psnr, self.mean_ssim
        );
        let _ = writeln!(out, "patch_psnr_p25,,{:.6},", self.patch_psnr_p25);
        for (stage, secs) in &self.timings {
            let _ = writeln!(out, "time_{stage},,{secs:.6},");
        }
        out
    }
}

/// Metrics for aligned `(clean, noisy, denoised)` triples.
pub fn evaluate(clean: &[Image], noisy: &[Image], denoised: &[Image]) -> Result<MetricsReport> {
    let names: Vec<String> = (0..clean.len()).map(|i| format!("{i:04}")).collect();
    evaluate_named(&names, clean, noisy, denoised)
}

pub fn evaluate_named(names: &[String], clean: &[Image], noisy: &[Image], denoised: &[Image]) -> Result<MetricsReport> {
    if clean.len() != noisy.len() || clean.len() != denoised.len() || clean.len() != names.len() {
        return Err(Error::Contract("evaluation sets differ in length".into()));
    }
    if clean.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut rows = Vec::with_capacity(clean.len());
    let mut patches = Vec::new();
    for (((name, c), n), d) in names.iter().zip(clean).zip(noisy).zip(denoised) {
        rows.push(MetricsRow {
            name: name.clone(),
            noisy_psnr: psnr(c, n)?,
            psnr: psnr(c, d)?,
            ssim: ssim(c, d)?,
        });
        patches.extend(patch_psnrs(c, d)?);
    }
    let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(MetricsReport {
        mean_noisy_psnr: mean(|r| r.noisy_psnr),
        mean_psnr: mean(|r| r.psnr),
        mean_ssim: mean(|r| r.ssim),
        patch_psnr_p25: percentile(&patches, PATCH_PERCENTILE).unwrap_or(PSNR_CAP),
        rows,
        timings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::{add_noise, NoiseModel};

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |r, c, ch| ((r * 5 + c * 3 + ch * 30) % 256) as f32)
    }

    fn offset(img: &Image, d: f32) -> Image {
        Image::from_fn(img.height(), img.width(), |r, c, ch| img.get(r, c, ch) + d)
    }

    #[test]
    fn psnr_reference_values() {
        assert!((psnr_from_mse(1.0) - 48.1308).abs() < 1e-3);
        let a = Image::from_fn(16, 16, |_, _, _| 100.0);
        assert!((psnr(&a, &offset(&a, 5.0)).unwrap() - 34.1514).abs() < 1e-3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_identity_and_degradation() {
        let a = ramp(32, 40);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let flat = Image::from_fn(20, 20, |_, _, _| 77.0);
        assert!((ssim(&flat, &flat).unwrap() - 1.0).abs() < 1e-9);
        let n = add_noise(&a, NoiseModel::new(25.0, 0));
        let s = ssim(&a, &n).unwrap();
        assert!(s < 0.9 && s > 0.0, "{s}");
        assert!(ssim(&Image::zeros(8, 30), &Image::zeros(8, 30)).is_err());
        assert!(ssim(&a, &ramp(32, 41)).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 0.25), Some(1.75));
        assert_eq!(percentile(&[5.0], 0.25), Some(5.0));
        assert_eq!(percentile(&[], 0.25), None);
    }

    #[test]
    fn patch_psnr_pools_over_the_set() {
        // two 16x16 images, four patches each, per-patch offsets 1..8
        let clean = [Image::from_fn(16, 16, |_, _, _| 50.0), Image::from_fn(16, 16, |_, _, _| 90.0)];
        let offsets = [[1.0, 2.0, 4.0, 8.0], [3.0, 5.0, 6.0, 7.0]];
        let den: Vec<Image> = clean
            .iter()
            .zip(&offsets)
            .map(|(img, o)| Image::from_fn(16, 16, |r, c, ch| img.get(r, c, ch) + o[(r / 8) * 2 + c / 8]))
            .collect();
        let rep = evaluate(&clean, &clean, &den).unwrap();
        // ascending PSNR follows descending offset: 8, 7, 6, ...; q = 0.25·7 = 1.75
        let p = |d: f64| 10.0 * (255.0f64 * 255.0 / (d * d)).log10();
        let want = p(7.0) + 0.75 * (p(6.0) - p(7.0));
        assert!((rep.patch_psnr_p25 - want).abs() < 1e-12);
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.to_table().contains("mean"));
        assert_eq!(rep.to_csv().lines().count(), 5);
    }
}
