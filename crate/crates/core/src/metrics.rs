//! Image-quality metrics on normalized single-channel maps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0} vs {1} values")]
    Shape(usize, usize),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall(usize, usize),
    #[error("no samples to aggregate")]
    Empty,
}

fn check(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::Shape(x.len(), y.len()));
    }
    Ok(())
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    Ok(mse(x, y)?.sqrt())
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(x: &[f64], y: &[f64], peak: f64) -> Result<f64, MetricsError> {
    Ok(psnr_from_mse(mse(x, y)?, peak))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| g[t] * img[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| g[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_scale(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let mxx = filter_valid(&prod(x, x), h, w, &g);
    let myy = filter_valid(&prod(y, y), h, w, &g);
    let mxy = filter_valid(&prod(x, y), h, w, &g);
    let n = mx.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.len() {
        let vx = mxx[i] - mx[i] * mx[i];
        let vy = myy[i] - my[i] * my[i];
        let cxy = mxy[i] - mx[i] * my[i];
        let c = (2.0 * cxy + c2) / (vx + vy + c2);
        let l = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        ssim += l * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

/// 2x2 average pooling (odd trailing row/column dropped).
pub fn avg_pool2(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out.push((img[i] + img[i + 1] + img[i + w] + img[i + w + 1]) / 4.0);
        }
    }
    (out, oh, ow)
}

/// Scales whose smaller side is still at least one window.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut n = 0;
    let (mut h, mut w) = (h, w);
    while n < MS_SSIM_WEIGHTS.len() && h.min(w) >= SSIM_WINDOW {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

/// Multi-scale SSIM (peak 1). Exponents are renormalized over the feasible
/// scales, and negative per-scale factors are clamped to zero.
pub fn ms_ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64, MetricsError> {
    check(x, y)?;
    if x.len() != h * w {
        return Err(MetricsError::Shape(x.len(), h * w));
    }
    let m = ms_ssim_scales(h, w);
    if m == 0 {
        return Err(MetricsError::TooSmall(h, w));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..m].iter().sum();
    let (mut a, mut b) = (x.to_vec(), y.to_vec());
    let (mut ch, mut cw) = (h, w);
    let mut out = 1.0;
    for (j, wj) in MS_SSIM_WEIGHTS[..m].iter().enumerate() {
        let (ssim, cs) = ssim_scale(&a, &b, ch, cw);
        let factor = if j + 1 == m { ssim } else { cs };
        out *= factor.max(0.0).powf(wj / wsum);
        if j + 1 < m {
            let (na, nh, nw) = avg_pool2(&a, ch, cw);
            let (nb, _, _) = avg_pool2(&b, ch, cw);
            a = na;
            b = nb;
            ch = nh;
            cw = nw;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub psnr_capped: bool,
}

pub fn sample_metrics(real: &[f64], fake: &[f64], h: usize, w: usize) -> Result<SampleMetrics, MetricsError> {
    let m = mse(real, fake)?;
    Ok(SampleMetrics {
        mae: mae(real, fake)?,
        rmse: m.sqrt(),
        psnr_db: psnr_from_mse(m, 1.0),
        ms_ssim: ms_ssim(real, fake, h, w)?,
        psnr_capped: m == 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub mae: f64,
    pub rmse: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    /// Samples whose PSNR hit the zero-error cap.
    pub psnr_capped: usize,
}

impl MetricsReport {
    /// Mean of per-sample values.
    pub fn aggregate(samples: &[SampleMetrics]) -> Result<Self, MetricsError> {
        if samples.is_empty() {
            return Err(MetricsError::Empty);
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            count: samples.len(),
            mae: mean(|s| s.mae),
            rmse: mean(|s| s.rmse),
            psnr_db: mean(|s| s.psnr_db),
            ms_ssim: mean(|s| s.ms_ssim),
            psnr_capped: samples.iter().filter(|s| s.psnr_capped).count(),
        })
    }

    pub const HEADER: &'static str = "samples,mae,rmse,psnr_db,ms_ssim";

    pub fn row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.4},{:.6}",
            self.count, self.mae, self.rmse, self.psnr_db, self.ms_ssim
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
