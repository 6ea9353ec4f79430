//! Uniform planar array (UPA) gain patterns and their raster form.
//!
//! Angles follow one convention throughout: `elevation` is the angle from
//! boresight (the array broadside, pointing at the floor) and `azimuth` is
//! measured in the array plane from the row axis. Negative elevations are
//! accepted and mirror the azimuth, which is how the pattern raster sweeps
//! the front hemisphere.

use crate::scene::GridSpec;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AntennaError {
    #[error("invalid UPA configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpaConfig {
    pub rows: usize,
    pub cols: usize,
    /// Element spacing in wavelengths.
    pub element_spacing: f64,
    pub carrier_freq: f64,
}

impl UpaConfig {
    pub fn new(rows: usize, cols: usize, carrier_freq: f64) -> Result<Self, AntennaError> {
        let cfg = Self {
            rows,
            cols,
            element_spacing: 0.5,
            carrier_freq,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AntennaError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(AntennaError::Invalid(format!(
                "{}x{} array has no elements",
                self.rows, self.cols
            )));
        }
        if !(self.element_spacing > 0.0) {
            return Err(AntennaError::Invalid("spacing must be positive".into()));
        }
        if !(self.carrier_freq > 0.0) {
            return Err(AntennaError::Invalid("carrier frequency must be positive".into()));
        }
        Ok(())
    }

    pub fn elements(&self) -> usize {
        self.rows * self.cols
    }
}

/// Hemispherical cosine patch element.
pub fn element_gain(elevation: f64) -> f64 {
    let a = elevation.abs();
    if a < FRAC_PI_2 {
        a.cos()
    } else {
        0.0
    }
}

/// Uniformly excited array factor with the phase reference at the array
/// center.
pub fn array_factor(cfg: &UpaConfig, azimuth: f64, elevation: f64) -> Complex64 {
    let k = 2.0 * PI * cfg.element_spacing;
    let u = elevation.sin() * azimuth.cos();
    let v = elevation.sin() * azimuth.sin();
    let m0 = (cfg.rows as f64 - 1.0) / 2.0;
    let n0 = (cfg.cols as f64 - 1.0) / 2.0;
    // separable: AF = (sum over rows) * (sum over cols)
    let row_sum: Complex64 = (0..cfg.rows)
        .map(|m| Complex64::from_polar(1.0, k * (m as f64 - m0) * u))
        .sum();
    let col_sum: Complex64 = (0..cfg.cols)
        .map(|n| Complex64::from_polar(1.0, k * (n as f64 - n0) * v))
        .sum();
    row_sum * col_sum
}

/// Linear power gain; equals `rows * cols` at boresight.
pub fn upa_gain(cfg: &UpaConfig, azimuth: f64, elevation: f64) -> f64 {
    let af = array_factor(cfg, azimuth, elevation);
    element_gain(elevation) * af.norm_sqr() / cfg.elements() as f64
}

/// Peak-normalized gain raster; row-major `[height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternRaster {
    pub width: usize,
    pub height: usize,
    pub gain: Vec<f32>,
}

impl PatternRaster {
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.gain[v * self.width + u]
    }

    pub fn max(&self) -> f32 {
        self.gain.iter().copied().fold(0.0, f32::max)
    }
}

/// Sample azimuth `2*pi*u/width` along columns and elevation
/// `pi*v/height - pi/2` along rows, then normalize the peak to 1.
pub fn rasterize_pattern(cfg: &UpaConfig, grid: &GridSpec) -> PatternRaster {
    let (w, h) = (grid.nx, grid.ny);
    let mut gain: Vec<f64> = Vec::with_capacity(w * h);
    for v in 0..h {
        let el = PI * v as f64 / h as f64 - FRAC_PI_2;
        for u in 0..w {
            let az = 2.0 * PI * u as f64 / w as f64;
            gain.push(upa_gain(cfg, az, el));
        }
    }
    let peak = gain.iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    PatternRaster {
        width: w,
        height: h,
        gain: gain.into_iter().map(|g| (g * scale) as f32).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use crate::scene::Bounds;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> GridSpec {
        let b = Bounds {
            min: Point2::new(0.0, 0.0),
            max: Point2::new(10.0, 10.0),
        };
        GridSpec::for_bounds(n, n, &b).unwrap()
    }

    #[test]
    fn element_pattern_values() {
        assert_eq!(element_gain(0.0), 1.0);
        assert_eq!(element_gain(FRAC_PI_2), 0.0);
        assert_relative_eq!(element_gain(PI / 4.0), 0.707_106_781_186_547_6, epsilon = 1e-12);
        assert_eq!(element_gain(PI), 0.0);
    }

    #[test]
    fn boresight_is_coherent() {
        for (r, c) in [(1, 1), (4, 4), (3, 7), (12, 12)] {
            let cfg = UpaConfig::new(r, c, 28e9).unwrap();
            assert_relative_eq!(array_factor(&cfg, 0.3, 0.0).norm(), (r * c) as f64, epsilon = 1e-9);
            assert_relative_eq!(upa_gain(&cfg, 1.1, 0.0), (r * c) as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn two_element_endfire_null() {
        let cfg = UpaConfig::new(2, 1, 28e9).unwrap();
        assert!(array_factor(&cfg, 0.0, FRAC_PI_2).norm() < 1e-12);
    }

    #[test]
    fn single_element_reduces_to_element_pattern() {
        let cfg = UpaConfig::new(1, 1, 5e9).unwrap();
        assert_relative_eq!(upa_gain(&cfg, 0.7, PI / 3.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(UpaConfig::new(0, 4, 28e9).is_err());
        assert!(UpaConfig::new(4, 4, 0.0).is_err());
    }

    #[test]
    fn raster_peak_at_boresight_row() {
        let cfg = UpaConfig::new(4, 4, 28e9).unwrap();
        let r = rasterize_pattern(&cfg, &grid(64));
        assert_eq!(r.max(), 1.0);
        assert!(r.gain.iter().all(|&g| g >= 0.0));
        for u in 0..64 {
            assert_relative_eq!(r.at(u, 32), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn single_element_raster_matches_element_pattern() {
        let cfg = UpaConfig::new(1, 1, 28e9).unwrap();
        let r = rasterize_pattern(&cfg, &grid(16));
        for v in 0..16 {
            let el = PI * v as f64 / 16.0 - FRAC_PI_2;
            for u in 0..16 {
                assert_relative_eq!(r.at(u, v) as f64, element_gain(el), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn larger_arrays_are_narrower() {
        let g = grid(64);
        let half_power = |n: usize| {
            let r = rasterize_pattern(&UpaConfig::new(n, n, 28e9).unwrap(), &g);
            r.gain.iter().filter(|&&x| x >= 0.5).count()
        };
        assert!(half_power(12) < half_power(4));
    }
}
