//! Training objectives for the generator and discriminator.

use crate::autograd::{AutogradError, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Offset in the focal weights `(FOCAL_EPS + x)^gamma`.
pub const FOCAL_EPS: f64 = 0.05;
/// Smoothing constant of the gradient loss.
pub const GL_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("focal gamma must be >= 0, got {0}")]
    NegativeGamma(f64),
    #[error("input too small for {op}: need at least {min}x{min}")]
    TooSmall { op: &'static str, min: usize },
    #[error("loss weight `{0}` is negative")]
    NegativeWeight(&'static str),
    #[error("loss term `{0}` is not finite")]
    NonFinite(&'static str),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<(), LossError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(LossError::Shape {
            op,
            detail: format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        });
    }
    Ok(())
}

/// Discriminator loss: mean of `-log sigmoid(real)` plus mean of
/// `-log(1 - sigmoid(fake))`, written with softplus.
pub fn adv_d_loss<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var, LossError> {
    let nr = tape.mul_scalar(real, -1.0)?;
    let a = tape.softplus(nr)?;
    let a = tape.mean(a)?;
    let b = tape.softplus(fake)?;
    let b = tape.mean(b)?;
    Ok(tape.add(a, b)?)
}

/// Non-saturating generator loss: mean of `-log sigmoid(fake)`.
pub fn adv_g_loss<T: Scalar>(tape: &mut Tape<T>, fake: Var) -> Result<Var, LossError> {
    let nf = tape.mul_scalar(fake, -1.0)?;
    let s = tape.softplus(nf)?;
    Ok(tape.mean(s)?)
}

pub fn l_mae<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var, LossError> {
    same_shape(tape, "l_mae", real, fake)?;
    let d = tape.sub(fake, real)?;
    let a = tape.abs(d)?;
    Ok(tape.mean(a)?)
}

/// Brightness-weighted L1: `sum w |x - x~| / sum w` with
/// `w = (FOCAL_EPS + x)^gamma` taken from the real map.
pub fn l_focal<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, gamma: f64) -> Result<Var, LossError> {
    if gamma < 0.0 || gamma.is_nan() {
        return Err(LossError::NegativeGamma(gamma));
    }
    same_shape(tape, "l_focal", real, fake)?;
    let rv = tape.value(real);
    let weights: Vec<T> = rv
        .data
        .iter()
        .map(|&x| T::lit((FOCAL_EPS + x.as_f64()).powf(gamma)))
        .collect();
    let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
    let w = tape.constant(Tensor {
        shape: rv.shape,
        data: weights,
    });
    let d = tape.sub(fake, real)?;
    let a = tape.abs(d)?;
    let wa = tape.mul(w, a)?;
    let s = tape.sum(wa)?;
    Ok(tape.mul_scalar(s, 1.0 / total)?)
}

fn mse<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, LossError> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}

/// Mean over taps of the mean squared feature difference.
pub fn l_fm<T: Scalar>(tape: &mut Tape<T>, real: &[Var], fake: &[Var]) -> Result<Var, LossError> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(LossError::Shape {
            op: "l_fm",
            detail: format!("{} real taps vs {} fake taps", real.len(), fake.len()),
        });
    }
    let mut acc: Option<Var> = None;
    for (&r, &f) in real.iter().zip(fake) {
        same_shape(tape, "l_fm", r, f)?;
        let m = mse(tape, r, f)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
    }
    Ok(tape.mul_scalar(acc.expect("nonempty"), 1.0 / real.len() as f64)?)
}

/// Frozen random conv stack standing in for a pretrained feature network.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor<T> {
    /// `(weight, stride)` per layer; ReLU after every layer.
    pub layers: Vec<(Tensor<T>, usize)>,
}

/// `(out, in, stride)` of the four extractor layers for a 1-channel map.
pub const EXTRACTOR_LAYOUT: [(usize, usize, usize); 4] = [(8, 1, 1), (16, 8, 2), (16, 16, 1), (32, 16, 2)];

impl<T: Scalar> PerceptualExtractor<T> {
    pub fn new(seed: u64, in_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = EXTRACTOR_LAYOUT
            .iter()
            .enumerate()
            .map(|(i, &(co, ci, stride))| {
                let ci = if i == 0 { in_channels } else { ci };
                let std = (2.0 / (ci * 9) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                let data = (0..co * ci * 9).map(|_| T::lit(dist.sample(&mut rng))).collect();
                (
                    Tensor {
                        shape: [co, ci, 3, 3],
                        data,
                    },
                    stride,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>, LossError> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, stride) in &self.layers {
            let wv = tape.constant(w.clone());
            h = tape.conv2d(h, wv, None, *stride, 1)?;
            h = tape.relu(h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Mean over extractor layers of the mean squared feature difference.
pub fn l_perceptual<T: Scalar>(
    tape: &mut Tape<T>,
    real: Var,
    fake: Var,
    extractor: &PerceptualExtractor<T>,
) -> Result<Var, LossError> {
    same_shape(tape, "l_perceptual", real, fake)?;
    let fr = extractor.features(tape, real)?;
    let ff = extractor.features(tape, fake)?;
    l_fm(tape, &fr, &ff)
}

/// 3x3 Sobel pair; `kx` responds to change along the width axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SobelKernel {
    pub kx: [[f64; 3]; 3],
    pub ky: [[f64; 3]; 3],
}

impl Default for SobelKernel {
    fn default() -> Self {
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let mut ky = [[0.0; 3]; 3];
        for (i, row) in ky.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = kx[j][i];
            }
        }
        Self { kx, ky }
    }
}

impl SobelKernel {
    /// Adds `delta` to the center-right tap of `kx`; a test hook for
    /// checking that oracles notice kernel changes.
    pub fn perturbed(delta: f64) -> Self {
        let mut k = Self::default();
        k.kx[1][2] += delta;
        k
    }
}

/// `(gx, gy)` with replicate padding; each is `[n, c, h, w]`.
pub fn sobel_gradients<T: Scalar>(tape: &mut Tape<T>, x: Var, kernel: &SobelKernel) -> Result<(Var, Var), LossError> {
    let [n, c, h, w] = tape.shape(x);
    if h < 3 || w < 3 {
        return Err(LossError::TooSmall { op: "sobel", min: 3 });
    }
    let flat = tape.reshape(x, [n * c, 1, h, w])?;
    let padded = tape.pad_replicate(flat, 1)?;
    let k: Vec<T> = kernel
        .kx
        .iter()
        .chain(kernel.ky.iter())
        .flatten()
        .map(|&v| T::lit(v))
        .collect();
    let kv = tape.constant(Tensor {
        shape: [2, 1, 3, 3],
        data: k,
    });
    let g = tape.conv2d(padded, kv, None, 1, 0)?;
    // split the two output channels by masking then summing over channels
    let pick = |tape: &mut Tape<T>, ch: usize| -> Result<Var, LossError> {
        let mut m = vec![T::zero(); 2];
        m[ch] = T::one();
        let mv = tape.constant(Tensor {
            shape: [1, 2, 1, 1],
            data: m,
        });
        let sel = tape.mul(g, mv)?;
        let s = tape.sum_axes(sel, [false, true, false, false])?;
        Ok(tape.reshape(s, [n, c, h, w])?)
    };
    Ok((pick(tape, 0)?, pick(tape, 1)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlOptions {
    pub kernel: SobelKernel,
    /// Use the raw cosine similarity instead of `1 - cos` as the direction term.
    pub raw_cosine: bool,
}

impl Default for GlOptions {
    fn default() -> Self {
        Self {
            kernel: SobelKernel::default(),
            raw_cosine: false,
        }
    }
}

/// Handles to the two addends of the gradient loss.
#[derive(Debug, Clone, Copy)]
pub struct GlParts {
    pub kl: Var,
    pub direction: Var,
    pub total: Var,
}

/// Gradient loss: KL divergence between the per-map distributions of
/// gradient magnitude (real first) plus the mean direction dissimilarity.
pub fn l_gl_parts<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, opts: &GlOptions) -> Result<GlParts, LossError> {
    same_shape(tape, "l_gl", real, fake)?;
    let [n, c, h, w] = tape.shape(real);
    let (rx, ry) = sobel_gradients(tape, real, &opts.kernel)?;
    let (fx, fy) = sobel_gradients(tape, fake, &opts.kernel)?;
    let sq = |tape: &mut Tape<T>, a: Var, b: Var| -> Result<Var, LossError> {
        let a2 = tape.mul(a, a)?;
        let b2 = tape.mul(b, b)?;
        Ok(tape.add(a2, b2)?)
    };
    let sr = sq(tape, rx, ry)?;
    let sf = sq(tape, fx, fy)?;
    let spatial = [false, false, true, true];

    // magnitude distributions
    let dist = |tape: &mut Tape<T>, s: Var| -> Result<Var, LossError> {
        let m = tape.add_scalar(s, GL_EPS * GL_EPS)?;
        let m = tape.sqrt(m)?;
        let m = tape.add_scalar(m, GL_EPS)?;
        let total = tape.sum_axes(m, spatial)?;
        Ok(tape.div(m, total)?)
    };
    let p = dist(tape, sr)?;
    let q = dist(tape, sf)?;
    let lp = tape.log(p)?;
    let lq = tape.log(q)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let kl = tape.sum_axes(terms, spatial)?;
    let kl = tape.mean(kl)?;

    // direction: cosine between gradient vectors on pixels where either
    // map has a non-negligible gradient
    let srv = tape.value(sr).data.clone();
    let sfv = tape.value(sf).data.clone();
    let plane = h * w;
    let e2 = T::lit(GL_EPS * GL_EPS);
    let mut mask = vec![T::zero(); srv.len()];
    for k in 0..n * c {
        let r = k * plane..(k + 1) * plane;
        let included: Vec<usize> = r.clone().filter(|&i| !(srv[i] < e2 && sfv[i] < e2)).collect();
        if included.is_empty() {
            continue;
        }
        let wgt = T::lit(1.0 / (included.len() * n * c) as f64);
        for i in included {
            mask[i] = wgt;
        }
    }
    let mask = tape.constant(Tensor {
        shape: [n, c, h, w],
        data: mask,
    });
    let dx = tape.mul(rx, fx)?;
    let dy = tape.mul(ry, fy)?;
    let dot = tape.add(dx, dy)?;
    let prod = tape.mul(sr, sf)?;
    let prod = tape.add_scalar(prod, GL_EPS.powi(4))?;
    let den = tape.sqrt(prod)?;
    let cos = tape.div(dot, den)?;
    let per_pixel = if opts.raw_cosine {
        cos
    } else {
        let neg = tape.mul_scalar(cos, -1.0)?;
        tape.add_scalar(neg, 1.0)?
    };
    let weighted = tape.mul(per_pixel, mask)?;
    let direction = tape.sum(weighted)?;
    let total = tape.add(kl, direction)?;
    Ok(GlParts { kl, direction, total })
}

pub fn l_gl<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, opts: &GlOptions) -> Result<Var, LossError> {
    Ok(l_gl_parts(tape, real, fake, opts)?.total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mae: f64,
    pub fl: f64,
    pub fm: f64,
    pub vgg: f64,
    pub gl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mae: 10.0,
            fl: 1.0,
            fm: 10.0,
            vgg: 0.0,
            gl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("mae", self.mae),
            ("fl", self.fl),
            ("fm", self.fm),
            ("vgg", self.vgg),
            ("gl", self.gl),
        ] {
            if !(v >= 0.0) {
                return Err(LossError::NegativeWeight(name));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            mae: self.mae * s,
            fl: self.fl * s,
            fm: self.fm * s,
            vgg: self.vgg * s,
            gl: self.gl * s,
        }
    }
}

/// Scalar values of every generator loss addend.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub adv: f64,
    pub mae: f64,
    pub focal: f64,
    pub fm: f64,
    pub perceptual: f64,
    pub gl: f64,
    pub total: f64,
}

impl LossReport {
    /// `total = adv + sum(weight * term)`; rejects non-finite inputs.
    pub fn combine(adv: f64, terms: [f64; 5], w: &LossWeights) -> Result<Self, LossError> {
        let names = ["adv", "mae", "focal", "fm", "perceptual", "gl"];
        for (name, v) in names.iter().zip(std::iter::once(adv).chain(terms)) {
            if !v.is_finite() {
                return Err(LossError::NonFinite(name));
            }
        }
        let [mae, focal, fm, perceptual, gl] = terms;
        Ok(Self {
            adv,
            mae,
            focal,
            fm,
            perceptual,
            gl,
            total: adv + w.mae * mae + w.fl * focal + w.fm * fm + w.vgg * perceptual + w.gl * gl,
        })
    }
}

/// Generator loss terms recorded on a tape; `None` terms count as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub mae: Option<Var>,
    pub focal: Option<Var>,
    pub fm: Option<Var>,
    pub perceptual: Option<Var>,
    pub gl: Option<Var>,
}

/// Weighted total of the generator objective plus its report.
pub fn total_g_loss<T: Scalar>(
    tape: &mut Tape<T>,
    adv: Var,
    terms: &LossTerms,
    w: &LossWeights,
) -> Result<(Var, LossReport), LossError> {
    w.validate()?;
    let value = |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
    let report = LossReport::combine(
        tape.value(adv).item().as_f64(),
        [
            value(tape, terms.mae),
            value(tape, terms.focal),
            value(tape, terms.fm),
            value(tape, terms.perceptual),
            value(tape, terms.gl),
        ],
        w,
    )?;
    let mut total = adv;
    for (v, lambda) in [
        (terms.mae, w.mae),
        (terms.focal, w.fl),
        (terms.fm, w.fm),
        (terms.perceptual, w.vgg),
        (terms.gl, w.gl),
    ] {
        if let Some(v) = v {
            if lambda != 0.0 {
                let s = tape.mul_scalar(v, lambda)?;
                total = tape.add(total, s)?;
            }
        }
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(tape: &mut Tape<f64>, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Var {
        let data = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        tape.constant(Tensor::new([1, 1, h, w], data).unwrap())
    }

    #[test]
    fn adversarial_at_zero_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros([2, 1, 5, 5]));
        let d = adv_d_loss(&mut tape, z, z).unwrap();
        let g = adv_g_loss(&mut tape, z).unwrap();
        assert!((tape.value(d).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((tape.value(g).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_limit() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::full([1, 1, 5, 5], 800.0));
        let f = tape.constant(Tensor::full([1, 1, 5, 5], -800.0));
        let d = adv_d_loss(&mut tape, r, f).unwrap();
        assert!(tape.value(d).item() < 1e-300);
    }

    #[test]
    fn mae_offset_and_focal_degenerate() {
        let mut tape = Tape::<f64>::new();
        let a = map(&mut tape, 4, 4, |i, j| (i * 4 + j) as f64 / 20.0);
        let b = map(&mut tape, 4, 4, |i, j| (i * 4 + j) as f64 / 20.0 + 0.1);
        let m = l_mae(&mut tape, a, b).unwrap();
        assert!((tape.value(m).item() - 0.1).abs() < 1e-12);
        let f = l_focal(&mut tape, a, b, 0.0).unwrap();
        assert_eq!(tape.value(f).item(), tape.value(m).item());
        assert_eq!(
            l_focal(&mut tape, a, b, -1.0).unwrap_err(),
            LossError::NegativeGamma(-1.0)
        );
    }

    #[test]
    fn sobel_on_ramp() {
        let mut tape = Tape::<f64>::new();
        let x = map(&mut tape, 6, 6, |_, j| j as f64);
        let (gx, gy) = sobel_gradients(&mut tape, x, &SobelKernel::default()).unwrap();
        let (gx, gy) = (tape.value(gx).clone(), tape.value(gy).clone());
        for i in 0..6 {
            for j in 1..5 {
                assert_eq!(gx.at(0, 0, i, j), 8.0);
            }
        }
        assert!(gy.data.iter().all(|&v| v == 0.0));
        let c = map(&mut tape, 3, 3, |_, _| 0.4);
        let (cx, cy) = sobel_gradients(&mut tape, c, &SobelKernel::default()).unwrap();
        assert!(tape
            .value(cx)
            .data
            .iter()
            .chain(&tape.value(cy).data)
            .all(|&v| v.abs() < 1e-15));
        let tiny = map(&mut tape, 2, 5, |_, _| 0.0);
        assert!(sobel_gradients(&mut tape, tiny, &SobelKernel::default()).is_err());
    }

    #[test]
    fn gl_orthogonal_direction_is_one() {
        let mut tape = Tape::<f64>::new();
        let a = map(&mut tape, 8, 8, |_, j| j as f64 / 8.0);
        let b = map(&mut tape, 8, 8, |i, _| i as f64 / 8.0);
        let parts = l_gl_parts(&mut tape, a, b, &GlOptions::default()).unwrap();
        assert!((tape.value(parts.direction).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_arithmetic() {
        let w = LossWeights {
            mae: 10.0,
            fl: 1.0,
            fm: 10.0,
            vgg: 10.0,
            gl: 1.0,
        };
        let r = LossReport::combine(0.7, [1.0; 5], &w).unwrap();
        assert!((r.total - 32.7).abs() < 1e-12);
        let zero = LossReport::combine(0.7, [1.0; 5], &w.scaled(0.0)).unwrap();
        assert_eq!(zero.total, 0.7);
        let r2 = LossReport::combine(0.7, [0.3, 0.2, 0.1, 0.5, 0.9], &w.scaled(2.0)).unwrap();
        let r1 = LossReport::combine(0.7, [0.3, 0.2, 0.1, 0.5, 0.9], &w).unwrap();
        assert!(((r2.total - 0.7) - 2.0 * (r1.total - 0.7)).abs() < 1e-12);
        assert_eq!(
            LossReport::combine(f64::NAN, [0.0; 5], &w).unwrap_err(),
            LossError::NonFinite("adv")
        );
    }
}
