//! SPADE residual generator and PatchGAN discriminator.

use crate::autograd::{AutogradError, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;
pub const LRELU_SLOPE: f64 = 0.2;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RADC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub base_channels: usize,
    pub target_resolution: usize,
    pub output_channels: usize,
    /// Semantic (3) + pattern (1) + frequency one-hot (k).
    pub condition_channels: usize,
    /// Width of the shared conv inside each SPADE layer.
    pub spade_hidden: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            z_dim: 64,
            base_channels: 16,
            target_resolution: 32,
            output_channels: 1,
            condition_channels: 7,
            spade_hidden: 32,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if ![16, 32, 64, 128].contains(&self.target_resolution) {
            return Err(ModelError::Config(format!(
                "generator resolution {} not in {{16, 32, 64, 128}}",
                self.target_resolution
            )));
        }
        if self.z_dim == 0 || self.base_channels == 0 || self.output_channels == 0 {
            return Err(ModelError::Config(
                "z_dim, base_channels and output_channels must be positive".into(),
            ));
        }
        if self.condition_channels == 0 || self.spade_hidden == 0 {
            return Err(ModelError::Config(
                "condition_channels and spade_hidden must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of ResBlk + upsample stages.
    pub fn stages(&self) -> usize {
        (self.target_resolution / 4).trailing_zeros() as usize
    }

    pub fn seed_channels(&self) -> usize {
        8 * self.base_channels
    }

    /// `(in, out)` channels of block `i`.
    pub fn block_channels(&self, i: usize) -> (usize, usize) {
        let c0 = self.seed_channels();
        ((c0 >> i).max(1), (c0 >> (i + 1)).max(1))
    }

    /// Spatial size at which block `i` runs.
    pub fn block_resolution(&self, i: usize) -> usize {
        4 << i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub condition_channels: usize,
    pub map_channels: usize,
    pub resolution: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            condition_channels: 7,
            map_channels: 1,
            resolution: 32,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.resolution < 16 || !self.resolution.is_power_of_two() {
            return Err(ModelError::Config(format!(
                "discriminator resolution {} is not a power of two >= 16",
                self.resolution
            )));
        }
        if self.base_channels == 0 || self.condition_channels + self.map_channels == 0 {
            return Err(ModelError::Config("discriminator channels must be positive".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.condition_channels + self.map_channels
    }

    /// Stride-2 stages needed to reach 8x8.
    pub fn downsamples(&self) -> usize {
        (self.resolution / 8).trailing_zeros() as usize
    }

    fn width(&self, i: usize) -> usize {
        (self.base_channels << i).min(8 * self.base_channels)
    }
}

/// Named weight tensors, kept in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.tensors.values().map(|t| t.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    /// Records every tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable {
                        tape.param(v.clone())
                    } else {
                        tape.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

struct Init<'a, T> {
    seed: u64,
    params: &'a mut ModelParams<T>,
}

impl<T: Scalar> Init<'_, T> {
    fn normal(&mut self, name: String, shape: [usize; 4]) {
        let salt = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt);
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect();
        self.params.tensors.insert(name, Tensor { shape, data });
    }

    fn constant(&mut self, name: String, shape: [usize; 4], v: f64) {
        self.params.tensors.insert(name, Tensor::full(shape, T::lit(v)));
    }

    fn conv(&mut self, prefix: &str, co: usize, ci: usize, k: usize, bias: bool) {
        self.normal(format!("{prefix}.weight"), [co, ci, k, k]);
        if bias {
            self.constant(format!("{prefix}.bias"), [1, co, 1, 1], 0.0);
        }
    }

    fn spade(&mut self, prefix: &str, channels: usize, cond: usize, hidden: usize) {
        self.conv(&format!("{prefix}.shared"), hidden, cond, 3, true);
        self.normal(format!("{prefix}.gamma.weight"), [channels, hidden, 3, 3]);
        // unit scale at init so the layer starts as plain normalization
        self.constant(format!("{prefix}.gamma.bias"), [1, channels, 1, 1], 1.0);
        self.conv(&format!("{prefix}.beta"), channels, hidden, 3, true);
    }
}

pub fn build_generator<T: Scalar>(cfg: &GeneratorConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    cfg.validate()?;
    let mut params = ModelParams::default();
    let mut init = Init {
        seed,
        params: &mut params,
    };
    let c0 = cfg.seed_channels();
    init.normal("g.fc.weight".into(), [16 * c0, cfg.z_dim, 1, 1]);
    init.constant("g.fc.bias".into(), [1, 16 * c0, 1, 1], 0.0);
    let (cc, hid) = (cfg.condition_channels, cfg.spade_hidden);
    for i in 0..cfg.stages() {
        let (ci, co) = cfg.block_channels(i);
        let p = format!("g.block{i}");
        init.spade(&format!("{p}.norm0"), ci, cc, hid);
        init.conv(&format!("{p}.conv0"), co, ci, 3, true);
        init.spade(&format!("{p}.norm1"), co, cc, hid);
        init.conv(&format!("{p}.conv1"), co, co, 3, true);
        if ci != co {
            init.spade(&format!("{p}.norm_skip"), ci, cc, hid);
            init.conv(&format!("{p}.conv_skip"), co, ci, 1, false);
        }
    }
    let (_, last) = cfg.block_channels(cfg.stages() - 1);
    init.conv("g.out", cfg.output_channels, last, 3, true);
    Ok(params)
}

pub fn build_discriminator<T: Scalar>(cfg: &DiscriminatorConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    cfg.validate()?;
    let mut params = ModelParams::default();
    let mut init = Init {
        seed,
        params: &mut params,
    };
    let mut ci = cfg.in_channels();
    for i in 0..cfg.downsamples() {
        let co = cfg.width(i);
        init.conv(&format!("d.down{i}"), co, ci, 4, false);
        ci = co;
    }
    let co = cfg.width(cfg.downsamples());
    init.conv("d.patch", co, ci, 4, false);
    init.conv("d.logits", 1, co, 1, true);
    Ok(params)
}

/// Spatially adaptive normalization: parameter-free instance norm followed
/// by a per-pixel affine map predicted from `cond`.
pub fn spade_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cond: Var,
    p: &Bound,
    prefix: &str,
) -> Result<Var, ModelError> {
    let xhat = tape.instance_norm(x, NORM_EPS)?;
    let h = tape.conv2d(
        cond,
        p.get(&format!("{prefix}.shared.weight"))?,
        p.opt(&format!("{prefix}.shared.bias")),
        1,
        1,
    )?;
    let h = tape.relu(h)?;
    let gamma = tape.conv2d(
        h,
        p.get(&format!("{prefix}.gamma.weight"))?,
        p.opt(&format!("{prefix}.gamma.bias")),
        1,
        1,
    )?;
    let beta = tape.conv2d(
        h,
        p.get(&format!("{prefix}.beta.weight"))?,
        p.opt(&format!("{prefix}.beta.bias")),
        1,
        1,
    )?;
    let scaled = tape.mul(gamma, xhat)?;
    Ok(tape.add(scaled, beta)?)
}

fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &Bound,
    prefix: &str,
    stride: usize,
    pad: usize,
) -> Result<Var, ModelError> {
    Ok(tape.conv2d(
        x,
        p.get(&format!("{prefix}.weight"))?,
        p.opt(&format!("{prefix}.bias")),
        stride,
        pad,
    )?)
}

fn resblock<T: Scalar>(tape: &mut Tape<T>, x: Var, cond: Var, p: &Bound, prefix: &str) -> Result<Var, ModelError> {
    let h = spade_norm(tape, x, cond, p, &format!("{prefix}.norm0"))?;
    let h = tape.relu(h)?;
    let h = conv(tape, h, p, &format!("{prefix}.conv0"), 1, 1)?;
    let h = spade_norm(tape, h, cond, p, &format!("{prefix}.norm1"))?;
    let h = tape.relu(h)?;
    let h = conv(tape, h, p, &format!("{prefix}.conv1"), 1, 1)?;
    let skip = if p.opt(&format!("{prefix}.conv_skip.weight")).is_some() {
        let s = spade_norm(tape, x, cond, p, &format!("{prefix}.norm_skip"))?;
        conv(tape, s, p, &format!("{prefix}.conv_skip"), 1, 0)?
    } else {
        x
    };
    Ok(tape.add(h, skip)?)
}

/// Area-average downsampling by an integer factor.
pub fn downsample_area<T: Scalar>(t: &Tensor<T>, factor: usize) -> Tensor<T> {
    if factor == 1 {
        return t.clone();
    }
    let [n, c, h, w] = t.shape;
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::lit(1.0 / (factor * factor) as f64);
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for plane in t.data.chunks(h * w) {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = T::zero();
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += plane[(y * factor + dy) * w + x * factor + dx];
                    }
                }
                data.push(s * inv);
            }
        }
    }
    Tensor {
        shape: [n, c, oh, ow],
        data,
    }
}

/// Condition stack resized to each block's resolution.
pub fn condition_pyramid<T: Scalar>(cfg: &GeneratorConfig, cond: &Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
    let [_, c, h, w] = cond.shape;
    if c != cfg.condition_channels || h != cfg.target_resolution || w != cfg.target_resolution {
        return Err(AutogradError::Shape {
            op: "generator",
            detail: format!(
                "condition {:?} vs expected {} channels at {}x{}",
                cond.shape, cfg.condition_channels, cfg.target_resolution, cfg.target_resolution
            ),
        }
        .into());
    }
    Ok((0..cfg.stages())
        .map(|i| downsample_area(cond, cfg.target_resolution / cfg.block_resolution(i)))
        .collect())
}

/// `x~ = G(z | c)`; `z` is `[n, z_dim, 1, 1]`, `conds` from
/// [`condition_pyramid`] recorded on the same tape.
pub fn generator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &GeneratorConfig,
    p: &Bound,
    z: Var,
    conds: &[Var],
) -> Result<Var, ModelError> {
    let zs = tape.shape(z);
    if zs[1] * zs[2] * zs[3] != cfg.z_dim {
        return Err(AutogradError::Shape {
            op: "generator",
            detail: format!("z {:?} vs z_dim {}", zs, cfg.z_dim),
        }
        .into());
    }
    if conds.len() != cfg.stages() {
        return Err(ModelError::Config(format!(
            "need {} condition scales, got {}",
            cfg.stages(),
            conds.len()
        )));
    }
    let n = zs[0];
    let c0 = cfg.seed_channels();
    let h = tape.dense(z, p.get("g.fc.weight")?, p.opt("g.fc.bias"))?;
    let mut h = tape.reshape(h, [n, c0, 4, 4])?;
    for (i, &cond) in conds.iter().enumerate() {
        h = resblock(tape, h, cond, p, &format!("g.block{i}"))?;
        h = tape.upsample2(h)?;
    }
    let out = conv(tape, h, p, "g.out", 1, 1)?;
    Ok(tape.sigmoid(out)?)
}

/// Logits `[n, 1, 5, 5]` plus the intermediate activations used by the
/// feature-matching loss.
pub struct DiscriminatorOutput {
    pub logits: Var,
    pub taps: Vec<Var>,
}

pub fn discriminator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &DiscriminatorConfig,
    p: &Bound,
    map: Var,
    cond: Var,
) -> Result<DiscriminatorOutput, ModelError> {
    let x = tape.concat_channels(&[cond, map])?;
    let s = tape.shape(x);
    if s[1] != cfg.in_channels() || s[2] != cfg.resolution || s[3] != cfg.resolution {
        return Err(AutogradError::Shape {
            op: "discriminator",
            detail: format!(
                "input {:?} vs {} channels at {}x{}",
                s,
                cfg.in_channels(),
                cfg.resolution,
                cfg.resolution
            ),
        }
        .into());
    }
    let mut taps = Vec::new();
    let mut h = x;
    for i in 0..cfg.downsamples() {
        h = conv(tape, h, p, &format!("d.down{i}"), 2, 1)?;
        h = tape.instance_norm(h, NORM_EPS)?;
        h = tape.lrelu(h, LRELU_SLOPE)?;
        taps.push(h);
    }
    h = conv(tape, h, p, "d.patch", 1, 0)?;
    h = tape.instance_norm(h, NORM_EPS)?;
    h = tape.lrelu(h, LRELU_SLOPE)?;
    taps.push(h);
    let logits = conv(tape, h, p, "d.logits", 1, 0)?;
    Ok(DiscriminatorOutput { logits, taps })
}

/// Records the condition pyramid as constants.
pub fn bind_conditions<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &GeneratorConfig,
    cond: &Tensor<T>,
) -> Result<Vec<Var>, ModelError> {
    Ok(condition_pyramid(cfg, cond)?
        .into_iter()
        .map(|t| tape.constant(t))
        .collect())
}

/// Inference without gradients.
pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &GeneratorConfig,
    z: &Tensor<T>,
    cond: &Tensor<T>,
) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let conds = bind_conditions(&mut tape, cfg, cond)?;
    let out = generator_forward(&mut tape, cfg, &p, zv, &conds)?;
    Ok(tape.value(out).clone())
}

pub fn discriminate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &DiscriminatorConfig,
    map: &Tensor<T>,
    cond: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>), ModelError> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let m = tape.constant(map.clone());
    let c = tape.constant(cond.clone());
    let out = discriminator_forward(&mut tape, cfg, &p, m, c)?;
    Ok((
        tape.value(out.logits).clone(),
        out.taps.iter().map(|&t| tape.value(t).clone()).collect(),
    ))
}

/// Standard-normal noise `[n, z_dim, 1, 1]`.
pub fn sample_z<T: Scalar>(rng: &mut impl rand::Rng, n: usize, z_dim: usize) -> Tensor<T> {
    let dist = rand_distr::StandardNormal;
    Tensor {
        shape: [n, z_dim, 1, 1],
        data: (0..n * z_dim)
            .map(|_| T::lit(<rand_distr::StandardNormal as Distribution<f64>>::sample(&dist, rng)))
            .collect(),
    }
}

/// Writes `header` (JSON text) and named f32 tensors.
pub fn write_checkpoint(path: &Path, header: &str, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<(), ModelError> {
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&(header.len() as u32).to_le_bytes());
    b.extend_from_slice(header.as_bytes());
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&4u32.to_le_bytes());
        for d in t.shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&b)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(String, BTreeMap<String, Tensor<f32>>), ModelError> {
    let b = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        let s = b
            .get(pos..pos + n)
            .ok_or_else(|| ModelError::Corrupt(format!("truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Corrupt("bad magic".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION as usize {
        return Err(ModelError::Corrupt(format!("unsupported version {version}")));
    }
    let hl = u32_at(take(4)?);
    let header = String::from_utf8(take(hl)?.to_vec()).map_err(|e| ModelError::Corrupt(e.to_string()))?;
    let count = u32_at(take(4)?);
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nl = u32_at(take(4)?);
        let name = String::from_utf8(take(nl)?.to_vec()).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        let nd = u32_at(take(4)?);
        if nd != 4 {
            return Err(ModelError::Corrupt(format!("{name}: rank {nd}")));
        }
        let mut shape = [0; 4];
        for d in &mut shape {
            *d = u32_at(take(4)?);
        }
        let n: usize = shape.iter().product();
        let data = take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor { shape, data });
    }
    if pos != b.len() {
        return Err(ModelError::Corrupt("trailing bytes".into()));
    }
    Ok((header, tensors))
}
