//! Adversarial training loop, checkpoints and evaluation.

use crate::autograd::{AutogradError, Tape, Tensor};
use crate::dataset::{load_samples, split_tasks, DatasetError, Manifest, Sample, Task};
use crate::losses::{
    adv_d_loss, adv_g_loss, l_fm, l_focal, l_gl, l_mae, l_perceptual, total_g_loss, GlOptions, LossError, LossReport,
    LossTerms, LossWeights, PerceptualExtractor, SobelKernel,
};
use crate::metrics::{sample_metrics, MetricsError, MetricsReport, SampleMetrics};
use crate::model::{
    bind_conditions, build_discriminator, build_generator, discriminator_forward, generate, generator_forward,
    read_checkpoint, sample_z, write_checkpoint, DiscriminatorConfig, GeneratorConfig, ModelError, ModelParams,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const FINAL_CHECKPOINT: &str = "final.radc";
pub const LOSS_CURVE_HEADER: &str = "step,d_loss,adv,mae,focal,fm,perceptual,gl,total";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("resolution mismatch: checkpoint expects {expected}x{expected}, data is {found}x{found}")]
    ResolutionMismatch { expected: usize, found: usize },
    #[error("non-finite value at step {step}: {source}")]
    NonFinite { step: u64, source: Box<TrainError> },
    #[error("train and test splits overlap ({0} shared samples)")]
    Overlap(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    /// True for NaN/Inf failures (loss terms or activations).
    pub fn is_numerical(&self) -> bool {
        match self {
            TrainError::NonFinite { .. } => true,
            TrainError::Loss(LossError::NonFinite(_)) => true,
            TrainError::Loss(LossError::Autograd(AutogradError::NonFinite { .. })) => true,
            TrainError::Autograd(AutogradError::NonFinite { .. }) => true,
            TrainError::Model(ModelError::Autograd(AutogradError::NonFinite { .. })) => true,
            _ => false,
        }
    }
}

fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    2e-4
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.999
}
fn default_gamma() -> f64 {
    2.0
}
fn default_eval_interval() -> u64 {
    500
}
fn default_ema() -> f64 {
    0.999
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: u64,
    #[serde(default = "default_lr")]
    pub lr_g: f64,
    #[serde(default = "default_lr")]
    pub lr_d: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_gamma")]
    pub focal_gamma: f64,
    #[serde(default)]
    pub gl_raw_cosine: bool,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    /// Decay of the generator weight average used for evaluation; 0 keeps
    /// the raw weights.
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            steps: 2000,
            lr_g: default_lr(),
            lr_d: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            seed: 0,
            weights: LossWeights::default(),
            focal_gamma: default_gamma(),
            gl_raw_cosine: false,
            eval_interval: default_eval_interval(),
            ema_decay: default_ema(),
            checkpoint_dir: None,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0) {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("ema_decay", self.ema_decay),
        ] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1)"));
            }
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be positive".into());
        }
        if self.focal_gamma < 0.0 {
            return Err(LossError::NegativeGamma(self.focal_gamma).into());
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.target_resolution != self.discriminator.resolution {
            return fail("generator and discriminator resolutions differ".into());
        }
        if self.generator.condition_channels != self.discriminator.condition_channels
            || self.generator.output_channels != self.discriminator.map_channels
        {
            return fail("generator and discriminator channel counts differ".into());
        }
        Ok(())
    }

    /// Matches the model shapes to the data.
    pub fn fit_to_data(&mut self, resolution: usize, condition_channels: usize, map_channels: usize) {
        self.generator.target_resolution = resolution;
        self.generator.condition_channels = condition_channels;
        self.generator.output_channels = map_channels;
        self.discriminator.resolution = resolution;
        self.discriminator.condition_channels = condition_channels;
        self.discriminator.map_channels = map_channels;
    }

    fn gl_options(&self) -> GlOptions {
        GlOptions {
            kernel: SobelKernel::default(),
            raw_cosine: self.gl_raw_cosine,
        }
    }
}

/// Adam with bias correction; moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, params: &ModelParams<f32>) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (name, p) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub g: ModelParams<f32>,
    /// Moving average of `g`; what evaluation and synthesis use.
    pub g_ema: ModelParams<f32>,
    pub d: ModelParams<f32>,
    pub adam_g: Adam,
    pub adam_d: Adam,
    /// Exponential moving average of the reported losses.
    pub running: StepReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepReport {
    pub d_loss: f64,
    pub g: LossReport,
}

impl StepReport {
    pub fn csv_row(&self, step: u64) -> String {
        let g = &self.g;
        format!(
            "{step},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.d_loss, g.adv, g.mae, g.focal, g.fm, g.perceptual, g.gl, g.total
        )
    }

    fn blend(&self, new: &StepReport, a: f64) -> StepReport {
        let mix = |x: f64, y: f64| (1.0 - a) * x + a * y;
        StepReport {
            d_loss: mix(self.d_loss, new.d_loss),
            g: LossReport {
                adv: mix(self.g.adv, new.g.adv),
                mae: mix(self.g.mae, new.g.mae),
                focal: mix(self.g.focal, new.g.focal),
                fm: mix(self.g.fm, new.g.fm),
                perceptual: mix(self.g.perceptual, new.g.perceptual),
                gl: mix(self.g.gl, new.g.gl),
                total: mix(self.g.total, new.g.total),
            },
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    step: u64,
    config: TrainConfig,
    running: StepReport,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let g = build_generator(&cfg.generator, cfg.seed)?;
        let d = build_discriminator(&cfg.discriminator, cfg.seed.wrapping_add(1))?;
        Ok(Self {
            step: 0,
            adam_g: Adam::new(cfg.lr_g, cfg.beta1, cfg.beta2, &g),
            adam_d: Adam::new(cfg.lr_d, cfg.beta1, cfg.beta2, &d),
            g_ema: g.clone(),
            g,
            d,
            running: StepReport::default(),
        })
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<(), TrainError> {
        let header = CheckpointHeader {
            format: "radiance-checkpoint".into(),
            step: self.step,
            config: cfg.clone(),
            running: self.running,
        };
        let mut tensors = BTreeMap::new();
        for params in [&self.g, &self.d] {
            for (k, v) in &params.tensors {
                tensors.insert(k.clone(), v.clone());
            }
        }
        for (k, v) in &self.g_ema.tensors {
            tensors.insert(format!("ema.{k}"), v.clone());
        }
        for (tag, adam) in [("adam_g", &self.adam_g), ("adam_d", &self.adam_d)] {
            for (kind, moments) in [("m", &adam.m), ("v", &adam.v)] {
                for (k, v) in moments {
                    tensors.insert(
                        format!("{tag}.{kind}.{k}"),
                        Tensor {
                            shape: [1, 1, 1, v.len()],
                            data: v.clone(),
                        },
                    );
                }
            }
        }
        write_checkpoint(path, &serde_json::to_string(&header)?, &tensors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(TrainConfig, Self), TrainError> {
        let (header, mut tensors) = read_checkpoint(path)?;
        let header: CheckpointHeader = serde_json::from_str(&header)?;
        let cfg = header.config;
        let mut state = TrainState::init(&cfg)?;
        state.step = header.step;
        state.running = header.running;
        for (prefix, params) in [("", &mut state.g), ("", &mut state.d), ("ema.", &mut state.g_ema)] {
            for (k, v) in params.tensors.iter_mut() {
                let t = tensors
                    .remove(&format!("{prefix}{k}"))
                    .ok_or_else(|| ModelError::MissingParam(k.clone()))?;
                if t.shape != v.shape {
                    return Err(ModelError::Corrupt(format!("{k}: shape {:?} vs {:?}", t.shape, v.shape)).into());
                }
                *v = t;
            }
        }
        for (tag, adam) in [("adam_g", &mut state.adam_g), ("adam_d", &mut state.adam_d)] {
            adam.t = header.step;
            for (kind, moments) in [("m", &mut adam.m), ("v", &mut adam.v)] {
                for (k, v) in moments.iter_mut() {
                    let name = format!("{tag}.{kind}.{k}");
                    let t = tensors.remove(&name).ok_or(ModelError::MissingParam(name))?;
                    if t.data.len() != v.len() {
                        return Err(ModelError::Corrupt(format!("{k}: optimizer moment size")).into());
                    }
                    *v = t.data;
                }
            }
        }
        Ok((cfg, state))
    }
}

/// Seeds a generator for `(seed, purpose, index)` without shared state.
pub fn rng_for(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const PURPOSE_ORDER: u64 = 1;
const PURPOSE_NOISE: u64 = 2;
const PURPOSE_EVAL: u64 = 3;
const PURPOSE_PERCEPTUAL: u64 = 4;

/// Dataset indices for `step`: consecutive slices of per-epoch permutations.
pub fn batch_indices(seed: u64, n: usize, batch: usize, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut pos = step as usize * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for _ in 0..batch {
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_for(seed, PURPOSE_ORDER, epoch as u64));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos % n]);
        pos += 1;
    }
    out
}

/// Samples as dense tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet {
    /// `[n, condition_channels, h, w]`
    pub cond: Tensor<f32>,
    /// `[n, map_channels, h, w]`
    pub target: Tensor<f32>,
}

impl TensorSet {
    pub fn from_samples(samples: &[Sample]) -> Result<Self, TrainError> {
        let first = samples.first().ok_or(TrainError::EmptySplit("training"))?;
        let (h, w) = (first.condition.height(), first.condition.width());
        let cc = first.condition.channels();
        let mc = first.target.len() / (h * w);
        let mut cond = Vec::with_capacity(samples.len() * cc * h * w);
        let mut target = Vec::with_capacity(samples.len() * mc * h * w);
        for s in samples {
            let c = s.condition.stack();
            if c.len() != cc * h * w || s.target.len() != mc * h * w {
                return Err(AutogradError::Shape {
                    op: "batch",
                    detail: "samples have different shapes".into(),
                }
                .into());
            }
            cond.extend(c);
            target.extend_from_slice(&s.target);
        }
        let n = samples.len();
        Ok(Self {
            cond: Tensor::new([n, cc, h, w], cond)?,
            target: Tensor::new([n, mc, h, w], target)?,
        })
    }

    pub fn len(&self) -> usize {
        self.cond.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.cond.shape[2]
    }

    pub fn gather(&self, idx: &[usize]) -> TensorSet {
        let pick = |t: &Tensor<f32>| {
            let ps = t.per_sample();
            let mut data = Vec::with_capacity(idx.len() * ps);
            for &i in idx {
                data.extend_from_slice(&t.data[i * ps..(i + 1) * ps]);
            }
            Tensor {
                shape: [idx.len(), t.shape[1], t.shape[2], t.shape[3]],
                data,
            }
        };
        TensorSet {
            cond: pick(&self.cond),
            target: pick(&self.target),
        }
    }
}

fn grads_by_name(bound: &crate::model::Bound, g: &crate::autograd::Gradients<f32>) -> BTreeMap<String, Tensor<f32>> {
    bound.vars.iter().map(|(k, &v)| (k.clone(), g.wrt(v))).collect()
}

fn numerical(step: u64, e: impl Into<TrainError>) -> TrainError {
    let e = e.into();
    if e.is_numerical() {
        TrainError::NonFinite {
            step,
            source: Box::new(e),
        }
    } else {
        e
    }
}

/// Everything a step needs besides the state.
pub struct StepContext {
    pub cfg: TrainConfig,
    pub extractor: Option<PerceptualExtractor<f32>>,
}

impl StepContext {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let extractor = (cfg.weights.vgg > 0.0).then(|| {
            PerceptualExtractor::new(
                cfg.seed ^ PURPOSE_PERCEPTUAL.wrapping_mul(0x9e37_79b9_7f4a_7c15),
                cfg.generator.output_channels,
            )
        });
        Ok(Self {
            cfg: cfg.clone(),
            extractor,
        })
    }
}

/// One discriminator update followed by one generator update.
pub fn train_step(state: &mut TrainState, ctx: &StepContext, batch: &TensorSet) -> Result<StepReport, TrainError> {
    let step = state.step;
    let cfg = &ctx.cfg;
    let n = batch.len();
    let z = sample_z::<f32>(&mut rng_for(cfg.seed, PURPOSE_NOISE, step), n, cfg.generator.z_dim);

    // generator forward, kept for the generator update
    let mut gt = Tape::<f32>::new();
    let gp = state.g.bind(&mut gt, true);
    let zv = gt.constant(z);
    let conds = bind_conditions(&mut gt, &cfg.generator, &batch.cond).map_err(|e| numerical(step, e))?;
    let fake = generator_forward(&mut gt, &cfg.generator, &gp, zv, &conds).map_err(|e| numerical(step, e))?;

    // discriminator update on real vs detached fake
    let d_loss = {
        let mut dt = Tape::<f32>::new();
        let dp = state.d.bind(&mut dt, true);
        let cond = dt.constant(batch.cond.clone());
        let real = dt.constant(batch.target.clone());
        let fk = dt.constant(gt.value(fake).clone());
        let out_r =
            discriminator_forward(&mut dt, &cfg.discriminator, &dp, real, cond).map_err(|e| numerical(step, e))?;
        let out_f =
            discriminator_forward(&mut dt, &cfg.discriminator, &dp, fk, cond).map_err(|e| numerical(step, e))?;
        let loss = adv_d_loss(&mut dt, out_r.logits, out_f.logits).map_err(|e| numerical(step, e))?;
        let value = dt.value(loss).item() as f64;
        let grads = dt.backward(loss)?;
        state.adam_d.step(&mut state.d, &grads_by_name(&dp, &grads));
        value
    };

    // generator update against the refreshed discriminator
    let w = &cfg.weights;
    let dp = state.d.bind(&mut gt, false);
    let cond = gt.constant(batch.cond.clone());
    let real = gt.constant(batch.target.clone());
    let out_f = discriminator_forward(&mut gt, &cfg.discriminator, &dp, fake, cond).map_err(|e| numerical(step, e))?;
    let adv = adv_g_loss(&mut gt, out_f.logits).map_err(|e| numerical(step, e))?;
    let mut terms = LossTerms::default();
    let wrap = |e: LossError| numerical(step, e);
    if w.mae > 0.0 {
        terms.mae = Some(l_mae(&mut gt, real, fake).map_err(wrap)?);
    }
    if w.fl > 0.0 {
        terms.focal = Some(l_focal(&mut gt, real, fake, cfg.focal_gamma).map_err(wrap)?);
    }
    if w.fm > 0.0 {
        let out_r =
            discriminator_forward(&mut gt, &cfg.discriminator, &dp, real, cond).map_err(|e| numerical(step, e))?;
        terms.fm = Some(l_fm(&mut gt, &out_r.taps, &out_f.taps).map_err(wrap)?);
    }
    if let (true, Some(ex)) = (w.vgg > 0.0, &ctx.extractor) {
        terms.perceptual = Some(l_perceptual(&mut gt, real, fake, ex).map_err(wrap)?);
    }
    if w.gl > 0.0 {
        terms.gl = Some(l_gl(&mut gt, real, fake, &cfg.gl_options()).map_err(wrap)?);
    }
    let (total, report) = total_g_loss(&mut gt, adv, &terms, w).map_err(wrap)?;
    let grads = gt.backward(total)?;
    state.adam_g.step(&mut state.g, &grads_by_name(&gp, &grads));
    update_ema(&mut state.g_ema, &state.g, cfg.ema_decay, step);

    if !state.g.is_finite() || !state.d.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            source: Box::new(TrainError::Config(
                "parameters became non-finite after the update".into(),
            )),
        });
    }
    state.step += 1;
    let rep = StepReport { d_loss, g: report };
    state.running = if step == 0 {
        rep
    } else {
        state.running.blend(&rep, 0.02)
    };
    Ok(rep)
}

/// `avg <- b avg + (1 - b) g` with the decay ramped up over early steps.
fn update_ema(avg: &mut ModelParams<f32>, g: &ModelParams<f32>, decay: f64, step: u64) {
    let b = decay.min((1.0 + step as f64) / (10.0 + step as f64)) as f32;
    for (k, a) in avg.tensors.iter_mut() {
        let src = &g.tensors[k];
        for (x, &y) in a.data.iter_mut().zip(&src.data) {
            *x = b * *x + (1.0 - b) * y;
        }
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.radc")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoints: Vec<PathBuf>,
    pub loss_curve: PathBuf,
}

/// Runs until `cfg.steps`, starting from `resume` if given. Checkpoints go to
/// `out` every `eval_interval` steps; `final.radc` marks the last one.
/// `on_step` sees every report (for progress output).
pub fn train(
    cfg: &TrainConfig,
    data: &TensorSet,
    out: &Path,
    resume: Option<TrainState>,
    mut on_step: impl FnMut(u64, &StepReport),
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if data.resolution() != cfg.generator.target_resolution {
        return Err(TrainError::ResolutionMismatch {
            expected: cfg.generator.target_resolution,
            found: data.resolution(),
        });
    }
    let ctx = StepContext::new(cfg)?;
    std::fs::create_dir_all(out)?;
    let curve_path = out.join(LOSS_CURVE_FILE);
    let mut checkpoints = Vec::new();
    let mut state = match resume {
        Some(s) => s,
        None => {
            let s = TrainState::init(cfg)?;
            let p = out.join(checkpoint_name(0));
            s.save(&p, cfg)?;
            checkpoints.push(p);
            s
        }
    };
    // keep rows before the resume point so the curve continues seamlessly
    let mut curve = String::from(LOSS_CURVE_HEADER);
    curve.push('\n');
    if state.step > 0 {
        if let Ok(old) = std::fs::read_to_string(&curve_path) {
            for line in old.lines().skip(1) {
                let s: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
                if s < state.step {
                    curve.push_str(line);
                    curve.push('\n');
                }
            }
        }
    }
    let mut file = std::fs::File::create(&curve_path)?;
    file.write_all(curve.as_bytes())?;
    while state.step < cfg.steps {
        let idx = batch_indices(cfg.seed, data.len(), cfg.batch_size, state.step);
        let batch = data.gather(&idx);
        let step = state.step;
        let rep = train_step(&mut state, &ctx, &batch)?;
        writeln!(file, "{}", rep.csv_row(step))?;
        on_step(step, &rep);
        if state.step % cfg.eval_interval == 0 || state.step == cfg.steps {
            let p = out.join(checkpoint_name(state.step));
            state.save(&p, cfg)?;
            checkpoints.push(p);
        }
    }
    file.flush()?;
    if cfg.steps > 0 && state.step == cfg.steps {
        let src = out.join(checkpoint_name(state.step));
        std::fs::copy(&src, out.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        state,
        checkpoints,
        loss_curve: curve_path,
    })
}

/// Train/test samples of one task with disjointness checked.
pub struct TaskData {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn sample_key(s: &Sample) -> (String, (usize, usize), (usize, usize), u64) {
    (
        s.meta.room.clone(),
        s.meta.bs_cell,
        s.meta.upa,
        s.meta.freq_hz.to_bits(),
    )
}

pub fn load_task(dir: &Path, task: Task) -> Result<TaskData, TrainError> {
    let manifest = Manifest::load(dir)?;
    let (tr, te) = split_tasks(&manifest, task)?;
    let train = load_samples(dir, &manifest, &tr)?;
    let test = load_samples(dir, &manifest, &te)?;
    let keys: HashSet<_> = train.iter().map(sample_key).collect();
    let shared = test.iter().filter(|s| keys.contains(&sample_key(s))).count();
    if shared > 0 {
        return Err(TrainError::Overlap(shared));
    }
    Ok(TaskData { manifest, train, test })
}

/// Per-sample and aggregate metrics of predictions against targets.
pub fn score(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<(Vec<SampleMetrics>, MetricsReport), TrainError> {
    if pred.shape != truth.shape {
        return Err(MetricsError::Shape(pred.numel(), truth.numel()).into());
    }
    let [n, c, h, w] = truth.shape;
    let ps = c * h * w;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let p: Vec<f64> = pred.data[i * ps..(i + 1) * ps].iter().map(|&v| v as f64).collect();
        let t: Vec<f64> = truth.data[i * ps..(i + 1) * ps].iter().map(|&v| v as f64).collect();
        let per_channel: Vec<SampleMetrics> = (0..c)
            .map(|ch| sample_metrics(&t[ch * h * w..(ch + 1) * h * w], &p[ch * h * w..(ch + 1) * h * w], h, w))
            .collect::<Result<_, _>>()?;
        rows.push(if c == 1 {
            per_channel[0]
        } else {
            let agg = MetricsReport::aggregate(&per_channel)?;
            SampleMetrics {
                mae: agg.mae,
                rmse: agg.rmse,
                psnr_db: agg.psnr_db,
                ms_ssim: agg.ms_ssim,
                psnr_capped: agg.psnr_capped == c,
            }
        });
    }
    let report = MetricsReport::aggregate(&rows)?;
    Ok((rows, report))
}

/// Generator predictions with the fixed evaluation noise; with `draws > 1`
/// the per-sample metrics are averaged over independent draws.
pub fn evaluate(
    g: &ModelParams<f32>,
    gcfg: &GeneratorConfig,
    test: &TensorSet,
    seed: u64,
    draws: usize,
) -> Result<(Vec<SampleMetrics>, MetricsReport), TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    if test.resolution() != gcfg.target_resolution {
        return Err(TrainError::ResolutionMismatch {
            expected: gcfg.target_resolution,
            found: test.resolution(),
        });
    }
    let draws = draws.max(1);
    let mut per_draw = Vec::with_capacity(draws);
    for d in 0..draws {
        let pred = predict(g, gcfg, test, seed, d as u64)?;
        per_draw.push(score(&pred, &test.target)?.0);
    }
    let n = test.len();
    let rows: Vec<SampleMetrics> = (0..n)
        .map(|i| {
            let k = draws as f64;
            let mean = |f: fn(&SampleMetrics) -> f64| per_draw.iter().map(|r| f(&r[i])).sum::<f64>() / k;
            SampleMetrics {
                mae: mean(|s| s.mae),
                rmse: mean(|s| s.rmse),
                psnr_db: mean(|s| s.psnr_db),
                ms_ssim: mean(|s| s.ms_ssim),
                psnr_capped: per_draw.iter().all(|r| r[i].psnr_capped),
            }
        })
        .collect();
    let report = MetricsReport::aggregate(&rows)?;
    Ok((rows, report))
}

/// Synthesized maps for every sample; sample `i` of draw `d` uses noise
/// seeded by `(seed, d, i)`.
pub fn predict(
    g: &ModelParams<f32>,
    gcfg: &GeneratorConfig,
    set: &TensorSet,
    seed: u64,
    draw: u64,
) -> Result<Tensor<f32>, TrainError> {
    const CHUNK: usize = 16;
    let mut outs = Vec::new();
    let n = set.len();
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let zs: Vec<Tensor<f32>> = (start..start + len)
            .map(|i| {
                sample_z(
                    &mut rng_for(seed ^ draw.wrapping_mul(0x9e37_79b9), PURPOSE_EVAL, i as u64),
                    1,
                    gcfg.z_dim,
                )
            })
            .collect();
        let z = Tensor::stack(&zs)?;
        outs.push(generate(g, gcfg, &z, &set.cond.batch_slice(start, len))?);
        start += len;
    }
    Ok(Tensor::stack(&outs)?)
}

/// Pixelwise mean of the training targets.
pub fn mean_map(train: &TensorSet) -> Tensor<f32> {
    let t = &train.target;
    let ps = t.per_sample();
    let n = t.shape[0] as f64;
    let mut acc = vec![0.0f64; ps];
    for s in t.data.chunks(ps) {
        for (a, &v) in acc.iter_mut().zip(s) {
            *a += v as f64;
        }
    }
    Tensor {
        shape: [1, t.shape[1], t.shape[2], t.shape[3]],
        data: acc.into_iter().map(|v| (v / n) as f32).collect(),
    }
}

/// Metrics of predicting the training mean map for every test sample.
pub fn baseline(train: &TensorSet, test: &TensorSet) -> Result<(Vec<SampleMetrics>, MetricsReport), TrainError> {
    let m = mean_map(train);
    let reps: Vec<Tensor<f32>> = (0..test.len()).map(|_| m.clone()).collect();
    score(&Tensor::stack(&reps)?, &test.target)
}
