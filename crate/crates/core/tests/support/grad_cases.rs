//! Gradient-check cases: reverse mode against central differences in f64.

use super::{gradcheck, random_tensor, signed_tensor};
use radiance_core::autograd::{Tape, Tensor, Var};
use radiance_core::losses::{
    adv_d_loss, adv_g_loss, l_fm, l_focal, l_gl, l_mae, l_perceptual, total_g_loss, GlOptions, LossTerms, LossWeights,
    PerceptualExtractor,
};
use radiance_core::model::{
    bind_conditions, build_discriminator, build_generator, discriminator_forward, generator_forward, spade_norm, Bound,
    DiscriminatorConfig, GeneratorConfig, ModelParams, NORM_EPS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub err: f64,
    pub tol: f64,
}

impl Case {
    pub fn passed(&self) -> bool {
        self.err <= self.tol
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn push(out: &mut Vec<Case>, name: &str, err: f64, tol: f64) {
    out.push(Case {
        name: name.to_string(),
        err,
        tol,
    });
}

pub fn conv2d_all_inputs() -> Vec<Case> {
    let mut out = Vec::new();
    let mut r = rng(1);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 3)] {
        let x = random_tensor(&mut r, [2, 3, 7, 7], -1.0, 1.0);
        let w = random_tensor(&mut r, [4, 3, k, k], -0.5, 0.5);
        let b = random_tensor(&mut r, [1, 4, 1, 1], -0.5, 0.5);
        let err = gradcheck(&[x, w, b], &[0, 1, 2], 16, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()
        });
        push(&mut out, &format!("conv2d s{stride} p{pad} k{k}"), err, LAYER_TOL);
    }
    out
}

pub fn instance_norm_and_upsample() -> Vec<Case> {
    let mut out = Vec::new();
    let mut r = rng(2);
    let x = random_tensor(&mut r, [2, 3, 5, 5], -2.0, 2.0);
    let err = gradcheck(&[x.clone()], &[0], 24, |t, v| t.instance_norm(v[0], NORM_EPS).unwrap());
    push(&mut out, "instance_norm", err, LAYER_TOL);
    let err = gradcheck(&[x], &[0], 24, |t, v| t.upsample2(v[0]).unwrap());
    push(&mut out, "upsample2", err, LAYER_TOL);
    out
}

pub fn pointwise_activations() -> Vec<Case> {
    let mut out = Vec::new();
    let mut r = rng(3);
    let signed = signed_tensor(&mut r, [1, 2, 4, 4], 0.05, 2.0);
    let positive = random_tensor(&mut r, [1, 2, 4, 4], 0.2, 3.0);
    type Op = fn(&mut Tape<f64>, Var) -> Var;
    let on_signed: [(&str, Op); 6] = [
        ("relu", |t, x| t.relu(x).unwrap()),
        ("lrelu", |t, x| t.lrelu(x, 0.2).unwrap()),
        ("sigmoid", |t, x| t.sigmoid(x).unwrap()),
        ("softplus", |t, x| t.softplus(x).unwrap()),
        ("abs", |t, x| t.abs(x).unwrap()),
        ("exp", |t, x| t.exp(x).unwrap()),
    ];
    for (name, op) in on_signed {
        let err = gradcheck(&[signed.clone()], &[0], 32, |t, v| op(t, v[0]));
        push(&mut out, name, err, LAYER_TOL);
    }
    let on_positive: [(&str, Op); 4] = [
        ("log", |t, x| t.log(x).unwrap()),
        ("sqrt", |t, x| t.sqrt(x).unwrap()),
        ("add_scalar", |t, x| t.add_scalar(x, 0.7).unwrap()),
        ("mul_scalar", |t, x| t.mul_scalar(x, -1.3).unwrap()),
    ];
    for (name, op) in on_positive {
        let err = gradcheck(&[positive.clone()], &[0], 32, |t, v| op(t, v[0]));
        push(&mut out, name, err, LAYER_TOL);
    }
    out
}

pub fn binary_ops_with_broadcasting() -> Vec<Case> {
    let mut out = Vec::new();
    let mut r = rng(4);
    let a = random_tensor(&mut r, [2, 3, 4, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, [1, 3, 1, 4], 0.5, 1.5);
    type Op = fn(&mut Tape<f64>, Var, Var) -> Var;
    let ops: [(&str, Op); 4] = [
        ("add", |t, x, y| t.add(x, y).unwrap()),
        ("sub", |t, x, y| t.sub(x, y).unwrap()),
        ("mul", |t, x, y| t.mul(x, y).unwrap()),
        ("div", |t, x, y| t.div(x, y).unwrap()),
    ];
    for (name, op) in ops {
        let err = gradcheck(&[a.clone(), b.clone()], &[0, 1], 24, |t, v| op(t, v[0], v[1]));
        push(&mut out, name, err, LAYER_TOL);
    }
    out
}

pub fn structural_ops() -> Vec<Case> {
    let mut out = Vec::new();
    let mut r = rng(5);
    let x = random_tensor(&mut r, [2, 6, 1, 1], -1.0, 1.0);
    let w = random_tensor(&mut r, [5, 6, 1, 1], -1.0, 1.0);
    let b = random_tensor(&mut r, [1, 5, 1, 1], -1.0, 1.0);
    let err = gradcheck(&[x, w, b], &[0, 1, 2], 30, |t, v| {
        t.dense(v[0], v[1], Some(v[2])).unwrap()
    });
    push(&mut out, "dense", err, LAYER_TOL);

    let a = random_tensor(&mut r, [2, 2, 3, 3], -1.0, 1.0);
    let c = random_tensor(&mut r, [2, 1, 3, 3], -1.0, 1.0);
    let err = gradcheck(&[a.clone(), c], &[0, 1], 18, |t, v| {
        t.concat_channels(&[v[0], v[1]]).unwrap()
    });
    push(&mut out, "concat_channels", err, LAYER_TOL);
    let err = gradcheck(&[a.clone()], &[0], 18, |t, v| t.reshape(v[0], [2, 18, 1, 1]).unwrap());
    push(&mut out, "reshape", err, LAYER_TOL);
    let err = gradcheck(&[a.clone()], &[0], 18, |t, v| t.pad_replicate(v[0], 2).unwrap());
    push(&mut out, "pad_replicate", err, LAYER_TOL);
    let err = gradcheck(&[a.clone()], &[0], 18, |t, v| {
        t.sum_axes(v[0], [false, true, false, true]).unwrap()
    });
    push(&mut out, "sum_axes", err, LAYER_TOL);
    let err = gradcheck(&[a.clone()], &[0], 18, |t, v| {
        t.mean_axes(v[0], [false, false, true, true]).unwrap()
    });
    push(&mut out, "mean_axes", err, LAYER_TOL);
    let err = gradcheck(&[a.clone()], &[0], 18, |t, v| t.sum(v[0]).unwrap());
    push(&mut out, "sum", err, LAYER_TOL);
    let err = gradcheck(&[a], &[0], 18, |t, v| t.mean(v[0]).unwrap());
    push(&mut out, "mean", err, LAYER_TOL);
    out
}

pub fn spade_layer() -> Vec<Case> {
    let mut out = Vec::new();
    let mut r = rng(6);
    let (ch, cond_ch, hidden) = (3, 4, 5);
    let inputs = vec![
        random_tensor(&mut r, [2, ch, 6, 6], -1.0, 1.0),
        random_tensor(&mut r, [2, cond_ch, 6, 6], 0.0, 1.0),
        random_tensor(&mut r, [hidden, cond_ch, 3, 3], -0.5, 0.5),
        random_tensor(&mut r, [1, hidden, 1, 1], 0.1, 0.3),
        random_tensor(&mut r, [ch, hidden, 3, 3], -0.5, 0.5),
        random_tensor(&mut r, [1, ch, 1, 1], 0.5, 1.5),
        random_tensor(&mut r, [ch, hidden, 3, 3], -0.5, 0.5),
        random_tensor(&mut r, [1, ch, 1, 1], -0.5, 0.5),
    ];
    let names = [
        "s.shared.weight",
        "s.shared.bias",
        "s.gamma.weight",
        "s.gamma.bias",
        "s.beta.weight",
        "s.beta.bias",
    ];
    let err = gradcheck(&inputs, &[0, 2, 3, 4, 5, 6, 7], 12, |t, v| {
        let bound = Bound {
            vars: names
                .iter()
                .zip(&v[2..])
                .map(|(n, &var)| (n.to_string(), var))
                .collect(),
        };
        spade_norm(t, v[0], v[1], &bound, "s").unwrap()
    });
    push(&mut out, "spade_norm", err, LAYER_TOL);
    out
}

pub fn adversarial_and_pixel_losses() -> Vec<Case> {
    let mut out = Vec::new();
    let mut r = rng(7);
    let real_logits = random_tensor(&mut r, [2, 1, 5, 5], -3.0, 3.0);
    let fake_logits = random_tensor(&mut r, [2, 1, 5, 5], -3.0, 3.0);
    let err = gradcheck(&[real_logits, fake_logits.clone()], &[0, 1], 20, |t, v| {
        adv_d_loss(t, v[0], v[1]).unwrap()
    });
    push(&mut out, "adv_d_loss", err, LAYER_TOL);
    let err = gradcheck(&[fake_logits], &[0], 20, |t, v| adv_g_loss(t, v[0]).unwrap());
    push(&mut out, "adv_g_loss", err, LAYER_TOL);

    let real = random_tensor(&mut r, [2, 1, 8, 8], 0.0, 1.0);
    let mut fake = real.clone();
    let offsets = signed_tensor(&mut r, [2, 1, 8, 8], 0.01, 0.3);
    for (f, o) in fake.data.iter_mut().zip(&offsets.data) {
        *f += o;
    }
    let err = gradcheck(&[real.clone(), fake.clone()], &[0, 1], 32, |t, v| {
        l_mae(t, v[0], v[1]).unwrap()
    });
    push(&mut out, "l_mae", err, LAYER_TOL);
    // focal weights are taken from the real map as constants
    let err = gradcheck(&[real.clone(), fake.clone()], &[1], 32, |t, v| {
        l_focal(t, v[0], v[1], 2.0).unwrap()
    });
    push(&mut out, "l_focal", err, LAYER_TOL);
    out
}

pub fn feature_losses() -> Vec<Case> {
    let mut out = Vec::new();
    let mut r = rng(8);
    let taps_r = [
        random_tensor(&mut r, [2, 3, 4, 4], -1.0, 1.0),
        random_tensor(&mut r, [2, 5, 2, 2], -1.0, 1.0),
    ];
    let taps_f = [
        random_tensor(&mut r, [2, 3, 4, 4], -1.0, 1.0),
        random_tensor(&mut r, [2, 5, 2, 2], -1.0, 1.0),
    ];
    let inputs: Vec<Tensor<f64>> = taps_r.iter().chain(&taps_f).cloned().collect();
    let err = gradcheck(&inputs, &[0, 1, 2, 3], 16, |t, v| l_fm(t, &v[..2], &v[2..]).unwrap());
    push(&mut out, "l_fm", err, LAYER_TOL);

    let extractor = PerceptualExtractor::<f64>::new(11, 1);
    let real = random_tensor(&mut r, [1, 1, 16, 16], 0.0, 1.0);
    let fake = random_tensor(&mut r, [1, 1, 16, 16], 0.0, 1.0);
    let err = gradcheck(&[real, fake], &[0, 1], 24, |t, v| {
        l_perceptual(t, v[0], v[1], &extractor).unwrap()
    });
    push(&mut out, "l_perceptual", err, LAYER_TOL);
    out
}

pub fn gradient_loss() -> Vec<Case> {
    let mut out = Vec::new();
    let mut r = rng(9);
    let real = random_tensor(&mut r, [2, 1, 8, 8], 0.0, 1.0);
    let fake = random_tensor(&mut r, [2, 1, 8, 8], 0.0, 1.0);
    for raw_cosine in [false, true] {
        let opts = GlOptions {
            raw_cosine,
            ..GlOptions::default()
        };
        let err = gradcheck(&[real.clone(), fake.clone()], &[0, 1], 32, |t, v| {
            l_gl(t, v[0], v[1], &opts).unwrap()
        });
        push(&mut out, &format!("l_gl raw_cosine={raw_cosine}"), err, LAYER_TOL);
    }
    out
}

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        z_dim: 8,
        base_channels: 4,
        target_resolution: 16,
        output_channels: 1,
        condition_channels: 5,
        spade_hidden: 4,
    }
}

/// Every generator tensor as a separate input, in name order.
fn flatten(params: &ModelParams<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    params.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).unzip()
}

fn bound_from(names: &[String], vars: &[Var]) -> Bound {
    Bound {
        vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
    }
}

pub fn generator_end_to_end_per_loss_term() -> Vec<Case> {
    let mut out = Vec::new();
    let gcfg = small_generator();
    let g = build_generator::<f64>(&gcfg, 3).unwrap();
    let (names, mut inputs) = flatten(&g);
    // larger weights than the init so every path carries signal
    for t in &mut inputs {
        for v in &mut t.data {
            *v *= 10.0;
        }
    }
    let np = inputs.len();
    let mut r = rng(10);
    let z = random_tensor(&mut r, [2, gcfg.z_dim, 1, 1], -1.0, 1.0);
    let cond = random_tensor(&mut r, [2, gcfg.condition_channels, 16, 16], 0.0, 1.0);
    let real = random_tensor(&mut r, [2, 1, 16, 16], 0.0, 1.0);
    let extractor = PerceptualExtractor::<f64>::new(12, 1);
    let weights = LossWeights::default();
    let check: Vec<usize> = (0..np).collect();

    type Term<'a> = Box<dyn Fn(&mut Tape<f64>, Var, Var) -> Var + 'a>;
    let terms: Vec<(&str, Term)> = vec![
        ("mae", Box::new(|t, re, fa| l_mae(t, re, fa).unwrap())),
        ("focal", Box::new(|t, re, fa| l_focal(t, re, fa, 2.0).unwrap())),
        (
            "perceptual",
            Box::new(|t, re, fa| l_perceptual(t, re, fa, &extractor).unwrap()),
        ),
        (
            "gl",
            Box::new(|t, re, fa| l_gl(t, re, fa, &GlOptions::default()).unwrap()),
        ),
        (
            "total",
            Box::new(|t, re, fa| {
                let adv = adv_g_loss(t, fa).unwrap();
                let terms = LossTerms {
                    mae: Some(l_mae(t, re, fa).unwrap()),
                    focal: Some(l_focal(t, re, fa, 2.0).unwrap()),
                    fm: None,
                    perceptual: Some(l_perceptual(t, re, fa, &extractor).unwrap()),
                    gl: Some(l_gl(t, re, fa, &GlOptions::default()).unwrap()),
                };
                total_g_loss(t, adv, &terms, &weights).unwrap().0
            }),
        ),
    ];
    for (name, term) in &terms {
        let err = gradcheck(&inputs, &check, 1, |t, v| {
            let p = bound_from(&names, &v[..np]);
            let zv = t.constant(z.clone());
            let conds = bind_conditions(t, &gcfg, &cond).unwrap();
            let fake = generator_forward(t, &gcfg, &p, zv, &conds).unwrap();
            let re = t.constant(real.clone());
            term(t, re, fake)
        });
        push(&mut out, &format!("generator through {name}"), err, END_TO_END_TOL);
    }
    out
}

pub fn discriminator_end_to_end_feature_matching() -> Vec<Case> {
    let mut out = Vec::new();
    let dcfg = DiscriminatorConfig {
        base_channels: 4,
        condition_channels: 3,
        map_channels: 1,
        resolution: 32,
    };
    let d = build_discriminator::<f64>(&dcfg, 4).unwrap();
    let (names, mut inputs) = flatten(&d);
    for t in &mut inputs {
        for v in &mut t.data {
            *v *= 10.0;
        }
    }
    let np = inputs.len();
    let mut r = rng(11);
    let cond = random_tensor(&mut r, [1, 3, 32, 32], 0.0, 1.0);
    inputs.push(random_tensor(&mut r, [1, 1, 32, 32], 0.0, 1.0));
    inputs.push(random_tensor(&mut r, [1, 1, 32, 32], 0.0, 1.0));
    let check: Vec<usize> = (0..inputs.len()).collect();
    let err = gradcheck(&inputs, &check, 2, |t, v| {
        let p = bound_from(&names, &v[..np]);
        let c = t.constant(cond.clone());
        let real = discriminator_forward(t, &dcfg, &p, v[np], c).unwrap();
        let fake = discriminator_forward(t, &dcfg, &p, v[np + 1], c).unwrap();
        let fm = l_fm(t, &real.taps, &fake.taps).unwrap();
        let adv = adv_d_loss(t, real.logits, fake.logits).unwrap();
        t.add(fm, adv).unwrap()
    });
    push(&mut out, "discriminator through fm + adversarial", err, END_TO_END_TOL);
    out
}

/// Every case, layers first.
pub fn all() -> Vec<Case> {
    [
        conv2d_all_inputs(),
        instance_norm_and_upsample(),
        pointwise_activations(),
        binary_ops_with_broadcasting(),
        structural_ops(),
        spade_layer(),
        adversarial_and_pixel_losses(),
        feature_losses(),
        gradient_loss(),
        generator_end_to_end_per_loss_term(),
        discriminator_end_to_end_feature_matching(),
    ]
    .concat()
}
