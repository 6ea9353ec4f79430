//! Self-check suites comparing the pipeline against independent references.

use radiance_core::autograd::{Tape, Tensor, Var};
use radiance_core::geometry::{Point2, Vec3};
use radiance_core::losses::{adv_d_loss, adv_g_loss, l_gl_parts, l_mae, GlOptions, SobelKernel, GL_EPS};
use radiance_core::metrics::{ms_ssim, psnr_from_mse};
use radiance_core::propagation::{enumerate_paths, path_amplitude, received_power, SurfaceId};
use radiance_core::scene::{build_room, catalog_room, RoomLayout, RoomShape, Scene};
use radiance_oracles as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOptions {
    /// Added to one Sobel tap used by the pipeline (sensitivity test hook).
    pub sobel_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub metric: &'static str,
    pub tolerance: f64,
    pub observed: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.observed <= self.tolerance
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} {:<28} observed {:>10.3e}  tolerance {:>8.1e}  {}",
            self.name,
            self.metric,
            self.observed,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn run_all(opts: &CheckOptions) -> Vec<SuiteResult> {
    vec![
        friis(),
        image_tree(),
        finite_differences(opts),
        gradient_loss(opts),
        loss_identities(),
        metrics(),
    ]
}

fn friis() -> SuiteResult {
    let scene = build_room(&RoomLayout::new(
        "open",
        RoomShape::Open {
            width: 1000.0,
            depth: 1000.0,
        },
        Point2::new(500.0, 500.0),
    ))
    .expect("open scene");
    let tx = Vec3::new(500.0, 500.0, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = vec![(1.0, 28e9)];
    cases.extend((0..100).map(|_| (rng.random_range(0.1..400.0), rng.random_range(1e9..100e9))));
    let mut worst: f64 = 0.0;
    for (d, f) in cases {
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let rx = Vec3::new(tx.x + d * a.cos(), tx.y + d * a.sin(), tx.z);
        let paths = enumerate_paths(&scene, tx, rx, 0);
        let amps: Vec<_> = paths.iter().map(|p| path_amplitude(p, f, None)).collect();
        let err = if paths.len() == 1 {
            (received_power(&amps, 0.0) - oracle::friis_dbm(d, f, 0.0)).abs()
        } else {
            f64::INFINITY
        };
        worst = worst.max(err);
    }
    SuiteResult {
        name: "friis",
        metric: "max |dB| error, 101 links",
        tolerance: 1e-6,
        observed: worst,
    }
}

pub(crate) fn raw_scene(scene: &Scene) -> oracle::RawScene {
    oracle::RawScene {
        walls: scene
            .walls
            .iter()
            .map(|w| oracle::RawWall {
                a: [w.a.x, w.a.y],
                b: [w.b.x, w.b.y],
                height: w.height,
            })
            .collect(),
        floor: scene.footprint.iter().map(|p| [p.x, p.y]).collect(),
    }
}

fn image_tree() -> SuiteResult {
    let scene = build_room(&catalog_room("room1").expect("catalog room")).expect("square room");
    let raw = raw_scene(&scene);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let point = |rng: &mut ChaCha8Rng| {
        Vec3::new(
            rng.random_range(0.2..9.8),
            rng.random_range(0.2..9.8),
            rng.random_range(0.3..3.7),
        )
    };
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (tx, rx) = (point(&mut rng), point(&mut rng));
        let key = |s: SurfaceId| match s {
            SurfaceId::Wall(i) => Some(i),
            SurfaceId::Floor => None,
        };
        let mut ours: Vec<_> = enumerate_paths(&scene, tx, rx, 2)
            .iter()
            .map(|p| (p.surfaces().into_iter().map(key).collect::<Vec<_>>(), p.total_length))
            .collect();
        let mut theirs: Vec<_> = oracle::specular_paths(&raw, [tx.x, tx.y, tx.z], [rx.x, rx.y, rx.z], 2)
            .into_iter()
            .map(|p| (p.surfaces, p.length))
            .collect();
        ours.sort_by(|a, b| a.0.cmp(&b.0));
        theirs.sort_by(|a, b| a.0.cmp(&b.0));
        if ours.len() != theirs.len() || ours.iter().zip(&theirs).any(|(a, b)| a.0 != b.0) {
            worst = f64::INFINITY;
            continue;
        }
        for (a, b) in ours.iter().zip(&theirs) {
            worst = worst.max((a.1 - b.1).abs());
        }
    }
    SuiteResult {
        name: "image-tree",
        metric: "max path length error (m)",
        tolerance: 1e-9,
        observed: worst,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Worst relative error between backward and central differences over
/// every coordinate of every input, for `sum(out * r)` with fixed random `r`.
fn gradcheck(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let forward = |ins: &[Tensor<f64>], tape: &mut Tape<f64>| -> (Vec<Var>, Var) {
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(tape, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let r = tape.constant(random_tensor(&mut rng, tape.shape(out), -1.0, 1.0));
        let p = tape.mul(out, r).expect("same shape");
        (vars, tape.sum(p).expect("sum"))
    };
    let mut tape = Tape::new();
    let (vars, loss) = forward(inputs, &mut tape);
    let grads = tape.backward(loss).expect("scalar loss");
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let idx: Vec<usize> = (0..input.numel()).collect();
        let numeric = oracle::central_difference(
            |x| {
                let mut ins = inputs.to_vec();
                ins[k].data.copy_from_slice(x);
                let mut t = Tape::new();
                let (_, l) = forward(&ins, &mut t);
                t.value(l).item()
            },
            &input.data,
            &idx,
            1e-6,
        );
        for (i, n) in numeric.iter().enumerate() {
            worst = worst.max(oracle::relative_error(analytic.data[i], *n, 1e-6));
        }
    }
    worst
}

fn finite_differences(opts: &CheckOptions) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, [1, 2, 5, 5], -1.0, 1.0);
    let w = random_tensor(&mut rng, [3, 2, 3, 3], -0.5, 0.5);
    let b = random_tensor(&mut rng, [1, 3, 1, 1], -0.5, 0.5);
    let maps = [
        random_tensor(&mut rng, [1, 1, 6, 6], 0.0, 1.0),
        random_tensor(&mut rng, [1, 1, 6, 6], 0.0, 1.0),
    ];
    let gl = GlOptions {
        kernel: SobelKernel::perturbed(opts.sobel_delta),
        raw_cosine: false,
    };
    let worst = [
        gradcheck(&[x.clone(), w, b], &|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
            let y = t.instance_norm(y, 1e-5).unwrap();
            t.sigmoid(y).unwrap()
        }),
        gradcheck(&[x], &|t, v| {
            let y = t.upsample2(v[0]).unwrap();
            let y = t.softplus(y).unwrap();
            t.pad_replicate(y, 1).unwrap()
        }),
        gradcheck(&maps, &|t, v| l_gl_parts(t, v[0], v[1], &gl).unwrap().total),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    SuiteResult {
        name: "finite-differences",
        metric: "max relative grad error",
        tolerance: 1e-4,
        observed: worst,
    }
}

fn gradient_loss(opts: &CheckOptions) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gl = GlOptions {
        kernel: SobelKernel::perturbed(opts.sobel_delta),
        raw_cosine: false,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let real = random_tensor(&mut rng, [1, 1, 16, 16], 0.0, 1.0);
        let fake = random_tensor(&mut rng, [1, 1, 16, 16], 0.0, 1.0);
        let (kl, dir) = oracle::gradient_loss_direct(&real.data, &fake.data, 16, 16, GL_EPS);
        let mut t = Tape::new();
        let (r, f) = (t.constant(real), t.constant(fake));
        let parts = l_gl_parts(&mut t, r, f, &gl).expect("valid maps");
        worst = worst
            .max((t.value(parts.kl).item() - kl).abs())
            .max((t.value(parts.direction).item() - dir).abs());
    }
    SuiteResult {
        name: "gradient-loss",
        metric: "max |KL|,|direction| error",
        tolerance: 1e-9,
        observed: worst,
    }
}

fn loss_identities() -> SuiteResult {
    let zeros = Tensor::<f64>::zeros([2, 1, 5, 5]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, [1, 1, 12, 12], 0.0, 1.0);
    let mut t = Tape::new();
    let z = t.constant(zeros);
    let d = adv_d_loss(&mut t, z, z).unwrap();
    let g = adv_g_loss(&mut t, z).unwrap();
    let xv = t.constant(x);
    let m = l_mae(&mut t, xv, xv).unwrap();
    let gl = l_gl_parts(&mut t, xv, xv, &GlOptions::default()).unwrap().total;
    let worst = [
        (t.value(d).item() - 2.0 * 2f64.ln()).abs(),
        (t.value(g).item() - 2f64.ln()).abs(),
        t.value(m).item().abs(),
        t.value(gl).item().abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    SuiteResult {
        name: "loss-identities",
        metric: "max deviation",
        tolerance: 1e-9,
        observed: worst,
    }
}

fn metrics() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = (psnr_from_mse(0.01, 1.0) - 20.0).abs();
    for _ in 0..10 {
        let x: Vec<f64> = (0..32 * 32).map(|_| rng.random()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0))
            .collect();
        let ours = ms_ssim(&x, &y, 32, 32).expect("32x32 maps");
        worst = worst.max((ours - oracle::ms_ssim_direct(&x, &y, 32, 32)).abs());
        worst = worst.max((ms_ssim(&x, &x, 32, 32).expect("32x32 maps") - 1.0).abs());
    }
    SuiteResult {
        name: "metrics",
        metric: "max MS-SSIM / PSNR error",
        tolerance: 1e-6,
        observed: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sobel_perturbation_fails_gradient_loss_suite() {
        assert!(gradient_loss(&CheckOptions::default()).passed());
        let r = gradient_loss(&CheckOptions { sobel_delta: 1e-2 });
        assert!(!r.passed(), "{r}");
    }
}
