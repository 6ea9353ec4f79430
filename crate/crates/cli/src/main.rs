use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use radiance_cli::colormap::{heatmap, side_by_side, write_png, Colormap};
use radiance_cli::oracle_check::{run_all, CheckOptions};
use radiance_cli::rfmap_file::{read_map, write_map};
use radiance_core::antenna::{rasterize_pattern, UpaConfig};
use radiance_core::autograd::Tensor;
use radiance_core::dataset::{
    assemble_condition, denormalize_rss, encode_frequency, run_sweep, SweepConfig, Task, DEFAULT_CATALOG_HZ,
};
use radiance_core::metrics::MetricsReport;
use radiance_core::model::{generate, sample_z};
use radiance_core::propagation::{generate_rf_map, RfMap, DEFAULT_NORM_RANGE};
use radiance_core::scene::{rasterize_semantic, SceneDescriptor};
use radiance_core::trainer::{
    baseline, evaluate, load_task, rng_for, train, TensorSet, TrainConfig, TrainError, TrainState,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// `(MAE, RMSE, PSNR, MS-SSIM)` reported at full scale, per task.
const REFERENCE_TASK1: [f64; 4] = [0.06, 0.23, 12.81, 0.91];
const REFERENCE_TASK2: [f64; 4] = [0.13, 0.36, 8.75, 0.70];

#[derive(Parser)]
#[command(name = "radiance", version, about = "Indoor RF map generation and synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ray-trace a sweep of rooms, antennas and frequencies into shards.
    GenDataset(GenArgs),
    /// Train the conditional GAN on one task split.
    Train(TrainArgs),
    /// Score a checkpoint on the test split of a task.
    Eval(EvalArgs),
    /// Synthesize a map for a scene descriptor.
    Synth(SynthArgs),
    /// Draw a map file as a PNG heatmap.
    Render(RenderArgs),
    /// Run the reference-comparison suites.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long)]
    out: PathBuf,
    /// Base TOML config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    lambda_mae: Option<f64>,
    #[arg(long)]
    lambda_fl: Option<f64>,
    #[arg(long)]
    lambda_fm: Option<f64>,
    #[arg(long)]
    lambda_vgg: Option<f64>,
    #[arg(long)]
    lambda_gl: Option<f64>,
    #[arg(long)]
    focal_gamma: Option<f64>,
    /// Use the raw cosine as the gradient-loss direction term.
    #[arg(long)]
    gl_raw_cosine: bool,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Noise draws averaged per test sample in the final report.
    #[arg(long, default_value_t = 1)]
    eval_z_draws: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_task)]
    task: Task,
    /// Seed of the fixed evaluation noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    eval_z_draws: usize,
    /// Score the raw generator weights instead of their running average.
    #[arg(long)]
    raw_generator: bool,
    /// Write per-sample metrics as CSV.
    #[arg(long)]
    per_sample: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    freq: f64,
    /// Array size as ROWSxCOLS, e.g. 4x4.
    #[arg(long, value_parser = parse_upa)]
    upa: (usize, usize),
    #[arg(long)]
    out: PathBuf,
    /// Also write a heatmap.
    #[arg(long)]
    png: Option<PathBuf>,
    /// Also ray-trace the scene and write the ground-truth map here.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    max_reflections: usize,
    /// Frequency catalog of the training data, comma separated, in Hz.
    #[arg(long, value_delimiter = ',')]
    catalog: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    raw_generator: bool,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["map", "compare"])))]
struct RenderArgs {
    #[arg(long)]
    map: Option<PathBuf>,
    /// Real and synthetic maps drawn side by side.
    #[arg(long, num_args = 2, value_names = ["REAL", "FAKE"])]
    compare: Option<Vec<PathBuf>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "viridis")]
    colormap: Colormap,
    #[arg(long, default_value_t = 8)]
    scale: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, hide = true, default_value_t = 0.0)]
    perturb_sobel: f64,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse::<u8>()
        .ok()
        .and_then(Task::from_number)
        .ok_or_else(|| format!("task must be 1 or 2, got `{s}`"))
}

fn parse_upa(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(r)?, p(c)?))
}

/// Failure that maps to the numerical-failure exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct NumericalFailure(String);

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<NumericalFailure>().is_some()
            || e.downcast_ref::<TrainError>().is_some_and(TrainError::is_numerical)
    });
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("RADIANCE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("RADIANCE_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn echo_config(kind: &str, toml: &str) {
    println!("# resolved {kind} config");
    print!("{toml}");
    if !toml.ends_with('\n') {
        println!();
    }
    println!("# end config");
}

fn gen_dataset(a: &GenArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg = SweepConfig::parse(&text).with_context(|| format!("in {}", a.config.display()))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().with_context(|| format!("in {}", a.config.display()))?;
    echo_config("sweep", &cfg.to_toml());
    let manifest = run_sweep(&cfg, &a.out)?;
    println!("samples: {}", manifest.samples.len());
    println!("manifest hash: {}", manifest.hash());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.steps, cfg.steps);
    set!(a.seed, cfg.seed);
    set!(a.batch_size, cfg.batch_size);
    set!(a.lr_g, cfg.lr_g);
    set!(a.lr_d, cfg.lr_d);
    set!(a.lambda_mae, cfg.weights.mae);
    set!(a.lambda_fl, cfg.weights.fl);
    set!(a.lambda_fm, cfg.weights.fm);
    set!(a.lambda_vgg, cfg.weights.vgg);
    set!(a.lambda_gl, cfg.weights.gl);
    set!(a.focal_gamma, cfg.focal_gamma);
    set!(a.eval_interval, cfg.eval_interval);
    set!(a.ema_decay, cfg.ema_decay);
    if a.gl_raw_cosine {
        cfg.gl_raw_cosine = true;
    }
    Ok(cfg)
}

fn print_reports(task: Task, gan: &MetricsReport, base: &MetricsReport) {
    println!("model,{}", MetricsReport::HEADER);
    println!("gan,{}", gan.row());
    println!("mean-map baseline,{}", base.row());
    let r = match task {
        Task::Rooms => REFERENCE_TASK1,
        Task::Antennas => REFERENCE_TASK2,
    };
    println!(
        "full-scale reference (not reproduced),-,{:.2},{:.2},{:.2},{:.2}",
        r[0], r[1], r[2], r[3]
    );
    if gan.psnr_capped > 0 {
        println!(
            "note: {} samples hit the {} dB PSNR cap",
            gan.psnr_capped,
            radiance_core::metrics::PSNR_CAP_DB
        );
    }
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let data = load_task(&a.data, a.task)?;
    let train_set = TensorSet::from_samples(&data.train)?;
    let test_set = TensorSet::from_samples(&data.test)?;
    let (cfg, resume) = match &a.resume {
        Some(p) => {
            let (mut cfg, state) = TrainState::load(p).with_context(|| format!("loading {}", p.display()))?;
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            (cfg, Some(state))
        }
        None => {
            let mut cfg = resolve_train_config(a)?;
            let cc = train_set.cond.shape[1];
            let mc = train_set.target.shape[1];
            cfg.fit_to_data(train_set.resolution(), cc, mc);
            (cfg, None)
        }
    };
    cfg.validate()?;
    let toml = cfg.to_toml();
    echo_config("training", &toml);
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("train_config.toml"), &toml)?;
    println!("train samples: {}, test samples: {}", train_set.len(), test_set.len());
    let interval = cfg.eval_interval;
    let out = train(&cfg, &train_set, &a.out, resume, |step, r| {
        if (step + 1) % interval == 0 {
            println!(
                "step {:>6}  d {:.4}  g {:.4}  adv {:.4}  mae {:.4}  gl {:.4}",
                step + 1,
                r.d_loss,
                r.g.total,
                r.g.adv,
                r.g.mae,
                r.g.gl
            );
        }
    })?;
    println!("checkpoints: {}", out.checkpoints.len());
    println!("loss curve: {}", out.loss_curve.display());
    let (_, gan) = evaluate(&out.state.g_ema, &cfg.generator, &test_set, 0, a.eval_z_draws)?;
    let (_, base) = baseline(&train_set, &test_set)?;
    print_reports(a.task, &gan, &base);
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (cfg, state) = TrainState::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let data = load_task(&a.data, a.task)?;
    let train_set = TensorSet::from_samples(&data.train)?;
    let test_set = TensorSet::from_samples(&data.test)?;
    echo_config("training", &cfg.to_toml());
    println!(
        "checkpoint step {}, generator {}, eval seed {}, z draws {}",
        state.step,
        if a.raw_generator { "raw" } else { "averaged" },
        a.seed,
        a.eval_z_draws
    );
    let g = if a.raw_generator { &state.g } else { &state.g_ema };
    let (rows, gan) = evaluate(g, &cfg.generator, &test_set, a.seed, a.eval_z_draws)?;
    let (_, base) = baseline(&train_set, &test_set)?;
    if let Some(p) = &a.per_sample {
        let mut csv = String::from("room,bs_col,bs_row,upa,freq_hz,mae,rmse,psnr_db,ms_ssim\n");
        for (s, m) in data.test.iter().zip(&rows) {
            csv.push_str(&format!(
                "{},{},{},{}x{},{},{:.6},{:.6},{:.4},{:.6}\n",
                s.meta.room,
                s.meta.bs_cell.0,
                s.meta.bs_cell.1,
                s.meta.upa.0,
                s.meta.upa.1,
                s.meta.freq_hz,
                m.mae,
                m.rmse,
                m.psnr_db,
                m.ms_ssim
            ));
        }
        std::fs::write(p, csv)?;
    }
    print_reports(a.task, &gan, &base);
    Ok(())
}

fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let (cfg, state) = TrainState::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let desc = SceneDescriptor::load(&a.scene).with_context(|| format!("reading {}", a.scene.display()))?;
    let (scene, grid) = desc.build()?;
    let res = cfg.generator.target_resolution;
    if grid.nx != res || grid.ny != res {
        bail!(
            "scene grid is {}x{} but the checkpoint expects {res}x{res}",
            grid.nx,
            grid.ny
        );
    }
    let catalog = a.catalog.clone().unwrap_or_else(|| DEFAULT_CATALOG_HZ.to_vec());
    let antenna = UpaConfig::new(a.upa.0, a.upa.1, a.freq)?;
    let cond = assemble_condition(
        rasterize_semantic(&scene, &grid),
        rasterize_pattern(&antenna, &grid),
        encode_frequency(a.freq, &catalog)?,
    )?;
    if cond.channels() != cfg.generator.condition_channels {
        bail!(
            "condition has {} channels but the checkpoint expects {}; pass the training --catalog",
            cond.channels(),
            cfg.generator.condition_channels
        );
    }
    println!(
        "scene: {} ({}x{} grid), freq {} Hz, UPA {}x{}",
        desc.id, grid.nx, grid.ny, a.freq, a.upa.0, a.upa.1
    );
    let c = Tensor::from_f32([1, cond.channels(), grid.ny, grid.nx], &cond.stack())?;
    let z = sample_z(&mut rng_for(a.seed, 0, 0), 1, cfg.generator.z_dim);
    let g = if a.raw_generator { &state.g } else { &state.g_ema };
    let out = generate(g, &cfg.generator, &z, &c)?;
    if !out.is_finite() {
        return Err(NumericalFailure("generator produced non-finite values".into()).into());
    }
    let values = out.to_f32();
    let map = RfMap {
        width: grid.nx,
        height: grid.ny,
        rss_dbm: denormalize_rss(&values[..grid.nx * grid.ny], DEFAULT_NORM_RANGE),
        norm_range: DEFAULT_NORM_RANGE,
    };
    write_map(&a.out, &map)?;
    println!("wrote {}", a.out.display());
    if let Some(p) = &a.png {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        write_png(p, &heatmap(&v, grid.nx, grid.ny, 8, Colormap::Viridis))?;
        println!("wrote {}", p.display());
    }
    if let Some(p) = &a.truth {
        let truth = generate_rf_map(&scene, &antenna, a.freq, &grid, a.max_reflections)?;
        write_map(p, &truth)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn normalized(map: &RfMap) -> Vec<f64> {
    map.normalized().into_iter().map(f64::from).collect()
}

fn load_for_render(p: &Path) -> Result<RfMap> {
    read_map(p).with_context(|| format!("reading {}", p.display()))
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    if a.scale == 0 {
        bail!("--scale must be positive");
    }
    let img = match (&a.map, &a.compare) {
        (Some(p), None) => {
            let m = load_for_render(p)?;
            heatmap(&normalized(&m), m.width, m.height, a.scale, a.colormap)
        }
        (None, Some(pair)) => {
            let (r, f) = (load_for_render(&pair[0])?, load_for_render(&pair[1])?);
            if (r.width, r.height) != (f.width, f.height) {
                bail!(
                    "compared maps differ in size: {}x{} vs {}x{}",
                    r.width,
                    r.height,
                    f.width,
                    f.height
                );
            }
            side_by_side(
                &heatmap(&normalized(&r), r.width, r.height, a.scale, a.colormap),
                &heatmap(&normalized(&f), f.width, f.height, a.scale, a.colormap),
            )
        }
        _ => unreachable!("clap enforces exactly one input"),
    };
    write_png(&a.out, &img)?;
    println!("wrote {} ({}x{})", a.out.display(), img.width, img.height);
    Ok(())
}

fn oracle_cmd(a: &OracleArgs) -> Result<()> {
    let results = run_all(&CheckOptions {
        sobel_delta: a.perturb_sobel,
    });
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(NumericalFailure(format!("{failed} oracle suites failed")).into());
    }
    println!("all {} suites passed", results.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match &cli.command {
        Command::GenDataset(a) => gen_dataset(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::OracleCheck(a) => oracle_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
