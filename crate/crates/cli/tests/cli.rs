use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use radiance_cli::colormap::{read_png, Colormap};
use radiance_cli::rfmap_file::{read_map, write_map};
use radiance_core::propagation::RfMap;
use tempfile::TempDir;

fn radiance(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radiance"))
        .args(args)
        .output()
        .expect("spawn radiance")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn hash_line(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("manifest hash: ").map(str::to_owned))
        .expect("hash line")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn gen_dataset_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("desk_2room.toml");
    let a = radiance(&["gen-dataset", "--config", s(&cfg), "--out", s(&tmp.path().join("a"))]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("samples: 32"), "{}", stdout(&a));
    assert!(stdout(&a).contains("# resolved sweep config"));
    let b = radiance(&["gen-dataset", "--config", s(&cfg), "--out", s(&tmp.path().join("b"))]);
    assert!(b.status.success());
    assert_eq!(hash_line(&a), hash_line(&b));
    let c = radiance(&[
        "gen-dataset",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("c")),
        "--seed",
        "5",
    ]);
    assert!(c.status.success());
    assert_ne!(hash_line(&a), hash_line(&c));
}

#[test]
fn malformed_config_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let bad = write_config(
        tmp.path(),
        "bad.toml",
        "rooms = [\"room1\"]\nfrequencies_hz = \"fast\"\n",
    );
    let o = radiance(&["gen-dataset", "--config", s(&bad), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("frequencies_hz"), "{}", stderr(&o));
    let missing = radiance(&["gen-dataset", "--config", "/nonexistent.toml", "--out", s(tmp.path())]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(radiance(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(radiance(&["gen-dataset"]).status.code(), Some(1));
    assert_eq!(radiance(&["render", "--out", "x.png"]).status.code(), Some(1));
    assert_eq!(radiance(&["--help"]).status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_radiance"))
        .args(["oracle-check"])
        .env("RADIANCE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_check_passes_and_detects_sobel_perturbation() {
    let ok = radiance(&["oracle-check"]);
    assert!(ok.status.success(), "{}\n{}", stdout(&ok), stderr(&ok));
    let out = stdout(&ok);
    let friis = out.lines().find(|l| l.starts_with("friis")).expect("friis line");
    assert!(
        friis.contains("tolerance   1.0e-6") && friis.ends_with("PASS"),
        "{friis}"
    );

    let bad = radiance(&["oracle-check", "--perturb-sobel", "0.01"]);
    assert_eq!(bad.status.code(), Some(3));
    let out = stdout(&bad);
    let gl = out.lines().find(|l| l.starts_with("gradient-loss")).expect("gl line");
    assert!(gl.ends_with("FAIL"), "{gl}");
    assert!(out.lines().find(|l| l.starts_with("friis")).unwrap().ends_with("PASS"));
}

fn ramp_map(w: usize, h: usize) -> RfMap {
    let range = radiance_core::propagation::DEFAULT_NORM_RANGE;
    let rss_dbm = (0..w * h)
        .map(|i| range.0 + (range.1 - range.0) * i as f64 / (w * h - 1) as f64)
        .collect();
    RfMap {
        width: w,
        height: h,
        rss_dbm,
        norm_range: range,
    }
}

#[test]
fn render_sizes_and_inverts() {
    let tmp = TempDir::new().unwrap();
    let map = ramp_map(32, 32);
    let mp = tmp.path().join("m.radm");
    write_map(&mp, &map).unwrap();
    let png = tmp.path().join("m.png");
    for cmap in ["viridis", "jet"] {
        let o = radiance(&[
            "render",
            "--map",
            s(&mp),
            "--out",
            s(&png),
            "--colormap",
            cmap,
            "--scale",
            "8",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let img = read_png(&png).unwrap();
        assert_eq!((img.width, img.height), (256, 256));
        let c: Colormap = cmap.parse().unwrap();
        let norm = map.normalized();
        for r in 0..32 {
            for col in 0..32 {
                let v = c.invert(img.pixel(col * 8 + 3, r * 8 + 5));
                let want = norm[r * 32 + col] as f64;
                assert!((v - want).abs() <= 1.0 / 255.0, "{cmap} ({col},{r}): {v} vs {want}");
            }
        }
    }

    let cmp = tmp.path().join("c.png");
    let o = radiance(&["render", "--compare", s(&mp), s(&mp), "--out", s(&cmp), "--scale", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = read_png(&cmp).unwrap();
    assert_eq!((img.width, img.height), (2 * 128 + 4, 128));

    let garbage = tmp.path().join("g.radm");
    std::fs::write(&garbage, b"not a map").unwrap();
    let o = radiance(&["render", "--map", s(&garbage), "--out", s(&png)]);
    assert_eq!(o.status.code(), Some(2));
}

fn eval_row<'a>(out: &'a str, model: &str) -> Vec<&'a str> {
    out.lines()
        .find(|l| l.starts_with(&format!("{model},")))
        .unwrap_or_else(|| panic!("no {model} row in\n{out}"))
        .split(',')
        .collect()
}

fn assert_synth_range(path: &Path, w: usize) {
    let m = read_map(path).unwrap();
    assert_eq!((m.width, m.height), (w, w));
    let n = m.normalized();
    assert!(
        n.iter().all(|v| (0.0..=1.0).contains(v)),
        "normalized output outside [0, 1]"
    );
}

#[test]
fn task1_train_eval_synth() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "sweep.toml",
        "rooms = [\"room1\", \"lshape\"]\nfrequencies_hz = [28e9]\nupas = [[4, 4]]\nseed = 1\nmax_reflections = 1\n\
         [bs_positions]\nmode = \"stride\"\nstride = 16\n[grid]\nnx = 32\nny = 32\n",
    );
    let data = tmp.path().join("data");
    assert!(radiance(&["gen-dataset", "--config", s(&cfg), "--out", s(&data)])
        .status
        .success());
    let run = tmp.path().join("run");
    let o = radiance(&[
        "train",
        "--data",
        s(&data),
        "--task",
        "1",
        "--out",
        s(&run),
        "--steps",
        "4",
        "--eval-interval",
        "2",
        "--batch-size",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("step      2"), "{out}");
    assert!(run.join("train_config.toml").exists());
    assert!(run.join("loss_curve.csv").exists());

    let ckpt = run.join("final.radc");
    let o = radiance(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--task", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("model,samples,mae,rmse,psnr_db,ms_ssim"));
    for model in ["gan", "mean-map baseline"] {
        let row = eval_row(&out, model);
        assert_eq!(row.len(), 6);
        for v in &row[1..] {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{model}: {v}");
        }
    }
    assert_eq!(
        eval_row(&out, "full-scale reference (not reproduced)")[2..],
        ["0.06", "0.23", "12.81", "0.91"]
    );

    let scene = configs().join("scenes/lshape.toml");
    let map = tmp.path().join("l.radm");
    let png = tmp.path().join("l.png");
    let o = radiance(&[
        "synth",
        "--ckpt",
        s(&ckpt),
        "--scene",
        s(&scene),
        "--freq",
        "28e9",
        "--upa",
        "4x4",
        "--out",
        s(&map),
        "--png",
        s(&png),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_synth_range(&map, 32);
    assert_eq!(read_png(&png).unwrap().width, 256);

    let o = radiance(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--task", "2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn task2_synth_with_ten_by_ten_array() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "sweep.toml",
        "rooms = [\"room1\"]\nfrequencies_hz = [28e9]\nupas = [[4, 4], [10, 10]]\nseed = 2\nmax_reflections = 1\n\
         [bs_positions]\nmode = \"stride\"\nstride = 16\n[grid]\nnx = 32\nny = 32\n",
    );
    let data = tmp.path().join("data");
    assert!(radiance(&["gen-dataset", "--config", s(&cfg), "--out", s(&data)])
        .status
        .success());
    let run = tmp.path().join("run");
    let o = radiance(&[
        "train",
        "--data",
        s(&data),
        "--task",
        "2",
        "--out",
        s(&run),
        "--steps",
        "2",
        "--batch-size",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        eval_row(&stdout(&o), "full-scale reference (not reproduced)")[2..],
        ["0.13", "0.36", "8.75", "0.70"]
    );
    let scene = write_config(
        tmp.path(),
        "room.toml",
        "id = \"box\"\nshape = \"rectangle\"\ndimensions_m = [10.0, 10.0]\n[bs]\nx = 3.0\ny = 4.0\nz = 3.0\n[grid]\nnx = 32\nny = 32\n",
    );
    let map = tmp.path().join("b.radm");
    let o = radiance(&[
        "synth",
        "--ckpt",
        s(&run.join("final.radc")),
        "--scene",
        s(&scene),
        "--freq",
        "28e9",
        "--upa",
        "10x10",
        "--out",
        s(&map),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_synth_range(&map, 32);
}
