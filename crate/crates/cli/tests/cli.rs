use std::path::Path;
use std::process::{Command, Output};

use dehazeflow::io::{save_image, BitDepth};
use dehazeflow::training::{Dataset, HazeSpec};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dehazeflow"))
        .args(args)
        .env_remove("DEHAZEFLOW_CONFIG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--width",
    "4",
    "--epochs",
    "3",
    "--warmup-epochs",
    "1",
    "--pairs",
    "4",
    "--val-pairs",
    "2",
    "--size",
    "16",
];

fn train_tiny(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let ckpt = dir.join(name);
    let mut args = vec!["train", "--out", ckpt.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let out = cli(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

fn write_pairs(dir: &Path, count: usize, size: usize) {
    let data = Dataset::<f32>::synthetic(count, size, size, HazeSpec::default(), 9).unwrap();
    std::fs::create_dir_all(dir.join("hazy")).unwrap();
    std::fs::create_dir_all(dir.join("clean")).unwrap();
    for (i, p) in data.pairs.iter().enumerate() {
        save_image(&p.hazy, dir.join("hazy").join(format!("{i:02}.png")), BitDepth::Sixteen).unwrap();
        save_image(&p.clean, dir.join("clean").join(format!("{i:02}.png")), BitDepth::Sixteen).unwrap();
    }
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&cli(&["--help"])), 0);
    assert_eq!(code(&cli(&["--version"])), 0);
    assert_eq!(code(&cli(&["dehaze", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&cli(&[])), 1);
    assert_eq!(code(&cli(&["frobnicate"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let r = cli(&["ablate", "--suite", "colour", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("colour"));
    assert_eq!(code(&cli(&["bench", "--image", "64by64"])), 1);
    assert_eq!(code(&cli(&["train", "--out", "x.ckpt", "--steps", "0"])), 1);
    assert_eq!(code(&cli(&["train", "--out", "x.ckpt", "--solver", "heun"])), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let o = dir.path().join("o.png");
    let r = cli(&["dehaze", "-c", missing.to_str().unwrap(), "-i", "in.png", "-o", o.to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let r = cli(&["eval", "-c", junk.to_str().unwrap(), "--data", dir.path().to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    let cfg = dir.path().join("missing.conf");
    let r = cli(&["--config", cfg.to_str().unwrap(), "bench", "--image", "8x8"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "m.ckpt", &[]);
    let out = cli(&["train", "--out", dir.path().join("d.ckpt").to_str().unwrap(), "--lr", "1e38"]
        .iter()
        .chain(TINY)
        .copied()
        .collect::<Vec<_>>());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path(), "a.ckpt", &["--seed", "5"]);
    let b = train_tiny(dir.path(), "b.ckpt", &["--seed", "5"]);
    let c = train_tiny(dir.path(), "c.ckpt", &["--seed", "6"]);
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn dehaze_records_trajectory_and_matches_tiled() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "m.ckpt", &[]);
    write_pairs(&dir.path().join("data"), 1, 24);
    let input = dir.path().join("data/hazy/00.png");
    let traj = dir.path().join("traj");
    let whole = dir.path().join("whole.png");
    let r = cli(&[
        "dehaze",
        "-c",
        ckpt.to_str().unwrap(),
        "-i",
        input.to_str().unwrap(),
        "-o",
        whole.to_str().unwrap(),
        "--steps",
        "3",
        "--record-trajectory",
        traj.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    for i in 0..=3 {
        assert!(traj.join(format!("step_{i:03}.png")).exists(), "step {i}");
    }
    assert!(!traj.join("step_004.png").exists());
    let last: dehazeflow::Tensor<f32> = dehazeflow::io::load_image(traj.join("step_003.png")).unwrap();
    let out: dehazeflow::Tensor<f32> = dehazeflow::io::load_image(&whole).unwrap();
    assert_eq!(last, out);

    let tiled = dir.path().join("tiled.png");
    let r = cli(&[
        "dehaze",
        "-c",
        ckpt.to_str().unwrap(),
        "-i",
        input.to_str().unwrap(),
        "-o",
        tiled.to_str().unwrap(),
        "--tile",
        "16",
        "--overlap",
        "4",
        "--bits",
        "16",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let t: dehazeflow::Tensor<f32> = dehazeflow::io::load_image(&tiled).unwrap();
    assert_eq!(t.shape(), [1, 3, 24, 24]);
    assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let r = cli(&[
        "dehaze",
        "-c",
        ckpt.to_str().unwrap(),
        "-i",
        input.to_str().unwrap(),
        "-o",
        tiled.to_str().unwrap(),
        "--bits",
        "12",
    ]);
    assert_eq!(code(&r), 1);
}

#[test]
fn eval_and_train_on_directories() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_pairs(&data, 5, 16);
    let ckpt = dir.path().join("d.ckpt");
    let hist = dir.path().join("h.csv");
    let cube_path = dir.path().join("lut.cube");
    let r = cli(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--history",
        hist.to_str().unwrap(),
        "--export-lut",
        cube_path.to_str().unwrap(),
        "--width",
        "4",
        "--epochs",
        "2",
        "--warmup-epochs",
        "1",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(&hist).unwrap();
    let cube = dehazeflow::lut::Lut3D::<f32>::read_cube(&cube_path).unwrap();
    let model = dehazeflow::checkpoint::Checkpoint::load(&ckpt).unwrap().model;
    assert_eq!(cube.size(), model.lut.size());
    assert!(cube
        .grid
        .data()
        .iter()
        .zip(model.lut.grid.data())
        .all(|(a, b)| (a - b).abs() < 1e-5));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,train_l1,val_l1,lr"));

    let r = cli(&["eval", "-c", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--kv"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = stdout(&r);
    assert!(text.contains("input_psnr="), "{text}");

    std::fs::remove_file(data.join("clean/03.png")).unwrap();
    let r = cli(&["eval", "-c", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&r), 2);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# bench settings\nwidth = 4\nsolver = euler\nsteps = 2\n").unwrap();
    let r = cli(&[
        "--config",
        cfg.to_str().unwrap(),
        "bench",
        "--image",
        "16x8",
        "--repeats",
        "1",
        "--kv",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = stdout(&r);
    assert!(text.contains("solver=euler"), "{text}");
    assert!(text.contains("field_evals=2"), "{text}");

    let r = cli(&[
        "--config",
        cfg.to_str().unwrap(),
        "bench",
        "--image",
        "16x8",
        "--repeats",
        "1",
        "--kv",
        "--steps",
        "3",
    ]);
    assert!(stdout(&r).contains("field_evals=3"));

    let out = Command::new(env!("CARGO_BIN_EXE_dehazeflow"))
        .args(["bench", "--image", "16x8", "--repeats", "1", "--kv"])
        .env("DEHAZEFLOW_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(stdout(&out).contains("solver=euler"));

    std::fs::write(&cfg, "widht = 4\n").unwrap();
    assert_eq!(code(&cli(&["--config", cfg.to_str().unwrap(), "bench", "--image", "8x8"])), 1);
}

#[test]
fn ablate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--suite", "solver", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let r = cli(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("ablation.txt").exists());
    let json = std::fs::read_to_string(out.join("ablation.json")).unwrap();
    assert!(json.contains("euler") && json.contains("rk4"));
}
