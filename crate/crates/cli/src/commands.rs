//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dehazeflow::ablation::{self, Suite};
use dehazeflow::bench;
use dehazeflow::checkpoint::{Checkpoint, OptimizerSnapshot, TrainingMeta};
use dehazeflow::io::{self, BitDepth};
use dehazeflow::metrics::MetricReport;
use dehazeflow::model::{DehazeModel, ModelConfig};
use dehazeflow::tiling;
use dehazeflow::training::{self, Dataset, Pair, ToyPreset};
use dehazeflow::Tensor;

use crate::config::Settings;
use crate::{Cli, CliError, Command, ModelFlags, TrainFlags};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let mut settings = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    match cli.command {
        Command::Train {
            data,
            val,
            out,
            history,
            export_lut,
            model,
            train,
        } => {
            apply_model(&mut settings, &model);
            apply_train(&mut settings, &train);
            cmd_train(
                &settings,
                data.as_deref(),
                val.as_deref(),
                &out,
                history.as_deref(),
                export_lut.as_deref(),
            )
        }
        Command::Dehaze {
            checkpoint,
            input,
            output,
            steps,
            solver,
            lambda,
            tile,
            overlap,
            budget_mb,
            record_trajectory,
            bits,
        } => {
            settings.set("steps", steps);
            settings.set("solver", solver);
            settings.set("lambda", lambda);
            settings.set("tile", tile);
            settings.set("overlap", overlap);
            settings.set("budget_mb", budget_mb);
            cmd_dehaze(&settings, &checkpoint, &input, &output, record_trajectory.as_deref(), bits)
        }
        Command::Eval { checkpoint, data, kv } => cmd_eval(&settings, &checkpoint, &data, kv),
        Command::Bench {
            checkpoint,
            image,
            repeats,
            threads,
            kv,
            model,
        } => {
            apply_model(&mut settings, &model);
            cmd_bench(&settings, checkpoint.as_deref(), &image, repeats, threads, kv)
        }
        Command::Ablate {
            suite,
            out,
            data,
            val,
            model,
            train,
        } => {
            apply_model(&mut settings, &model);
            apply_train(&mut settings, &train);
            cmd_ablate(&settings, &suite, &out, data.as_deref(), val.as_deref())
        }
    }
}

fn apply_model(s: &mut Settings, m: &ModelFlags) {
    s.set("width", m.width);
    s.set("lut_size", m.lut_size);
    s.set("lut_mode", m.lut_mode.as_ref());
    s.set("solver", m.solver.as_ref());
    s.set("steps", m.steps);
    s.set("lambda", m.lambda);
    s.set("seed", m.seed);
}

fn apply_train(s: &mut Settings, t: &TrainFlags) {
    s.set("lr", t.lr);
    s.set("weight_decay", t.weight_decay);
    s.set("batch_size", t.batch_size);
    s.set("epochs", t.epochs);
    s.set("warmup_epochs", t.warmup_epochs);
    s.set("patience", t.patience);
    s.set("pairs", t.pairs);
    s.set("val_pairs", t.val_pairs);
    s.set("size", t.size);
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    io::load_image(path).map_err(|e| match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Pairs from `dir/hazy` and `dir/clean`, matched by file name.
pub fn load_paired(dir: &Path) -> Result<Vec<(String, Pair<f32>)>> {
    let hazy = io::list_images(dir.join("hazy"))?;
    if hazy.is_empty() {
        return Err(CliError::Data(format!("no images in {}", dir.join("hazy").display())));
    }
    hazy.into_iter()
        .map(|h| {
            let name = h.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let c = dir.join("clean").join(&name);
            if !c.exists() {
                return Err(CliError::Data(format!("missing clean counterpart {}", c.display())));
            }
            let pair = Pair {
                hazy: read_image(&h)?,
                clean: read_image(&c)?,
            };
            if pair.hazy.shape() != pair.clean.shape() {
                return Err(CliError::Data(format!("size mismatch for {name}")));
            }
            Ok((name, pair))
        })
        .collect()
}

/// Synthetic data from the preset, or directories on disk. Without a
/// validation directory every fifth pair is held out.
fn datasets(preset: &ToyPreset, data: Option<&Path>, val: Option<&Path>) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let Some(dir) = data else {
        return Ok(preset.datasets()?);
    };
    let pairs: Vec<Pair<f32>> = load_paired(dir)?.into_iter().map(|(_, p)| p).collect();
    if let Some(v) = val {
        let val_pairs = load_paired(v)?.into_iter().map(|(_, p)| p).collect();
        return Ok((Dataset { pairs }, Dataset { pairs: val_pairs }));
    }
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, p) in pairs.into_iter().enumerate() {
        if i % 5 == 4 {
            va.push(p)
        } else {
            tr.push(p)
        }
    }
    Ok((Dataset { pairs: tr }, Dataset { pairs: va }))
}

fn cmd_train(s: &Settings, data: Option<&Path>, val: Option<&Path>, out: &Path, history: Option<&Path>, lut: Option<&Path>) -> Result<()> {
    let preset = s.preset()?;
    let (train_set, val_set) = datasets(&preset, data, val)?;
    let model = DehazeModel::<f32>::new(preset.model, preset.train.seed)?;
    println!(
        "training on {} pairs, validating on {} ({} epochs, warm-up {})",
        train_set.len(),
        val_set.len(),
        preset.train.epochs,
        preset.train.warmup_epochs
    );
    let outcome = training::train(model, &train_set, &val_set, &preset.train, |r| {
        println!(
            "epoch {:>4}  train_l1 {:.6}  val_l1 {:.6}  lr {:.3e}",
            r.epoch, r.train_l1, r.val_l1, r.lr
        );
    })?;
    let mut ckpt = Checkpoint::new(outcome.best.clone());
    ckpt.optimizer = Some(OptimizerSnapshot {
        adamw: preset.train.optimizer(outcome.scheduler.lr),
        state: outcome.opt_state.clone(),
        scheduler: Some(outcome.scheduler.clone()),
    });
    ckpt.meta = TrainingMeta {
        seed: preset.train.seed,
        epoch: outcome.best_epoch,
        best_val: Some(outcome.best_val),
    };
    ckpt.save(out)?;
    if let Some(path) = lut {
        outcome.best.lut.write_cube(path)?;
    }
    println!("{}", outcome.history);
    println!(
        "best epoch {} val_l1 {:.6} -> {}",
        outcome.best_epoch,
        outcome.best_val,
        out.display()
    );
    if let Some(path) = history {
        let mut f = fs::File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut csv = String::from("epoch,train_l1,val_l1,lr\n");
        for r in &outcome.history.epochs {
            csv.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_l1, r.val_l1, r.lr));
        }
        f.write_all(csv.as_bytes()).map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(())
}

fn load_model(s: &Settings, path: &Path) -> Result<DehazeModel<f32>> {
    let mut model = Checkpoint::load(path)?.model;
    s.apply_flow(&mut model.config.flow)?;
    Ok(model)
}

fn bit_depth(bits: u8) -> Result<BitDepth> {
    match bits {
        8 => Ok(BitDepth::Eight),
        16 => Ok(BitDepth::Sixteen),
        b => Err(CliError::Usage(format!("--bits must be 8 or 16, got {b}"))),
    }
}

fn cmd_dehaze(s: &Settings, ckpt: &Path, input: &Path, output: &Path, trajectory: Option<&Path>, bits: u8) -> Result<()> {
    let depth = bit_depth(bits)?;
    let model = load_model(s, ckpt)?;
    let x = read_image(input)?;
    let plan = s.tile_plan()?.unwrap_or_default();
    let budget = s.budget_bytes()?;
    match trajectory {
        None => {
            let y = tiling::dehaze_tiled(&model, &x, &plan, budget)?;
            io::save_image(&y, output, depth)?;
        }
        Some(dir) => {
            let (y, states) = tiling::dehaze_tiled_trajectory(&model, &x, &plan, budget)?;
            fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
            io::save_image(&x, dir.join("step_000.png"), depth)?;
            for (i, st) in states.iter().enumerate() {
                io::save_image(st, dir.join(format!("step_{:03}.png", i + 1)), depth)?;
            }
            io::save_image(&y, output, depth)?;
        }
    }
    let f = model.config.flow;
    println!(
        "{} -> {} ({} x {} steps, lambda {})",
        input.display(),
        output.display(),
        f.solver,
        f.steps,
        f.lambda
    );
    Ok(())
}

fn cmd_eval(s: &Settings, ckpt: &Path, data: &Path, kv: bool) -> Result<()> {
    let model = load_model(s, ckpt)?;
    let plan = s.tile_plan()?.unwrap_or_default();
    let budget = s.budget_bytes()?;
    let (mut outputs, mut inputs) = (MetricReport::default(), MetricReport::default());
    for (name, p) in load_paired(data)? {
        let y = tiling::dehaze_tiled(&model, &p.hazy, &plan, budget)?;
        outputs.push(name.clone(), &y, &p.clean)?;
        inputs.push(name, &p.hazy, &p.clean)?;
    }
    if kv {
        println!("{}", outputs.key_values());
        println!("input_psnr={:.4}\ninput_ssim={:.6}", inputs.mean_psnr(), inputs.mean_ssim());
    } else {
        println!("{outputs}");
        println!("input mean  PSNR {:.3} dB  SSIM {:.4}", inputs.mean_psnr(), inputs.mean_ssim());
    }
    Ok(())
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Usage(format!("image size must be WIDTHxHEIGHT, got {text:?}"));
    let (w, h) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let (w, h) = (
        w.trim().parse::<usize>().map_err(|_| bad())?,
        h.trim().parse::<usize>().map_err(|_| bad())?,
    );
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn cmd_bench(s: &Settings, ckpt: Option<&Path>, image: &str, repeats: usize, threads: usize, kv: bool) -> Result<()> {
    let (w, h) = parse_size(image)?;
    if repeats == 0 || threads == 0 {
        return Err(CliError::Usage("--repeats and --threads must be positive".into()));
    }
    let model = match ckpt {
        Some(p) => load_model(s, p)?,
        None => {
            let mut cfg = ModelConfig::default();
            if let Some(v) = s.get("width")? {
                cfg.width = v;
            }
            if let Some(v) = s.get("lut_size")? {
                cfg.lut_size = v;
            }
            if let Some(v) = s.get("lut_mode")? {
                cfg.lut_mode = v;
            }
            s.apply_flow(&mut cfg.flow)?;
            DehazeModel::<f32>::new(cfg, s.get("seed")?.unwrap_or(0))?
        }
    };
    let x = Tensor::<f32>::from_fn([1, 3, h, w], |[_, c, y, x]| 0.25 + 0.5 * ((c * 7 + y * 3 + x) % 17) as f32 / 17.0);
    let report = bench::bench(&model, &x, repeats, threads)?;
    if kv {
        println!("{}", report.key_values());
    } else {
        println!("{report}");
    }
    Ok(())
}

fn cmd_ablate(s: &Settings, suite: &str, out: &Path, data: Option<&Path>, val: Option<&Path>) -> Result<()> {
    let suite: Suite = suite.parse()?;
    let preset = s.preset()?;
    let (train_set, val_set) = datasets(&preset, data, val)?;
    let report = ablation::ablate(suite, &preset, &train_set, &val_set, |row| {
        println!(
            "{:<8} {:<24} psnr {:.3}  ssim {:.4}  val_l1 {:.6}",
            row.setting.suite, row.setting.label, row.psnr, row.ssim, row.val_l1
        );
    })?;
    report.write(out)?;
    println!("{report}");
    println!("written to {}", PathBuf::from(out).join("ablation.txt").display());
    Ok(())
}
