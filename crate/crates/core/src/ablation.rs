//! The three component ablations: LUT mode, LUT weight and solver.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::SolverKind;
use crate::model::{DehazeModel, LutMode};
use crate::training::{score, train, Dataset, EpochRecord, ToyPreset};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Lut,
    Lambda,
    Solver,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lut" => Ok(Suite::Lut),
            "lambda" => Ok(Suite::Lambda),
            "solver" => Ok(Suite::Solver),
            "all" => Ok(Suite::All),
            other => Err(Error::UnknownSuite(other.to_string())),
        }
    }
}

pub const LAMBDAS: [f64; 3] = [0.1, 0.5, 1.0];

/// One configuration varied from the base preset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Setting {
    pub suite: &'static str,
    pub label: String,
    pub lut_mode: LutMode,
    pub lambda: f64,
    pub solver: SolverKind,
}

impl Suite {
    pub fn settings(self, base: &ToyPreset) -> Vec<Setting> {
        let flow = base.model.flow;
        let make = |suite, label: String, lut_mode, lambda, solver| Setting {
            suite,
            label,
            lut_mode,
            lambda,
            solver,
        };
        match self {
            Suite::Lut => LutMode::ALL
                .iter()
                .map(|&m| make("lut", m.name().to_string(), m, flow.lambda, flow.solver))
                .collect(),
            Suite::Lambda => LAMBDAS
                .iter()
                .map(|&l| make("lambda", format!("{l}"), LutMode::Learnable, l, flow.solver))
                .collect(),
            Suite::Solver => SolverKind::ALL
                .iter()
                .map(|&s| make("solver", s.name().to_string(), base.model.lut_mode, flow.lambda, s))
                .collect(),
            Suite::All => [Suite::Lut, Suite::Lambda, Suite::Solver]
                .iter()
                .flat_map(|s| s.settings(base))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: Setting,
    pub psnr: f64,
    pub ssim: f64,
    pub val_l1: f64,
    pub lut_checksum_before: String,
    pub lut_checksum_after: String,
}

impl AblationRow {
    pub fn grid_changed(&self) -> bool {
        self.lut_checksum_before != self.lut_checksum_after
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub rows: Vec<AblationRow>,
}

/// Trains the base preset with `setting` applied and scores the best model
/// on `val`. Every setting starts from the same seeded initialisation.
pub fn run_setting(
    base: &ToyPreset,
    setting: &Setting,
    train_set: &Dataset<f32>,
    val_set: &Dataset<f32>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<AblationRow> {
    let mut cfg = base.model;
    cfg.lut_mode = setting.lut_mode;
    cfg.flow.lambda = setting.lambda;
    cfg.flow.solver = setting.solver;
    let model = DehazeModel::<f32>::new(cfg, base.train.seed)?;
    let before = model.lut.checksum();
    let out = train(model, train_set, val_set, &base.train, on_epoch)?;
    let (scores, _) = score(&out.best, val_set)?;
    Ok(AblationRow {
        setting: setting.clone(),
        psnr: scores.mean_psnr(),
        ssim: scores.mean_ssim(),
        val_l1: out.best_val,
        lut_checksum_before: before,
        lut_checksum_after: out.last.lut.checksum(),
    })
}

pub fn ablate(
    suite: Suite,
    base: &ToyPreset,
    train_set: &Dataset<f32>,
    val_set: &Dataset<f32>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for s in suite.settings(base) {
        let row = run_setting(base, &s, train_set, val_set, |_| {})?;
        on_row(&row);
        rows.push(row);
    }
    let mut input = crate::metrics::MetricReport::default();
    for (i, p) in val_set.pairs.iter().enumerate() {
        input.push(format!("{i}"), &p.hazy, &p.clean)?;
    }
    Ok(AblationReport {
        input_psnr: input.mean_psnr(),
        input_ssim: input.mean_ssim(),
        rows,
    })
}

impl AblationReport {
    /// Validation L1 of RK4 and Euler when both ran.
    pub fn solver_ordering(&self) -> Option<(f64, f64)> {
        let find = |k: SolverKind| {
            self.rows
                .iter()
                .find(|r| r.setting.suite == "solver" && r.setting.solver == k)
                .map(|r| r.val_l1)
        };
        Some((find(SolverKind::Rk4)?, find(SolverKind::Euler)?))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.txt"), format!("{self}\n"))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(dir.join("ablation.json"), json)?;
        Ok(())
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:<10} {:>9} {:>7} {:>9}  {:<16} grid",
            "suite", "setting", "PSNR(dB)", "SSIM", "val L1", "lut checksum"
        )?;
        writeln!(
            f,
            "{:<8} {:<10} {:>9.3} {:>7.4} {:>9}  {:<16} -",
            "input", "hazy", self.input_psnr, self.input_ssim, "-", "-"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:<10} {:>9.3} {:>7.4} {:>9.5}  {:<16} {}",
                r.setting.suite,
                r.setting.label,
                r.psnr,
                r.ssim,
                r.val_l1,
                &r.lut_checksum_after[..16],
                if r.grid_changed() { "updated" } else { "frozen" }
            )?;
        }
        match self.solver_ordering() {
            Some((rk4, euler)) => write!(
                f,
                "solver ordering: rk4 val L1 {rk4:.5} vs euler {euler:.5} ({})",
                if rk4 <= euler { "rk4 >= euler" } else { "euler ahead" }
            ),
            None => write!(f, "solver ordering: not run"),
        }
    }
}
