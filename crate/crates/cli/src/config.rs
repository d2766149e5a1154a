//! Plain `key = value` settings: defaults, then a config file, then flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use dehazeflow::flow::SolverKind;
use dehazeflow::model::LutMode;
use dehazeflow::tiling::TilePlan;
use dehazeflow::training::ToyPreset;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "width",
    "lut_size",
    "lut_mode",
    "c_max",
    "solver",
    "steps",
    "lambda",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "warmup_epochs",
    "patience",
    "factor",
    "seed",
    "pairs",
    "val_pairs",
    "size",
    "data_seed",
    "tile",
    "overlap",
    "budget_mb",
];

/// Raw string values keyed by setting name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(CliError::Usage(format!("{origin}:{}: unknown key {k:?}", i + 1)));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Flags win over the file.
    pub fn set(&mut self, key: &str, value: Option<impl ToString>) {
        debug_assert!(KEYS.contains(&key));
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("bad value {v:?} for {key}: {e}")))
            })
            .transpose()
    }

    /// Toy preset with every present key applied.
    pub fn preset(&self) -> Result<ToyPreset, CliError> {
        let mut p = ToyPreset::default();
        macro_rules! apply {
            ($key:literal, $target:expr) => {
                if let Some(v) = self.get($key)? {
                    $target = v;
                }
            };
        }
        apply!("width", p.model.width);
        apply!("lut_size", p.model.lut_size);
        apply!("c_max", p.model.c_max);
        apply!("lr", p.train.lr);
        apply!("weight_decay", p.train.weight_decay);
        apply!("batch_size", p.train.batch_size);
        apply!("epochs", p.train.epochs);
        apply!("warmup_epochs", p.train.warmup_epochs);
        apply!("patience", p.train.patience);
        apply!("factor", p.train.factor);
        apply!("seed", p.train.seed);
        apply!("pairs", p.train_pairs);
        apply!("val_pairs", p.val_pairs);
        apply!("size", p.size);
        apply!("data_seed", p.data_seed);
        if let Some(m) = self.get::<LutMode>("lut_mode")? {
            p.model.lut_mode = m;
        }
        self.apply_flow(&mut p.model.flow)?;
        p.model.flow.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        p.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        p.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(p)
    }

    pub fn apply_flow(&self, flow: &mut dehazeflow::flow::FlowConfig) -> Result<(), CliError> {
        if let Some(s) = self.get::<SolverKind>("solver")? {
            flow.solver = s;
        }
        if let Some(n) = self.get("steps")? {
            flow.steps = n;
        }
        if let Some(l) = self.get("lambda")? {
            flow.lambda = l;
        }
        flow.validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn tile_plan(&self) -> Result<Option<TilePlan>, CliError> {
        let Some(tile) = self.get::<usize>("tile")? else {
            return Ok(None);
        };
        let overlap = self
            .get("overlap")?
            .unwrap_or(dehazeflow::tiling::DEFAULT_OVERLAP.min(tile.saturating_sub(1)));
        TilePlan::new(tile, overlap).map(Some).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn budget_bytes(&self) -> Result<u64, CliError> {
        Ok(self.get::<u64>("budget_mb")?.unwrap_or(2048) << 20)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut s = Settings::parse("# toy\nwidth = 4\nsolver=euler\n\nepochs = 3 # short\n", "t").unwrap();
        s.set("epochs", Some(7));
        s.set("lambda", None::<f64>);
        let p = s.preset().unwrap();
        assert_eq!(p.model.width, 4);
        assert_eq!(p.model.flow.solver, SolverKind::Euler);
        assert_eq!(p.train.epochs, 7);
        assert_eq!(p.model.flow.lambda, 0.5);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(Settings::parse("widht = 4", "t"), Err(CliError::Usage(_))));
        assert!(matches!(Settings::parse("width 4", "t"), Err(CliError::Usage(_))));
        let s = Settings::parse("steps = many", "t").unwrap();
        assert!(matches!(s.preset(), Err(CliError::Usage(_))));
        let s = Settings::parse("steps = 0", "t").unwrap();
        assert!(s.preset().is_err());
    }
}
