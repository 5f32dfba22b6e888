//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use scg_core::localiser::LocaliserConfig;
use scg_core::ppn::{InstanceSelection, PpnConfig};
use scg_core::trainer::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for config key `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("{0}")]
    Model(String),
}

/// Model, training and localiser settings plus input/output paths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub ppn: PpnConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub emb: Option<PathBuf>,
    pub out: Option<PathBuf>,
    explicit: BTreeSet<String>,
}

fn selection_name(s: InstanceSelection) -> &'static str {
    match s {
        InstanceSelection::Localised => "localised",
        InstanceSelection::DistanceError => "distance_error",
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { path: origin.to_string(), line: i + 1 })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Model(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Whether `key` was set by a config file or an override.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let invalid = || ConfigError::InvalidValue { key: key.to_string(), value: value.to_string() };
        let float = |v: &str| v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(invalid);
        let int = |v: &str| v.parse::<usize>().map_err(|_| invalid());
        let t = &mut self.train;
        let l = &mut t.localiser;
        match key.split_once('.') {
            Some(("ppn", field)) => {
                if !self.ppn.to_pairs().iter().any(|(k, _)| k == field) {
                    return Err(ConfigError::UnknownKey(key.to_string()));
                }
                self.ppn.set(field, value).map_err(|_| invalid())?
            }
            Some(("train", field)) => match field {
                "epochs" => t.epochs = int(value)?,
                "seed" => t.seed = value.parse().map_err(|_| invalid())?,
                "shuffle" => t.shuffle = value.parse().map_err(|_| invalid())?,
                "val_fraction" => t.val_fraction = float(value).and_then(|v| if (0.0..1.0).contains(&v) { Ok(v) } else { Err(invalid()) })?,
                "selection" => {
                    t.selection = match value {
                        "localised" => InstanceSelection::Localised,
                        "distance_error" => InstanceSelection::DistanceError,
                        _ => return Err(invalid()),
                    }
                }
                "rho_max" => t.optimiser.rho_max = float(value)?,
                "eps1" => t.optimiser.eps1 = float(value)?,
                "eps2" => t.optimiser.eps2 = float(value)?,
                "clip" => t.optimiser.clip = float(value)?,
                "decay" => t.optimiser.decay = float(value)?,
                _ => return Err(ConfigError::UnknownKey(key.to_string())),
            },
            Some(("localiser", field)) => match field {
                "cutoff" => l.cutoff = float(value)?,
                "grid_cell" => l.grid_cell = float(value).and_then(|v| if v > 0.0 { Ok(v) } else { Err(invalid()) })?,
                "tolerance" => l.tolerance = float(value)?,
                "max_iterations" => l.max_iterations = int(value)?,
                "min_anchors" => l.min_anchors = int(value)?,
                "starts" => l.starts = int(value)?,
                "reflect" => l.simplex.reflect = float(value)?,
                "expand" => l.simplex.expand = float(value)?,
                "contract" => l.simplex.contract = float(value)?,
                "shrink" => l.simplex.shrink = float(value)?,
                _ => return Err(ConfigError::UnknownKey(key.to_string())),
            },
            Some(("paths", field)) => {
                let slot = match field {
                    "data" => &mut self.data,
                    "kb" => &mut self.kb,
                    "emb" => &mut self.emb,
                    "out" => &mut self.out,
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                };
                *slot = Some(PathBuf::from(value));
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or(ConfigError::Syntax { path: "--set".into(), line: 0 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.ppn.validate().map_err(|e| ConfigError::Model(e.to_string()))?;
        if self.train.epochs == 0 {
            return Err(ConfigError::InvalidValue { key: "train.epochs".into(), value: "0".into() });
        }
        Ok(())
    }

    /// Every setting, fully resolved, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> =
            self.ppn.to_pairs().into_iter().map(|(k, v)| (format!("ppn.{k}"), v)).collect();
        let t = &self.train;
        let l: &LocaliserConfig = &t.localiser;
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("train.epochs", t.epochs.to_string());
        push("train.seed", t.seed.to_string());
        push("train.shuffle", t.shuffle.to_string());
        push("train.val_fraction", t.val_fraction.to_string());
        push("train.selection", selection_name(t.selection).to_string());
        push("train.rho_max", t.optimiser.rho_max.to_string());
        push("train.eps1", t.optimiser.eps1.to_string());
        push("train.eps2", t.optimiser.eps2.to_string());
        push("train.clip", t.optimiser.clip.to_string());
        push("train.decay", t.optimiser.decay.to_string());
        push("localiser.cutoff", l.cutoff.to_string());
        push("localiser.grid_cell", l.grid_cell.to_string());
        push("localiser.tolerance", l.tolerance.to_string());
        push("localiser.max_iterations", l.max_iterations.to_string());
        push("localiser.min_anchors", l.min_anchors.to_string());
        push("localiser.starts", l.starts.to_string());
        push("localiser.reflect", l.simplex.reflect.to_string());
        push("localiser.expand", l.simplex.expand.to_string());
        push("localiser.contract", l.simplex.contract.to_string());
        push("localiser.shrink", l.simplex.shrink.to_string());
        for (k, v) in [("data", &self.data), ("kb", &self.kb), ("emb", &self.emb), ("out", &self.out)] {
            if let Some(p) = v {
                out.push((format!("paths.{k}"), p.display().to_string()));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_is_valid() {
        let cfg = RunConfig::parse(include_str!("../configs/desk.conf"), "desk.conf").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.ppn.widths, vec![32, 64]);
        assert!(!cfg.is_explicit("ppn.input_dim"));
    }

    #[test]
    fn parses_and_resolves() {
        let cfg = RunConfig::parse(
            "# desk scale\nppn.widths = 32,64\nppn.heads=4\ntrain.epochs = 7 # short\nlocaliser.cutoff=4.5\npaths.kb = kb.tsv\n",
            "test",
        )
        .unwrap();
        assert_eq!(cfg.ppn.widths, vec![32, 64]);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.localiser.cutoff, 4.5);
        assert_eq!(cfg.kb, Some(PathBuf::from("kb.tsv")));
        assert!(cfg.is_explicit("ppn.widths"));
        assert!(!cfg.is_explicit("ppn.input_dim"));
        let again = RunConfig::parse(&cfg.to_text(), "round").unwrap();
        assert_eq!(again.to_pairs(), cfg.to_pairs());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert_eq!(RunConfig::parse("ppn.depth = 3", "t"), Err(ConfigError::UnknownKey("ppn.depth".into())));
        assert_eq!(RunConfig::parse("train.lr = 3", "t"), Err(ConfigError::UnknownKey("train.lr".into())));
        assert_eq!(RunConfig::parse("epochs = 3", "t"), Err(ConfigError::UnknownKey("epochs".into())));
        assert!(matches!(RunConfig::parse("train.epochs = many", "t"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(RunConfig::parse("ppn.heads = x", "t"), Err(ConfigError::InvalidValue { .. })));
        assert_eq!(RunConfig::parse("just words", "f.conf"), Err(ConfigError::Syntax { path: "f.conf".into(), line: 1 }));
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["train.seed=4".into()]).is_ok());
        assert_eq!(cfg.train.seed, 4);
        assert!(cfg.apply_overrides(&["bogus".into()]).is_err());
    }
}
