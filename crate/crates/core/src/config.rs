//! Flat `key = value` run configuration. Later assignments win, so command
//! line flags are applied after the file.

use std::fs;
use std::path::{Path, PathBuf};

use crate::decoder::Geometry;
use crate::encoder::AttentionMode;
use crate::error::{Error, Result};
use crate::model::Ablation;
use crate::train::TrainingConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub kg: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Answers printed per query.
    pub top_n: usize,
    /// First view withheld from training in the unobserved-view protocol.
    pub pivot: Option<usize>,
    pub queries_per_view: usize,
    /// Cutoff for ranking views against the answers' witnessing views.
    pub view_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            training: TrainingConfig::default(),
            kg: None,
            queries: None,
            checkpoint: None,
            out: None,
            top_n: 10,
            pivot: None,
            queries_per_view: 100,
            view_k: 5,
        }
    }
}

pub const KEYS: [&str; 25] = [
    "learning_rate",
    "steps",
    "batch_size",
    "k",
    "seed",
    "eval_interval",
    "pool_per_structure",
    "monitor_per_structure",
    "d",
    "layers",
    "heads",
    "geometry",
    "gamma",
    "alpha",
    "ablation",
    "post_hoc_mask",
    "attention",
    "kg",
    "queries",
    "checkpoint",
    "out",
    "top_n",
    "pivot",
    "queries_per_view",
    "view_k",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Applies one assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.training;
        let m = &mut t.model;
        match key {
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "k" => t.k = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "pool_per_structure" => t.pool_per_structure = parse(key, value)?,
            "monitor_per_structure" => t.monitor_per_structure = parse(key, value)?,
            "d" => m.d = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "geometry" => m.geometry = value.parse()?,
            "gamma" => m.gamma = parse(key, value)?,
            "alpha" => m.alpha = parse(key, value)?,
            "ablation" => m.ablation = value.parse()?,
            "post_hoc_mask" => m.post_hoc_mask = parse(key, value)?,
            "attention" => {
                m.attention = match value {
                    "dense" => AttentionMode::Dense,
                    "sparse" => AttentionMode::Sparse,
                    "auto" => AttentionMode::Auto,
                    _ => return Err(Error::Config(format!("attention: unknown mode {value:?}"))),
                }
            }
            "kg" => self.kg = Some(value.into()),
            "queries" => self.queries = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "top_n" => self.top_n = parse(key, value)?,
            "pivot" => self.pivot = Some(parse(key, value)?),
            "queries_per_view" => self.queries_per_view = parse(key, value)?,
            "view_k" => self.view_k = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(&fs::read_to_string(path)?)?;
        Ok(config)
    }

    pub fn geometry(&self) -> Geometry {
        self.training.model.geometry
    }

    pub fn ablation(&self) -> Ablation {
        self.training.model.ablation
    }

    /// A required path, with the flag named in the error.
    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("--{flag} is required")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_apply_and_flags_override() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nsteps = 50\ngeometry=box\n\nablation = no-residual\n")
            .unwrap();
        assert_eq!(c.training.steps, 50);
        assert_eq!(c.geometry(), Geometry::Box);
        assert_eq!(c.ablation(), Ablation::NoResidual);
        c.set("steps", "7").unwrap();
        assert_eq!(c.training.steps, 7);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail_with_line_numbers() {
        let mut c = RunConfig::default();
        let err = c.apply_text("steps = 5\nlearning_rat = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(c.apply_text("d = sixty").is_err());
        assert!(c.apply_text("no equals sign").is_err());
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let samples = [
            ("geometry", "vector"),
            ("ablation", "none"),
            ("attention", "dense"),
            ("post_hoc_mask", "true"),
            ("learning_rate", "0.01"),
            ("gamma", "12"),
            ("alpha", "0.2"),
        ];
        for key in KEYS {
            let value = samples
                .iter()
                .find(|(k, _)| *k == key)
                .map_or("3", |(_, v)| v);
            RunConfig::default().set(key, value).unwrap();
        }
    }
}
