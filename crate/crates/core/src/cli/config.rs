//! The single config tree every command reads, with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::experiments::{BaseConfig, EvalConfig};
use crate::inference::DEFAULT_PRUNE_THRESHOLD;
use crate::layer::ModelConfig;
use crate::training::{TaskSpec, TrainConfig};
use crate::verify::VerifyConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub threshold: f64,
    pub calib_samples: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_PRUNE_THRESHOLD,
            calib_samples: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub thresholds: Vec<f32>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.0, 0.25, 0.5, 0.75, 1.01],
        }
    }
}

/// Everything a run needs. `seed` and `threads` are copied into the nested
/// sections that use them when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    /// Checkpoint read by eval, prune and sweep. Defaults to
    /// `<out>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub base: BaseConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub prune: PruneConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            vocab: 32,
            d_model: 32,
            num_heads: 2,
            ffn_hidden: 64,
            trainable: crate::layer::TrainableSet::All,
            ..ModelConfig::default()
        };
        let task = TaskSpec {
            vocab: 32,
            num_queries: 8,
            ..TaskSpec::default()
        };
        Self {
            seed: 0,
            threads: 1,
            out: PathBuf::from("runs/default"),
            checkpoint: None,
            model,
            task,
            base: BaseConfig::default(),
            train: TrainConfig {
                lambda_reg: 2.0,
                batch_size: 16,
                steps: 400,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            prune: PruneConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Copies shared settings into the sections that consume them and
    /// validates the whole tree.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.train.threads = self.threads;
        self.bench.seed = self.seed;
        self.verify.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.model.validate()?;
        self.task.validate()?;
        if self.task.vocab > self.model.vocab {
            return Err(Error::Config(format!(
                "task.vocab {} exceeds model.vocab {}",
                self.task.vocab, self.model.vocab
            )));
        }
        if self.task.window != self.model.window {
            log::warn!(
                "task.window {} differs from model.window {}; the long-range guarantee refers to task.window",
                self.task.window,
                self.model.window
            );
        }
        self.train.validate()?;
        if self.base.steps > 0 && (self.base.batch_size == 0 || !(self.base.lr >= 0.0)) {
            return Err(Error::Config("base needs a positive batch size and nonnegative lr".into()));
        }
        if self.eval.samples == 0 || self.prune.calib_samples == 0 {
            return Err(Error::Config("eval.samples and prune.calib_samples must be positive".into()));
        }
        if !self.prune.threshold.is_finite() {
            return Err(Error::Config("prune.threshold must be finite".into()));
        }
        if self.sweep.thresholds.is_empty() || self.sweep.thresholds.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("sweep.thresholds must be nonempty and strictly ascending".into()));
        }
        self.bench.validate()?;
        if let Some(t) = self.verify.tiles {
            t.validate()?;
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.json"))
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot separated) inside `root`, creating tables as needed.
pub fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override path '{path}'")));
    }
    let (last, parents) = parts.split_last().expect("nonempty split");
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override '{path}': '{p}' is not a table"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// `key=value` override as given on the command line.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' must look like key=value")))?;
    set_path(root, k.trim(), parse_value(v.trim()))
}

pub fn load_table(path: Option<&Path>) -> Result<toml::Table> {
    match path {
        None => Ok(toml::Table::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Layers `table` over the defaults, so a partial section keeps the run
/// defaults for the fields it leaves out.
pub fn from_table(table: toml::Table) -> Result<RunConfig> {
    let mut base = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut base, table);
    RunConfig::deserialize(toml::Value::Table(base)).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = from_table(toml::Table::new()).unwrap().resolve().unwrap();
        assert_eq!(c, RunConfig::default().resolve().unwrap());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.lambda_reg=0.25").unwrap();
        apply_override(&mut t, "task.kind=assoc_recall").unwrap();
        apply_override(&mut t, "sweep.thresholds=[0.0, 1.01]").unwrap();
        apply_override(&mut t, "seed=7").unwrap();
        let c = from_table(t).unwrap().resolve().unwrap();
        assert_eq!(c.train.lambda_reg, 0.25);
        assert_eq!(c.task.kind, crate::training::TaskKind::AssocRecall);
        assert_eq!(c.sweep.thresholds, vec![0.0, 1.01]);
        assert_eq!((c.train.seed, c.bench.seed), (7, 7));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.lamda=1").unwrap();
        assert!(from_table(t).is_err());
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.lambda_reg=-1").unwrap();
        assert!(from_table(t).unwrap().resolve().is_err());
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
        let mut t = toml::Table::new();
        apply_override(&mut t, "seed=1").unwrap();
        assert!(apply_override(&mut t, "seed.x=1").is_err());
    }
}
