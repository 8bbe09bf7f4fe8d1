//! Experiment configuration: flat `key = value` lines, `#` comments.
//!
//! ```text
//! seed = 42
//! synthetic.feature_dim = 32
//! synthetic.scale = 0.2
//! synthetic.level_scales = 2.0, 1.0, 0.5
//! synthetic.noise_sigma = 1.0
//! strategy = leaf-node
//! strategy = leaky-dense
//! train.epochs = 60
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::AucPopulation;
use crate::nnet::LrSchedule;
use crate::strategies::{ModelConfig, PassDown, StrategyKind, TrainConfig};
use crate::volprep::HU_WINDOW;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    /// Fraction of the taxonomy's count column, used unless explicit counts are given.
    pub scale: f64,
    pub counts: BTreeMap<String, usize>,
    pub level_scales: Vec<f64>,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic(SyntheticSpec),
    Volumes { dir: PathBuf, centroids: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepConfig {
    pub hu_window: (f64, f64),
    pub pool_block: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `None` selects the built-in pulmonary taxonomy.
    pub taxonomy: Option<PathBuf>,
    pub source: DataSource,
    pub strategies: Vec<StrategyKind>,
    pub widths: Vec<usize>,
    pub dense_backbone: bool,
    pub hidden: usize,
    pub pass_down: PassDown,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub folds: usize,
    pub population: AucPopulation,
    pub roc: bool,
    pub prep: PrepConfig,
    pub gradcheck: GradCheckConfig,
    pub output: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            widths: self.widths.clone(),
            dense_backbone: self.dense_backbone,
            hidden: self.hidden,
            pass_down: self.pass_down,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            seed: self.seed,
            folds: self.folds,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let defaults = ModelConfig::new(1);
        let train = TrainConfig::default();
        let mut cfg = ExperimentConfig {
            taxonomy: None,
            source: DataSource::Csv(PathBuf::new()),
            strategies: Vec::new(),
            widths: defaults.widths,
            dense_backbone: defaults.dense_backbone,
            hidden: defaults.hidden,
            pass_down: defaults.pass_down,
            epochs: train.epochs,
            batch_size: train.batch_size,
            schedule: train.schedule,
            folds: train.folds,
            population: AucPopulation::All,
            roc: true,
            prep: PrepConfig {
                hu_window: HU_WINDOW,
                pool_block: 8,
            },
            gradcheck: GradCheckConfig {
                step: 1e-5,
                tolerance: 1e-4,
                batch: 8,
            },
            output: base.join("out"),
            seed: 0,
        };
        let mut synthetic = SyntheticSpec {
            feature_dim: 32,
            scale: 0.2,
            counts: BTreeMap::new(),
            level_scales: vec![2.0, 1.0, 0.5],
            noise_sigma: 1.0,
        };
        let mut csv: Option<PathBuf> = None;
        let mut volumes: Option<PathBuf> = None;
        let mut centroids: Option<PathBuf> = None;
        let mut uses_synthetic = false;
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::ConfigLine { line, message };
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            if value.is_empty() {
                return Err(err(format!("`{key}` has no value")));
            }
            if key != "strategy" {
                if let Some(prev) = seen.insert(key.to_string(), line) {
                    return Err(err(format!("`{key}` already set on line {prev}")));
                }
            }
            let path = || base.join(value);
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("`{key}`: `{v}` is not a number")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| err(format!("`{key}`: `{v}` is not a non-negative integer")));
            let list = |v: &'_ str| -> Vec<String> { v.split(',').map(|x| x.trim().to_string()).collect() };
            let boolean = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(err(format!("`{key}`: expected true or false, got `{v}`"))),
            };

            match key {
                "seed" => cfg.seed = value.parse().map_err(|_| err(format!("`seed`: `{value}` is not a 64-bit integer")))?,
                "taxonomy" => cfg.taxonomy = (value != "builtin").then(path),
                "output" => cfg.output = path(),
                "dataset" => csv = Some(path()),
                "volumes" => volumes = Some(path()),
                "centroids" => centroids = Some(path()),
                "synthetic.feature_dim" => {
                    uses_synthetic = true;
                    synthetic.feature_dim = int(value)?;
                }
                "synthetic.scale" => {
                    uses_synthetic = true;
                    synthetic.scale = num(value)?;
                }
                "synthetic.level_scales" => {
                    uses_synthetic = true;
                    synthetic.level_scales = list(value).iter().map(|v| num(v)).collect::<Result<_>>()?;
                }
                "synthetic.noise_sigma" => {
                    uses_synthetic = true;
                    synthetic.noise_sigma = num(value)?;
                }
                k if k.starts_with("synthetic.count.") => {
                    uses_synthetic = true;
                    synthetic.counts.insert(k["synthetic.count.".len()..].to_string(), int(value)?);
                }
                "strategy" => cfg.strategies.push(value.parse().map_err(|e: Error| err(e.to_string()))?),
                "backbone.widths" => cfg.widths = list(value).iter().map(|v| int(v)).collect::<Result<_>>()?,
                "backbone.dense" => cfg.dense_backbone = boolean(value)?,
                "head.hidden" => cfg.hidden = int(value)?,
                "head.pass_down" => {
                    cfg.pass_down = match value {
                        "hidden" => PassDown::Hidden,
                        "logits" => PassDown::Logits,
                        _ => return Err(err(format!("`head.pass_down`: expected hidden or logits, got `{value}`"))),
                    }
                }
                "train.epochs" => cfg.epochs = int(value)?,
                "train.batch" => cfg.batch_size = int(value)?,
                "train.lr" => cfg.schedule.initial = num(value)?,
                "train.lr_factor" => cfg.schedule.factor = num(value)?,
                "train.lr_period" => cfg.schedule.period = int(value)?,
                "split.folds" => cfg.folds = int(value)?,
                "eval.population" => cfg.population = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "eval.roc" => cfg.roc = boolean(value)?,
                "prep.hu_window" => match list(value).as_slice() {
                    [lo, hi] => cfg.prep.hu_window = (num(lo)?, num(hi)?),
                    _ => return Err(err("`prep.hu_window` needs two values".into())),
                },
                "prep.pool_block" => cfg.prep.pool_block = int(value)?,
                "gradcheck.step" => cfg.gradcheck.step = num(value)?,
                "gradcheck.tolerance" => cfg.gradcheck.tolerance = num(value)?,
                "gradcheck.batch" => cfg.gradcheck.batch = int(value)?,
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }

        let sources = usize::from(csv.is_some()) + usize::from(uses_synthetic) + usize::from(volumes.is_some() || centroids.is_some());
        cfg.source = match (csv, volumes, centroids) {
            _ if sources > 1 => {
                return Err(Error::Config(
                    "exactly one dataset source allowed: `dataset`, `synthetic.*` or `volumes` + `centroids`".into(),
                ))
            }
            (Some(p), _, _) => DataSource::Csv(p),
            (None, Some(dir), Some(centroids)) => DataSource::Volumes { dir, centroids },
            (None, Some(_), None) | (None, None, Some(_)) => {
                return Err(Error::Config("`volumes` and `centroids` must be given together".into()))
            }
            (None, None, None) => DataSource::Synthetic(synthetic),
        };
        if cfg.strategies.is_empty() {
            cfg.strategies = StrategyKind::ALL.to_vec();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("backbone.widths must be a non-empty list of positive integers");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch must be at least 1");
        }
        if !(self.schedule.initial > 0.0 && self.schedule.factor > 0.0 && self.schedule.period > 0) {
            return bad("learning-rate schedule values must be positive");
        }
        if self.folds < 2 {
            return bad("split.folds must be at least 2");
        }
        if self.prep.pool_block == 0 {
            return bad("prep.pool_block must be positive");
        }
        if self.gradcheck.step.is_nan() || self.gradcheck.step <= 0.0 || self.gradcheck.batch == 0 {
            return bad("gradcheck.step and gradcheck.batch must be positive");
        }
        if let DataSource::Synthetic(s) = &self.source {
            if s.feature_dim == 0 {
                return bad("synthetic.feature_dim must be positive");
            }
            if !(s.noise_sigma >= 0.0 && s.scale >= 0.0) {
                return bad("synthetic.noise_sigma and synthetic.scale must be non-negative");
            }
        }
        let mut seen = Vec::new();
        for s in &self.strategies {
            if seen.contains(s) {
                return Err(Error::Config(format!("strategy `{s}` listed twice")));
            }
            seen.push(*s);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/exp"))
    }

    #[test]
    fn defaults() {
        let c = parse("# nothing\n\n").unwrap();
        assert_eq!(c.strategies, StrategyKind::ALL);
        assert_eq!((c.epochs, c.batch_size, c.folds), (200, 16, 5));
        assert_eq!(c.widths, [64, 32, 32]);
        assert_eq!(c.hidden, 32);
        assert_eq!(c.output, Path::new("/exp/out"));
        assert!(matches!(c.source, DataSource::Synthetic(ref s) if s.feature_dim == 32 && s.scale == 0.2));
    }

    #[test]
    fn full_file() {
        let c = parse(
            "seed = 42  # root\n\
             dataset = data/d.csv\n\
             strategy = dense\n\
             strategy = leaf-node\n\
             backbone.widths = 16, 8\n\
             backbone.dense = false\n\
             head.hidden = 0\n\
             head.pass_down = logits\n\
             train.epochs = 60\n\
             train.lr_factor = 0.5\n\
             eval.population = applicable\n\
             prep.hu_window = -1000, 300\n",
        )
        .unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.source, DataSource::Csv(PathBuf::from("/exp/data/d.csv")));
        assert_eq!(c.strategies, [StrategyKind::Dense, StrategyKind::LeafNode]);
        assert_eq!(c.widths, [16, 8]);
        assert!(!c.dense_backbone);
        assert_eq!(c.pass_down, PassDown::Logits);
        assert_eq!(c.schedule.factor, 0.5);
        assert_eq!(c.population, AucPopulation::Applicable);
        assert_eq!(c.prep.hu_window, (-1000.0, 300.0));
        assert_eq!(c.train_config().epochs, 60);
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse("seed = 1\nbogus = 3\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 2, .. }), "{e}");
        let e = parse("\n\nstrategy = fancy\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 3, .. }));
        let e = parse("train.epochs = -1\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 1, .. }));
        let e = parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(e.to_string().contains("line 1"));
        assert!(parse("no equals sign\n").is_err());
    }

    #[test]
    fn source_exclusivity() {
        assert!(parse("dataset = a.csv\nsynthetic.scale = 0.1\n").is_err());
        assert!(parse("volumes = v\n").is_err());
        let c = parse("volumes = v\ncentroids = c.csv\n").unwrap();
        assert!(matches!(c.source, DataSource::Volumes { .. }));
        assert!(parse("strategy = dense\nstrategy = dense\n").is_err());
    }
}
