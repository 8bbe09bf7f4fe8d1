//! Commands behind the `hiertax` binary.
//!
//! Every command reads an [`ExperimentConfig`], writes its outputs into the
//! output directory and records the resolved settings in `manifest.txt`.
//! Outputs contain no timestamps, so a repeated run with the same config and
//! seed reproduces them byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{generate_synthetic, stratified_split, Dataset, GeneratorConfig, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, AucPopulation, Report};
use crate::nnet::{grad_check, GradCheckReport};
use crate::rng::substream_seed;
use crate::strategies::{self, BatchObjective, Model, NodeProbs, StrategyKind, TrainOutcome};
use crate::taxonomy::Taxonomy;
use crate::volprep::{preprocess, Centroid, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gen,
    Split,
    Prep,
    Train,
    Eval,
    Compare,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Split => "split",
            Command::Prep => "prep",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Compare => "compare",
            Command::Gradcheck => "gradcheck",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Command::Gen,
            Command::Split,
            Command::Prep,
            Command::Train,
            Command::Eval,
            Command::Compare,
            Command::Gradcheck,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub population: Option<AucPopulation>,
    pub parallel: bool,
}

/// Substream purposes that feed an experiment, in the order they are used.
const SUBSTREAMS: [&str; 5] = [
    "synthetic.prototypes",
    "synthetic.noise",
    "split.shuffle",
    "train.init",
    "train.shuffle",
];

/// One trained and evaluated strategy.
#[derive(Clone, Debug)]
pub struct StrategyRun {
    pub kind: StrategyKind,
    pub outcome: TrainOutcome,
    pub report: Report,
    pub probs: Vec<NodeProbs>,
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub taxonomy: Arc<Taxonomy>,
}

pub fn run(cmd: Command, config_path: &Path, opts: &RunOptions) -> Result<()> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if let Some(out) = &opts.out {
        config.output = out.clone();
    }
    if let Some(p) = opts.population {
        config.population = p;
    }
    let exp = Experiment::new(config)?;
    exp.execute(cmd, opts.parallel)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let taxonomy = match &config.taxonomy {
            Some(p) => Taxonomy::parse(&read_to_string(p)?)?,
            None => Taxonomy::pulmonary_radpath(),
        };
        Ok(Self {
            config,
            taxonomy: Arc::new(taxonomy),
        })
    }

    pub fn execute(&self, cmd: Command, parallel: bool) -> Result<()> {
        let out = &self.config.output;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write(&out.join("manifest.txt"), self.manifest(cmd))?;
        match cmd {
            Command::Gen => {
                let DataSource::Synthetic(_) = &self.config.source else {
                    return Err(Error::Config("`gen` needs a synthetic dataset source".into()));
                };
                write(&out.join("dataset.csv"), self.load_dataset()?.to_csv())
            }
            Command::Split => write(&out.join("dataset.csv"), self.split_dataset()?.to_csv()),
            Command::Prep => {
                let DataSource::Volumes { .. } = &self.config.source else {
                    return Err(Error::Config("`prep` needs `volumes` and `centroids`".into()));
                };
                write(&out.join("dataset.csv"), self.load_dataset()?.to_csv())
            }
            Command::Train => {
                let d = self.split_dataset()?;
                write(&out.join("dataset.csv"), d.to_csv())?;
                for &kind in &self.config.strategies {
                    let outcome = self.train(&d, kind)?;
                    self.write_training(&outcome)?;
                }
                Ok(())
            }
            Command::Eval => {
                let d = self.split_dataset()?;
                let mut rows = Vec::new();
                for &kind in &self.config.strategies {
                    let path = out.join(format!("model_{kind}.bin"));
                    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    let model = Model::from_checkpoint(self.taxonomy.clone(), &bytes)?;
                    let (report, probs) = metrics::evaluate(&model, &d, self.config.folds, self.config.population)?;
                    self.write_evaluation(&d, kind, &report, &probs)?;
                    rows.push((kind, report));
                }
                self.write_tables(&rows)
            }
            Command::Compare => {
                let d = self.split_dataset()?;
                write(&out.join("dataset.csv"), d.to_csv())?;
                let (runs, failure) = self.compare(&d, parallel);
                for r in &runs {
                    self.write_training(&r.outcome)?;
                    self.write_evaluation(&d, r.kind, &r.report, &r.probs)?;
                }
                let rows: Vec<(StrategyKind, Report)> = runs.into_iter().map(|r| (r.kind, r.report)).collect();
                self.write_tables(&rows)?;
                match failure {
                    Some(e) => Err(e),
                    None => Ok(()),
                }
            }
            Command::Gradcheck => {
                let d = self.split_dataset()?;
                let mut text = String::from("strategy,max_rel_err,worst_param,num_params,pass\n");
                let mut failed = Vec::new();
                for &kind in &self.config.strategies {
                    let r = self.grad_check(&d, kind)?;
                    let pass = r.max_rel_err <= self.config.gradcheck.tolerance;
                    log::info!("gradcheck {kind}: max rel err {:.3e} over {} parameters", r.max_rel_err, r.num_params);
                    let _ = writeln!(text, "{kind},{:e},{},{},{pass}", r.max_rel_err, r.worst_param, r.num_params);
                    if !pass {
                        failed.push(kind.to_string());
                    }
                }
                write(&out.join("gradcheck.csv"), text)?;
                if failed.is_empty() {
                    Ok(())
                } else {
                    Err(Error::Training(format!("gradient check failed for {}", failed.join(", "))))
                }
            }
        }
    }

    /// Dataset from the configured source, split as stored.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.config.source {
            DataSource::Csv(p) => Dataset::from_csv(self.taxonomy.clone(), &read_to_string(p)?),
            DataSource::Synthetic(s) => {
                let leaf_counts = if s.counts.is_empty() {
                    GeneratorConfig::counts_from_taxonomy(&self.taxonomy, s.scale)?
                } else {
                    s.counts.clone()
                };
                generate_synthetic(
                    self.taxonomy.clone(),
                    &GeneratorConfig {
                        feature_dim: s.feature_dim,
                        leaf_counts,
                        level_scales: s.level_scales.clone(),
                        noise_sigma: s.noise_sigma,
                        seed: self.config.seed,
                    },
                )
            }
            DataSource::Volumes { dir, centroids } => self.prep_volumes(dir, centroids),
        }
    }

    /// Dataset with subset assignments; existing assignments are kept.
    pub fn split_dataset(&self) -> Result<Dataset> {
        let d = self.load_dataset()?;
        if d.has_splits() {
            Ok(d)
        } else {
            stratified_split(&d, self.config.folds, self.config.seed)
        }
    }

    pub fn train(&self, d: &Dataset, kind: StrategyKind) -> Result<TrainOutcome> {
        log::info!("training {kind} for {} epochs", self.config.epochs);
        let outcome = strategies::train(d, kind, &self.config.model_config(d.feature_dim()), &self.config.train_config())?;
        if let Some(last) = outcome.history.last() {
            log::info!("{kind}: final training loss {:.6}", last.loss);
        }
        Ok(outcome)
    }

    pub fn train_and_evaluate(&self, d: &Dataset, kind: StrategyKind) -> Result<StrategyRun> {
        let outcome = self.train(d, kind)?;
        let (report, probs) = metrics::evaluate(&outcome.model, d, self.config.folds, self.config.population)?;
        Ok(StrategyRun {
            kind,
            outcome,
            report,
            probs,
        })
    }

    /// Train and evaluate every configured strategy. Runs finished before a
    /// failure are returned alongside the first error.
    pub fn compare(&self, d: &Dataset, parallel: bool) -> (Vec<StrategyRun>, Option<Error>) {
        let results: Vec<Result<StrategyRun>> = if parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .config
                    .strategies
                    .iter()
                    .map(|&kind| s.spawn(move || self.train_and_evaluate(d, kind)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Training("worker thread panicked".into()))))
                    .collect()
            })
        } else {
            let mut results = Vec::new();
            for &kind in &self.config.strategies {
                let r = self.train_and_evaluate(d, kind);
                let failed = r.is_err();
                results.push(r);
                if failed {
                    break;
                }
            }
            results
        };
        let mut runs = Vec::new();
        let mut failure = None;
        for r in results {
            match r {
                Ok(run) => runs.push(run),
                Err(e) => {
                    log::error!("{e}");
                    failure.get_or_insert(e);
                }
            }
        }
        (runs, failure)
    }

    /// Gradient check of a freshly initialized model on the first training batch.
    pub fn grad_check(&self, d: &Dataset, kind: StrategyKind) -> Result<GradCheckReport> {
        let train = d.train_samples(self.config.folds);
        let pool = if train.is_empty() { d.samples().iter().collect() } else { train };
        let batch: Vec<&Sample> = pool.into_iter().take(self.config.gradcheck.batch).collect();
        let mut model = Model::new(self.taxonomy.clone(), kind, self.config.model_config(d.feature_dim()), self.config.seed)?;
        let mut objective = BatchObjective::new(&mut model, &batch)?;
        grad_check(&mut objective, self.config.gradcheck.step)
    }

    fn write_training(&self, outcome: &TrainOutcome) -> Result<()> {
        let out = &self.config.output;
        let kind = outcome.model.kind();
        write(&out.join(format!("model_{kind}.bin")), outcome.model.to_checkpoint())?;
        write(&out.join(format!("history_{kind}.csv")), strategies::history_csv(&outcome.history))
    }

    fn write_evaluation(&self, d: &Dataset, kind: StrategyKind, report: &Report, probs: &[NodeProbs]) -> Result<()> {
        let out = &self.config.output;
        let t = &self.taxonomy;
        write(&out.join(format!("report_{kind}.csv")), metrics::report_csv(t, report))?;
        if self.config.roc {
            let leaves: Vec<usize> = d.test_samples(self.config.folds).iter().map(|s| s.leaf).collect();
            for n in &report.nodes {
                let points = metrics::node_roc(t, &leaves, probs, n.node, report.population);
                let name = format!("roc_{kind}_{}.csv", t.tag(n.node));
                write(&out.join(name), metrics::roc_csv(&points))?;
            }
        }
        Ok(())
    }

    fn write_tables(&self, rows: &[(StrategyKind, Report)]) -> Result<()> {
        let out = &self.config.output;
        let named: Vec<(&str, &Report)> = rows.iter().map(|(k, r)| (k.display_name(), r)).collect();
        write(&out.join("table2.txt"), metrics::table2(&named))?;
        write(&out.join("table3.txt"), metrics::table3(&named))
    }

    fn prep_volumes(&self, dir: &Path, centroids: &Path) -> Result<Dataset> {
        let table = read_centroids(&read_to_string(centroids)?)?;
        let mut ids = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|x| x == "vol") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();

        let mut problems = Vec::new();
        for id in &ids {
            match table.iter().find(|c| &c.id == id) {
                None => problems.push(format!("{id}.vol: no centroid")),
                Some(c) if c.leaf.is_none() => problems.push(format!("{id}: centroid has no leaf label")),
                Some(_) => {}
            }
        }
        for c in &table {
            if !ids.contains(&c.id) {
                problems.push(format!("{}: no volume file", c.id));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Data(format!("volume/centroid mismatch:\n  {}", problems.join("\n  "))));
        }

        let mut samples = Vec::with_capacity(ids.len());
        for id in &ids {
            let c = table.iter().find(|c| &c.id == id).expect("checked above");
            let vol = Volume::read(&dir.join(format!("{id}.vol")))?;
            let features = preprocess(&vol, &c.centroid, self.config.prep.hu_window, self.config.prep.pool_block)
                .map_err(|e| Error::Volume(format!("{id}: {e}")))?;
            let leaf = self.taxonomy.index_of(c.leaf.as_deref().expect("checked above"))?;
            samples.push(Sample {
                id: id.clone(),
                features,
                leaf,
                split: None,
            });
        }
        let dim = samples.first().map_or(0, |s| s.features.len());
        Dataset::new(self.taxonomy.clone(), samples, dim)
    }

    pub fn manifest(&self, cmd: Command) -> String {
        let c = &self.config;
        let mut m = String::new();
        let _ = writeln!(m, "hiertax {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(m, "command = {}", cmd.name());
        let _ = writeln!(m, "seed = {}", c.seed);
        let tax = c.taxonomy.as_ref().map_or_else(|| "builtin".to_string(), |p| p.display().to_string());
        let _ = writeln!(m, "taxonomy = {tax}");
        let _ = writeln!(m, "taxonomy.fingerprint = {:016x}", self.taxonomy.fingerprint());
        match &c.source {
            DataSource::Csv(p) => {
                let _ = writeln!(m, "dataset = {}", p.display());
            }
            DataSource::Synthetic(s) => {
                let _ = writeln!(m, "synthetic.feature_dim = {}", s.feature_dim);
                if s.counts.is_empty() {
                    let _ = writeln!(m, "synthetic.scale = {}", s.scale);
                }
                for (tag, n) in &s.counts {
                    let _ = writeln!(m, "synthetic.count.{tag} = {n}");
                }
                let _ = writeln!(m, "synthetic.level_scales = {}", join(&s.level_scales));
                let _ = writeln!(m, "synthetic.noise_sigma = {}", s.noise_sigma);
            }
            DataSource::Volumes { dir, centroids } => {
                let _ = writeln!(m, "volumes = {}", dir.display());
                let _ = writeln!(m, "centroids = {}", centroids.display());
                let _ = writeln!(m, "prep.hu_window = {},{}", c.prep.hu_window.0, c.prep.hu_window.1);
                let _ = writeln!(m, "prep.pool_block = {}", c.prep.pool_block);
            }
        }
        let _ = writeln!(m, "split.folds = {}", c.folds);
        let _ = writeln!(m, "strategies = {}", join(&c.strategies));
        let _ = writeln!(m, "backbone.widths = {}", join(&c.widths));
        let _ = writeln!(m, "backbone.dense = {}", c.dense_backbone);
        let _ = writeln!(m, "head.hidden = {}", c.hidden);
        let pass = match c.pass_down {
            strategies::PassDown::Hidden => "hidden",
            strategies::PassDown::Logits => "logits",
        };
        let _ = writeln!(m, "head.pass_down = {pass}");
        let _ = writeln!(m, "train.epochs = {}", c.epochs);
        let _ = writeln!(m, "train.batch = {}", c.batch_size);
        let _ = writeln!(m, "train.lr = {}", c.schedule.initial);
        let _ = writeln!(m, "train.lr_factor = {}", c.schedule.factor);
        let _ = writeln!(m, "train.lr_period = {}", c.schedule.period);
        let population = match c.population {
            AucPopulation::All => "all",
            AucPopulation::Applicable => "applicable",
        };
        let _ = writeln!(m, "eval.population = {population}");
        for purpose in SUBSTREAMS {
            let _ = writeln!(m, "substream.{purpose} = {}", substream_seed(c.seed, purpose));
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidRow {
    pub id: String,
    pub centroid: Centroid,
    pub leaf: Option<String>,
}

/// Centroid table `id,x_mm,y_mm,z_mm[,leaf]`.
pub fn read_centroids(text: &str) -> Result<Vec<CentroidRow>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let expected = ["id", "x_mm", "y_mm", "z_mm"];
    if header.len() < 4 || header.iter().take(4).ne(expected) || (header.len() == 5 && &header[4] != "leaf") || header.len() > 5 {
        return Err(Error::Csv {
            row: 1,
            message: "centroid header must be `id,x_mm,y_mm,z_mm[,leaf]`".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Csv {
                row,
                message: format!("{} fields, expected {}", rec.len(), header.len()),
            });
        }
        let mut position = [0.0f64; 3];
        for (a, p) in position.iter_mut().enumerate() {
            *p = rec[a + 1].trim().parse().map_err(|_| Error::Csv {
                row,
                message: format!("`{}` is not a number", &rec[a + 1]),
            })?;
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("centroid row {row}")));
            }
        }
        rows.push(CentroidRow {
            id: rec[0].to_string(),
            centroid: Centroid { position },
            leaf: rec.get(4).map(str::to_string).filter(|s| !s.is_empty()),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commands_parse() {
        assert_eq!("compare".parse::<Command>().unwrap(), Command::Compare);
        assert!("fit".parse::<Command>().is_err());
    }

    #[test]
    fn manifest_records_recipe() {
        let cfg = ExperimentConfig::parse("seed = 7\n", Path::new("/x")).unwrap();
        let m = Experiment::new(cfg).unwrap().manifest(Command::Train);
        assert!(m.contains("\ntrain.batch = 16\n"));
        assert!(m.contains("\ntrain.epochs = 200\n"));
        assert!(m.contains(&format!("substream.train.init = {}\n", substream_seed(7, "train.init"))));
    }

    #[test]
    fn centroid_table() {
        let rows = read_centroids("id,x_mm,y_mm,z_mm,leaf\na,1,2,3,H4a\nb,0,0,0,\n").unwrap();
        assert_eq!(rows[0].centroid.position, [1.0, 2.0, 3.0]);
        assert_eq!(rows[0].leaf.as_deref(), Some("H4a"));
        assert_eq!(rows[1].leaf, None);
        assert!(read_centroids("id,x,y,z\n").is_err());
        let e = read_centroids("id,x_mm,y_mm,z_mm\na,1,zz,3\n").unwrap_err();
        assert!(matches!(e, Error::Csv { row: 2, .. }));
    }
}
