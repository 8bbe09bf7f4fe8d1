//! Datasets, synthetic hierarchy-aware generation, stratified splitting and
//! inverse-frequency class weights.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::taxonomy::{Taxonomy, Target};

/// Number of subsets in the default split; the last one is held out for testing.
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    /// Index of the leaf node in the bound taxonomy.
    pub leaf: usize,
    pub split: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    taxonomy: Arc<Taxonomy>,
    samples: Vec<Sample>,
    feature_dim: usize,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.feature_dim == other.feature_dim
            && self.samples == other.samples
            && self.taxonomy == other.taxonomy
    }
}

impl Dataset {
    /// Validates uniform dimension, unique ids, leaf labels and finite features.
    pub fn new(taxonomy: Arc<Taxonomy>, samples: Vec<Sample>, feature_dim: usize) -> Result<Self> {
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.features.len() != feature_dim {
                return Err(Error::Data(format!(
                    "sample `{}` has {} features, expected {feature_dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id `{}`", s.id)));
            }
            if s.leaf >= taxonomy.len() || !taxonomy.node(s.leaf).is_leaf() {
                return Err(Error::Data(format!("sample `{}` is not labelled with a leaf", s.id)));
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("features of sample `{}`", s.id)));
            }
        }
        Ok(Self {
            taxonomy,
            samples,
            feature_dim,
        })
    }

    pub fn taxonomy(&self) -> &Arc<Taxonomy> {
        &self.taxonomy
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples assigned to one of `subsets`.
    pub fn subset(&self, subsets: &[usize]) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.split.is_some_and(|k| subsets.contains(&k)))
            .collect()
    }

    /// Train-dev portion: every assigned subset except the last of `folds`.
    pub fn train_samples(&self, folds: usize) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.split.is_some_and(|k| k + 1 < folds))
            .collect()
    }

    /// Held-out test subset (`folds - 1`).
    pub fn test_samples(&self, folds: usize) -> Vec<&Sample> {
        self.subset(&[folds - 1])
    }

    pub fn has_splits(&self) -> bool {
        self.samples.iter().all(|s| s.split.is_some())
    }

    pub fn with_splits(mut self, splits: &[Option<usize>]) -> Self {
        for (s, &k) in self.samples.iter_mut().zip(splits) {
            s.split = k;
        }
        self
    }

    /// Parse CSV with header `id,leaf,split,f0,...,f{D-1}`. An empty split
    /// field means unassigned.
    pub fn from_csv(taxonomy: Arc<Taxonomy>, text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(text.as_bytes());
        let header = reader.headers()?.clone();
        if header.len() < 3 || &header[0] != "id" || &header[1] != "leaf" || &header[2] != "split" {
            return Err(Error::Csv {
                row: 1,
                message: "header must start with `id,leaf,split`".into(),
            });
        }
        let dim = header.len() - 3;
        for (j, name) in header.iter().skip(3).enumerate() {
            if name != format!("f{j}") {
                return Err(Error::Csv {
                    row: 1,
                    message: format!("feature column {j} is named `{name}`, expected `f{j}`"),
                });
            }
        }

        let mut samples = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 2;
            let record = record?;
            if record.len() != header.len() {
                return Err(Error::Csv {
                    row,
                    message: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            let leaf = taxonomy.index_of(&record[1]).map_err(|_| Error::Csv {
                row,
                message: format!("unknown leaf tag `{}` for sample `{}`", &record[1], &record[0]),
            })?;
            if !taxonomy.node(leaf).is_leaf() {
                return Err(Error::Csv {
                    row,
                    message: format!("`{}` is not a leaf", &record[1]),
                });
            }
            let split = match &record[2] {
                "" => None,
                s => Some(s.parse::<usize>().map_err(|_| Error::Csv {
                    row,
                    message: format!("bad split `{s}`"),
                })?),
            };
            let features = record
                .iter()
                .skip(3)
                .map(|f| {
                    let x: f64 = f.trim().parse().map_err(|_| Error::Csv {
                        row,
                        message: format!("bad feature `{f}`"),
                    })?;
                    if x.is_finite() {
                        Ok(x)
                    } else {
                        Err(Error::Csv {
                            row,
                            message: format!("non-finite feature `{f}`"),
                        })
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            samples.push(Sample {
                id: record[0].to_string(),
                features,
                leaf,
                split,
            });
        }
        Self::new(taxonomy, samples, dim)
    }

    /// Features are written with 17 significant digits, which round-trips f64 exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,leaf,split");
        for j in 0..self.feature_dim {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&s.id);
            out.push(',');
            out.push_str(self.taxonomy.tag(s.leaf).as_str());
            out.push(',');
            if let Some(k) = s.split {
                out.push_str(&k.to_string());
            }
            for x in &s.features {
                out.push(',');
                out.push_str(&format_f64(*x));
            }
            out.push('\n');
        }
        out
    }
}

/// Scientific notation with 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Parameters of the synthetic hierarchical mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub feature_dim: usize,
    /// Number of samples per leaf tag; leaves not listed get none.
    pub leaf_counts: BTreeMap<String, usize>,
    /// Offset magnitude for nodes at level 1, 2, ... (entry `i` is used for level `i + 1`).
    pub level_scales: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Leaf counts proportional to the taxonomy's count column, scaled and rounded.
    pub fn counts_from_taxonomy(t: &Taxonomy, scale: f64) -> Result<BTreeMap<String, usize>> {
        t.leaves()
            .into_iter()
            .map(|i| {
                let n = t.node(i);
                let c = n.count.ok_or_else(|| {
                    Error::Data(format!("taxonomy node `{}` has no count column", n.tag))
                })?;
                Ok((n.tag.to_string(), (c as f64 * scale).round() as usize))
            })
            .collect()
    }
}

/// Node prototypes: the root sits at the origin and every other node is
/// offset from its parent by `level_scales[level - 1]` along a random unit
/// direction. Directions are drawn in depth-first order from `rng`.
pub fn node_prototypes(t: &Taxonomy, dim: usize, level_scales: &[f64], rng: &mut SplitMix64) -> Vec<Vec<f64>> {
    let mut protos = vec![vec![0.0; dim]; t.len()];
    for &n in t.depth_first() {
        let node = t.node(n);
        let Some(parent) = node.parent else { continue };
        let u = rng.unit_vector(dim);
        let scale = level_scales[node.level - 1];
        protos[n] = protos[parent]
            .iter()
            .zip(&u)
            .map(|(p, u)| p + scale * u)
            .collect();
    }
    protos
}

/// Draw a synthetic dataset. Prototypes and noise come from separate
/// substreams of `cfg.seed`; samples are emitted leaf by leaf in depth-first
/// order with ids `s00000`, `s00001`, ...
pub fn generate_synthetic(t: Arc<Taxonomy>, cfg: &GeneratorConfig) -> Result<Dataset> {
    if cfg.feature_dim == 0 {
        return Err(Error::Data("feature_dim must be positive".into()));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::Data(format!("noise_sigma must be finite and >= 0, got {}", cfg.noise_sigma)));
    }
    if cfg.level_scales.len() < t.max_level() {
        return Err(Error::Data(format!(
            "level_scales has {} entries, taxonomy depth is {}",
            cfg.level_scales.len(),
            t.max_level()
        )));
    }
    for tag in cfg.leaf_counts.keys() {
        let i = t.index_of(tag)?;
        if !t.node(i).is_leaf() {
            return Err(Error::NotALeaf(tag.clone()));
        }
    }
    let total: usize = cfg.leaf_counts.values().sum();
    if total == 0 {
        return Err(Error::Data("synthetic leaf counts sum to zero".into()));
    }

    let mut proto_rng = SplitMix64::substream(cfg.seed, "synthetic.prototypes");
    let mut noise_rng = SplitMix64::substream(cfg.seed, "synthetic.noise");
    let protos = node_prototypes(&t, cfg.feature_dim, &cfg.level_scales, &mut proto_rng);

    let mut samples = Vec::with_capacity(total);
    for leaf in t.leaves() {
        let n = cfg.leaf_counts.get(t.tag(leaf).as_str()).copied().unwrap_or(0);
        for _ in 0..n {
            let features = protos[leaf]
                .iter()
                .map(|p| p + cfg.noise_sigma * noise_rng.normal())
                .collect();
            samples.push(Sample {
                id: format!("s{:05}", samples.len()),
                features,
                leaf,
                split: None,
            });
        }
    }
    Dataset::new(t, samples, cfg.feature_dim)
}

/// Per-leaf stratified assignment into `k` subsets.
///
/// Each leaf's samples are shuffled, then dealt round-robin. The dealing
/// position carries over from one leaf to the next, so both per-leaf and
/// overall subset sizes differ by at most one.
pub fn stratified_split(d: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Data(format!("split needs k >= 2, got {k}")));
    }
    let t = d.taxonomy();
    let mut rng = SplitMix64::substream(seed, "split.shuffle");
    let mut splits = vec![None; d.len()];
    let mut next = 0usize;
    for leaf in t.leaves() {
        let mut members: Vec<usize> = (0..d.len()).filter(|&i| d.samples[i].leaf == leaf).collect();
        rng.shuffle(&mut members);
        for i in members {
            splits[i] = Some(next);
            next = (next + 1) % k;
        }
    }
    Ok(d.clone().with_splits(&splits))
}

/// Inverse-frequency weights per head: `w_c = N / (K * n_c)`, zero where `n_c = 0`.
///
/// `widths[h]` is the number of outputs of head `h` including any leaky slot,
/// and `routed[i][h]` is sample `i`'s target in head `h`. Heads that receive
/// no targets at all get an all-zero vector and a warning.
pub fn class_weights(routed: &[Vec<Target>], widths: &[usize], real_classes: &[usize]) -> Vec<Vec<f64>> {
    widths
        .iter()
        .zip(real_classes)
        .enumerate()
        .map(|(h, (&k, &real))| {
            let mut counts = vec![0usize; k];
            for r in routed {
                if let Some(c) = r[h].output_index(real) {
                    counts[c] += 1;
                }
            }
            let total: usize = counts.iter().sum();
            if total == 0 {
                log::warn!("head {h} has no training targets; it is excluded from the loss");
                return vec![0.0; k];
            }
            counts
                .iter()
                .map(|&n| if n == 0 { 0.0 } else { total as f64 / (k as f64 * n as f64) })
                .collect()
        })
        .collect()
}
