//! The five head wirings over a shared backbone, the masked multi-head loss,
//! the training loop and probability aggregation.
//!
//! | kind             | heads                         | leaky slot | parent features |
//! |------------------|-------------------------------|------------|-----------------|
//! | `LeafNode`       | one softmax over all leaves   | no         | no              |
//! | `Flattened`      | one per internal node         | no         | no              |
//! | `LeakyFlattened` | one per internal node         | yes        | no              |
//! | `Dense`          | one per internal node         | no         | yes             |
//! | `LeakyDense`     | one per internal node         | yes        | yes             |
//!
//! In the dense wirings a head additionally reads the activation of the head
//! owned by its parent node's nearest head-owning ancestor, concatenated after
//! the backbone features.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::data::{class_weights, format_f64, Dataset, Sample, DEFAULT_FOLDS};
use crate::error::{Error, Result};
use crate::nnet::{softmax_row, weighted_ce_masked, AdamState, Backbone, BackboneCache, LinearLayer, LrSchedule, Objective, Tensor};
use crate::rng::SplitMix64;
use crate::taxonomy::{Head, RoutedLabel, Target, Taxonomy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    LeafNode,
    Flattened,
    LeakyFlattened,
    Dense,
    LeakyDense,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::LeafNode,
        StrategyKind::Flattened,
        StrategyKind::LeakyFlattened,
        StrategyKind::Dense,
        StrategyKind::LeakyDense,
    ];

    pub fn is_leaky(self) -> bool {
        matches!(self, StrategyKind::LeakyFlattened | StrategyKind::LeakyDense)
    }

    pub fn is_dense(self) -> bool {
        matches!(self, StrategyKind::Dense | StrategyKind::LeakyDense)
    }

    /// Identifier used in file names and configs.
    pub fn key(self) -> &'static str {
        match self {
            StrategyKind::LeafNode => "leaf-node",
            StrategyKind::Flattened => "flattened",
            StrategyKind::LeakyFlattened => "leaky-flattened",
            StrategyKind::Dense => "dense",
            StrategyKind::LeakyDense => "leaky-dense",
        }
    }

    /// Row label in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            StrategyKind::LeafNode => "Leaf-Node",
            StrategyKind::Flattened => "Flattened Hierarchy",
            StrategyKind::LeakyFlattened => "Leaky Flattened Hierarchy",
            StrategyKind::Dense => "Dense Hierarchy",
            StrategyKind::LeakyDense => "Leaky Dense Hierarchy",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// What a dense-wired head passes to its children.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PassDown {
    /// Post-ReLU hidden activation (falls back to logits when `hidden == 0`).
    Hidden,
    Logits,
}

/// Whether the leaky slot keeps its share of probability at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LeakyInference {
    #[default]
    Keep,
    /// Drop the leaky slot and renormalize the real classes.
    Renormalize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub dense_backbone: bool,
    /// Hidden width of every head; 0 makes heads linear probes.
    pub hidden: usize,
    pub pass_down: PassDown,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            widths: vec![64, 32, 32],
            dense_backbone: true,
            hidden: 32,
            pass_down: PassDown::Hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadModule {
    pub hidden: Option<LinearLayer>,
    pub out: LinearLayer,
    /// Head whose activation is appended to this head's input.
    pub parent_head: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    kind: StrategyKind,
    config: ModelConfig,
    taxonomy: Arc<Taxonomy>,
    heads: Vec<Head>,
    backbone: Backbone,
    modules: Vec<HeadModule>,
}

#[derive(Clone, Debug)]
struct HeadCache {
    input: Tensor,
    hidden: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    backbone: BackboneCache,
    heads: Vec<HeadCache>,
}

/// Unconditional node probabilities for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeProbs {
    /// Indexed by taxonomy node index.
    pub probs: Vec<f64>,
    /// Per head, the unconditional mass that went to the leaky slot
    /// (`P(parent) * p(leaky | parent)`); empty for non-leaky models.
    pub leak: Vec<f64>,
}

impl Model {
    /// Build a freshly initialized model. The backbone is initialized first
    /// from the `train.init` stream, so every strategy shares the same initial
    /// backbone for a given seed.
    pub fn new(taxonomy: Arc<Taxonomy>, kind: StrategyKind, config: ModelConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if config.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        let mut rng = SplitMix64::substream(seed, "train.init");
        let backbone = Backbone::new(config.input_dim, &config.widths, config.dense_backbone, &mut rng);
        let heads = Self::heads_for(&taxonomy, kind);
        let parents = if kind.is_dense() {
            Self::dense_parents(&taxonomy, &heads)
        } else {
            vec![None; heads.len()]
        };
        let features = backbone.output_width();
        let mut modules: Vec<HeadModule> = Vec::with_capacity(heads.len());
        for (h, head) in heads.iter().enumerate() {
            let extra = parents[h].map_or(0, |p| Self::pass_width(&config, &heads[p]));
            let input = features + extra;
            let (hidden, out) = if config.hidden > 0 {
                (
                    Some(LinearLayer::init(input, config.hidden, &mut rng)),
                    LinearLayer::init(config.hidden, head.width(), &mut rng),
                )
            } else {
                (None, LinearLayer::init(input, head.width(), &mut rng))
            };
            modules.push(HeadModule {
                hidden,
                out,
                parent_head: parents[h],
            });
        }
        Ok(Self {
            kind,
            config,
            taxonomy,
            heads,
            backbone,
            modules,
        })
    }

    /// Output heads of a strategy. The leaf-node head is rooted at the
    /// taxonomy root and lists the leaves in depth-first order.
    pub fn heads_for(t: &Taxonomy, kind: StrategyKind) -> Vec<Head> {
        match kind {
            StrategyKind::LeafNode => {
                let leaves = t.leaves();
                vec![Head {
                    parent: t.root(),
                    parent_tag: t.tag(t.root()).clone(),
                    class_tags: leaves.iter().map(|&l| t.tag(l).clone()).collect(),
                    classes: leaves,
                    leaky: false,
                }]
            }
            k => t.derive_heads(k.is_leaky()),
        }
    }

    fn dense_parents(t: &Taxonomy, heads: &[Head]) -> Vec<Option<usize>> {
        heads
            .iter()
            .map(|h| {
                let mut cur = t.node(h.parent).parent;
                while let Some(n) = cur {
                    if let Some(p) = heads.iter().position(|o| o.parent == n) {
                        return Some(p);
                    }
                    cur = t.node(n).parent;
                }
                None
            })
            .collect()
    }

    fn pass_width(config: &ModelConfig, parent: &Head) -> usize {
        match config.pass_down {
            PassDown::Hidden if config.hidden > 0 => config.hidden,
            _ => parent.width(),
        }
    }

    fn passes_hidden(&self) -> bool {
        self.config.pass_down == PassDown::Hidden && self.config.hidden > 0
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn taxonomy(&self) -> &Arc<Taxonomy> {
        &self.taxonomy
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn modules(&self) -> &[HeadModule] {
        &self.modules
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Input width of head `h`.
    pub fn head_input_width(&self, h: usize) -> usize {
        let m = &self.modules[h];
        m.hidden.as_ref().map_or(m.out.inputs, |l| l.inputs)
    }

    /// Per-head targets for a leaf.
    pub fn route(&self, leaf: usize) -> Result<RoutedLabel> {
        match self.kind {
            StrategyKind::LeafNode => {
                let pos = self.heads[0]
                    .classes
                    .iter()
                    .position(|&l| l == leaf)
                    .ok_or_else(|| Error::NotALeaf(self.taxonomy.tag(leaf).to_string()))?;
                Ok(vec![Target::Class(pos)])
            }
            _ => self.taxonomy.route_label(&self.heads, leaf),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Vec<Tensor>, ForwardCache)> {
        let (features, bcache) = self.backbone.forward(x)?;
        let mut logits: Vec<Tensor> = Vec::with_capacity(self.modules.len());
        let mut caches: Vec<HeadCache> = Vec::with_capacity(self.modules.len());
        for m in &self.modules {
            let input = match m.parent_head {
                Some(p) => {
                    let passed = if self.passes_hidden() {
                        caches[p].hidden.as_ref().expect("hidden layer present")
                    } else {
                        &logits[p]
                    };
                    Tensor::concat_cols(&[&features, passed])?
                }
                None => features.clone(),
            };
            let (hidden, z) = match &m.hidden {
                Some(layer) => {
                    let a = layer.forward(&input)?.relu();
                    let z = m.out.forward(&a)?;
                    (Some(a), z)
                }
                None => (None, m.out.forward(&input)?),
            };
            logits.push(z);
            caches.push(HeadCache { input, hidden });
        }
        Ok((
            logits,
            ForwardCache {
                backbone: bcache,
                heads: caches,
            },
        ))
    }

    pub fn zero_grad(&mut self) {
        self.backbone.blocks.iter_mut().for_each(LinearLayer::zero_grad);
        for m in &mut self.modules {
            if let Some(h) = &mut m.hidden {
                h.zero_grad();
            }
            m.out.zero_grad();
        }
    }

    /// Accumulate parameter gradients given per-head logit gradients.
    pub fn backward(&mut self, cache: &ForwardCache, grad_logits: &[Tensor]) {
        let rows = cache.backbone_rows();
        let features = self.backbone.output_width();
        let passes_hidden = self.passes_hidden();
        let mut grad_features = Tensor::zeros(rows, features);
        let mut grad_passed: Vec<Option<Tensor>> = vec![None; self.modules.len()];

        // Children come after their parents in head order.
        for h in (0..self.modules.len()).rev() {
            let hc = &cache.heads[h];
            let m = &mut self.modules[h];
            let mut g_logits = grad_logits[h].clone();
            if !passes_hidden {
                if let Some(g) = &grad_passed[h] {
                    g_logits.add_assign(g);
                }
            }
            let g_input = match (&mut m.hidden, &hc.hidden) {
                (Some(layer), Some(act)) => {
                    let mut g_act = m.out.backward(act, &g_logits);
                    if passes_hidden {
                        if let Some(g) = &grad_passed[h] {
                            g_act.add_assign(g);
                        }
                    }
                    let g_pre = g_act.relu_backward(act);
                    layer.backward(&hc.input, &g_pre)
                }
                _ => m.out.backward(&hc.input, &g_logits),
            };
            match m.parent_head {
                Some(p) => {
                    let passed = g_input.cols() - features;
                    let mut parts = g_input.split_cols(&[features, passed]).into_iter();
                    grad_features.add_assign(&parts.next().expect("feature part"));
                    let gp = parts.next().expect("passed part");
                    match &mut grad_passed[p] {
                        Some(acc) => acc.add_assign(&gp),
                        slot => *slot = Some(gp),
                    }
                }
                None => grad_features.add_assign(&g_input),
            }
        }
        self.backbone.backward(&cache.backbone, &grad_features);
    }

    /// Sum over heads of the class-weighted cross-entropy, each head averaged
    /// over the samples that have a concrete target in it.
    pub fn compute_loss(&self, logits: &[Tensor], routed: &[RoutedLabel], weights: &[Vec<f64>]) -> Result<(f64, Vec<Tensor>)> {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(self.heads.len());
        for (h, head) in self.heads.iter().enumerate() {
            let targets: Vec<Option<usize>> = routed
                .iter()
                .map(|r| r[h].output_index(head.classes.len()))
                .collect();
            let (l, g) = weighted_ce_masked(&logits[h], &targets, &weights[h])?;
            total += l;
            grads.push(g);
        }
        Ok((total, grads))
    }

    pub fn param_count(&self) -> usize {
        self.backbone.blocks.iter().map(LinearLayer::param_count).sum::<usize>()
            + self
                .modules
                .iter()
                .map(|m| m.hidden.as_ref().map_or(0, LinearLayer::param_count) + m.out.param_count())
                .sum::<usize>()
    }

    fn layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.backbone
            .blocks
            .iter()
            .chain(self.modules.iter().flat_map(|m| m.hidden.iter().chain(std::iter::once(&m.out))))
    }

    /// Parameters in declaration order: backbone blocks, then per head the
    /// hidden layer and output layer, each as weights followed by bias.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        self.layers().for_each(|l| l.append_params(&mut v));
        v
    }

    pub fn grads(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        self.layers().for_each(|l| l.append_grads(&mut v));
        v
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut rest = params;
        for b in &mut self.backbone.blocks {
            rest = b.load_params(rest);
        }
        for m in &mut self.modules {
            if let Some(h) = &mut m.hidden {
                rest = h.load_params(rest);
            }
            rest = m.out.load_params(rest);
        }
        Ok(())
    }

    /// Per-head softmax rows for a batch.
    pub fn head_softmax(&self, x: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
        let (logits, _) = self.forward(x)?;
        Ok(logits
            .iter()
            .map(|z| (0..z.rows()).map(|i| softmax_row(z.row(i))).collect())
            .collect())
    }

    pub fn predict_batch(&self, x: &Tensor, mode: LeakyInference) -> Result<Vec<NodeProbs>> {
        let soft = self.head_softmax(x)?;
        Ok((0..x.rows())
            .map(|i| {
                let per_head: Vec<&[f64]> = soft.iter().map(|h| h[i].as_slice()).collect();
                aggregate_probs(&self.taxonomy, self.kind, &self.heads, &per_head, mode)
            })
            .collect())
    }

    pub fn predict_node_probs(&self, features: &[f64], mode: LeakyInference) -> Result<NodeProbs> {
        let x = Tensor::from_rows(&[features])?;
        Ok(self.predict_batch(&x, mode)?.remove(0))
    }

    /// Predictions for many samples, evaluated in chunks.
    pub fn predict_samples(&self, samples: &[&Sample], mode: LeakyInference) -> Result<Vec<NodeProbs>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let rows: Vec<&[f64]> = chunk.iter().map(|s| s.features.as_slice()).collect();
            out.extend(self.predict_batch(&Tensor::from_rows(&rows)?, mode)?);
        }
        Ok(out)
    }
}

impl ForwardCache {
    fn backbone_rows(&self) -> usize {
        self.heads.first().map_or(0, |h| h.input.rows())
    }
}

/// Turn per-head softmax outputs into unconditional node probabilities.
///
/// Leaf-node: leaves take their softmax probability and every internal node
/// the sum over its children. Hierarchical kinds: the root has probability 1
/// and every other node the product of conditionals along its path; a node
/// whose parent owns no head (single child) inherits the parent's mass.
pub fn aggregate_probs(t: &Taxonomy, kind: StrategyKind, heads: &[Head], per_head: &[&[f64]], mode: LeakyInference) -> NodeProbs {
    let mut probs = vec![0.0; t.len()];
    if kind == StrategyKind::LeafNode {
        for (c, &leaf) in heads[0].classes.iter().enumerate() {
            probs[leaf] = per_head[0][c];
        }
        for &n in t.depth_first().iter().rev() {
            let node = t.node(n);
            if !node.is_leaf() {
                probs[n] = node.children.iter().map(|&c| probs[c]).sum();
            }
        }
        return NodeProbs { probs, leak: Vec::new() };
    }

    let mut owner = vec![None; t.len()];
    for (h, head) in heads.iter().enumerate() {
        owner[head.parent] = Some(h);
    }
    let conditionals: Vec<Vec<f64>> = heads
        .iter()
        .zip(per_head)
        .map(|(head, p)| match (mode, head.leaky) {
            (LeakyInference::Renormalize, true) => {
                let real = &p[..head.classes.len()];
                let s: f64 = real.iter().sum();
                real.iter().map(|v| v / s).collect()
            }
            _ => p.to_vec(),
        })
        .collect();

    probs[t.root()] = 1.0;
    for &n in t.depth_first() {
        let Some(parent) = t.node(n).parent else { continue };
        probs[n] = match owner[parent] {
            Some(h) => {
                let c = heads[h].classes.iter().position(|&x| x == n).expect("child of head parent");
                probs[parent] * conditionals[h][c]
            }
            None => probs[parent],
        };
    }
    let leak = if heads.iter().any(|h| h.leaky) {
        heads
            .iter()
            .zip(&conditionals)
            .map(|(head, cond)| match head.leaky_index() {
                Some(i) if cond.len() > i => probs[head.parent] * cond[i],
                _ => 0.0,
            })
            .collect()
    } else {
        Vec::new()
    };
    NodeProbs { probs, leak }
}

/// Predictions CSV: `id,<every node tag in depth-first order>[,leak_<head>...]`.
pub fn predictions_csv(model: &Model, samples: &[&Sample], probs: &[NodeProbs]) -> String {
    let t = model.taxonomy();
    let mut out = String::from("id");
    for &n in t.depth_first() {
        out.push(',');
        out.push_str(t.tag(n).as_str());
    }
    let leaky = model.heads().iter().any(|h| h.leaky);
    if leaky {
        for h in model.heads() {
            out.push_str(&format!(",leak_{}", h.parent_tag));
        }
    }
    out.push('\n');
    for (s, p) in samples.iter().zip(probs) {
        out.push_str(&s.id);
        for &n in t.depth_first() {
            out.push(',');
            out.push_str(&format_f64(p.probs[n]));
        }
        if leaky {
            for l in &p.leak {
                out.push(',');
                out.push_str(&format_f64(*l));
            }
        }
        out.push('\n');
    }
    out
}

/// A model bound to a fixed batch, for gradient checking.
pub struct BatchObjective<'a> {
    pub model: &'a mut Model,
    pub x: Tensor,
    pub routed: Vec<RoutedLabel>,
    pub weights: Vec<Vec<f64>>,
}

impl<'a> BatchObjective<'a> {
    /// Bind `samples` with class weights computed from the batch itself.
    pub fn new(model: &'a mut Model, samples: &[&Sample]) -> Result<Self> {
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
        let x = Tensor::from_rows(&rows)?;
        let routed = samples.iter().map(|s| model.route(s.leaf)).collect::<Result<Vec<_>>>()?;
        let weights = model_class_weights(model, &routed);
        Ok(Self {
            model,
            x,
            routed,
            weights,
        })
    }
}

impl Objective for BatchObjective<'_> {
    fn params(&self) -> Vec<f64> {
        self.model.params()
    }

    fn set_params(&mut self, params: &[f64]) {
        self.model.set_params(params).expect("parameter count is fixed");
    }

    fn loss(&self) -> Result<f64> {
        let (logits, _) = self.model.forward(&self.x)?;
        Ok(self.model.compute_loss(&logits, &self.routed, &self.weights)?.0)
    }

    fn loss_and_grad(&mut self) -> Result<(f64, Vec<f64>)> {
        self.model.zero_grad();
        let (logits, cache) = self.model.forward(&self.x)?;
        let (loss, grads) = self.model.compute_loss(&logits, &self.routed, &self.weights)?;
        self.model.backward(&cache, &grads);
        Ok((loss, self.model.grads()))
    }
}

pub fn model_class_weights(model: &Model, routed: &[RoutedLabel]) -> Vec<Vec<f64>> {
    let widths: Vec<usize> = model.heads().iter().map(Head::width).collect();
    let real: Vec<usize> = model.heads().iter().map(|h| h.classes.len()).collect();
    class_weights(routed, &widths, &real)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Number of split subsets; the last one is never trained on.
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            schedule: LrSchedule::default(),
            seed: 0,
            folds: DEFAULT_FOLDS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample training loss over the epoch's batches.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,loss\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, format_f64(r.lr), format_f64(r.loss)));
    }
    out
}

/// Train on every split subset except the last.
pub fn train(d: &Dataset, kind: StrategyKind, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be at least 1".into()));
    }
    let train_set = d.train_samples(cfg.folds);
    if train_set.is_empty() {
        return Err(Error::Training("no samples in the training subsets".into()));
    }
    let mut model = Model::new(d.taxonomy().clone(), kind, model_cfg.clone(), cfg.seed)?;
    let routed: Vec<RoutedLabel> = train_set
        .iter()
        .map(|s| model.route(s.leaf))
        .collect::<Result<_>>()?;
    let weights = model_class_weights(&model, &routed);

    let mut adam = AdamState::new(model.param_count());
    let mut shuffle = SplitMix64::substream(cfg.seed, "train.shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut params = model.params();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at_epoch(epoch);
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| train_set[i].features.as_slice()).collect();
            let x = Tensor::from_rows(&rows)?;
            let r: Vec<RoutedLabel> = batch.iter().map(|&i| routed[i].clone()).collect();
            model.zero_grad();
            let (logits, cache) = model.forward(&x)?;
            let (loss, grads) = model.compute_loss(&logits, &r, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("{kind}: non-finite loss at epoch {epoch}")));
            }
            model.backward(&cache, &grads);
            adam.step(&mut params, &model.grads(), lr)
                .map_err(|e| Error::Training(format!("{kind}: epoch {epoch}: {e}")))?;
            model.set_params(&params)?;
            loss_sum += loss * batch.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / train_set.len() as f64,
        };
        log::debug!("{kind} epoch {epoch}: lr {lr:.6} loss {:.6}", record.loss);
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HTXCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Model {
    /// Versioned little-endian checkpoint: magic, version, taxonomy
    /// fingerprint, strategy, architecture, then every parameter as f64.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.taxonomy.fingerprint().to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&(self.config.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.widths.len() as u32).to_le_bytes());
        for &w in &self.config.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.push(u8::from(self.config.dense_backbone));
        out.extend_from_slice(&(self.config.hidden as u32).to_le_bytes());
        out.push(match self.config.pass_down {
            PassDown::Hidden => 0,
            PassDown::Logits => 1,
        });
        let params = self.params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(taxonomy: Arc<Taxonomy>, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        if r.u64()? != taxonomy.fingerprint() {
            return Err(Error::Checkpoint("checkpoint was trained on a different taxonomy".into()));
        }
        let code = r.u8()?;
        let kind = StrategyKind::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown strategy code {code}")))?;
        let input_dim = r.u32()? as usize;
        let n = r.u32()? as usize;
        let widths = (0..n).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let dense_backbone = r.u8()? != 0;
        let hidden = r.u32()? as usize;
        let pass_down = match r.u8()? {
            0 => PassDown::Hidden,
            1 => PassDown::Logits,
            c => return Err(Error::Checkpoint(format!("unknown pass-down code {c}"))),
        };
        let config = ModelConfig {
            input_dim,
            widths,
            dense_backbone,
            hidden,
            pass_down,
        };
        let mut model = Model::new(taxonomy, kind, config, 0)?;
        let count = r.u64()? as usize;
        if count != model.param_count() {
            return Err(Error::Checkpoint(format!(
                "{count} parameters stored, architecture needs {}",
                model.param_count()
            )));
        }
        let params = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if !r.bytes.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        model.set_params(&params)?;
        Ok(model)
    }
}
