//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line and then
//! asserts on the same condition.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use hiertax::config::ExperimentConfig;
use hiertax::data::{generate_synthetic, node_prototypes, stratified_split, Dataset, GeneratorConfig, Sample};
use hiertax::metrics::{auc, evaluate_scores, AucPopulation, ScoredLabel};
use hiertax::nnet::{grad_check, LrSchedule};
use hiertax::rng::SplitMix64;
use hiertax::runner::{Command, Experiment};
use hiertax::strategies::{BatchObjective, LeakyInference, Model, ModelConfig, NodeProbs, PassDown, StrategyKind, TrainConfig};
use hiertax::taxonomy::{Target, Taxonomy};
use hiertax::volprep::{crop_centered, featurize_pool, normalize_hu, resample_trilinear, Centroid, Volume, CROP_SIZE};

fn report(criterion: u32, name: &str, pass: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let status = if pass && elapsed < limit { "PASS" } else { "FAIL" };
    println!(
        "criterion {criterion} [{name}]: {status} ({detail}; {:.2}s of {:.0}s budget)",
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
    assert!(elapsed < limit, "criterion {criterion} exceeded its time budget");
}

fn builtin() -> Arc<Taxonomy> {
    Arc::new(Taxonomy::pulmonary_radpath())
}

#[test]
fn criterion_1_probability_conservation() {
    let start = Instant::now();
    let t = builtin();
    let d = 8;
    let mut rng = SplitMix64::new(2024);
    let (mut worst_sum, mut worst_leak, mut leaf_node_exact) = (0.0f64, 0.0f64, true);
    let mut leaky_over = 0.0f64;
    for trial in 0..1000u64 {
        for kind in StrategyKind::ALL {
            let cfg = ModelConfig {
                input_dim: d,
                widths: vec![8, 6],
                dense_backbone: trial % 2 == 0,
                hidden: if trial % 3 == 0 { 0 } else { 4 },
                pass_down: if trial % 4 < 2 { PassDown::Hidden } else { PassDown::Logits },
            };
            let mut model = Model::new(t.clone(), kind, cfg, trial).unwrap();
            let scale = (4.0 * rng.next_f64() - 2.0).exp();
            let params: Vec<f64> = model.params().iter().map(|p| scale * (p + 0.3 * rng.normal())).collect();
            model.set_params(&params).unwrap();
            let x: Vec<f64> = (0..d).map(|_| 3.0 * rng.normal()).collect();
            let p = model.predict_node_probs(&x, LeakyInference::Keep).unwrap();
            let leaves: f64 = t.leaves().iter().map(|&l| p.probs[l]).sum();
            if kind.is_leaky() {
                let leak: f64 = p.leak.iter().sum();
                leaky_over = leaky_over.max(leaves - 1.0);
                worst_leak = worst_leak.max((leaves + leak - 1.0).abs());
            } else {
                worst_sum = worst_sum.max((leaves - 1.0).abs());
            }
            if kind == StrategyKind::LeafNode {
                for &n in t.depth_first() {
                    let node = t.node(n);
                    if !node.is_leaf() {
                        let children: f64 = node.children.iter().map(|&c| p.probs[c]).sum();
                        leaf_node_exact &= children == p.probs[n];
                    }
                }
            }
        }
    }
    let pass = worst_sum <= 1e-9 && leaf_node_exact && leaky_over <= 1e-9 && worst_leak <= 1e-9;
    report(
        1,
        "probability conservation",
        pass,
        start.elapsed(),
        Duration::from_secs(10),
        &format!(
            "max |sum-1| {worst_sum:.2e}, leaf-node sums exact {leaf_node_exact}, leaky excess {leaky_over:.2e}, leak accounting {worst_leak:.2e}"
        ),
    );
}

#[test]
fn criterion_2_gradient_correctness() {
    let start = Instant::now();
    let t = builtin();
    let tags = ["H4a", "H4b", "H2b", "H2e", "H3a", "H3d", "H1c", "H1c"];
    let mut counts = std::collections::BTreeMap::new();
    for tag in tags {
        *counts.entry(tag.to_string()).or_insert(0) += 1;
    }
    let data = generate_synthetic(
        t.clone(),
        &GeneratorConfig {
            feature_dim: 16,
            leaf_counts: counts,
            level_scales: vec![2.0, 1.0, 0.5],
            noise_sigma: 1.0,
            seed: 5,
        },
    )
    .unwrap();
    let batch: Vec<&Sample> = data.samples().iter().collect();
    assert_eq!(batch.len(), 8);

    let mut worst = (0.0f64, StrategyKind::LeafNode);
    for kind in StrategyKind::ALL {
        let cfg = ModelConfig {
            input_dim: 16,
            widths: vec![16, 8],
            dense_backbone: true,
            hidden: 8,
            pass_down: PassDown::Hidden,
        };
        let mut model = Model::new(t.clone(), kind, cfg, 77).unwrap();
        if kind != StrategyKind::LeafNode {
            let routed: Vec<Target> = batch.iter().flat_map(|s| model.route(s.leaf).unwrap()).collect();
            let special = if kind.is_leaky() { Target::Leaky } else { Target::NotApplicable };
            assert!(routed.contains(&special), "{kind}: batch lacks {special:?} targets");
        }
        let mut objective = BatchObjective::new(&mut model, &batch).unwrap();
        let r = grad_check(&mut objective, 1e-5).unwrap();
        println!("  {kind}: max relative error {:.3e} over {} parameters", r.max_rel_err, r.num_params);
        if r.max_rel_err > worst.0 {
            worst = (r.max_rel_err, kind);
        }
    }
    report(
        2,
        "gradient correctness",
        worst.0 <= 1e-4,
        start.elapsed(),
        Duration::from_secs(60),
        &format!("worst max relative error {:.3e} ({})", worst.0, worst.1),
    );
}

fn pair_counting(items: &[ScoredLabel]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for p in items.iter().filter(|s| s.positive) {
        for n in items.iter().filter(|s| !s.positive) {
            pairs += 1;
            if p.score > n.score {
                wins += 1.0;
            } else if p.score == n.score {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

#[test]
fn criterion_3_auc_oracle() {
    let start = Instant::now();
    let mut rng = SplitMix64::new(99);
    let (mut worst, mut compared, mut agree_on_absent) = (0.0f64, 0, true);
    for _ in 0..1000 {
        let n = 1 + rng.below(50) as usize;
        let levels = 1 + rng.below(12);
        let items: Vec<ScoredLabel> = (0..n)
            .map(|_| ScoredLabel {
                score: if rng.bernoulli_half() {
                    rng.below(levels) as f64 / levels as f64
                } else {
                    rng.normal()
                },
                positive: rng.next_f64() < 0.4,
            })
            .collect();
        match (auc(&items), pair_counting(&items)) {
            (Some(a), Some(b)) => {
                worst = worst.max((a - b).abs());
                compared += 1;
            }
            (a, b) => agree_on_absent &= a.is_none() && b.is_none(),
        }
    }
    report(
        3,
        "AUC oracle equivalence",
        worst <= 1e-12 && agree_on_absent,
        start.elapsed(),
        Duration::from_secs(5),
        &format!("max |rank - pairs| {worst:.2e} over {compared} defined sets"),
    );
}

#[test]
fn criterion_4_recipe() {
    let start = Instant::now();
    let s = LrSchedule::default();
    let lrs = [s.lr_at_epoch(0), s.lr_at_epoch(20), s.lr_at_epoch(40)];
    let expected = [0.01, 0.01 / 3.0, 0.01 / 9.0];
    let lr_ok = lrs.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-15);
    let tc = TrainConfig::default();

    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(
        &format!("output = {}\nsynthetic.scale = 0.01\n", dir.path().display()),
        Path::new("."),
    )
    .unwrap();
    Experiment::new(cfg).unwrap().execute(Command::Gen, false).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    let manifest_ok = manifest.lines().any(|l| l == "train.batch = 16") && manifest.lines().any(|l| l == "train.epochs = 200");
    report(
        4,
        "training recipe",
        lr_ok && manifest_ok && tc.batch_size == 16 && tc.epochs == 200,
        start.elapsed(),
        Duration::from_secs(5),
        &format!("lr at 0/20/40 = {lrs:?}; manifest batch/epochs recorded {manifest_ok}"),
    );
}

fn parse_leaf_mauc(report: &str) -> Option<f64> {
    report
        .lines()
        .find_map(|l| l.strip_prefix("mAUC@L,"))
        .and_then(|v| v.parse().ok())
}

/// mAUC@L of the exact posterior under the generator (true prototypes,
/// empirical priors, isotropic unit noise): an upper bound for any model.
fn bayes_leaf_mauc(d: &Dataset, seed: u64, level_scales: &[f64]) -> f64 {
    let t = d.taxonomy();
    let mut rng = SplitMix64::substream(seed, "synthetic.prototypes");
    let protos = node_prototypes(t, d.feature_dim(), level_scales, &mut rng);
    let leaves = t.leaves();
    let prior: Vec<f64> = leaves
        .iter()
        .map(|&l| d.samples().iter().filter(|s| s.leaf == l).count() as f64 / d.len() as f64)
        .collect();
    let test = d.test_samples(5);
    let probs: Vec<NodeProbs> = test
        .iter()
        .map(|s| {
            let logp: Vec<f64> = leaves
                .iter()
                .zip(&prior)
                .map(|(&l, &pi)| {
                    let dist: f64 = s.features.iter().zip(&protos[l]).map(|(x, p)| (x - p) * (x - p)).sum();
                    pi.ln() - 0.5 * dist
                })
                .collect();
            let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logp.iter().map(|v| (v - m).exp()).sum();
            let mut node = vec![0.0; t.len()];
            for (&l, v) in leaves.iter().zip(&logp) {
                for n in t.path_to_root_idx(l) {
                    node[n] += (v - m).exp() / z;
                }
            }
            NodeProbs { probs: node, leak: Vec::new() }
        })
        .collect();
    let labels: Vec<usize> = test.iter().map(|s| s.leaf).collect();
    evaluate_scores(t, &labels, &probs, AucPopulation::All).unwrap().leaf_mauc.unwrap()
}

#[test]
fn criterion_5_synthetic_benchmark() {
    let config = |out: &Path| {
        ExperimentConfig::parse(
            &format!(
                "seed = 42\n\
                 output = {}\n\
                 synthetic.feature_dim = 32\n\
                 synthetic.scale = 0.2\n\
                 synthetic.level_scales = 2.0, 1.0, 0.5\n\
                 synthetic.noise_sigma = 1.0\n\
                 train.epochs = 60\n\
                 eval.roc = false\n",
                out.display()
            ),
            Path::new("."),
        )
        .unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();

    let start = Instant::now();
    let exp = Experiment::new(config(a.path())).unwrap();
    exp.execute(Command::Compare, false).unwrap();
    let elapsed = start.elapsed();
    Experiment::new(config(b.path())).unwrap().execute(Command::Compare, false).unwrap();

    let d = exp.split_dataset().unwrap();
    println!("  dataset: {} samples, {} held out", d.len(), d.test_samples(5).len());
    let mut all_reach = true;
    let mut finite = true;
    let mut identical = true;
    let mut ranking = Vec::new();
    for kind in StrategyKind::ALL {
        let name = format!("report_{kind}.csv");
        let ra = std::fs::read(a.path().join(&name)).unwrap();
        let rb = std::fs::read(b.path().join(&name)).unwrap();
        identical &= ra == rb;
        let history = std::fs::read_to_string(a.path().join(format!("history_{kind}.csv"))).unwrap();
        finite &= history
            .lines()
            .skip(1)
            .all(|l| l.split(',').all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));
        let m = parse_leaf_mauc(&String::from_utf8(ra).unwrap());
        println!("  {kind}: mAUC@L {}", m.map_or("NA".into(), |v| format!("{v:.4}")));
        all_reach &= m.is_some_and(|v| v >= 0.85);
        ranking.push((m.unwrap_or(f64::NAN), kind));
    }
    let ceiling = bayes_leaf_mauc(&d, 42, &[2.0, 1.0, 0.5]);
    println!("  Bayes-optimal mAUC@L on the same held-out set: {ceiling:.4}");
    ranking.sort_by(|x, y| y.0.total_cmp(&x.0));
    let order: Vec<String> = ranking.iter().map(|(_, k)| k.to_string()).collect();
    println!("  ranking: {}", order.join(" > "));
    print!("{}", std::fs::read_to_string(a.path().join("table2.txt")).unwrap());
    report(
        5,
        "synthetic benchmark",
        all_reach && finite && identical,
        elapsed,
        Duration::from_secs(300),
        &format!("all mAUC@L >= 0.85: {all_reach}; histories finite: {finite}; reports reproducible: {identical}"),
    );
}

#[test]
fn criterion_6_preprocessing() {
    let start = Instant::now();
    let hu = Volume::new([3, 1, 1], [1.0; 3], vec![-1024.0, 400.0, 1500.0], false).unwrap();
    let n = normalize_hu(&hu, (-1024.0, 400.0)).unwrap();
    let hu_ok = n.voxels == [-1.0, 1.0, 1.0];

    let constant = Volume::filled([13, 9, 7], [0.7, 1.3, 2.5], -350.0, false).unwrap();
    let r = resample_trilinear(&constant, [1.0; 3]).unwrap();
    let resample_err = r.voxels.iter().map(|v| (v + 350.0).abs()).fold(0.0f32, f32::max);

    let zeros = Volume::filled([100, 100, 100], [1.0; 3], 0.0, true).unwrap();
    let crop = crop_centered(&zeros, &Centroid { position: [0.0; 3] }, CROP_SIZE).unwrap();
    let mut pad_ok = true;
    for axis in 0..3 {
        let at = |i: usize| {
            let mut p = [30usize; 3];
            p[axis] = i;
            crop.get(p[0], p[1], p[2])
        };
        let low = (0..CROP_SIZE).take_while(|&i| at(i) == -1.0).count();
        pad_ok &= low == 23 && (23..CROP_SIZE).all(|i| at(i) == 0.0);
    }

    let mut one_hot = Volume::filled([48, 48, 48], [1.0; 3], 0.0, true).unwrap();
    one_hot.set(13, 2, 40, 1.0);
    let f = featurize_pool(&one_hot, 8).unwrap();
    let nonzero: Vec<f64> = f.iter().copied().filter(|&v| v != 0.0).collect();
    let pool_ok = nonzero == [1.0 / 512.0];

    report(
        6,
        "preprocessing exactness",
        hu_ok && resample_err <= 1e-6 && pad_ok && pool_ok,
        start.elapsed(),
        Duration::from_secs(5),
        &format!("HU map {:?}, resample max err {resample_err:.1e}, 23-plane padding {pad_ok}, single 1/512 entry {pool_ok}", n.voxels),
    );
}

#[test]
fn criterion_7_stratified_split() {
    let start = Instant::now();
    let t = builtin();
    let counts = GeneratorConfig::counts_from_taxonomy(&t, 1.0).unwrap();
    let d: Dataset = generate_synthetic(
        t.clone(),
        &GeneratorConfig {
            feature_dim: 2,
            leaf_counts: counts,
            level_scales: vec![1.0; 3],
            noise_sigma: 1.0,
            seed: 42,
        },
    )
    .unwrap();
    let split = stratified_split(&d, 5, 42).unwrap();
    let mut worst = 0.0f64;
    for leaf in t.leaves() {
        let members: Vec<&Sample> = split.samples().iter().filter(|s| s.leaf == leaf).collect();
        let test = members.iter().filter(|s| s.split == Some(4)).count();
        let dev = (test as f64 - 0.2 * members.len() as f64).abs();
        println!("  {}: {test} of {} held out", t.tag(leaf), members.len());
        worst = worst.max(dev);
    }
    report(
        7,
        "stratified split",
        worst <= 1.0,
        start.elapsed(),
        Duration::from_secs(5),
        &format!("max deviation from 20% is {worst:.2} samples over {} cases", split.len()),
    );
}
