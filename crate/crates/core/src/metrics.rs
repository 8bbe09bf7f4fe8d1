//! One-vs-rest ROC-AUC per taxonomy node and the weighted means built on it.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{format_f64, Dataset};
use crate::error::{Error, Result};
use crate::strategies::{LeakyInference, Model, NodeProbs};
use crate::taxonomy::{Head, Taxonomy};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredLabel {
    pub score: f64,
    pub positive: bool,
}

/// Which samples enter a node's one-vs-rest comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AucPopulation {
    /// Every evaluated sample.
    #[default]
    All,
    /// Only samples whose true path passes through the node's parent.
    Applicable,
}

impl FromStr for AucPopulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "applicable" => Ok(Self::Applicable),
            _ => Err(Error::Config(format!("unknown AUC population `{s}` (expected all|applicable)"))),
        }
    }
}

/// Sorted indices and average 1-based ranks of `items` by score.
fn average_ranks(items: &[ScoredLabel]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].score.total_cmp(&items[b].score));
    let mut ranks = vec![0.0; items.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && items[order[j + 1]].score == items[order[i]].score {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC with average ranks for ties. `None` when either class is
/// empty.
pub fn auc(items: &[ScoredLabel]) -> Option<f64> {
    let n_pos = items.iter().filter(|s| s.positive).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(items);
    let r_pos: f64 = items.iter().zip(&ranks).filter(|(s, _)| s.positive).map(|(_, r)| r).sum();
    let np = n_pos as f64;
    Some((r_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve from the strictest threshold down; the first point is
/// `(0, 0, +inf)`. Empty when either class is missing.
pub fn roc_points(items: &[ScoredLabel]) -> Vec<RocPoint> {
    let n_pos = items.iter().filter(|s| s.positive).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Vec::new();
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, s) in sorted.iter().enumerate() {
        if s.positive {
            tp += 1;
        } else {
            fp += 1;
        }
        if sorted.get(i + 1).is_none_or(|next| next.score != s.score) {
            points.push(RocPoint {
                fpr: fp as f64 / n_neg as f64,
                tpr: tp as f64 / n_pos as f64,
                threshold: s.score,
            });
        }
    }
    points
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", format_f64(p.fpr), format_f64(p.tpr), format_f64(p.threshold));
    }
    out
}

/// Weighted mean over defined values; `None` if nothing is defined or all
/// weights are zero.
pub fn weighted_mean(values: impl IntoIterator<Item = (Option<f64>, usize)>) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0usize);
    for (v, w) in values {
        if let Some(v) = v {
            num += v * w as f64;
            den += w;
        }
    }
    (den > 0).then(|| num / den as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeAuc {
    pub node: usize,
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadMauc {
    /// Display name (H1, H2, ...).
    pub alias: String,
    pub head: Head,
    pub mauc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// Every non-root node, in depth-first order.
    pub nodes: Vec<NodeAuc>,
    /// One entry per taxonomy head, independent of the strategy's own heads.
    pub heads: Vec<HeadMauc>,
    pub leaf_mauc: Option<f64>,
    pub population: AucPopulation,
}

impl Report {
    pub fn node(&self, node: usize) -> Option<&NodeAuc> {
        self.nodes.iter().find(|n| n.node == node)
    }
}

fn items_for(t: &Taxonomy, leaves: &[usize], probs: &[NodeProbs], node: usize, population: AucPopulation) -> Vec<ScoredLabel> {
    let parent = t.node(node).parent.unwrap_or(node);
    leaves
        .iter()
        .zip(probs)
        .filter(|(&leaf, _)| population == AucPopulation::All || t.is_ancestor_or_self(parent, leaf))
        .map(|(&leaf, p)| ScoredLabel {
            score: p.probs[node],
            positive: t.is_ancestor_or_self(node, leaf),
        })
        .collect()
}

/// Report from true leaves and predicted node probabilities.
pub fn evaluate_scores(t: &Taxonomy, leaves: &[usize], probs: &[NodeProbs], population: AucPopulation) -> Result<Report> {
    if leaves.is_empty() {
        return Err(Error::Data("evaluation population is empty".into()));
    }
    if leaves.len() != probs.len() {
        return Err(Error::Shape(format!("{} labels for {} predictions", leaves.len(), probs.len())));
    }
    let mut nodes = Vec::with_capacity(t.len());
    for &n in t.depth_first() {
        if n == t.root() {
            continue;
        }
        let items = items_for(t, leaves, probs, n, population);
        if items.iter().any(|s| !s.score.is_finite()) {
            return Err(Error::NonFinite(format!("probability of node {}", t.tag(n))));
        }
        let n_pos = items.iter().filter(|s| s.positive).count();
        let value = auc(&items);
        if value.is_none() {
            log::warn!(
                "AUC of node {} undefined ({n_pos} positives of {}); excluded from means",
                t.tag(n),
                items.len()
            );
        }
        nodes.push(NodeAuc {
            node: n,
            auc: value,
            n_pos,
            n_total: items.len(),
        });
    }
    let mut report = Report {
        nodes,
        heads: Vec::new(),
        leaf_mauc: None,
        population,
    };
    report.heads = t
        .derive_heads(false)
        .into_iter()
        .map(|head| HeadMauc {
            alias: t.head_alias(&head),
            mauc: head_mauc(&report, &head),
            head,
        })
        .collect();
    report.leaf_mauc = leaf_mauc(t, &report);
    Ok(report)
}

/// Evaluate on the held-out subset (the last of `folds`).
pub fn evaluate(model: &Model, d: &Dataset, folds: usize, population: AucPopulation) -> Result<(Report, Vec<NodeProbs>)> {
    let test = d.test_samples(folds);
    if test.is_empty() {
        return Err(Error::Data("test subset is empty".into()));
    }
    let probs = model.predict_samples(&test, LeakyInference::Keep)?;
    let leaves: Vec<usize> = test.iter().map(|s| s.leaf).collect();
    let report = evaluate_scores(model.taxonomy(), &leaves, &probs, population)?;
    Ok((report, probs))
}

/// ROC points for one node over the same population the report used.
pub fn node_roc(t: &Taxonomy, leaves: &[usize], probs: &[NodeProbs], node: usize, population: AucPopulation) -> Vec<RocPoint> {
    roc_points(&items_for(t, leaves, probs, node, population))
}

/// Mean AUC over a head's classes weighted by positive counts.
pub fn head_mauc(report: &Report, head: &Head) -> Option<f64> {
    weighted_mean(
        head.classes
            .iter()
            .filter_map(|&c| report.node(c))
            .map(|n| (n.auc, n.n_pos)),
    )
}

/// Mean AUC over all leaves weighted by positive counts.
pub fn leaf_mauc(t: &Taxonomy, report: &Report) -> Option<f64> {
    weighted_mean(
        report
            .nodes
            .iter()
            .filter(|n| t.node(n.node).is_leaf())
            .map(|n| (n.auc, n.n_pos)),
    )
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), format_f64)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// `node,auc,n_pos,n_total`, then `head,mauc`, then `mAUC@L`.
pub fn report_csv(t: &Taxonomy, report: &Report) -> String {
    let mut out = String::from("node,auc,n_pos,n_total\n");
    for n in &report.nodes {
        let _ = writeln!(out, "{},{},{},{}", t.tag(n.node), opt(n.auc), n.n_pos, n.n_total);
    }
    out.push_str("head,mauc\n");
    for h in &report.heads {
        let _ = writeln!(out, "{},{}", h.alias, opt(h.mauc));
    }
    let _ = writeln!(out, "mAUC@L,{}", opt(report.leaf_mauc));
    out
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                if c == 0 {
                    format!("{cell:<w$}", w = widths[c])
                } else {
                    format!("{cell:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
            out.push('\n');
        }
    }
    out
}

/// Per-strategy head and leaf mAUC in percent.
pub fn table2(rows: &[(&str, &Report)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut header = vec!["Methods".to_string()];
    header.extend(first.heads.iter().map(|h| format!("mAUC@{} ({})", h.alias, h.head.parent_tag)));
    header.push("mAUC@L".to_string());
    let mut table = vec![header];
    for (name, r) in rows {
        let mut row = vec![name.to_string()];
        row.extend(r.heads.iter().map(|h| pct(h.mauc)));
        row.push(pct(r.leaf_mauc));
        table.push(row);
    }
    render(&table)
}

/// Per-strategy AUC of every head class in percent, grouped by head.
pub fn table3(rows: &[(&str, &Report)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut header = vec!["Methods".to_string()];
    for (i, h) in first.heads.iter().enumerate() {
        for (j, tag) in h.head.class_tags.iter().enumerate() {
            header.push(if i > 0 && j == 0 { format!("| {tag}") } else { tag.to_string() });
        }
    }
    let mut table = vec![header];
    for (name, r) in rows {
        let mut row = vec![name.to_string()];
        for (i, h) in r.heads.iter().enumerate() {
            for (j, &c) in h.head.classes.iter().enumerate() {
                let v = pct(r.node(c).and_then(|n| n.auc));
                row.push(if i > 0 && j == 0 { format!("| {v}") } else { v });
            }
        }
        table.push(row);
    }
    render(&table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn items(pos: &[f64], neg: &[f64]) -> Vec<ScoredLabel> {
        pos.iter()
            .map(|&score| ScoredLabel { score, positive: true })
            .chain(neg.iter().map(|&score| ScoredLabel { score, positive: false }))
            .collect()
    }

    fn brute_force(items: &[ScoredLabel]) -> Option<f64> {
        let pos: Vec<f64> = items.iter().filter(|s| s.positive).map(|s| s.score).collect();
        let neg: Vec<f64> = items.iter().filter(|s| !s.positive).map(|s| s.score).collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(wins / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&items(&[0.9, 0.8], &[0.2, 0.1])), Some(1.0));
        assert_eq!(auc(&items(&[0.1], &[0.9])), Some(0.0));
        assert_eq!(auc(&items(&[0.9, 0.5], &[0.5, 0.1])), Some(0.875));
        assert_eq!(auc(&items(&[0.9, 0.5], &[])), None);
        assert_eq!(auc(&items(&[0.3; 3], &[0.3; 4])), Some(0.5));
    }

    #[test]
    fn weighted_means() {
        assert_eq!(weighted_mean([(Some(1.0), 3), (Some(0.0), 1)]), Some(0.75));
        assert_eq!(weighted_mean([(Some(0.6), 3), (Some(0.6), 9)]), Some(0.6));
        assert_eq!(weighted_mean([(None, 3), (Some(0.2), 1)]), Some(0.2));
        assert_eq!(weighted_mean([(None, 3)]), None);
        let dominated = weighted_mean([(Some(0.9), 100_000), (Some(0.1), 1)]).unwrap();
        assert!((dominated - 0.9).abs() < 1e-4);
    }

    #[test]
    fn roc_curve_shape() {
        let pts = roc_points(&items(&[0.9, 0.5], &[0.5, 0.1]));
        let fpr: Vec<f64> = pts.iter().map(|p| p.fpr).collect();
        let tpr: Vec<f64> = pts.iter().map(|p| p.tpr).collect();
        assert_eq!(fpr, [0.0, 0.0, 0.5, 1.0]);
        assert_eq!(tpr, [0.0, 0.5, 1.0, 1.0]);
        let area: f64 = pts.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum();
        assert_eq!(area, 0.875);
    }

    fn oracle_probs(t: &Taxonomy, leaf: usize) -> NodeProbs {
        let mut probs = vec![0.0; t.len()];
        for n in t.path_to_root_idx(leaf) {
            probs[n] = 1.0;
        }
        NodeProbs { probs, leak: Vec::new() }
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let t = Taxonomy::pulmonary_radpath();
        let leaves: Vec<usize> = t.leaves().into_iter().flat_map(|l| [l, l, l]).collect();
        for population in [AucPopulation::All, AucPopulation::Applicable] {
            let probs: Vec<NodeProbs> = leaves.iter().map(|&l| oracle_probs(&t, l)).collect();
            let r = evaluate_scores(&t, &leaves, &probs, population).unwrap();
            assert!(r.nodes.iter().all(|n| n.auc == Some(1.0)));
            assert!(r.heads.iter().all(|h| h.mauc == Some(1.0)));
            assert_eq!(r.leaf_mauc, Some(1.0));

            let flat: Vec<NodeProbs> = leaves
                .iter()
                .map(|_| NodeProbs {
                    probs: vec![0.3; t.len()],
                    leak: Vec::new(),
                })
                .collect();
            let r = evaluate_scores(&t, &leaves, &flat, population).unwrap();
            assert!(r.nodes.iter().all(|n| n.auc == Some(0.5)));
        }
    }

    #[test]
    fn population_and_absent_nodes() {
        let t = Taxonomy::pulmonary_radpath();
        let tags = ["H4a", "H4b", "H4a", "H3a", "H1c"];
        let leaves: Vec<usize> = tags.iter().map(|s| t.index_of(s).unwrap()).collect();
        let probs: Vec<NodeProbs> = leaves.iter().map(|&l| oracle_probs(&t, l)).collect();
        let all = evaluate_scores(&t, &leaves, &probs, AucPopulation::All).unwrap();
        let app = evaluate_scores(&t, &leaves, &probs, AucPopulation::Applicable).unwrap();
        let h4a = t.index_of("H4a").unwrap();
        assert_eq!(all.node(h4a).unwrap().n_total, 5);
        assert_eq!(app.node(h4a).unwrap().n_total, 3);
        assert_eq!(all.node(h4a).unwrap().n_pos, 2);
        let h2b = all.node(t.index_of("H2b").unwrap()).unwrap();
        assert_eq!((h2b.auc, h2b.n_pos), (None, 0));
        assert_eq!(all.heads.iter().map(|h| h.alias.as_str()).collect::<Vec<_>>(), ["H1", "H2", "H3", "H4"]);
        let csv = report_csv(&t, &all);
        assert!(csv.starts_with("node,auc,n_pos,n_total\nH1a,"));
        assert!(csv.contains("\nH2b,NA,0,5\n"));
        assert!(csv.contains("\nhead,mauc\nH1,"));
        assert!(csv.ends_with("mAUC@L,1.0000000000000000e0\n"));
    }

    #[test]
    fn tables_have_one_row_per_strategy() {
        let t = Taxonomy::pulmonary_radpath();
        let leaves = t.leaves();
        let probs: Vec<NodeProbs> = leaves.iter().map(|&l| oracle_probs(&t, l)).collect();
        let r = evaluate_scores(&t, &leaves, &probs, AucPopulation::All).unwrap();
        let t2 = table2(&[("Leaf-Node", &r)]);
        assert_eq!(t2.lines().count(), 3);
        assert!(t2.lines().next().unwrap().contains("mAUC@H4 (H2a)"));
        assert!(t2.lines().nth(2).unwrap().ends_with("100.0"));
        let t3 = table3(&[("Leaf-Node", &r), ("Dense Hierarchy", &r)]);
        assert_eq!(t3.lines().count(), 4);
        let header = t3.lines().next().unwrap();
        let cells: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(cells.iter().filter(|c| **c == "|").count(), 3);
        assert_eq!(cells[cells.len() - 3..], ["|", "H4a", "H4b"]);
    }

    fn scored() -> impl Strategy<Value = Vec<ScoredLabel>> {
        prop::collection::vec((0u8..8, any::<bool>()), 2..50)
            .prop_map(|v| v.into_iter().map(|(s, positive)| ScoredLabel { score: s as f64 / 7.0, positive }).collect())
    }

    proptest! {
        #[test]
        fn matches_pair_counting(items in scored()) {
            match (auc(&items), brute_force(&items)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn monotone_transform_invariant(items in scored()) {
            let moved: Vec<ScoredLabel> = items
                .iter()
                .map(|s| ScoredLabel { score: (3.0 * s.score).exp() - 7.0, positive: s.positive })
                .collect();
            prop_assert_eq!(auc(&items), auc(&moved));
        }

        #[test]
        fn label_flip_complements(items in scored()) {
            let flipped: Vec<ScoredLabel> = items.iter().map(|s| ScoredLabel { score: s.score, positive: !s.positive }).collect();
            if let (Some(a), Some(b)) = (auc(&items), auc(&flipped)) {
                prop_assert!((a + b - 1.0).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn weighted_mean_bounded(v in prop::collection::vec((0.0f64..=1.0, 1usize..100), 1..12)) {
            let m = weighted_mean(v.iter().map(|&(a, w)| (Some(a), w))).unwrap();
            let lo = v.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let hi = v.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }
    }
}
