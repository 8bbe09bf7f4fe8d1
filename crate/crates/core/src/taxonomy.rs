//! Class hierarchy: parsing, validation, derived heads and label routing.
//!
//! A taxonomy file is line oriented, one node per line:
//!
//! ```text
//! tag<TAB>parent_tag<TAB>display name[<TAB>count]
//! ```
//!
//! The root uses `-` as its parent. Lines starting with `#` are comments and
//! blank lines are skipped. Children keep the order in which they are
//! declared, which fixes class indices inside every head.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// The built-in lung lesion taxonomy (15 nodes, 11 leaves, with case counts).
pub const PULMONARY_RADPATH: &str = include_str!("../data/pulmonary_radpath.tsv");

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeTag(String);

impl NodeTag {
    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        if value.is_empty() {
            return Err(Error::Data("empty node tag".into()));
        }
        if value.chars().any(char::is_whitespace) {
            return Err(Error::Data(format!("node tag `{value}` contains whitespace")));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaxonomyNode {
    pub tag: NodeTag,
    pub name: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub level: usize,
    pub count: Option<u64>,
}

impl TaxonomyNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Immutable, validated class tree. Nodes are stored in declaration order and
/// addressed by index.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    nodes: Vec<TaxonomyNode>,
    index: HashMap<NodeTag, usize>,
    root: usize,
    dfs: Vec<usize>,
}

/// A softmax classifier over the children of one internal node.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// Index of the node whose children are classified.
    pub parent: usize,
    pub parent_tag: NodeTag,
    /// Child node indices, in declaration order.
    pub classes: Vec<usize>,
    pub class_tags: Vec<NodeTag>,
    /// When set, a virtual fall-back class follows the real ones.
    pub leaky: bool,
}

impl Head {
    /// Number of softmax outputs, including the leaky slot.
    pub fn width(&self) -> usize {
        self.classes.len() + usize::from(self.leaky)
    }

    /// Output index of the leaky slot, if any.
    pub fn leaky_index(&self) -> Option<usize> {
        self.leaky.then_some(self.classes.len())
    }
}

/// Training target of one sample for one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    Leaky,
    NotApplicable,
}

impl Target {
    /// The output index trained toward, given the head's real class count.
    pub fn output_index(self, real_classes: usize) -> Option<usize> {
        match self {
            Target::Class(c) => Some(c),
            Target::Leaky => Some(real_classes),
            Target::NotApplicable => None,
        }
    }
}

/// Per-head targets of one sample, in head order.
pub type RoutedLabel = Vec<Target>;

struct RawLine {
    line: usize,
    tag: NodeTag,
    parent: Option<String>,
    name: String,
    count: Option<u64>,
}

fn taxonomy_err(line: usize, message: impl Into<String>) -> Error {
    Error::Taxonomy {
        line,
        message: message.into(),
    }
}

impl Taxonomy {
    /// Parse and validate taxonomy file content.
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw: Vec<RawLine> = Vec::new();
        let mut index: HashMap<NodeTag, usize> = HashMap::new();

        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 || fields.len() > 4 {
                return Err(taxonomy_err(
                    lineno,
                    format!("expected 3 or 4 tab-separated fields, found {}", fields.len()),
                ));
            }
            let tag = NodeTag::new(fields[0]).map_err(|e| taxonomy_err(lineno, e.to_string()))?;
            if index.contains_key(&tag) {
                return Err(taxonomy_err(lineno, format!("duplicate tag `{tag}`")));
            }
            let parent = match fields[1] {
                "-" => None,
                p => Some(p.to_string()),
            };
            let count = match fields.get(3) {
                Some(c) => Some(c.trim().parse::<u64>().map_err(|_| {
                    taxonomy_err(lineno, format!("count `{c}` is not a nonnegative integer"))
                })?),
                None => None,
            };
            index.insert(tag.clone(), raw.len());
            raw.push(RawLine {
                line: lineno,
                tag,
                parent,
                name: fields[2].to_string(),
                count,
            });
        }

        let mut parents: Vec<Option<usize>> = Vec::with_capacity(raw.len());
        let mut root: Option<usize> = None;
        for (i, r) in raw.iter().enumerate() {
            match &r.parent {
                None => {
                    if let Some(first) = root {
                        return Err(taxonomy_err(
                            r.line,
                            format!(
                                "multiple roots: `{}` and `{}` both have parent `-`",
                                raw[first].tag, r.tag
                            ),
                        ));
                    }
                    root = Some(i);
                    parents.push(None);
                }
                Some(p) => {
                    let pi = NodeTag::new(p.as_str())
                        .ok()
                        .and_then(|t| index.get(&t).copied())
                        .ok_or_else(|| {
                            taxonomy_err(r.line, format!("unknown parent `{p}` of `{}`", r.tag))
                        })?;
                    if pi == i {
                        return Err(taxonomy_err(r.line, format!("cycle: `{}` is its own parent", r.tag)));
                    }
                    parents.push(Some(pi));
                }
            }
        }

        // Any node whose parent chain revisits a node lies on (or hangs off) a cycle.
        for start in 0..raw.len() {
            let mut seen = vec![false; raw.len()];
            let mut cur = start;
            seen[cur] = true;
            while let Some(p) = parents[cur] {
                if seen[p] {
                    return Err(taxonomy_err(
                        raw[p].line,
                        format!("cycle through `{}`", raw[p].tag),
                    ));
                }
                seen[p] = true;
                cur = p;
            }
        }

        let root = root.ok_or_else(|| taxonomy_err(raw.len().max(1), "no root node (parent `-`)"))?;

        let mut nodes: Vec<TaxonomyNode> = raw
            .iter()
            .zip(&parents)
            .map(|(r, &p)| TaxonomyNode {
                tag: r.tag.clone(),
                name: r.name.clone(),
                parent: p,
                children: Vec::new(),
                level: 0,
                count: r.count,
            })
            .collect();
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                nodes[*p].children.push(i);
            }
        }

        let mut dfs = Vec::with_capacity(nodes.len());
        let mut stack = vec![(root, 0usize)];
        while let Some((n, level)) = stack.pop() {
            nodes[n].level = level;
            dfs.push(n);
            for &c in nodes[n].children.iter().rev() {
                stack.push((c, level + 1));
            }
        }
        debug_assert_eq!(dfs.len(), nodes.len(), "acyclic parent links reach the root");

        let leaf_count = nodes.iter().filter(|n| n.is_leaf()).count();
        if leaf_count < 2 {
            return Err(taxonomy_err(
                raw.last().map_or(1, |r| r.line),
                format!("taxonomy needs at least 2 leaves, found {leaf_count}"),
            ));
        }

        if nodes.iter().all(|n| n.count.is_some()) {
            for (i, n) in nodes.iter().enumerate() {
                if n.is_leaf() {
                    continue;
                }
                let sum: u64 = n.children.iter().map(|&c| nodes[c].count.unwrap_or(0)).sum();
                if Some(sum) != n.count {
                    return Err(taxonomy_err(
                        raw[i].line,
                        format!(
                            "count of `{}` is {} but its children sum to {sum}",
                            n.tag,
                            n.count.unwrap_or(0)
                        ),
                    ));
                }
            }
        }

        Ok(Self {
            nodes,
            index,
            root,
            dfs,
        })
    }

    pub fn pulmonary_radpath() -> Self {
        Self::parse(PULMONARY_RADPATH).expect("built-in taxonomy is valid")
    }

    /// Canonical file form: one line per node in declaration order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let parent = n.parent.map_or("-", |p| self.nodes[p].tag.as_str());
            out.push_str(&format!("{}\t{}\t{}", n.tag, parent, n.name));
            if let Some(c) = n.count {
                out.push_str(&format!("\t{c}"));
            }
            out.push('\n');
        }
        out
    }

    /// Stable fingerprint of the canonical serialization.
    pub fn fingerprint(&self) -> u64 {
        crate::rng::fnv1a(self.serialize().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, i: usize) -> &TaxonomyNode {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[TaxonomyNode] {
        &self.nodes
    }

    pub fn tag(&self, i: usize) -> &NodeTag {
        &self.nodes[i].tag
    }

    pub fn index_of(&self, tag: &str) -> Result<usize> {
        NodeTag::new(tag)
            .ok()
            .and_then(|t| self.index.get(&t).copied())
            .ok_or_else(|| Error::UnknownTag(tag.to_string()))
    }

    pub fn max_level(&self) -> usize {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    /// Node indices in depth-first pre-order, children in declaration order.
    pub fn depth_first(&self) -> &[usize] {
        &self.dfs
    }

    /// Leaf indices in depth-first order.
    pub fn leaves(&self) -> Vec<usize> {
        self.dfs.iter().copied().filter(|&i| self.nodes[i].is_leaf()).collect()
    }

    pub fn leaf_tags(&self) -> Vec<NodeTag> {
        self.leaves().into_iter().map(|i| self.nodes[i].tag.clone()).collect()
    }

    /// Indices from `node` up to the root, inclusive.
    pub fn path_to_root_idx(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path
    }

    pub fn path_to_root(&self, tag: &str) -> Result<Vec<NodeTag>> {
        let i = self.index_of(tag)?;
        Ok(self
            .path_to_root_idx(i)
            .into_iter()
            .map(|n| self.nodes[n].tag.clone())
            .collect())
    }

    /// True when `ancestor` lies on the path from `node` to the root.
    pub fn is_ancestor_or_self(&self, ancestor: usize, node: usize) -> bool {
        let mut cur = Some(node);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.nodes[c].parent;
        }
        false
    }

    /// One head per internal node with at least two children, ordered by
    /// (level, declaration order).
    pub fn derive_heads(&self, leaky: bool) -> Vec<Head> {
        let mut owners: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].children.len() >= 2)
            .collect();
        owners.sort_by_key(|&i| (self.nodes[i].level, i));
        owners
            .into_iter()
            .map(|p| Head {
                parent: p,
                parent_tag: self.nodes[p].tag.clone(),
                classes: self.nodes[p].children.clone(),
                class_tags: self.nodes[p]
                    .children
                    .iter()
                    .map(|&c| self.nodes[c].tag.clone())
                    .collect(),
                leaky,
            })
            .collect()
    }

    /// Route a leaf label to per-head targets.
    pub fn route_label(&self, heads: &[Head], leaf: usize) -> Result<RoutedLabel> {
        if !self.nodes[leaf].is_leaf() {
            return Err(Error::NotALeaf(self.nodes[leaf].tag.to_string()));
        }
        let path = self.path_to_root_idx(leaf);
        Ok(heads
            .iter()
            .map(|h| {
                // The path node directly below the head's parent, if the path crosses it.
                let below = path
                    .iter()
                    .position(|&n| n == h.parent)
                    .and_then(|pos| pos.checked_sub(1))
                    .map(|pos| path[pos]);
                match below {
                    Some(child) => Target::Class(
                        h.classes
                            .iter()
                            .position(|&c| c == child)
                            .expect("path child belongs to its parent's head"),
                    ),
                    None if h.leaky => Target::Leaky,
                    None => Target::NotApplicable,
                }
            })
            .collect())
    }

    pub fn route_label_tag(&self, heads: &[Head], leaf: &str) -> Result<RoutedLabel> {
        self.route_label(heads, self.index_of(leaf)?)
    }

    /// Display name of a head: `H1`..`H4` for the built-in lesion taxonomy,
    /// the parent tag otherwise.
    pub fn head_alias(&self, head: &Head) -> String {
        if self.is_pulmonary_radpath() {
            match head.parent_tag.as_str() {
                "H0" => return "H1".into(),
                "H1a" => return "H2".into(),
                "H1b" => return "H3".into(),
                "H2a" => return "H4".into(),
                _ => {}
            }
        }
        head.parent_tag.to_string()
    }

    /// Same tags and parent links as the built-in lesion taxonomy.
    pub fn is_pulmonary_radpath(&self) -> bool {
        let reference = Self::pulmonary_radpath_structure();
        self.nodes.len() == reference.len()
            && self.nodes.iter().zip(reference).all(|(n, (tag, parent))| {
                n.tag.as_str() == *tag
                    && n.parent.map(|p| self.nodes[p].tag.as_str()) == *parent
            })
    }

    fn pulmonary_radpath_structure() -> &'static [(&'static str, Option<&'static str>)] {
        &[
            ("H0", None),
            ("H1a", Some("H0")),
            ("H2a", Some("H1a")),
            ("H4a", Some("H2a")),
            ("H4b", Some("H2a")),
            ("H2b", Some("H1a")),
            ("H2c", Some("H1a")),
            ("H2d", Some("H1a")),
            ("H2e", Some("H1a")),
            ("H1b", Some("H0")),
            ("H3a", Some("H1b")),
            ("H3b", Some("H1b")),
            ("H3c", Some("H1b")),
            ("H3d", Some("H1b")),
            ("H1c", Some("H0")),
        ]
    }
}
