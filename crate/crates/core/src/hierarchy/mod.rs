//! Signal hierarchies: immutable trees of families and leaves.
//!
//! Nodes live in an arena in depth-first pre-order, so a node's children
//! always follow it and every node's leaf descendants form a contiguous range
//! of the leaf order. Node `0` is the root.

mod build;
mod json;

pub use build::{build_fixed, build_text, hash_embed, repeat_last, split_text, PosMode, PositionGenerator};

use crate::error::{HsaError, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Range;

/// Kind of domain a family lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    /// Unordered set; children carry all-zero positions.
    Set,
    /// One-dimensional grid.
    Grid1d,
    /// Key-value signal with distinguishable, embedded keys.
    Keyvalue,
    Custom,
}

impl DomainKind {
    pub const ALL: [DomainKind; 4] = [
        DomainKind::Set,
        DomainKind::Grid1d,
        DomainKind::Keyvalue,
        DomainKind::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainKind::Set => "set",
            DomainKind::Grid1d => "grid1d",
            DomainKind::Keyvalue => "keyvalue",
            DomainKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        DomainKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Owned, recursive description of a hierarchy used for construction and
/// serialization.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeSpec {
    Leaf {
        x: Vec<f64>,
        tag: Option<String>,
    },
    Internal {
        domain: DomainKind,
        children: Vec<ChildSpec>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChildSpec {
    pub pos: Vec<f64>,
    pub node: NodeSpec,
}

impl NodeSpec {
    pub fn leaf(x: Vec<f64>) -> Self {
        NodeSpec::Leaf { x, tag: None }
    }

    pub fn family(domain: DomainKind, children: Vec<ChildSpec>) -> Self {
        NodeSpec::Internal { domain, children }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            NodeSpec::Leaf { .. } => 1,
            NodeSpec::Internal { children, .. } => children.iter().map(|c| c.node.n_leaves()).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Leaf {
        features: Vec<f64>,
        tag: Option<String>,
    },
    Internal {
        domain: DomainKind,
        children: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub parent: Option<usize>,
    /// Position embedding assigned by the parent's domain; zeros for the root.
    pub position: Vec<f64>,
    pub index_in_family: usize,
    pub depth: usize,
    pub leaves: Range<usize>,
    pub kind: NodeKind,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }
}

/// Summary counts of a hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyStats {
    pub n_leaves: usize,
    /// Number of internal nodes (families).
    pub n_families: usize,
    pub max_branching: usize,
    pub depth: usize,
}

/// A violated structural invariant reported by [`SignalHierarchy::validate`]
/// or [`validate_spec`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalHierarchy {
    dim: usize,
    pos_dim: usize,
    nodes: Vec<Node>,
    leaf_nodes: Vec<usize>,
}

impl SignalHierarchy {
    /// Builds and validates a hierarchy. Leaf features shorter than `dim`
    /// are zero-padded.
    pub fn from_spec(dim: usize, pos_dim: usize, root: NodeSpec) -> Result<Self> {
        if dim == 0 || pos_dim == 0 {
            return Err(HsaError::Config("dim and pos_dim must be positive".into()));
        }
        check_spec(dim, pos_dim, &root, &mut String::from("root"))?;
        let mut h = SignalHierarchy {
            dim,
            pos_dim,
            nodes: Vec::new(),
            leaf_nodes: Vec::new(),
        };
        h.push(None, vec![0.0; pos_dim], 0, 0, root);
        Ok(h)
    }

    fn push(&mut self, parent: Option<usize>, position: Vec<f64>, index: usize, depth: usize, spec: NodeSpec) -> usize {
        let id = self.nodes.len();
        let start = self.leaf_nodes.len();
        match spec {
            NodeSpec::Leaf { mut x, tag } => {
                x.resize(self.dim, 0.0);
                self.leaf_nodes.push(id);
                self.nodes.push(Node {
                    parent,
                    position,
                    index_in_family: index,
                    depth,
                    leaves: start..start + 1,
                    kind: NodeKind::Leaf { features: x, tag },
                });
            }
            NodeSpec::Internal { domain, children } => {
                self.nodes.push(Node {
                    parent,
                    position,
                    index_in_family: index,
                    depth,
                    leaves: start..start,
                    kind: NodeKind::Internal {
                        domain,
                        children: Vec::with_capacity(children.len()),
                    },
                });
                let mut ids = Vec::with_capacity(children.len());
                for (i, child) in children.into_iter().enumerate() {
                    ids.push(self.push(Some(id), child.pos, i, depth + 1, child.node));
                }
                let end = self.leaf_nodes.len();
                let node = &mut self.nodes[id];
                node.leaves = start..end;
                if let NodeKind::Internal { children, .. } = &mut node.kind {
                    *children = ids;
                }
            }
        }
        id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pos_dim(&self) -> usize {
        self.pos_dim
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_nodes.len()
    }

    /// Node id of the `i`-th leaf in depth-first left-to-right order.
    pub fn leaf_node(&self, i: usize) -> usize {
        self.leaf_nodes[i]
    }

    pub fn leaf_nodes(&self) -> &[usize] {
        &self.leaf_nodes
    }

    pub fn children(&self, id: usize) -> &[usize] {
        match &self.nodes[id].kind {
            NodeKind::Internal { children, .. } => children,
            NodeKind::Leaf { .. } => &[],
        }
    }

    pub fn domain(&self, id: usize) -> Option<DomainKind> {
        match &self.nodes[id].kind {
            NodeKind::Internal { domain, .. } => Some(*domain),
            NodeKind::Leaf { .. } => None,
        }
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].is_leaf()
    }

    pub fn leaf_features(&self, i: usize) -> &[f64] {
        match &self.nodes[self.leaf_nodes[i]].kind {
            NodeKind::Leaf { features, .. } => features,
            NodeKind::Internal { .. } => unreachable!("leaf order points at a leaf"),
        }
    }

    pub fn leaf_tag(&self, i: usize) -> Option<&str> {
        match &self.nodes[self.leaf_nodes[i]].kind {
            NodeKind::Leaf { tag, .. } => tag.as_deref(),
            NodeKind::Internal { .. } => unreachable!("leaf order points at a leaf"),
        }
    }

    /// Internal node ids grouped by depth (index 0 holds the root).
    pub fn internal_by_depth(&self) -> Vec<Vec<usize>> {
        let mut levels: Vec<Vec<usize>> = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.is_leaf() {
                continue;
            }
            if levels.len() <= node.depth {
                levels.resize(node.depth + 1, Vec::new());
            }
            levels[node.depth].push(id);
        }
        levels
    }

    /// True when `a` is `b` or one of `b`'s ancestors.
    pub fn is_ancestor_or_self(&self, a: usize, b: usize) -> bool {
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            match self.nodes[cur].parent {
                Some(p) => cur = p,
                None => return false,
            }
        }
    }

    /// Highest distinct ancestors `(A', B')` of two unrelated nodes: the
    /// children of their immediate common ancestor that contain `a` and `b`.
    /// Returns `None` when the nodes are related.
    pub fn highest_distinct_ancestors(&self, a: usize, b: usize) -> Option<(usize, usize)> {
        if self.is_ancestor_or_self(a, b) || self.is_ancestor_or_self(b, a) {
            return None;
        }
        let (mut x, mut y) = (a, b);
        while self.nodes[x].depth > self.nodes[y].depth {
            x = self.nodes[x].parent?;
        }
        while self.nodes[y].depth > self.nodes[x].depth {
            y = self.nodes[y].parent?;
        }
        loop {
            let (px, py) = (self.nodes[x].parent?, self.nodes[y].parent?);
            if px == py {
                return Some((x, y));
            }
            x = px;
            y = py;
        }
    }

    /// Child of `ancestor` whose subtree contains `node`.
    pub fn child_toward(&self, ancestor: usize, node: usize) -> usize {
        let mut cur = node;
        loop {
            let p = self.nodes[cur].parent.expect("ancestor lies above node");
            if p == ancestor {
                return cur;
            }
            cur = p;
        }
    }

    pub fn stats(&self) -> HierarchyStats {
        let mut n_families = 0;
        let mut max_branching = 0;
        let mut depth = 0;
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Internal { children, .. } => {
                    n_families += 1;
                    max_branching = max_branching.max(children.len());
                }
                NodeKind::Leaf { .. } => depth = depth.max(node.depth),
            }
        }
        HierarchyStats {
            n_leaves: self.n_leaves(),
            n_families,
            max_branching,
            depth,
        }
    }

    /// Re-checks the structural invariants of a built tree. Returns the list
    /// of violations (empty for any hierarchy produced by this module).
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut seen = vec![false; self.n_leaves()];
        for (i, &id) in self.leaf_nodes.iter().enumerate() {
            if self.nodes[id].leaves != (i..i + 1) {
                out.push(diag(format!("leaf {i}"), "leaf order is not a bijection onto 0..N"));
            }
            if let Some(s) = seen.get_mut(i) {
                *s = true;
            }
        }
        if seen.iter().any(|s| !s) {
            out.push(diag("root".into(), "leaf order does not cover 0..N"));
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.position.len() != self.pos_dim {
                out.push(diag(format!("node {id}"), "position length differs from pos_dim"));
            }
            match &node.kind {
                NodeKind::Leaf { features, .. } => {
                    if features.len() != self.dim {
                        out.push(diag(format!("node {id}"), "leaf feature length differs from dim"));
                    }
                }
                NodeKind::Internal { domain, children } => {
                    if children.is_empty() {
                        out.push(diag(format!("node {id}"), "empty family"));
                        continue;
                    }
                    let mut next = node.leaves.start;
                    for &c in children {
                        let cl = &self.nodes[c].leaves;
                        if cl.start != next {
                            out.push(diag(format!("node {id}"), "child leaf ranges are not contiguous"));
                        }
                        next = cl.end;
                        if *domain == DomainKind::Set && self.nodes[c].position.iter().any(|&p| p != 0.0) {
                            out.push(diag(format!("node {c}"), "set-domain child has non-zero position"));
                        }
                        if self.nodes[c].parent != Some(id) {
                            out.push(diag(format!("node {c}"), "parent link mismatch"));
                        }
                    }
                    if next != node.leaves.end {
                        out.push(diag(format!("node {id}"), "children do not cover the node's leaves"));
                    }
                }
            }
        }
        out
    }

    /// Converts back to an owned spec tree (leaf order preserved).
    pub fn to_spec(&self) -> NodeSpec {
        self.spec_of(self.root())
    }

    pub fn spec_of(&self, id: usize) -> NodeSpec {
        match &self.nodes[id].kind {
            NodeKind::Leaf { features, tag } => NodeSpec::Leaf {
                x: features.clone(),
                tag: tag.clone(),
            },
            NodeKind::Internal { domain, children } => NodeSpec::Internal {
                domain: *domain,
                children: children
                    .iter()
                    .map(|&c| ChildSpec {
                        pos: self.nodes[c].position.clone(),
                        node: self.spec_of(c),
                    })
                    .collect(),
            },
        }
    }

    /// Same structure and positions, leaf features replaced in leaf order.
    pub fn with_leaf_features(&self, features: &[Vec<f64>]) -> Result<Self> {
        if features.len() != self.n_leaves() {
            return Err(HsaError::Dimension {
                what: "leaf feature list".into(),
                expected: self.n_leaves(),
                got: features.len(),
            });
        }
        let dim = features.first().map_or(self.dim, Vec::len);
        let mut out = self.clone();
        out.dim = dim;
        for (i, &id) in self.leaf_nodes.iter().enumerate() {
            if features[i].len() != dim {
                return Err(HsaError::Dimension {
                    what: format!("leaf {i} features"),
                    expected: dim,
                    got: features[i].len(),
                });
            }
            if let NodeKind::Leaf { features: f, .. } = &mut out.nodes[id].kind {
                f.clone_from(&features[i]);
            }
        }
        Ok(out)
    }

    /// Same tree with every non-root position mapped through `f`, which
    /// receives the parent's domain. The new position dimension is taken
    /// from the output of `f`.
    pub fn map_positions<F>(&self, new_pos_dim: usize, mut f: F) -> Self
    where
        F: FnMut(DomainKind, &[f64]) -> Vec<f64>,
    {
        let mut out = self.clone();
        out.pos_dim = new_pos_dim;
        for id in 0..self.nodes.len() {
            out.nodes[id].position = match self.nodes[id].parent {
                Some(p) => f(self.domain(p).expect("parent is internal"), &self.nodes[id].position),
                None => vec![0.0; new_pos_dim],
            };
        }
        out
    }

    /// One root family whose children are this hierarchy's leaves in leaf
    /// order, each keeping the position it had in its own family.
    pub fn flatten(&self) -> Self {
        let root = &self.nodes[0];
        let already_flat = match &root.kind {
            NodeKind::Leaf { .. } => true,
            NodeKind::Internal { children, .. } => children.iter().all(|&c| self.nodes[c].is_leaf()),
        };
        if already_flat {
            return self.clone();
        }
        let children = self
            .leaf_nodes
            .iter()
            .map(|&id| ChildSpec {
                pos: self.nodes[id].position.clone(),
                node: self.spec_of(id),
            })
            .collect();
        SignalHierarchy::from_spec(self.dim, self.pos_dim, NodeSpec::family(DomainKind::Custom, children))
            .expect("flattening a valid hierarchy is valid")
    }
}

fn diag(path: String, message: &str) -> Diagnostic {
    Diagnostic {
        path,
        message: message.to_string(),
    }
}

fn check_spec(dim: usize, pos_dim: usize, spec: &NodeSpec, path: &mut String) -> Result<()> {
    match spec {
        NodeSpec::Leaf { x, .. } => {
            if x.len() > dim {
                return Err(HsaError::Dimension {
                    what: format!("leaf features at {path}"),
                    expected: dim,
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(HsaError::Schema(format!("non-finite leaf feature at {path}")));
            }
        }
        NodeSpec::Internal { domain, children } => {
            if children.is_empty() {
                return Err(HsaError::EmptyFamily { path: path.clone() });
            }
            for (i, child) in children.iter().enumerate() {
                let len = path.len();
                path.push_str(&format!("/{i}"));
                if child.pos.len() != pos_dim {
                    return Err(HsaError::Dimension {
                        what: format!("position at {path}"),
                        expected: pos_dim,
                        got: child.pos.len(),
                    });
                }
                if child.pos.iter().any(|v| !v.is_finite()) {
                    return Err(HsaError::Schema(format!("non-finite position at {path}")));
                }
                if *domain == DomainKind::Set && child.pos.iter().any(|&p| p != 0.0) {
                    return Err(HsaError::NonZeroSetPosition { path: path.clone() });
                }
                check_spec(dim, pos_dim, &child.node, path)?;
                path.truncate(len);
            }
        }
    }
    Ok(())
}

/// Checks a spec tree without building it; returns every violation found.
pub fn validate_spec(dim: usize, pos_dim: usize, spec: &NodeSpec) -> Vec<Diagnostic> {
    fn walk(dim: usize, pos_dim: usize, spec: &NodeSpec, path: String, out: &mut Vec<Diagnostic>) {
        match spec {
            NodeSpec::Leaf { x, .. } => {
                if x.len() > dim {
                    out.push(diag(path, "leaf features longer than dim"));
                }
            }
            NodeSpec::Internal { domain, children } => {
                if children.is_empty() {
                    out.push(diag(path.clone(), "empty family"));
                }
                for (i, child) in children.iter().enumerate() {
                    let p = format!("{path}/{i}");
                    if child.pos.len() != pos_dim {
                        out.push(diag(p.clone(), "position length differs from pos_dim"));
                    }
                    if *domain == DomainKind::Set && child.pos.iter().any(|&v| v != 0.0) {
                        out.push(diag(p.clone(), "set-domain child has non-zero position"));
                    }
                    walk(dim, pos_dim, &child.node, p, out);
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(dim, pos_dim, spec, "root".into(), &mut out);
    out
}

/// A batch of hierarchies joined under a dummy `set` root.
#[derive(Clone, Debug)]
pub struct Batch {
    pub hierarchy: SignalHierarchy,
    /// Leaf range of each original hierarchy in the concatenated leaf order.
    pub offsets: Vec<Range<usize>>,
}

impl Batch {
    /// Node ids of the original roots (the children of the dummy root).
    pub fn eval_roots(&self) -> &[usize] {
        self.hierarchy.children(self.hierarchy.root())
    }
}

/// Breadth-wise tree concatenation: a new `set` root whose children are the
/// original roots, with zero positions.
pub fn batch_concat(hs: &[SignalHierarchy]) -> Result<Batch> {
    let first = hs.first().ok_or(HsaError::EmptyInput("batch has no hierarchies"))?;
    let (dim, pos_dim) = (first.dim, first.pos_dim);
    let mut children = Vec::with_capacity(hs.len());
    let mut offsets = Vec::with_capacity(hs.len());
    let mut start = 0;
    for h in hs {
        if h.dim != dim || h.pos_dim != pos_dim {
            return Err(HsaError::MixedDims(dim, pos_dim, h.dim, h.pos_dim));
        }
        children.push(ChildSpec {
            pos: vec![0.0; pos_dim],
            node: h.to_spec(),
        });
        offsets.push(start..start + h.n_leaves());
        start += h.n_leaves();
    }
    let hierarchy = SignalHierarchy::from_spec(dim, pos_dim, NodeSpec::family(DomainKind::Set, children))?;
    Ok(Batch { hierarchy, offsets })
}
