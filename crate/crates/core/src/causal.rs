//! Causal masking and incremental decoding with a right-skewed cache.
//!
//! Under causal masking a node interacts only with its left siblings (and a
//! leaf optionally with itself). During generation only the rightmost path
//! of the hierarchy is still open; every other node is final and is kept as
//! a [`Summary`] inside its parent. A new token therefore touches one open
//! node per level, and the cache holds at most `b` entries per level.
//!
//! Levels are numbered from the leaves: level 1 holds the families of
//! tokens, the root sits at the cache depth. A boundary event "close level
//! `k`" seals the open families at levels `1..=k` before the next token is
//! placed; sealing the root grows a new root above it.

use crate::dp::{hsa_forward, AttentionOutput, DpOptions, ExactKernel, FamilyKernel, PayloadMode};
use crate::energy::{LeafStates, SiblingMask};
use crate::error::{HsaError, Result};
use crate::hierarchy::{split_text, ChildSpec, NodeSpec, PosMode, PositionGenerator, SignalHierarchy};
use crate::numeric::{axpy, dot, fmt_shortest, log_add_exp, split_log_shares};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CausalConfig {
    /// Let each leaf attend to itself.
    pub include_self: bool,
    pub payload: PayloadMode,
    pub pos_scale: f64,
}

impl Default for CausalConfig {
    fn default() -> Self {
        CausalConfig {
            include_self: true,
            payload: PayloadMode::Keys,
            pos_scale: 1.0,
        }
    }
}

impl CausalConfig {
    pub fn mask(&self) -> SiblingMask {
        SiblingMask::Left {
            include_self: self.include_self,
        }
    }

    fn dp_options(&self, threads: usize) -> DpOptions {
        DpOptions {
            payload: self.payload,
            mask: self.mask(),
            pos_scale: self.pos_scale,
            threads,
        }
    }
}

/// Hierarchical attention with left-sibling masking on every level.
pub fn hsa_causal_forward(h: &SignalHierarchy, states: &LeafStates, cfg: &CausalConfig) -> Result<AttentionOutput> {
    hsa_forward(h, states, &cfg.dp_options(1))
}

/// Bottom-up statistics of a sealed node.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub phi: f64,
    pub eta: f64,
    pub rho_q: Vec<f64>,
    pub rho_k: Vec<f64>,
    pub rho_v: Vec<f64>,
    pub n_leaves: usize,
    pub pos: Vec<f64>,
}

impl Summary {
    fn log_term(&self) -> f64 {
        self.n_leaves as f64 * log_add_exp(-self.phi, -self.eta)
    }
}

/// A node on the rightmost path. `n == 0` marks a family that has been
/// opened but has no tokens yet.
#[derive(Clone, Debug)]
struct OpenNode {
    closed: Vec<Summary>,
    /// `Σ |ℓ(B)| log(e^{-φ(B)} + e^{-η(B)})` over sealed children.
    closed_log_sum: f64,
    closed_degenerate: bool,
    sum_q: Vec<f64>,
    sum_k: Vec<f64>,
    sum_v: Vec<f64>,
    n: usize,
    pos: Vec<f64>,
}

impl OpenNode {
    fn empty(d: usize, dv: usize, pos: Vec<f64>) -> Self {
        OpenNode {
            closed: Vec::new(),
            closed_log_sum: 0.0,
            closed_degenerate: false,
            sum_q: vec![0.0; d],
            sum_k: vec![0.0; d],
            sum_v: vec![0.0; dv],
            n: 0,
            pos,
        }
    }

    fn push(&mut self, s: Summary) {
        let t = s.log_term();
        if t == f64::NEG_INFINITY {
            self.closed_degenerate = true;
        } else {
            self.closed_log_sum += t;
        }
        self.closed.push(s);
    }

    fn mean(v: &[f64], n: usize) -> Vec<f64> {
        v.iter().map(|x| x / n as f64).collect()
    }
}

/// Counters of a cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheStats {
    /// Entries below the root: sealed summaries plus open non-root nodes.
    pub nodes: usize,
    pub depth: usize,
    /// Operations spent by the last append.
    pub per_token_ops: u64,
    pub n_tokens: usize,
}

/// Incremental causal attention state.
#[derive(Clone, Debug)]
pub struct RightSkewedCache {
    cfg: CausalConfig,
    d: usize,
    dv: usize,
    gen: PositionGenerator,
    /// `open[l - 1]` is the open node at level `l`; the last one is the root.
    open: Vec<OpenNode>,
    n_tokens: usize,
    last_ops: u64,
    peak_nodes: usize,
}

impl RightSkewedCache {
    /// An empty cache whose root sits `depth` levels above the tokens.
    pub fn new(dim: usize, value_dim: usize, pos_dim: usize, depth: usize, pos_mode: PosMode, cfg: CausalConfig) -> Result<Self> {
        if depth == 0 || dim == 0 {
            return Err(HsaError::Config("cache depth and dim must be positive".into()));
        }
        let gen = PositionGenerator::new(pos_mode, pos_dim);
        let mut open: Vec<OpenNode> = (0..depth).map(|_| OpenNode::empty(dim, value_dim, gen.position(0))).collect();
        open[depth - 1].pos = vec![0.0; pos_dim];
        Ok(RightSkewedCache {
            cfg,
            d: dim,
            dv: value_dim,
            gen,
            open,
            n_tokens: 0,
            last_ops: 0,
            peak_nodes: 0,
        })
    }

    /// Builds the cache for continuing after `prompt`: the rightmost path
    /// stays open and every other node is folded into its parent.
    pub fn from_prompt(prompt: &SignalHierarchy, states: &LeafStates, pos_mode: PosMode, cfg: CausalConfig) -> Result<Self> {
        states.check(prompt)?;
        if prompt.is_leaf(prompt.root()) {
            return Err(HsaError::Config("prompt needs at least one family".into()));
        }
        let st = crate::dp::bottom_up(prompt, states, &cfg.dp_options(1), &[prompt.root()], &ExactKernel)?;
        let mut path = vec![prompt.root()];
        while let Some(&last) = prompt.children(*path.last().expect("non-empty")).last() {
            path.push(last);
        }
        path.pop();
        let depth = path.len();
        let mut cache = RightSkewedCache::new(states.dim(), states.value_dim(), prompt.pos_dim(), depth, pos_mode, cfg)?;
        for (l, &p) in path.iter().rev().enumerate() {
            let node = &mut cache.open[l];
            let kids = prompt.children(p);
            let sealed = if l == 0 { kids } else { &kids[..kids.len() - 1] };
            for &c in sealed {
                node.push(Summary {
                    phi: st.phi[c],
                    eta: st.eta[c],
                    rho_q: st.rho_q[c].clone(),
                    rho_k: st.rho_k[c].clone(),
                    rho_v: st.rho_v[c].clone(),
                    n_leaves: prompt.node(c).n_leaves(),
                    pos: prompt.node(c).position.clone(),
                });
            }
            let n = prompt.node(p).n_leaves();
            node.n = n;
            node.sum_q = st.rho_q[p].iter().map(|x| x * n as f64).collect();
            node.sum_k = st.rho_k[p].iter().map(|x| x * n as f64).collect();
            node.sum_v = st.rho_v[p].iter().map(|x| x * n as f64).collect();
            node.pos = prompt.node(p).position.clone();
        }
        cache.n_tokens = prompt.n_leaves();
        cache.peak_nodes = cache.node_count();
        Ok(cache)
    }

    pub fn depth(&self) -> usize {
        self.open.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Children (sealed plus open) of the open node at `level`.
    pub fn children_at(&self, level: usize) -> usize {
        let node = &self.open[level - 1];
        node.closed.len() + usize::from(level > 1 && self.open[level - 2].n > 0)
    }

    fn node_count(&self) -> usize {
        let sealed: usize = self.open.iter().map(|o| o.closed.len()).sum();
        let open = self.open[..self.open.len() - 1].iter().filter(|o| o.n > 0).count();
        sealed + open
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            nodes: self.node_count(),
            depth: self.depth(),
            per_token_ops: self.last_ops,
            n_tokens: self.n_tokens,
        }
    }

    pub fn peak_nodes(&self) -> usize {
        self.peak_nodes
    }

    fn sqrt_d(&self) -> f64 {
        (self.d as f64).sqrt()
    }

    fn logit(&self, pos_a: &[f64], q_a: &[f64], s: &Summary) -> f64 {
        let sd = self.sqrt_d();
        self.cfg.pos_scale * dot(pos_a, &s.pos) + dot(q_a, &s.rho_k) / sd - sd + (s.n_leaves as f64).ln()
    }

    fn payload<'a>(&self, s: &'a Summary) -> &'a [f64] {
        match self.cfg.payload {
            PayloadMode::Keys => &s.rho_k,
            PayloadMode::Values => &s.rho_v,
        }
    }

    fn pdim(&self) -> usize {
        match self.cfg.payload {
            PayloadMode::Keys => self.d,
            PayloadMode::Values => self.dv,
        }
    }

    /// `(η, θ)` of a node at `pos` with query centroid `q` against the sealed
    /// children of `parent`.
    fn sibling_summary(&self, parent: &OpenNode, pos: &[f64], q: &[f64], ops: &mut u64) -> (f64, Vec<f64>) {
        let logits: Vec<f64> = parent.closed.iter().map(|s| self.logit(pos, q, s)).collect();
        let payloads: Vec<&[f64]> = parent.closed.iter().map(|s| self.payload(s)).collect();
        *ops += logits.len() as u64;
        ExactKernel.summarize(&logits, &payloads, self.pdim())
    }

    fn seal(&mut self, level: usize, ops: &mut u64) -> Result<()> {
        let idx = level - 1;
        if self.open[idx].n == 0 {
            return Err(HsaError::EventOrder(format!("level {level} has no tokens to close")));
        }
        if idx + 1 == self.open.len() {
            let old = &self.open[idx];
            let mut root = OpenNode::empty(self.d, self.dv, old.pos.clone());
            root.sum_q.clone_from(&old.sum_q);
            root.sum_k.clone_from(&old.sum_k);
            root.sum_v.clone_from(&old.sum_v);
            root.n = old.n;
            self.open[idx].pos = self.gen.position(0);
            self.open.push(root);
        }
        let node = &self.open[idx];
        let phi = if node.closed_degenerate {
            f64::INFINITY
        } else {
            -node.closed_log_sum / node.n as f64
        };
        let rho_q = OpenNode::mean(&node.sum_q, node.n);
        let (eta, _) = self.sibling_summary(&self.open[idx + 1], &node.pos, &rho_q, ops);
        *ops += 1;
        let summary = Summary {
            phi,
            eta,
            rho_q,
            rho_k: OpenNode::mean(&node.sum_k, node.n),
            rho_v: OpenNode::mean(&node.sum_v, node.n),
            n_leaves: node.n,
            pos: node.pos.clone(),
        };
        self.open[idx + 1].push(summary);
        let next_pos = self.gen.position(self.open[idx + 1].closed.len());
        self.open[idx] = OpenNode::empty(self.d, self.dv, next_pos);
        // Levels sealed earlier in this batch now open under a fresh parent.
        for node in &mut self.open[..idx] {
            node.pos = self.gen.position(0);
        }
        Ok(())
    }

    /// Seals levels `1..=k` (given as `events`, which must read
    /// `[1, 2, ..., k]`), appends one token, and returns its attention
    /// gradient `∇_q φ(root)` over the whole prefix.
    pub fn append(&mut self, q: &[f64], k: &[f64], v: &[f64], events: &[usize]) -> Result<Vec<f64>> {
        if q.len() != self.d || k.len() != self.d || v.len() != self.dv {
            return Err(HsaError::Dimension {
                what: "token state".into(),
                expected: self.d,
                got: q.len(),
            });
        }
        for (i, &l) in events.iter().enumerate() {
            if l != i + 1 || l > self.open.len() {
                return Err(HsaError::EventOrder(format!(
                    "expected consecutive levels from 1 up to the depth {}, got {events:?}",
                    self.open.len()
                )));
            }
        }
        let mut ops = 0u64;
        for &l in events {
            self.seal(l, &mut ops)?;
        }

        for node in &mut self.open {
            axpy(1.0, q, &mut node.sum_q);
            axpy(1.0, k, &mut node.sum_k);
            axpy(1.0, v, &mut node.sum_v);
            node.n += 1;
        }
        self.n_tokens += 1;
        let depth = self.open.len();
        let sd = self.sqrt_d();

        // Leaf: left siblings plus optional self.
        let leaf_pos = self.gen.position(self.open[0].closed.len());
        let mut logits: Vec<f64> = self.open[0].closed.iter().map(|s| self.logit(&leaf_pos, q, s)).collect();
        let mut payloads: Vec<&[f64]> = self.open[0].closed.iter().map(|s| self.payload(s)).collect();
        if self.cfg.include_self {
            logits.push(self.cfg.pos_scale * dot(&leaf_pos, &leaf_pos) + dot(q, k) / sd - sd);
            payloads.push(match self.cfg.payload {
                PayloadMode::Keys => k,
                PayloadMode::Values => v,
            });
        }
        ops += logits.len() as u64;
        let (leaf_eta, leaf_theta) = ExactKernel.summarize(&logits, &payloads, self.pdim());

        // Path nodes below the root: (φ, η, θ) bottom-up.
        let mut path: Vec<(f64, f64, Vec<f64>)> = Vec::with_capacity(depth);
        path.push((f64::INFINITY, leaf_eta, leaf_theta));
        for l in 1..depth {
            let node = &self.open[l - 1];
            let (child_phi, child_eta, _) = &path[l - 1];
            let term = log_add_exp(-child_phi, -child_eta);
            let child_n = if l == 1 { 1 } else { self.open[l - 2].n };
            let phi = if node.closed_degenerate || term == f64::NEG_INFINITY {
                f64::INFINITY
            } else {
                -(node.closed_log_sum + child_n as f64 * term) / node.n as f64
            };
            let rho_q = OpenNode::mean(&node.sum_q, node.n);
            let (eta, theta) = self.sibling_summary(&self.open[l], &node.pos, &rho_q, &mut ops);
            path.push((phi, eta, theta));
            ops += 1;
        }

        // Top-down from the root along the path.
        let mut u = -(self.open[depth - 1].n as f64).ln();
        let mut grad = vec![0.0; self.pdim()];
        for (phi, eta, theta) in path.iter().rev() {
            let (ls, lb) = split_log_shares(-phi, -eta);
            if u > f64::NEG_INFINITY && lb > f64::NEG_INFINITY {
                axpy(-(u + lb).exp() / sd, theta, &mut grad);
            }
            u += ls;
            ops += 1;
        }

        let leaf = Summary {
            phi: f64::INFINITY,
            eta: path[0].1,
            rho_q: q.to_vec(),
            rho_k: k.to_vec(),
            rho_v: v.to_vec(),
            n_leaves: 1,
            pos: leaf_pos,
        };
        self.open[0].push(leaf);
        self.last_ops = ops;
        self.peak_nodes = self.peak_nodes.max(self.node_count());
        Ok(grad)
    }
}

/// Decides which levels to seal before each token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GrowthPolicy {
    /// One family holding every token.
    Flat,
    /// Families close when they reach their branching factor, listed bottom
    /// to top; the last factor repeats for levels beyond the list.
    Fixed(Vec<usize>),
    /// Precomputed number of levels to seal before each token.
    Text(Vec<usize>),
}

impl GrowthPolicy {
    /// Parses `flat` or `fixed:b1,b2,...`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "flat" {
            return Ok(GrowthPolicy::Flat);
        }
        let Some(list) = s.strip_prefix("fixed:") else {
            return Err(HsaError::Config(format!("unknown policy `{s}`")));
        };
        let b = list
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| HsaError::Config(format!("bad branching list `{list}`: {e}")))?;
        if b.is_empty() {
            return Err(HsaError::Config("empty branching list".into()));
        }
        if let Some(&x) = b.iter().find(|&&x| x < 2) {
            return Err(HsaError::InvalidBranching(x));
        }
        Ok(GrowthPolicy::Fixed(b))
    }

    /// Paragraph/sentence boundaries of `text`; returns the policy and the
    /// tokens in order.
    pub fn from_text(text: &str) -> Result<(Self, Vec<String>)> {
        let paragraphs = split_text(text);
        if paragraphs.is_empty() {
            return Err(HsaError::EmptyInput("text has no tokens"));
        }
        let mut closes = Vec::new();
        let mut tokens = Vec::new();
        for (pi, p) in paragraphs.iter().enumerate() {
            for (si, s) in p.iter().enumerate() {
                for (ti, t) in s.iter().enumerate() {
                    closes.push(match (pi, si, ti) {
                        (0, 0, 0) => 0,
                        (_, 0, 0) => 2,
                        (_, _, 0) => 1,
                        _ => 0,
                    });
                    tokens.push(t.to_string());
                }
            }
        }
        Ok((GrowthPolicy::Text(closes), tokens))
    }

    pub fn initial_depth(&self) -> usize {
        match self {
            GrowthPolicy::Flat | GrowthPolicy::Fixed(_) => 1,
            GrowthPolicy::Text(_) => 3,
        }
    }

    /// Largest branching factor the policy produces (`None` if unbounded).
    pub fn max_branching(&self) -> Option<usize> {
        match self {
            GrowthPolicy::Fixed(b) => b.iter().copied().max(),
            _ => None,
        }
    }

    /// Levels to seal before the next token: `[1, ..., k]`.
    pub fn events(&self, cache: &RightSkewedCache) -> Vec<usize> {
        let k = match self {
            GrowthPolicy::Flat => 0,
            GrowthPolicy::Text(closes) => closes.get(cache.n_tokens()).copied().unwrap_or(0),
            GrowthPolicy::Fixed(b) => {
                let factor = |l: usize| b.get(l - 1).copied().unwrap_or(*b.last().expect("non-empty"));
                let mut k = 0;
                if cache.n_tokens() > 0 {
                    for l in 1..=cache.depth() {
                        // Sealing the level below adds one sealed child here.
                        let count = if l == 1 {
                            cache.children_at(1)
                        } else {
                            cache.open[l - 1].closed.len() + 1
                        };
                        if count >= factor(l) {
                            k = l;
                        } else {
                            break;
                        }
                    }
                }
                k
            }
        };
        (1..=k).collect()
    }
}

/// The full hierarchy implied by a sequence of boundary events, rebuilt from
/// scratch for verification.
#[derive(Clone, Debug)]
pub struct ShadowTree {
    depth: usize,
    /// Per token, the id of its ancestor at levels `1..=depth`.
    labels: Vec<Vec<usize>>,
    counters: Vec<usize>,
}

impl ShadowTree {
    pub fn new(depth: usize) -> Self {
        ShadowTree {
            depth,
            labels: Vec::new(),
            counters: vec![0; depth],
        }
    }

    pub fn append(&mut self, events: &[usize]) {
        for &l in events {
            if l == self.depth {
                for lab in &mut self.labels {
                    lab.push(0);
                }
                self.counters.push(0);
                self.depth += 1;
            }
            self.counters[l - 1] += 1;
        }
        self.labels.push(self.counters.clone());
    }

    pub fn n_tokens(&self) -> usize {
        self.labels.len()
    }

    pub fn hierarchy(&self, dim: usize, pos_dim: usize, pos_mode: PosMode) -> Result<SignalHierarchy> {
        let gen = PositionGenerator::new(pos_mode, pos_dim);
        let root = self.build(0, self.labels.len(), self.depth, &gen, dim);
        SignalHierarchy::from_spec(dim, pos_dim, root)
    }

    fn build(&self, lo: usize, hi: usize, level: usize, gen: &PositionGenerator, dim: usize) -> NodeSpec {
        if level == 0 {
            return NodeSpec::leaf(vec![0.0; dim]);
        }
        let mut children = Vec::new();
        let mut start = lo;
        while start < hi {
            let mut end = start + 1;
            if level > 1 {
                while end < hi && self.labels[end][level - 2] == self.labels[start][level - 2] {
                    end += 1;
                }
            }
            children.push(ChildSpec {
                pos: gen.position(children.len()),
                node: self.build(start, end, level - 1, gen, dim),
            });
            start = end;
        }
        NodeSpec::family(gen.domain(), children)
    }
}

/// One row of a generation trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub token_index: usize,
    pub cache_nodes: usize,
    pub per_token_ops: u64,
    pub max_abs_diff: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub rows: Vec<TraceRow>,
    pub grads: Vec<Vec<f64>>,
    pub peak_nodes: usize,
    pub final_depth: usize,
}

/// Feeds `states` token by token through a fresh cache driven by `policy`.
/// With `verify`, each row is compared against a full causal recompute on
/// the prefix.
pub fn generate(states: &LeafStates, policy: &GrowthPolicy, pos_dim: usize, pos_mode: PosMode, cfg: CausalConfig, verify: bool) -> Result<Generation> {
    let mut cache = RightSkewedCache::new(states.dim(), states.value_dim(), pos_dim, policy.initial_depth(), pos_mode, cfg)?;
    let mut shadow = ShadowTree::new(policy.initial_depth());
    let mut rows = Vec::with_capacity(states.n());
    let mut grads = Vec::with_capacity(states.n());
    for t in 0..states.n() {
        let events = policy.events(&cache);
        let g = cache.append(&states.q[t], &states.k[t], &states.v[t], &events)?;
        shadow.append(&events);
        let max_abs_diff = if verify {
            let h = shadow.hierarchy(states.dim(), pos_dim, pos_mode)?;
            let prefix = LeafStates {
                q: states.q[..=t].to_vec(),
                k: states.k[..=t].to_vec(),
                v: states.v[..=t].to_vec(),
            };
            let full = hsa_causal_forward(&h, &prefix, &cfg)?;
            Some(full.grads[t].iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        } else {
            None
        };
        let st = cache.stats();
        rows.push(TraceRow {
            token_index: t,
            cache_nodes: st.nodes,
            per_token_ops: st.per_token_ops,
            max_abs_diff,
        });
        grads.push(g);
    }
    Ok(Generation {
        rows,
        grads,
        peak_nodes: cache.peak_nodes(),
        final_depth: cache.depth(),
    })
}

pub const TRACE_HEADER: &str = "token_index,cache_nodes,per_token_ops,max_abs_diff_vs_recompute";

/// Trace CSV; the last column is empty when verification was off.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let diff = r.max_abs_diff.map(fmt_shortest).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.token_index, r.cache_nodes, r.per_token_ops, diff));
    }
    out
}
