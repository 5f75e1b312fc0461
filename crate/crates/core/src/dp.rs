//! Two-pass dynamic program for hierarchical attention.
//!
//! The bottom-up pass computes, per node, centroids, the sibling logits
//! `ψ'_{A→B} = s·ε_Aᵀε_B + ρ_q(A)ᵀρ_k(B)/√d - √d + ln|ℓ(B)|`, the sibling
//! free energy `η(A) = -logsumexp ψ'`, the softmax-weighted sibling payload
//! `θ(A)`, and the node energy `φ(A) = -Σ_B |ℓ(B)|/|ℓ(A)| · log(e^{-φ(B)} + e^{-η(B)})`.
//!
//! The top-down pass carries a log coefficient `u` (seeded with `-ln N` at
//! each evaluation root) and an accumulated gradient `ϑ`:
//!
//! ```text
//! ϑ(C) = ϑ(A) - exp(u(A) + log σ(φ(C) - η(C))) · θ(C) / √d
//! u(C) = u(A) + log σ(η(C) - φ(C))
//! ```
//!
//! and `ϑ` at leaf `i` is `∇_{q_i} φ(root)`. Families at one depth are
//! independent in both passes and may run on a thread pool; every reduction
//! runs in child order, so results do not depend on the thread count.

use crate::energy::LeafStates;
pub use crate::energy::SiblingMask;
use crate::error::{HsaError, Result};
use crate::hierarchy::{Batch, SignalHierarchy};
use crate::numeric::{axpy, dot, log_add_exp, log_sum_exp, softmax_weights, split_log_shares};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// What the attention weights aggregate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadMode {
    /// Key vectors; the result is the exact energy gradient.
    #[default]
    Keys,
    /// Value vectors with the same weights.
    Values,
}

impl PayloadMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "keys" => Some(PayloadMode::Keys),
            "values" => Some(PayloadMode::Values),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpOptions {
    pub payload: PayloadMode,
    pub mask: SiblingMask,
    /// Multiplier on position dot products.
    pub pos_scale: f64,
    /// Worker threads; `0` and `1` both run on the calling thread.
    pub threads: usize,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions {
            payload: PayloadMode::Keys,
            mask: SiblingMask::All,
            pos_scale: 1.0,
            threads: 1,
        }
    }
}

/// Per-family attention: turns sibling logits and payloads into the
/// sibling free energy `η` and the weighted payload `θ`.
pub trait FamilyKernel: Sync {
    fn summarize(&self, logits: &[f64], payloads: &[&[f64]], dim: usize) -> (f64, Vec<f64>);
}

/// Exact softmax over the sibling logits.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactKernel;

impl FamilyKernel for ExactKernel {
    fn summarize(&self, logits: &[f64], payloads: &[&[f64]], dim: usize) -> (f64, Vec<f64>) {
        let mut theta = vec![0.0; dim];
        if logits.is_empty() {
            return (f64::INFINITY, theta);
        }
        let eta = -log_sum_exp(logits);
        for (w, p) in softmax_weights(logits).into_iter().zip(payloads) {
            axpy(w, p, &mut theta);
        }
        (eta, theta)
    }
}

/// Bottom-up sufficient statistics, indexed by node id. Entries of nodes
/// outside the evaluated subtrees are left empty.
#[derive(Clone, Debug, PartialEq)]
pub struct SuffStats {
    pub phi: Vec<f64>,
    pub eta: Vec<f64>,
    pub rho_q: Vec<Vec<f64>>,
    pub rho_k: Vec<Vec<f64>>,
    pub rho_v: Vec<Vec<f64>>,
    pub n_leaves: Vec<usize>,
    /// Softmax-weighted payload of each node's siblings.
    pub theta: Vec<Vec<f64>>,
    /// Sibling logits in mask order, then the self logit when present.
    pub psi_prime: Vec<Vec<f64>>,
    /// Families in which some child has neither finite energy nor siblings.
    pub degenerate: Vec<bool>,
}

/// Attention result for one evaluation root.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `∇_{q_i} φ(root)` per leaf of the root, in leaf order.
    pub grads: Vec<Vec<f64>>,
    /// `q_i - N√d · grad_i`.
    pub updated_q: Vec<Vec<f64>>,
    pub payload_mode: PayloadMode,
    /// Leaf range of this root in the hierarchy's leaf order.
    pub leaves: Range<usize>,
    /// Total attention weight received by each leaf (1 unless degenerate).
    pub row_sums: Vec<f64>,
    /// Leaves (relative to `leaves`) whose attention weights all vanish.
    pub degenerate_leaves: Vec<usize>,
    /// The root is a single leaf; queries pass through unchanged.
    pub single_leaf: bool,
    /// Family-local operations: one per sibling logit plus two per node.
    pub ops: u64,
}

struct Region {
    levels: Vec<Vec<usize>>,
    is_root: Vec<bool>,
    internal: Vec<usize>,
}

fn region(h: &SignalHierarchy, roots: &[usize]) -> Region {
    let mut levels: Vec<Vec<usize>> = Vec::new();
    let mut is_root = vec![false; h.n_nodes()];
    let mut internal = Vec::new();
    for &r in roots {
        is_root[r] = true;
        let mut stack = vec![r];
        while let Some(id) = stack.pop() {
            let depth = h.node(id).depth;
            if levels.len() <= depth {
                levels.resize(depth + 1, Vec::new());
            }
            levels[depth].push(id);
            if !h.is_leaf(id) {
                internal.push(id);
            }
            stack.extend(h.children(id).iter().rev());
        }
    }
    for level in &mut levels {
        level.sort_unstable();
    }
    internal.sort_unstable();
    Region {
        levels,
        is_root,
        internal,
    }
}

fn map_nodes<T, F>(threads: usize, ids: &[usize], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if threads <= 1 {
        ids.iter().map(|&id| f(id)).collect()
    } else {
        ids.par_iter().map(|&id| f(id)).collect()
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HsaError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Computes [`SuffStats`] for the subtrees under `roots`.
pub fn bottom_up(
    h: &SignalHierarchy,
    states: &LeafStates,
    opts: &DpOptions,
    roots: &[usize],
    kernel: &dyn FamilyKernel,
) -> Result<SuffStats> {
    states.check(h)?;
    with_pool(opts.threads, || bottom_up_inner(h, states, opts, &region(h, roots), kernel))
}

fn bottom_up_inner(
    h: &SignalHierarchy,
    states: &LeafStates,
    opts: &DpOptions,
    reg: &Region,
    kernel: &dyn FamilyKernel,
) -> SuffStats {
    let n = h.n_nodes();
    let t = opts.threads;
    let d = states.dim();
    let sd = (d as f64).sqrt();
    let mut st = SuffStats {
        phi: vec![f64::INFINITY; n],
        eta: vec![f64::INFINITY; n],
        rho_q: vec![Vec::new(); n],
        rho_k: vec![Vec::new(); n],
        rho_v: vec![Vec::new(); n],
        n_leaves: (0..n).map(|id| h.node(id).n_leaves()).collect(),
        theta: vec![Vec::new(); n],
        psi_prime: vec![Vec::new(); n],
        degenerate: vec![false; n],
    };

    for level in reg.levels.iter().rev() {
        let rows = map_nodes(t, level, |id| {
            let node = h.node(id);
            if node.is_leaf() {
                let i = node.leaves.start;
                return (states.q[i].clone(), states.k[i].clone(), states.v[i].clone());
            }
            let total = node.n_leaves() as f64;
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; states.value_dim()];
            for &c in h.children(id) {
                let w = h.node(c).n_leaves() as f64 / total;
                axpy(w, &st.rho_q[c], &mut q);
                axpy(w, &st.rho_k[c], &mut k);
                axpy(w, &st.rho_v[c], &mut v);
            }
            (q, k, v)
        });
        for (&id, (q, k, v)) in level.iter().zip(rows) {
            st.rho_q[id] = q;
            st.rho_k[id] = k;
            st.rho_v[id] = v;
        }
    }

    let payload = match opts.payload {
        PayloadMode::Keys => &st.rho_k,
        PayloadMode::Values => &st.rho_v,
    };
    let pdim = payload[reg.levels[reg.levels.len() - 1][0]].len();
    let families = map_nodes(t, &reg.internal, |a| {
        let kids = h.children(a);
        kids.iter()
            .enumerate()
            .map(|(idx, &b)| {
                let sibs: Vec<usize> = match opts.mask {
                    SiblingMask::All => kids.iter().copied().filter(|&c| c != b).collect(),
                    SiblingMask::Left { .. } => kids[..idx].to_vec(),
                };
                let eb = &h.node(b).position;
                let mut logits: Vec<f64> = sibs
                    .iter()
                    .map(|&c| {
                        opts.pos_scale * dot(eb, &h.node(c).position) + dot(&st.rho_q[b], &st.rho_k[c]) / sd - sd
                            + (h.node(c).n_leaves() as f64).ln()
                    })
                    .collect();
                let mut payloads: Vec<&[f64]> = sibs.iter().map(|&c| payload[c].as_slice()).collect();
                if opts.mask.includes_self() && h.is_leaf(b) {
                    logits.push(opts.pos_scale * dot(eb, eb) + dot(&st.rho_q[b], &st.rho_k[b]) / sd - sd);
                    payloads.push(&payload[b]);
                }
                let (eta, theta) = kernel.summarize(&logits, &payloads, pdim);
                (b, logits, eta, theta)
            })
            .collect::<Vec<_>>()
    });
    for (b, logits, eta, theta) in families.into_iter().flatten() {
        st.psi_prime[b] = logits;
        st.eta[b] = eta;
        st.theta[b] = theta;
    }
    for &r in reg.levels.iter().flatten().filter(|&&id| reg.is_root[id]) {
        st.theta[r] = vec![0.0; pdim];
    }

    for level in reg.levels.iter().rev() {
        let internal: Vec<usize> = level.iter().copied().filter(|&id| !h.is_leaf(id)).collect();
        let phis = map_nodes(t, &internal, |a| {
            let total = h.node(a).n_leaves() as f64;
            let mut phi = 0.0;
            for &b in h.children(a) {
                let term = log_add_exp(-st.phi[b], -st.eta[b]);
                if term == f64::NEG_INFINITY {
                    return (f64::INFINITY, true);
                }
                phi -= h.node(b).n_leaves() as f64 / total * term;
            }
            (phi, false)
        });
        for (&a, (phi, deg)) in internal.iter().zip(phis) {
            st.phi[a] = phi;
            st.degenerate[a] = deg;
        }
    }
    st
}

struct TopDown {
    theta_acc: Vec<Vec<f64>>,
    row_sum: Vec<f64>,
}

fn top_down_inner(h: &SignalHierarchy, st: &SuffStats, reg: &Region, threads: usize, d: usize) -> TopDown {
    let n = h.n_nodes();
    let sd = (d as f64).sqrt();
    let mut u = vec![f64::NEG_INFINITY; n];
    let mut log_n = vec![0.0; n];
    let mut acc: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut row = vec![0.0; n];
    for level in &reg.levels {
        let vals = map_nodes(threads, level, |c| {
            if reg.is_root[c] {
                let ln_n = (h.node(c).n_leaves() as f64).ln();
                return (-ln_n, ln_n, vec![0.0; st.theta[c].len()], 0.0);
            }
            let a = h.node(c).parent.expect("non-root has a parent");
            let (ls, lb) = split_log_shares(-st.phi[c], -st.eta[c]);
            let mut v = acc[a].clone();
            let (w, r) = if lb == f64::NEG_INFINITY || u[a] == f64::NEG_INFINITY {
                (0.0, 0.0)
            } else {
                ((u[a] + lb).exp(), (u[a] + log_n[a] + lb).exp())
            };
            axpy(-w / sd, &st.theta[c], &mut v);
            (u[a] + ls, log_n[a], v, row[a] + r)
        });
        for (&c, (uc, ln_n, v, r)) in level.iter().zip(vals) {
            u[c] = uc;
            log_n[c] = ln_n;
            acc[c] = v;
            row[c] = r;
        }
    }
    TopDown {
        theta_acc: acc,
        row_sum: row,
    }
}

/// Per-leaf gradients from precomputed statistics: one vector per leaf of
/// each root, roots in the given order.
pub fn top_down(h: &SignalHierarchy, stats: &SuffStats, roots: &[usize], opts: &DpOptions) -> Result<Vec<Vec<f64>>> {
    let reg = region(h, roots);
    let d = roots
        .first()
        .map(|&r| stats.rho_q[r].len())
        .ok_or(HsaError::EmptyInput("no evaluation roots"))?;
    let td = with_pool(opts.threads, || top_down_inner(h, stats, &reg, opts.threads, d))?;
    Ok(roots
        .iter()
        .flat_map(|&r| h.node(r).leaves.clone())
        .map(|i| td.theta_acc[h.leaf_node(i)].clone())
        .collect())
}

fn check_roots(h: &SignalHierarchy, roots: &[usize]) -> Result<()> {
    if roots.is_empty() {
        return Err(HsaError::EmptyInput("no evaluation roots"));
    }
    for (i, &r) in roots.iter().enumerate() {
        if r >= h.n_nodes() {
            return Err(HsaError::Offsets(format!("root id {r} out of range")));
        }
        for &s in &roots[..i] {
            if h.is_ancestor_or_self(s, r) || h.is_ancestor_or_self(r, s) {
                return Err(HsaError::Offsets(format!("evaluation roots {s} and {r} overlap")));
            }
        }
    }
    Ok(())
}

/// Runs both passes with the exact kernel over the whole hierarchy.
pub fn hsa_forward(h: &SignalHierarchy, states: &LeafStates, opts: &DpOptions) -> Result<AttentionOutput> {
    let mut out = hsa_forward_roots(h, states, opts, &[h.root()], &ExactKernel)?;
    Ok(out.pop().expect("one root"))
}

/// Runs both passes independently under each evaluation root. Nothing above
/// the roots is evaluated.
pub fn hsa_forward_roots(
    h: &SignalHierarchy,
    states: &LeafStates,
    opts: &DpOptions,
    roots: &[usize],
    kernel: &dyn FamilyKernel,
) -> Result<Vec<AttentionOutput>> {
    states.check(h)?;
    check_roots(h, roots)?;
    let d = states.dim();
    let pdim = match opts.payload {
        PayloadMode::Keys => d,
        PayloadMode::Values => states.value_dim(),
    };
    if pdim != d {
        return Err(HsaError::Dimension {
            what: "payload vectors".into(),
            expected: d,
            got: pdim,
        });
    }
    let reg = region(h, roots);
    let (st, td) = with_pool(opts.threads, || {
        let st = bottom_up_inner(h, states, opts, &reg, kernel);
        let td = top_down_inner(h, &st, &reg, opts.threads, d);
        (st, td)
    })?;
    let sd = (d as f64).sqrt();
    Ok(roots
        .iter()
        .map(|&r| {
            let leaves = h.node(r).leaves.clone();
            let nr = leaves.len();
            let single_leaf = h.is_leaf(r);
            let grads: Vec<Vec<f64>> = leaves
                .clone()
                .map(|i| {
                    if single_leaf {
                        vec![0.0; d]
                    } else {
                        td.theta_acc[h.leaf_node(i)].clone()
                    }
                })
                .collect();
            let updated_q = leaves
                .clone()
                .zip(&grads)
                .map(|(i, g)| {
                    let mut q = states.q[i].clone();
                    axpy(-(nr as f64) * sd, g, &mut q);
                    q
                })
                .collect();
            let row_sums: Vec<f64> = leaves.clone().map(|i| td.row_sum[h.leaf_node(i)]).collect();
            let degenerate_leaves = row_sums
                .iter()
                .enumerate()
                .filter(|(_, &s)| s == 0.0)
                .map(|(i, _)| i)
                .collect();
            AttentionOutput {
                grads,
                updated_q,
                payload_mode: opts.payload,
                leaves,
                row_sums,
                degenerate_leaves,
                single_leaf,
                ops: subtree_ops(h, &st, r),
            }
        })
        .collect())
}

fn subtree_ops(h: &SignalHierarchy, st: &SuffStats, r: usize) -> u64 {
    let mut ops = 0u64;
    let mut stack = vec![r];
    while let Some(id) = stack.pop() {
        ops += 2 + if id == r { 0 } else { st.psi_prime[id].len() as u64 };
        stack.extend(h.children(id));
    }
    ops
}

/// Evaluates each hierarchy of a batch under its own root. Outputs follow
/// `batch.offsets`.
pub fn hsa_forward_batch(batch: &Batch, states: &LeafStates, opts: &DpOptions) -> Result<Vec<AttentionOutput>> {
    let roots = batch.eval_roots();
    if roots.len() != batch.offsets.len()
        || roots
            .iter()
            .zip(&batch.offsets)
            .any(|(&r, o)| batch.hierarchy.node(r).leaves != *o)
    {
        return Err(HsaError::Offsets("offsets do not match the batch roots".into()));
    }
    hsa_forward_roots(&batch.hierarchy, states, opts, roots, &ExactKernel)
}
