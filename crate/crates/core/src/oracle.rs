//! Slow reference computations used to certify the dynamic program.
//!
//! Nothing here shares code with [`crate::dp`]: energies and mixing
//! coefficients come from [`crate::energy`], gradients follow the per-leaf
//! recursion literally, and the block-constrained KL problem is solved
//! numerically without the closed-form coefficients.

use crate::dp::PayloadMode;
use crate::energy::{EnergyContext, EnergyParams, LeafStates, SiblingMask};
use crate::error::{HsaError, Result};
use crate::hierarchy::SignalHierarchy;
use crate::numeric::{axpy, dot};
use ndarray::Array2;

/// `ψ_{i→j}` between leaves, with the position term taken from their
/// highest distinct ancestors. The diagonal is `+∞`.
pub fn pairwise_psi(h: &SignalHierarchy, states: &LeafStates, params: EnergyParams) -> Array2<f64> {
    let n = h.n_leaves();
    let sd = (states.dim() as f64).sqrt();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            return f64::INFINITY;
        }
        let (a, b) = h
            .highest_distinct_ancestors(h.leaf_node(i), h.leaf_node(j))
            .expect("distinct leaves are unrelated");
        let pos = dot(&h.node(a).position, &h.node(b).position);
        -params.pos_scale * pos + sd - dot(&states.q[i], &states.k[j]) / sd
    })
}

/// Row-wise softmax of `-ψ` over `j ≠ i`, and the product with `payload`.
pub fn flat_attention(psi: &Array2<f64>, payload: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Array2<f64>)> {
    let n = psi.nrows();
    if n < 2 {
        return Err(HsaError::EmptyInput("flat attention needs at least two tokens"));
    }
    let mut theta = Array2::zeros((n, n));
    for i in 0..n {
        let m = (0..n)
            .filter(|&j| j != i)
            .map(|j| -psi[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let e = (-psi[[i, j]] - m).exp();
            theta[[i, j]] = e;
            z += e;
        }
        for j in 0..n {
            theta[[i, j]] /= z;
        }
    }
    let out = apply(&theta, payload);
    Ok((out, theta))
}

/// `M · P` for a dense row-major matrix and row vectors `P`.
pub fn apply(m: &Array2<f64>, payload: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = payload.first().map_or(0, Vec::len);
    (0..m.nrows())
        .map(|i| {
            let mut row = vec![0.0; dim];
            for (j, p) in payload.iter().enumerate() {
                if m[[i, j]] != 0.0 {
                    axpy(m[[i, j]], p, &mut row);
                }
            }
            row
        })
        .collect()
}

/// `-(1/N) Σ_i log( 1/(N-1) Σ_{j≠i} exp(-‖q_i - k_j‖²/(2√d) + s·e_iᵀe_j) )`
/// for one flat family.
pub fn flat_softmax_energy(states: &LeafStates, positions: &[Vec<f64>], pos_scale: f64) -> f64 {
    let n = states.n();
    let sd = (states.dim() as f64).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let dist: f64 = states.q[i]
                .iter()
                .zip(&states.k[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            s += (-dist / (2.0 * sd) + pos_scale * dot(&positions[i], &positions[j])).exp();
        }
        total += (s / (n - 1) as f64).ln();
    }
    -total / n as f64
}

/// Per-leaf gradients by literal recursion down the root-to-leaf path,
/// using energies evaluated once by [`EnergyContext`].
pub struct DirectOracle<'a> {
    ctx: EnergyContext<'a>,
    payload: PayloadMode,
    ops: std::cell::Cell<u64>,
}

impl<'a> DirectOracle<'a> {
    pub fn new(h: &'a SignalHierarchy, states: &'a LeafStates, params: EnergyParams, mask: SiblingMask, payload: PayloadMode) -> Self {
        let ctx = EnergyContext::new(h, states, params, mask);
        let mut setup = h.n_nodes() as u64;
        for b in 1..h.n_nodes() {
            setup += 1 + mask.siblings(h, b).len() as u64;
        }
        DirectOracle {
            ctx,
            payload,
            ops: std::cell::Cell::new(setup),
        }
    }

    pub fn context(&self) -> &EnergyContext<'a> {
        &self.ctx
    }

    /// Operations so far: one per node and per sibling interaction while
    /// evaluating energies, then one per sibling interaction and one per
    /// level for every gradient.
    pub fn ops(&self) -> u64 {
        self.ops.get()
    }

    fn payload_of(&self, node: usize) -> &[f64] {
        match self.payload {
            PayloadMode::Keys => &self.ctx.centroids.k[node],
            PayloadMode::Values => &self.ctx.centroids.v[node],
        }
    }

    /// `∇_{q_i} φ(root)`.
    pub fn gradient(&self, i: usize) -> Result<Vec<f64>> {
        let h = self.ctx.h;
        if i >= h.n_leaves() {
            return Err(HsaError::InvalidLeaf {
                index: i,
                n_leaves: h.n_leaves(),
            });
        }
        Ok(self.grad_at(h.root(), h.leaf_node(i)))
    }

    /// `∇_{q_i} φ(A) = |ℓ(B)|/|ℓ(A)| · [μ(B) ∇φ(B) + Σ_C |ℓ(C)| δ(B,C) ∇ψ_{B→C}]`
    /// with `∇_{q_i} ψ_{B→C} = -ρ(C) / (√d |ℓ(B)|)`.
    fn grad_at(&self, a: usize, leaf: usize) -> Vec<f64> {
        let h = self.ctx.h;
        let dim = self.payload_of(leaf).len();
        if a == leaf {
            return vec![0.0; dim];
        }
        let b = h.child_toward(a, leaf);
        let mix = self.ctx.mixing_coefficients(b);
        self.ops.set(self.ops.get() + 1 + mix.log_delta.len() as u64);
        let nb = h.node(b).n_leaves() as f64;
        let sd = (self.ctx.states.dim() as f64).sqrt();
        let mut g = vec![0.0; dim];
        if mix.degenerate {
            return g;
        }
        if mix.log_mu > f64::NEG_INFINITY {
            axpy(mix.mu(), &self.grad_at(b, leaf), &mut g);
        }
        for &(c, ld) in &mix.log_delta {
            let nc = h.node(c).n_leaves() as f64;
            axpy(-nc * ld.exp() / (sd * nb), self.payload_of(c), &mut g);
        }
        if let Some(ls) = mix.log_delta_self {
            axpy(-ls.exp() / sd, self.payload_of(b), &mut g);
        }
        let na = h.node(a).n_leaves() as f64;
        g.iter_mut().for_each(|x| *x *= nb / na);
        g
    }
}

/// One-shot [`DirectOracle::gradient`] for all-sibling masking.
pub fn direct_gradient(h: &SignalHierarchy, states: &LeafStates, i: usize, payload: PayloadMode, params: EnergyParams) -> Result<Vec<f64>> {
    DirectOracle::new(h, states, params, SiblingMask::All, payload).gradient(i)
}

/// Dense attention matrix with its sibling-block structure.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlockMatrix {
    /// Row-stochastic `Θ̂ = -Θ/τ`.
    pub theta_hat: Array2<f64>,
    /// Block index of each entry; `None` on the diagonal unless a leaf
    /// attends to itself.
    pub block_map: Array2<Option<usize>>,
    /// `(B, C)` node pairs, one per block: rows `ℓ(B)`, columns `ℓ(C)`.
    pub blocks: Vec<(usize, usize)>,
    /// `1 / (N √d)`.
    pub tau: f64,
    pub theta_flat: Option<Array2<f64>>,
}

impl DenseBlockMatrix {
    pub fn n(&self) -> usize {
        self.theta_hat.nrows()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.theta_hat.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Largest difference between two entries of the same block.
    pub fn max_block_spread(&self) -> f64 {
        let mut lo = vec![f64::INFINITY; self.blocks.len()];
        let mut hi = vec![f64::NEG_INFINITY; self.blocks.len()];
        for ((i, j), b) in self.block_map.indexed_iter() {
            if let Some(b) = *b {
                lo[b] = lo[b].min(self.theta_hat[[i, j]]);
                hi[b] = hi[b].max(self.theta_hat[[i, j]]);
            }
        }
        lo.iter().zip(&hi).map(|(l, h)| h - l).fold(0.0, f64::max)
    }

    /// `-τ · Θ̂ · P`, the gradients implied by the matrix.
    pub fn gradients(&self, payload: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = apply(&self.theta_hat, payload);
        for row in &mut out {
            row.iter_mut().for_each(|x| *x *= -self.tau);
        }
        out
    }

    pub fn with_flat(mut self, theta_flat: Array2<f64>) -> Self {
        self.theta_flat = Some(theta_flat);
        self
    }
}

fn block_layout(h: &SignalHierarchy, mask: SiblingMask) -> (Vec<(usize, usize)>, Array2<Option<usize>>) {
    let n = h.n_leaves();
    let mut blocks = Vec::new();
    let mut map = Array2::from_elem((n, n), None);
    for b in 1..h.n_nodes() {
        for c in mask.siblings(h, b) {
            let id = blocks.len();
            blocks.push((b, c));
            for i in h.node(b).leaves.clone() {
                for j in h.node(c).leaves.clone() {
                    map[[i, j]] = Some(id);
                }
            }
        }
        if mask.includes_self() && h.is_leaf(b) {
            let id = blocks.len();
            blocks.push((b, b));
            let i = h.node(b).leaves.start;
            map[[i, i]] = Some(id);
        }
    }
    (blocks, map)
}

/// `Θ̂` from the mixing coefficients: a row's mass at node `B` on its path
/// is the product of `μ` over the path above `B`, split between `B`'s
/// siblings `C` as `δ(B, C)` per leaf of `C`.
pub fn materialize_matrix(h: &SignalHierarchy, states: &LeafStates, params: EnergyParams, mask: SiblingMask) -> DenseBlockMatrix {
    let ctx = EnergyContext::new(h, states, params, mask);
    let n = h.n_leaves();
    let (blocks, block_map) = block_layout(h, mask);
    let mut theta = Array2::zeros((n, n));
    let mut prefix = vec![1.0; h.n_nodes()];
    let mut next_block = 0;
    for b in 1..h.n_nodes() {
        let mix = ctx.mixing_coefficients(b);
        let w = prefix[b];
        for &c in h.children(b) {
            prefix[c] = w * mix.mu();
        }
        for &(c, ld) in &mix.log_delta {
            let v = w * ld.exp();
            debug_assert_eq!(blocks[next_block], (b, c));
            next_block += 1;
            for i in h.node(b).leaves.clone() {
                for j in h.node(c).leaves.clone() {
                    theta[[i, j]] = v;
                }
            }
        }
        if let Some(ls) = mix.log_delta_self {
            next_block += 1;
            let i = h.node(b).leaves.start;
            theta[[i, i]] = w * ls.exp();
        }
    }
    DenseBlockMatrix {
        theta_hat: theta,
        block_map,
        blocks,
        tau: 1.0 / (n as f64 * (states.dim() as f64).sqrt()),
        theta_flat: None,
    }
}

/// Result of [`kl_objective`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlValue {
    pub value: f64,
    /// `θ` puts mass where `θ^f` has none; `value` is then `+∞`.
    pub support_violation: bool,
}

/// `Σ_i Σ_j θ_ij log(θ_ij / θ^f_ij)` with `0 log 0 = 0`.
pub fn kl_objective(theta: &Array2<f64>, theta_flat: &Array2<f64>) -> KlValue {
    let mut total = 0.0;
    for (t, f) in theta.iter().zip(theta_flat.iter()) {
        if *t <= 0.0 {
            continue;
        }
        if *f <= 0.0 {
            return KlValue {
                value: f64::INFINITY,
                support_violation: true,
            };
        }
        total += t * (t / f).ln();
    }
    KlValue {
        value: total,
        support_violation: false,
    }
}

#[derive(Clone, Debug)]
pub struct MinimizeResult {
    pub matrix: DenseBlockMatrix,
    pub iterations: usize,
    pub converged: bool,
    /// Final projected-gradient residual.
    pub residual: f64,
}

/// Options of one simplex: absorbing into the node's own subtree (when it
/// can hold mass) and each sibling.
struct Simplex {
    node: usize,
    has_self: bool,
    sibs: Vec<usize>,
    pi: Vec<f64>,
}

/// Numerically minimizes `kl_objective(Θ, θ^f)` over row-stochastic
/// matrices that are constant on every sibling block and zero on the
/// diagonal.
///
/// Each non-root node `B` distributes the mass reaching it over a simplex
/// `π_B` of options `{own subtree} ∪ sib(B)`; the block `(B, C)` then holds
/// `P(B) π_B(C) / |ℓ(C)|` where `P(B)` is the product of `π_A(own)` over the
/// ancestors of `B` below the root. The objective is minimized by
/// exponentiated-gradient steps on every simplex, with gradients scaled by
/// `1 / (P(B) |ℓ(B)|)`, until the largest projected-gradient component
/// `π(c) |g(c) - πᵀg|` drops below `tol`.
pub fn minimize_block_kl(h: &SignalHierarchy, theta_flat: &Array2<f64>, max_iters: usize, tol: f64) -> MinimizeResult {
    const STEP: f64 = 0.5;
    let nn = h.n_nodes();
    let mut absorbs = vec![false; nn];
    for id in (0..nn).rev() {
        let kids = h.children(id);
        absorbs[id] = !kids.is_empty() && (kids.len() >= 2 || absorbs[kids[0]]);
    }
    let mut simplices: Vec<Simplex> = Vec::new();
    let mut simplex_of = vec![usize::MAX; nn];
    for b in 1..nn {
        let sibs = SiblingMask::All.siblings(h, b);
        let has_self = absorbs[b];
        let k = sibs.len() + has_self as usize;
        if k == 0 {
            continue;
        }
        simplex_of[b] = simplices.len();
        simplices.push(Simplex {
            node: b,
            has_self,
            sibs,
            pi: vec![1.0 / k as f64; k],
        });
    }
    // S_BC = Σ log θ^f over the block, fixed.
    let log_sum: Vec<Vec<f64>> = simplices
        .iter()
        .map(|s| {
            s.sibs
                .iter()
                .map(|&c| {
                    let mut acc = 0.0;
                    for i in h.node(s.node).leaves.clone() {
                        for j in h.node(c).leaves.clone() {
                            acc += theta_flat[[i, j]].ln();
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let size = |id: usize| h.node(id).n_leaves() as f64;

    let reach = |simplices: &[Simplex]| -> Vec<f64> {
        // P(B): product of own-subtree shares above B (root excluded).
        let mut p = vec![1.0; nn];
        for id in 1..nn {
            let parent = h.node(id).parent.expect("non-root");
            p[id] = if parent == 0 {
                1.0
            } else {
                let s = &simplices[simplex_of[parent]];
                p[parent] * if s.has_self { s.pi[0] } else { 0.0 }
            };
        }
        p
    };

    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    while iterations < max_iters {
        let p = reach(&simplices);
        // G'(t) t summed below each node, for the own-subtree gradient.
        let mut below = vec![0.0; nn];
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(simplices.len());
        for (si, s) in simplices.iter().enumerate() {
            let nb = size(s.node);
            let off = s.has_self as usize;
            let mut g = vec![0.0; s.pi.len()];
            let mut contrib = 0.0;
            for (ci, &c) in s.sibs.iter().enumerate() {
                let nc = size(c);
                let t = p[s.node] * s.pi[off + ci] / nc;
                let gp = nb * nc * (t.ln() + 1.0) - log_sum[si][ci];
                g[off + ci] = gp * p[s.node] / nc;
                contrib += gp * t;
            }
            grads.push(g);
            let mut a = h.node(s.node).parent.expect("non-root");
            while a != 0 {
                below[a] += contrib;
                a = h.node(a).parent.expect("non-root");
            }
        }
        residual = 0.0;
        for (s, g) in simplices.iter_mut().zip(&mut grads) {
            if s.has_self {
                g[0] = below[s.node] / s.pi[0];
            }
            let scale = 1.0 / (p[s.node] * size(s.node));
            g.iter_mut().for_each(|x| *x *= scale);
            let mean = dot(&s.pi, g);
            for (pi, gi) in s.pi.iter().zip(g.iter()) {
                residual = f64::max(residual, pi * (gi - mean).abs());
            }
        }
        if residual <= tol {
            converged = true;
            break;
        }
        for (s, g) in simplices.iter_mut().zip(&grads) {
            let m = g.iter().copied().fold(f64::INFINITY, f64::min);
            let mut z = 0.0;
            for (pi, gi) in s.pi.iter_mut().zip(g) {
                *pi *= (-STEP * (gi - m)).exp();
                z += *pi;
            }
            s.pi.iter_mut().for_each(|x| *x /= z);
        }
        iterations += 1;
    }

    let p = reach(&simplices);
    let (blocks, block_map) = block_layout(h, SiblingMask::All);
    let n = h.n_leaves();
    let mut theta = Array2::zeros((n, n));
    for s in &simplices {
        let off = s.has_self as usize;
        for (ci, &c) in s.sibs.iter().enumerate() {
            let t = p[s.node] * s.pi[off + ci] / size(c);
            for i in h.node(s.node).leaves.clone() {
                for j in h.node(c).leaves.clone() {
                    theta[[i, j]] = t;
                }
            }
        }
    }
    MinimizeResult {
        matrix: DenseBlockMatrix {
            theta_hat: theta,
            block_map,
            blocks,
            tau: f64::NAN,
            theta_flat: Some(theta_flat.clone()),
        },
        iterations,
        converged,
        residual,
    }
}

/// Central differences of `φ(root)` with respect to each component of
/// `q_i`, with `q_i` moved freely (no renormalization).
pub fn finite_diff_energy_grad(h: &SignalHierarchy, states: &LeafStates, i: usize, step: f64, params: EnergyParams) -> Result<Vec<f64>> {
    if i >= h.n_leaves() {
        return Err(HsaError::InvalidLeaf {
            index: i,
            n_leaves: h.n_leaves(),
        });
    }
    let mut probe = states.clone();
    let root_energy = |s: &LeafStates| EnergyContext::new(h, s, params, SiblingMask::All).node_energy(h.root());
    (0..states.dim())
        .map(|c| {
            let x = states.q[i][c];
            probe.q[i][c] = x + step;
            let up = root_energy(&probe);
            probe.q[i][c] = x - step;
            let down = root_energy(&probe);
            probe.q[i][c] = x;
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}
