//! LayerNorm, subtree centroids, interaction energies `ψ`, node energies `φ`
//! and mixing coefficients `μ`/`δ`.
//!
//! Everything here is evaluated directly from the definitions, one node at a
//! time. The dynamic program in [`crate::dp`] computes the same quantities in
//! a single pass and is checked against this module.

use crate::error::{HsaError, Result};
use crate::hierarchy::SignalHierarchy;
use crate::numeric::{dot, log_add_exp, log_sum_exp};

/// LayerNorm without affine parameters: zero mean, biased variance, and
/// `1e-12` added to the standard deviation.
pub fn layer_norm(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-12;
    v.iter().map(|x| (x - mean) / denom).collect()
}

/// Per-leaf query, key and value vectors in leaf order.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafStates {
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl LeafStates {
    pub fn new(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self> {
        let n = q.len();
        if n == 0 {
            return Err(HsaError::EmptyInput("no leaf states"));
        }
        let d = q[0].len();
        for (what, m) in [("k", &k), ("v", &v)] {
            if m.len() != n {
                return Err(HsaError::Dimension {
                    what: format!("{what} rows"),
                    expected: n,
                    got: m.len(),
                });
            }
        }
        for (what, m) in [("q", &q), ("k", &k)] {
            if let Some(row) = m.iter().find(|r| r.len() != d) {
                return Err(HsaError::Dimension {
                    what: format!("{what} row"),
                    expected: d,
                    got: row.len(),
                });
            }
        }
        Ok(LeafStates { q, k, v })
    }

    /// `q = k = LayerNorm(x)` and `v = x` for every leaf.
    pub fn from_hierarchy(h: &SignalHierarchy) -> Self {
        let x: Vec<Vec<f64>> = (0..h.n_leaves()).map(|i| h.leaf_features(i).to_vec()).collect();
        let q: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r)).collect();
        LeafStates { k: q.clone(), q, v: x }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn dim(&self) -> usize {
        self.q[0].len()
    }

    pub fn value_dim(&self) -> usize {
        self.v[0].len()
    }

    /// Checks that the states fit `h`.
    pub fn check(&self, h: &SignalHierarchy) -> Result<()> {
        if self.n() != h.n_leaves() {
            return Err(HsaError::Dimension {
                what: "leaf states".into(),
                expected: h.n_leaves(),
                got: self.n(),
            });
        }
        Ok(())
    }
}

/// Which siblings a node interacts with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SiblingMask {
    /// Every other child of the same parent.
    #[default]
    All,
    /// Only children to the left. With `include_self`, a leaf also interacts
    /// with itself.
    Left { include_self: bool },
}

impl SiblingMask {
    pub fn includes_self(self) -> bool {
        matches!(self, SiblingMask::Left { include_self: true })
    }

    /// Sibling node ids of `b` under this mask, in child order.
    pub fn siblings(self, h: &SignalHierarchy, b: usize) -> Vec<usize> {
        let Some(p) = h.node(b).parent else {
            return Vec::new();
        };
        let idx = h.node(b).index_in_family;
        let kids = h.children(p);
        match self {
            SiblingMask::All => kids.iter().copied().filter(|&c| c != b).collect(),
            SiblingMask::Left { .. } => kids[..idx].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyParams {
    /// Multiplier on position dot products.
    pub pos_scale: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams { pos_scale: 1.0 }
    }
}

/// Per-node mean of the leaf query, key and value vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Centroids as size-weighted averages of child centroids.
pub fn subtree_centroids(h: &SignalHierarchy, states: &LeafStates) -> Centroids {
    let n = h.n_nodes();
    let (d, dv) = (states.dim(), states.value_dim());
    let mut c = Centroids {
        q: vec![vec![0.0; d]; n],
        k: vec![vec![0.0; d]; n],
        v: vec![vec![0.0; dv]; n],
    };
    for id in (0..n).rev() {
        let node = h.node(id);
        if node.is_leaf() {
            let i = node.leaves.start;
            c.q[id].clone_from(&states.q[i]);
            c.k[id].clone_from(&states.k[i]);
            c.v[id].clone_from(&states.v[i]);
            continue;
        }
        let total = node.n_leaves() as f64;
        for &ch in h.children(id) {
            let w = h.node(ch).n_leaves() as f64 / total;
            for rows in [&mut c.q, &mut c.k, &mut c.v] {
                accumulate_row(rows, id, ch, w);
            }
        }
    }
    c
}

/// `rows[dst] += w * rows[src]` for `dst < src`.
fn accumulate_row(rows: &mut [Vec<f64>], dst: usize, src: usize, w: f64) {
    let (lo, hi) = rows.split_at_mut(src);
    lo[dst].iter_mut().zip(&hi[0]).for_each(|(x, y)| *x += w * y);
}

/// Direct evaluator of energies and mixing coefficients on one hierarchy.
#[derive(Clone, Debug)]
pub struct EnergyContext<'a> {
    pub h: &'a SignalHierarchy,
    pub states: &'a LeafStates,
    pub centroids: Centroids,
    pub params: EnergyParams,
    pub mask: SiblingMask,
    phi: Vec<f64>,
    degenerate: Vec<bool>,
}

/// Mixing coefficients of one node, held as logarithms.
#[derive(Clone, Debug, PartialEq)]
pub struct MixCoeffs {
    pub log_mu: f64,
    /// `(sibling id, log δ)` in sibling order.
    pub log_delta: Vec<(usize, f64)>,
    /// `log δ(L, L)` for a leaf interacting with itself.
    pub log_delta_self: Option<f64>,
    /// Set when every weight vanishes; all coefficients are then zero.
    pub degenerate: bool,
}

impl MixCoeffs {
    pub fn mu(&self) -> f64 {
        self.log_mu.exp()
    }

    /// `μ + Σ |ℓ(C)| δ(B, C)` (plus the self term), which is 1 unless
    /// degenerate.
    pub fn total(&self, h: &SignalHierarchy) -> f64 {
        self.mu()
            + self
                .log_delta
                .iter()
                .map(|&(c, ld)| h.node(c).n_leaves() as f64 * ld.exp())
                .sum::<f64>()
            + self.log_delta_self.map_or(0.0, f64::exp)
    }
}

impl<'a> EnergyContext<'a> {
    pub fn new(h: &'a SignalHierarchy, states: &'a LeafStates, params: EnergyParams, mask: SiblingMask) -> Self {
        let centroids = subtree_centroids(h, states);
        let mut ctx = EnergyContext {
            h,
            states,
            centroids,
            params,
            mask,
            phi: vec![f64::INFINITY; h.n_nodes()],
            degenerate: vec![false; h.n_nodes()],
        };
        for id in (0..h.n_nodes()).rev() {
            if !h.is_leaf(id) {
                let (phi, deg) = ctx.eval_node_energy(id);
                ctx.phi[id] = phi;
                ctx.degenerate[id] = deg;
            }
        }
        ctx
    }

    fn sqrt_d(&self) -> f64 {
        (self.states.dim() as f64).sqrt()
    }

    /// `ψ_{A→B} = -s·ε(A')ᵀε(B') + √d - ρ_q(A)ᵀρ_k(B)/√d`, valid for
    /// LayerNorm'd states.
    pub fn psi(&self, a: usize, b: usize) -> Result<f64> {
        let (ap, bp) = self.h.highest_distinct_ancestors(a, b).ok_or(HsaError::RelatedNodes(a, b))?;
        Ok(self.psi_parts(ap, bp, a, b))
    }

    fn psi_parts(&self, ap: usize, bp: usize, a: usize, b: usize) -> f64 {
        let pos = dot(&self.h.node(ap).position, &self.h.node(bp).position);
        let sd = self.sqrt_d();
        -self.params.pos_scale * pos + sd - dot(&self.centroids.q[a], &self.centroids.k[b]) / sd
    }

    /// The raw double sum `-s·ε(A')ᵀε(B') + Σ_i Σ_j ‖q_i - k_j‖² / (2√d |A| |B|)`.
    pub fn psi_general(&self, a: usize, b: usize) -> Result<f64> {
        let (ap, bp) = self.h.highest_distinct_ancestors(a, b).ok_or(HsaError::RelatedNodes(a, b))?;
        let pos = dot(&self.h.node(ap).position, &self.h.node(bp).position);
        let (la, lb) = (self.h.node(a).leaves.clone(), self.h.node(b).leaves.clone());
        let mut acc = 0.0;
        for i in la.clone() {
            for j in lb.clone() {
                acc += self.states.q[i]
                    .iter()
                    .zip(&self.states.k[j])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
        }
        Ok(-self.params.pos_scale * pos + acc / (2.0 * self.sqrt_d() * la.len() as f64 * lb.len() as f64))
    }

    /// `ψ_{L→L}` of a leaf with itself, used when the mask includes self.
    pub fn psi_self(&self, leaf: usize) -> f64 {
        let e = &self.h.node(leaf).position;
        self.psi_parts_raw(dot(e, e), leaf, leaf)
    }

    fn psi_parts_raw(&self, pos: f64, a: usize, b: usize) -> f64 {
        let sd = self.sqrt_d();
        -self.params.pos_scale * pos + sd - dot(&self.centroids.q[a], &self.centroids.k[b]) / sd
    }

    /// Log-weights `ln|ℓ(C)| - ψ_{B→C}` of every sibling `C` of `b` under the
    /// mask, followed by the self term when present.
    pub fn sibling_log_weights(&self, b: usize) -> (Vec<(usize, f64)>, Option<f64>) {
        let sibs = self
            .mask
            .siblings(self.h, b)
            .into_iter()
            .map(|c| (c, (self.h.node(c).n_leaves() as f64).ln() - self.psi_parts(b, c, b, c)))
            .collect();
        let own = (self.mask.includes_self() && self.h.is_leaf(b)).then(|| -self.psi_self(b));
        (sibs, own)
    }

    fn eval_node_energy(&self, a: usize) -> (f64, bool) {
        let total = self.h.node(a).n_leaves() as f64;
        let mut phi = 0.0;
        for &b in self.h.children(a) {
            let (sibs, own) = self.sibling_log_weights(b);
            let mut terms: Vec<f64> = sibs.into_iter().map(|(_, w)| w).collect();
            terms.extend(own);
            let lse = log_add_exp(-self.phi[b], log_sum_exp(&terms));
            if lse == f64::NEG_INFINITY {
                return (f64::INFINITY, true);
            }
            phi -= self.h.node(b).n_leaves() as f64 / total * lse;
        }
        (phi, false)
    }

    /// `φ(A)`; `+∞` for leaves and degenerate families.
    pub fn node_energy(&self, a: usize) -> f64 {
        self.phi[a]
    }

    pub fn node_energies(&self) -> &[f64] {
        &self.phi
    }

    /// True when some child of `a` has neither finite energy nor siblings.
    pub fn is_degenerate(&self, a: usize) -> bool {
        self.degenerate[a]
    }

    /// `μ(B) = α/(α + Σ|ℓ(C)|β)` and `δ(B,C) = β/(α + Σ|ℓ(C)|β)` with
    /// `α = e^{-φ(B)}`, `β = e^{-ψ_{B→C}}`.
    pub fn mixing_coefficients(&self, b: usize) -> MixCoeffs {
        let (sibs, own) = self.sibling_log_weights(b);
        let log_alpha = -self.phi[b];
        let mut all: Vec<f64> = sibs.iter().map(|&(_, w)| w).collect();
        all.extend(own);
        let z = log_add_exp(log_alpha, log_sum_exp(&all));
        if z == f64::NEG_INFINITY {
            return MixCoeffs {
                log_mu: f64::NEG_INFINITY,
                log_delta: sibs.iter().map(|&(c, _)| (c, f64::NEG_INFINITY)).collect(),
                log_delta_self: own.map(|_| f64::NEG_INFINITY),
                degenerate: true,
            };
        }
        let size = |c: usize| (self.h.node(c).n_leaves() as f64).ln();
        MixCoeffs {
            log_mu: log_alpha - z,
            log_delta: sibs.iter().map(|&(c, w)| (c, w - size(c) - z)).collect(),
            log_delta_self: own.map(|w| w - z),
            degenerate: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{ChildSpec, DomainKind, NodeSpec};

    fn flat(xs: &[Vec<f64>]) -> SignalHierarchy {
        let kids = xs
            .iter()
            .map(|x| ChildSpec {
                pos: vec![0.0],
                node: NodeSpec::leaf(x.clone()),
            })
            .collect();
        SignalHierarchy::from_spec(xs[0].len(), 1, NodeSpec::family(DomainKind::Set, kids)).unwrap()
    }

    #[test]
    fn layer_norm_examples() {
        for input in [[1.0, -1.0, 1.0, -1.0], [2.0, 0.0, 2.0, 0.0]] {
            let out = layer_norm(&input);
            for (o, e) in out.iter().zip([1.0, -1.0, 1.0, -1.0]) {
                assert!((o - e).abs() < 1e-11);
            }
        }
        assert_eq!(layer_norm(&[3.0; 4]), vec![0.0; 4]);
    }

    fn raw_states(h: &SignalHierarchy) -> LeafStates {
        let x: Vec<Vec<f64>> = (0..h.n_leaves()).map(|i| h.leaf_features(i).to_vec()).collect();
        LeafStates::new(x.clone(), x.clone(), x).unwrap()
    }

    #[test]
    fn psi_opposite_unit_vectors() {
        let h = flat(&[vec![1.0, -1.0, 1.0, -1.0], vec![-1.0, 1.0, -1.0, 1.0]]);
        let s = raw_states(&h);
        let ctx = EnergyContext::new(&h, &s, EnergyParams::default(), SiblingMask::All);
        let (a, b) = (h.leaf_node(0), h.leaf_node(1));
        assert!((ctx.psi(a, b).unwrap() - 4.0).abs() < 1e-12);
        assert!((ctx.psi_general(a, b).unwrap() - 4.0).abs() < 1e-12);
        assert!(matches!(ctx.psi(0, a), Err(HsaError::RelatedNodes(..))));
    }

    #[test]
    fn two_identical_leaves_have_zero_energy() {
        let h = flat(&[vec![1.0, -1.0, 1.0, -1.0], vec![1.0, -1.0, 1.0, -1.0]]);
        let s = raw_states(&h);
        let ctx = EnergyContext::new(&h, &s, EnergyParams::default(), SiblingMask::All);
        assert!(ctx.psi(h.leaf_node(0), h.leaf_node(1)).unwrap().abs() < 1e-12);
        assert!(ctx.node_energy(0).abs() < 1e-12);
        assert_eq!(ctx.node_energy(h.leaf_node(0)), f64::INFINITY);
        let m = ctx.mixing_coefficients(h.leaf_node(0));
        assert_eq!(m.mu(), 0.0);
        assert!((m.total(&h) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lone_leaf_family_is_degenerate() {
        let inner = NodeSpec::family(
            DomainKind::Set,
            vec![ChildSpec {
                pos: vec![0.0],
                node: NodeSpec::leaf(vec![1.0, 0.0]),
            }],
        );
        let h = SignalHierarchy::from_spec(2, 1, inner).unwrap();
        let s = LeafStates::from_hierarchy(&h);
        let ctx = EnergyContext::new(&h, &s, EnergyParams::default(), SiblingMask::All);
        assert_eq!(ctx.node_energy(0), f64::INFINITY);
        assert!(ctx.is_degenerate(0));
        assert!(ctx.mixing_coefficients(h.leaf_node(0)).degenerate);
    }

    #[test]
    fn centroid_of_family_is_mean() {
        let h = flat(&[vec![1.0, 0.0], vec![0.0, 3.0], vec![2.0, 0.0]]);
        let s = LeafStates::new(
            vec![vec![1.0, 0.0], vec![0.0, 3.0], vec![2.0, 0.0]],
            vec![vec![1.0, 1.0], vec![0.0, 1.0], vec![2.0, 1.0]],
            vec![vec![3.0], vec![0.0], vec![0.0]],
        )
        .unwrap();
        let c = subtree_centroids(&h, &s);
        assert_eq!(c.q[0], vec![1.0, 1.0]);
        assert_eq!(c.k[0], vec![1.0, 1.0]);
        assert_eq!(c.v[0], vec![1.0]);
        assert_eq!(c.q[h.leaf_node(1)], vec![0.0, 3.0]);
    }
}
