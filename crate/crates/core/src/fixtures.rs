//! Seeded random hierarchies and leaf states for tests and benchmarks.

use crate::energy::{layer_norm, LeafStates};
use crate::hierarchy::{ChildSpec, DomainKind, NodeSpec, PosMode, PositionGenerator, SignalHierarchy};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixtureSpec {
    /// Maximum leaf depth.
    pub max_depth: usize,
    pub max_branching: usize,
    pub max_leaves: usize,
    pub dim: usize,
    pub pos_dim: usize,
    /// Scale of random position vectors.
    pub pos_scale: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            max_depth: 4,
            max_branching: 6,
            max_leaves: 64,
            dim: 8,
            pos_dim: 4,
            pos_scale: 0.5,
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    spec: &'a FixtureSpec,
    fourier: PositionGenerator,
}

impl Gen<'_> {
    fn positions(&mut self, domain: DomainKind, k: usize) -> Vec<Vec<f64>> {
        let c = self.spec.pos_dim;
        match domain {
            DomainKind::Set => vec![vec![0.0; c]; k],
            DomainKind::Grid1d => (0..k).map(|i| self.fourier.position(i)).collect(),
            DomainKind::Keyvalue | DomainKind::Custom => {
                let s = self.spec.pos_scale;
                (0..k).map(|_| normal_vec(&mut self.rng, c, s)).collect()
            }
        }
    }

    fn leaf(&mut self) -> NodeSpec {
        NodeSpec::leaf(normal_vec(&mut self.rng, self.spec.dim, 1.0))
    }

    /// A family with at most `budget` (≥ 2) leaves whose leaves sit at most
    /// `depth_left` (≥ 1) levels below it. No family consists of a single leaf.
    fn family(&mut self, depth_left: usize, budget: usize) -> NodeSpec {
        let domain = *DomainKind::ALL.choose(&mut self.rng).expect("non-empty");
        let max_b = self.spec.max_branching.min(budget);
        let children: Vec<NodeSpec> = if depth_left == 1 || budget < 4 {
            let k = self.rng.gen_range(2..=max_b);
            (0..k).map(|_| self.leaf()).collect()
        } else if self.rng.gen_bool(0.1) {
            vec![self.family(depth_left - 1, budget)]
        } else {
            let k = self.rng.gen_range(2..=max_b);
            let kinds: Vec<bool> = (0..k).map(|_| self.rng.gen_bool(0.4)).collect();
            let n_fam = kinds.iter().filter(|&&leaf| !leaf).count();
            let per = (budget - (k - n_fam)).checked_div(n_fam).unwrap_or(0);
            kinds
                .into_iter()
                .map(|is_leaf| {
                    if is_leaf || per < 2 {
                        self.leaf()
                    } else {
                        let b = self.rng.gen_range(2..=per);
                        self.family(depth_left - 1, b)
                    }
                })
                .collect()
        };
        let pos = self.positions(domain, children.len());
        NodeSpec::family(
            domain,
            children
                .into_iter()
                .zip(pos)
                .map(|(node, pos)| ChildSpec { pos, node })
                .collect(),
        )
    }
}

/// Random hierarchy with mixed domains, depth at most `spec.max_depth`,
/// branching at most `spec.max_branching` and at most `spec.max_leaves`
/// leaves.
pub fn random_hierarchy(seed: u64, spec: &FixtureSpec) -> SignalHierarchy {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        spec,
        fourier: PositionGenerator::new(PosMode::Fourier, spec.pos_dim),
    };
    let budget = g.rng.gen_range(2..=spec.max_leaves.max(2));
    let root = g.family(spec.max_depth.max(1), budget);
    SignalHierarchy::from_spec(spec.dim, spec.pos_dim, root).expect("generated hierarchy is valid")
}

/// One family of `n` random leaves whose positions follow `domain`.
pub fn random_flat(seed: u64, n: usize, dim: usize, pos_dim: usize, domain: DomainKind) -> SignalHierarchy {
    let spec = FixtureSpec {
        dim,
        pos_dim,
        ..FixtureSpec::default()
    };
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        spec: &spec,
        fourier: PositionGenerator::new(PosMode::Fourier, pos_dim),
    };
    let leaves: Vec<NodeSpec> = (0..n).map(|_| g.leaf()).collect();
    let pos = g.positions(domain, n);
    let kids = leaves.into_iter().zip(pos).map(|(node, pos)| ChildSpec { pos, node }).collect();
    SignalHierarchy::from_spec(dim, pos_dim, NodeSpec::family(domain, kids)).expect("flat fixture is valid")
}

/// Independent LayerNorm'd queries and keys and Gaussian values.
pub fn random_states(h: &SignalHierarchy, seed: u64) -> LeafStates {
    random_states_dims(h.n_leaves(), h.dim(), seed)
}

pub fn random_states_dims(n: usize, dim: usize, seed: u64) -> LeafStates {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F57_A7E5);
    let mut draw = |norm: bool| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v = normal_vec(&mut rng, dim, 1.0);
                if norm {
                    layer_norm(&v)
                } else {
                    v
                }
            })
            .collect()
    };
    let q = draw(true);
    let k = draw(true);
    let v = draw(false);
    LeafStates { q, k, v }
}

/// Leaf feature vectors for builders.
pub fn random_leaves(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| normal_vec(&mut rng, dim, 1.0)).collect()
}
