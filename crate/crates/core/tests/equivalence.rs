use hsa_core::dp::{bottom_up, hsa_forward, DpOptions, ExactKernel, PayloadMode, SiblingMask};
use hsa_core::energy::{EnergyContext, EnergyParams, LeafStates};
use hsa_core::fixtures::{random_flat, random_hierarchy, random_states, FixtureSpec};
use hsa_core::hierarchy::DomainKind;
use hsa_core::oracle::{
    finite_diff_energy_grad, flat_attention, flat_softmax_energy, kl_objective, materialize_matrix, minimize_block_kl,
    pairwise_psi, DirectOracle,
};
use ndarray::Array2;
use proptest::prelude::*;

fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn dp_statistics_match_direct_energies() {
    for seed in 0..30 {
        let h = random_hierarchy(seed, &FixtureSpec::default());
        let s = random_states(&h, seed);
        let ctx = EnergyContext::new(&h, &s, EnergyParams::default(), SiblingMask::All);
        let st = bottom_up(&h, &s, &DpOptions::default(), &[0], &ExactKernel).unwrap();
        for id in 0..h.n_nodes() {
            let (a, b) = (st.phi[id], ctx.node_energy(id));
            assert!(a == b || (a - b).abs() < 1e-12, "seed {seed} node {id}: {a} vs {b}");
            for x in 0..s.dim() {
                assert!((st.rho_k[id][x] - ctx.centroids.k[id][x]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dp_matches_direct_recursion_and_matrix() {
    for seed in 0..40 {
        let h = random_hierarchy(seed, &FixtureSpec::default());
        let s = random_states(&h, seed);
        let out = hsa_forward(&h, &s, &DpOptions::default()).unwrap();
        let oracle = DirectOracle::new(&h, &s, EnergyParams::default(), SiblingMask::All, PayloadMode::Keys);
        let direct: Vec<Vec<f64>> = (0..h.n_leaves()).map(|i| oracle.gradient(i).unwrap()).collect();
        assert!(max_abs(&out.grads, &direct) <= 1e-9, "seed {seed}");
        let m = materialize_matrix(&h, &s, EnergyParams::default(), SiblingMask::All);
        assert!(max_abs(&out.grads, &m.gradients(&s.k)) <= 1e-9, "seed {seed}");
        assert!(out.ops < oracle.ops());
    }
}

#[test]
fn values_payload_uses_same_weights() {
    let h = random_hierarchy(5, &FixtureSpec::default());
    let s = random_states(&h, 5);
    let opts = DpOptions {
        payload: PayloadMode::Values,
        ..DpOptions::default()
    };
    let out = hsa_forward(&h, &s, &opts).unwrap();
    let m = materialize_matrix(&h, &s, EnergyParams::default(), SiblingMask::All);
    assert!(max_abs(&out.grads, &m.gradients(&s.v)) <= 1e-9);
}

#[test]
fn finite_differences_match_dp() {
    let spec = FixtureSpec {
        max_leaves: 16,
        ..FixtureSpec::default()
    };
    for seed in 0..5 {
        let h = random_hierarchy(seed, &spec);
        let s = random_states(&h, seed);
        let out = hsa_forward(&h, &s, &DpOptions::default()).unwrap();
        for i in 0..h.n_leaves() {
            let fd = finite_diff_energy_grad(&h, &s, i, 1e-5, EnergyParams::default()).unwrap();
            let norm = out.grads[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            let err = fd
                .iter()
                .zip(&out.grads[i])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-5 * norm.max(1e-300), "seed {seed} leaf {i}: {err} vs {norm}");
        }
    }
}

#[test]
fn flat_energy_differs_by_log_n_minus_one() {
    for (seed, n) in [(1u64, 2usize), (2, 5), (3, 17)] {
        let h = random_flat(seed, n, 8, 4, DomainKind::Grid1d);
        let s = random_states(&h, seed);
        let ctx = EnergyContext::new(&h, &s, EnergyParams::default(), SiblingMask::All);
        let pos: Vec<Vec<f64>> = (0..n).map(|i| h.node(h.leaf_node(i)).position.clone()).collect();
        let diff = flat_softmax_energy(&s, &pos, 1.0) - ctx.node_energy(0);
        assert!((diff - ((n - 1) as f64).ln()).abs() < 1e-10, "n={n}: {diff}");
    }
}

#[test]
fn block_matrix_minimizes_kl() {
    let spec = FixtureSpec {
        max_leaves: 10,
        max_depth: 3,
        max_branching: 4,
        ..FixtureSpec::default()
    };
    for seed in 0..6 {
        let h = random_hierarchy(seed, &spec);
        let s = random_states(&h, seed);
        let (_, tf) = flat_attention(&pairwise_psi(&h, &s, EnergyParams::default()), &s.k).unwrap();
        let m = materialize_matrix(&h, &s, EnergyParams::default(), SiblingMask::All);
        let r = minimize_block_kl(&h, &tf, 10_000, 1e-10);
        let kl_hat = kl_objective(&m.theta_hat, &tf).value;
        let kl_min = kl_objective(&r.matrix.theta_hat, &tf).value;
        assert!(kl_hat <= kl_min + 1e-6, "seed {seed}: {kl_hat} vs {kl_min}");
        let diff = m
            .theta_hat
            .iter()
            .zip(r.matrix.theta_hat.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-4, "seed {seed}: {diff} after {} iterations", r.iterations);
    }
}

fn random_psi(n: usize, seed: u64) -> Array2<f64> {
    let s = hsa_core::fixtures::random_states_dims(n, 4, seed);
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            f64::INFINITY
        } else {
            s.q[i].iter().zip(&s.k[j]).map(|(a, b)| a * b).sum()
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mixing_coefficients_sum_to_one(seed in 0u64..10_000) {
        let h = random_hierarchy(seed, &FixtureSpec { max_leaves: 32, ..FixtureSpec::default() });
        let s = random_states(&h, seed);
        let ctx = EnergyContext::new(&h, &s, EnergyParams::default(), SiblingMask::All);
        for b in 1..h.n_nodes() {
            let m = ctx.mixing_coefficients(b);
            prop_assert!(m.degenerate || (m.total(&h) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn reduced_psi_matches_double_sum(seed in 0u64..10_000) {
        let h = random_hierarchy(seed, &FixtureSpec { max_leaves: 24, ..FixtureSpec::default() });
        let s = random_states(&h, seed);
        let ctx = EnergyContext::new(&h, &s, EnergyParams::default(), SiblingMask::All);
        for b in 1..h.n_nodes() {
            for c in SiblingMask::All.siblings(&h, b) {
                let fast = ctx.psi(b, c).unwrap();
                let slow = ctx.psi_general(b, c).unwrap();
                prop_assert!((fast - slow).abs() <= 1e-9 * fast.abs().max(1.0));
            }
        }
    }

    #[test]
    fn energy_is_invariant_to_sibling_permutation(seed in 0u64..10_000, rot in 1usize..5) {
        use hsa_core::hierarchy::{NodeSpec, SignalHierarchy};
        let h = random_hierarchy(seed, &FixtureSpec { max_leaves: 24, ..FixtureSpec::default() });
        let s = random_states(&h, seed);
        let NodeSpec::Internal { domain, mut children } = h.to_spec() else { unreachable!() };
        let k = children.len();
        children.rotate_left(rot % k);
        let p = SignalHierarchy::from_spec(h.dim(), h.pos_dim(), NodeSpec::family(domain, children)).unwrap();
        // Rebuild the leaf states in the permuted leaf order.
        let mut ranges: Vec<_> = h.children(0).iter().map(|&c| h.node(c).leaves.clone()).collect();
        ranges.rotate_left(rot % k);
        let order: Vec<usize> = ranges.into_iter().flatten().collect();
        let ps = LeafStates {
            q: order.iter().map(|&i| s.q[i].clone()).collect(),
            k: order.iter().map(|&i| s.k[i].clone()).collect(),
            v: order.iter().map(|&i| s.v[i].clone()).collect(),
        };
        let e1 = EnergyContext::new(&h, &s, EnergyParams::default(), SiblingMask::All).node_energy(0);
        let e2 = EnergyContext::new(&p, &ps, EnergyParams::default(), SiblingMask::All).node_energy(0);
        prop_assert!(e1 == e2 || (e1 - e2).abs() <= 1e-12 * e1.abs().max(1.0));
    }

    #[test]
    fn softmax_is_shift_invariant(seed in 0u64..10_000, n in 2usize..9, c in -50.0f64..50.0) {
        let psi = random_psi(n, seed);
        let shifted = psi.mapv(|x| x + c);
        let p: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let (_, a) = flat_attention(&psi, &p).unwrap();
        let (_, b) = flat_attention(&shifted, &p).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn dp_matches_oracle_random(seed in 0u64..100_000) {
        let h = random_hierarchy(seed, &FixtureSpec::default());
        let s = random_states(&h, seed);
        let out = hsa_forward(&h, &s, &DpOptions::default()).unwrap();
        let m = materialize_matrix(&h, &s, EnergyParams::default(), SiblingMask::All);
        prop_assert!(max_abs(&out.grads, &m.gradients(&s.k)) <= 1e-9);
        prop_assert!(m.max_row_sum_error() <= 1e-9);
        prop_assert_eq!(m.max_block_spread(), 0.0);
    }
}
