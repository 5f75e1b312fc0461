use hsa_core::causal::{generate, hsa_causal_forward, CausalConfig, GrowthPolicy, RightSkewedCache};
use hsa_core::dp::{PayloadMode, SiblingMask};
use hsa_core::energy::{EnergyParams, LeafStates};
use hsa_core::fixtures::{random_flat, random_hierarchy, random_leaves, random_states, random_states_dims, FixtureSpec};
use hsa_core::hierarchy::{build_fixed, repeat_last, DomainKind, PosMode, PositionGenerator};
use hsa_core::oracle::materialize_matrix;
use proptest::prelude::*;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn causal_matrix_has_no_future_mass() {
    for seed in 0..20 {
        let h = random_hierarchy(seed, &FixtureSpec::default());
        let s = random_states(&h, seed);
        for include_self in [true, false] {
            let m = materialize_matrix(&h, &s, EnergyParams::default(), SiblingMask::Left { include_self });
            let n = m.n();
            for i in 0..n {
                for j in i + 1..n {
                    assert_eq!(m.theta_hat[[i, j]], 0.0, "seed {seed} ({i},{j})");
                }
                if !include_self {
                    assert_eq!(m.theta_hat[[i, i]], 0.0);
                }
            }
        }
    }
}

#[test]
fn causal_dp_matches_masked_matrix() {
    for seed in 0..30 {
        let h = random_hierarchy(seed, &FixtureSpec::default());
        let s = random_states(&h, seed);
        for include_self in [true, false] {
            let cfg = CausalConfig {
                include_self,
                ..CausalConfig::default()
            };
            let out = hsa_causal_forward(&h, &s, &cfg).unwrap();
            let m = materialize_matrix(&h, &s, EnergyParams::default(), cfg.mask());
            for (g, r) in out.grads.iter().zip(m.gradients(&s.k)) {
                assert!(max_diff(g, &r) <= 1e-9, "seed {seed}");
            }
        }
    }
}

#[test]
fn flat_without_self_matches_left_softmax() {
    let h = random_flat(3, 3, 4, 2, DomainKind::Grid1d);
    let s = random_states(&h, 3);
    let cfg = CausalConfig {
        include_self: false,
        ..CausalConfig::default()
    };
    let out = hsa_causal_forward(&h, &s, &cfg).unwrap();
    assert!(out.grads[0].iter().all(|&x| x == 0.0));
    let m = materialize_matrix(&h, &s, EnergyParams::default(), cfg.mask());
    assert_eq!(m.theta_hat[[1, 0]], 1.0);
    assert!((m.theta_hat[[2, 0]] + m.theta_hat[[2, 1]] - 1.0).abs() < 1e-12);
}

/// Textbook causal softmax with a linear key cache.
fn causal_softmax(states: &LeafStates, pos_dim: usize, pos_scale: f64) -> Vec<Vec<f64>> {
    let gen = PositionGenerator::new(PosMode::Fourier, pos_dim);
    let d = states.dim() as f64;
    let pos: Vec<Vec<f64>> = (0..states.n()).map(|i| gen.position(i)).collect();
    (0..states.n())
        .map(|t| {
            let scores: Vec<f64> = (0..=t)
                .map(|j| {
                    let qk: f64 = states.q[t].iter().zip(&states.k[j]).map(|(a, b)| a * b).sum();
                    let pp: f64 = pos[t].iter().zip(&pos[j]).map(|(a, b)| a * b).sum();
                    pos_scale * pp + qk / d.sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut out = vec![0.0; states.dim()];
            for (j, wj) in w.iter().enumerate() {
                for (o, k) in out.iter_mut().zip(&states.k[j]) {
                    *o += wj / z * k;
                }
            }
            out
        })
        .collect()
}

#[test]
fn flat_policy_is_classical_causal_softmax() {
    for (seed, n, d) in [(0u64, 1usize, 4usize), (1, 17, 8), (2, 40, 16)] {
        let s = random_states_dims(n, d, seed);
        let cfg = CausalConfig::default();
        let gen = generate(&s, &GrowthPolicy::Flat, 4, PosMode::Fourier, cfg, true).unwrap();
        let reference = causal_softmax(&s, 4, cfg.pos_scale);
        for (t, (g, r)) in gen.grads.iter().zip(&reference).enumerate() {
            // Undo the root scale: q ← q − N√d·∇φ with N = t + 1.
            let update: Vec<f64> = g.iter().map(|x| -x * (t + 1) as f64 * (d as f64).sqrt()).collect();
            assert!(max_diff(&update, r) <= 1e-9, "n={n} t={t}");
            assert_eq!(gen.rows[t].cache_nodes, t + 1);
        }
    }
}

#[test]
fn cache_rows_match_recompute() {
    for (policy, b) in [(vec![2, 2], 2usize), (vec![4, 4], 4), (vec![3, 2], 3)] {
        for (include_self, payload) in [(true, PayloadMode::Keys), (false, PayloadMode::Values)] {
            let s = random_states_dims(128, 8, 11);
            let cfg = CausalConfig {
                include_self,
                payload,
                pos_scale: 0.7,
            };
            let policy = GrowthPolicy::Fixed(policy.clone());
            let gen = generate(&s, &policy, 4, PosMode::Fourier, cfg, true).unwrap();
            for r in &gen.rows {
                assert!(r.max_abs_diff.unwrap() <= 1e-9, "{policy:?} t={}", r.token_index);
                assert!(r.cache_nodes <= (b + 1) * gen.final_depth + 1);
            }
            assert!(gen.peak_nodes <= (b + 1) * gen.final_depth + 1);
        }
    }
}

#[test]
fn binary_cache_bounds() {
    let s = random_states_dims(128, 4, 5);
    let gen = generate(&s, &GrowthPolicy::Fixed(vec![2, 2]), 2, PosMode::Fourier, CausalConfig::default(), false).unwrap();
    assert_eq!(gen.final_depth, 7);
    assert!(gen.peak_nodes <= 3 * 7 + 1);
    assert!(gen.rows[63].cache_nodes <= 3 * 6 + 1);
}

#[test]
fn per_token_ops_grow_additively() {
    let avg = |n: usize| {
        let s = random_states_dims(n, 4, 9);
        let gen = generate(&s, &GrowthPolicy::Fixed(vec![2]), 2, PosMode::Fourier, CausalConfig::default(), false).unwrap();
        let tail = &gen.rows[n / 2..];
        tail.iter().map(|r| r.per_token_ops as f64).sum::<f64>() / tail.len() as f64
    };
    let (a, b, c) = (avg(64), avg(128), avg(256));
    let (d1, d2) = (b - a, c - b);
    assert!(d1 > 0.0 && d1 <= 8.0, "{a} {b}");
    assert!((d2 - d1).abs() <= 2.0, "{d1} {d2}");
}

#[test]
fn text_policy_matches_recompute() {
    let text = "the cat sat. it purred! why?\n\nthen a dog came. the end";
    let (policy, tokens) = GrowthPolicy::from_text(text).unwrap();
    let s = random_states_dims(tokens.len(), 8, 2);
    let gen = generate(&s, &policy, 4, PosMode::Fourier, CausalConfig::default(), true).unwrap();
    assert_eq!(gen.final_depth, 3);
    for r in &gen.rows {
        assert!(r.max_abs_diff.unwrap() <= 1e-9);
    }
}

#[test]
fn prompt_cache_continues_exactly() {
    let d = 8;
    let s = random_states_dims(9, d, 4);
    let leaves = random_leaves(8, d, 0);
    let prompt = build_fixed(&leaves, &repeat_last(&[2, 2], 8), PosMode::Fourier, 4).unwrap();
    let head = LeafStates {
        q: s.q[..8].to_vec(),
        k: s.k[..8].to_vec(),
        v: s.v[..8].to_vec(),
    };
    let cfg = CausalConfig::default();
    let mut cache = RightSkewedCache::from_prompt(&prompt, &head, PosMode::Fourier, cfg).unwrap();
    assert!(cache.stats().nodes <= 9);
    let policy = GrowthPolicy::Fixed(vec![2]);
    let events = policy.events(&cache);
    assert_eq!(events, vec![1, 2, 3]);
    let row = cache.append(&s.q[8], &s.k[8], &s.v[8], &events).unwrap();
    let full = generate(&s, &policy, 4, PosMode::Fourier, cfg, true).unwrap();
    assert!(max_diff(&row, &full.grads[8]) <= 1e-12);
    assert!(full.rows[8].max_abs_diff.unwrap() <= 1e-9);

    // Flat prompt: the cache is one family holding every token.
    let flat = random_flat(1, 6, d, 4, DomainKind::Grid1d);
    let fs = random_states(&flat, 1);
    let cache = RightSkewedCache::from_prompt(&flat, &fs, PosMode::Fourier, cfg).unwrap();
    assert_eq!(cache.stats().nodes, 6);
    assert_eq!(cache.depth(), 1);
}

#[test]
fn prompt_cache_without_next_boundary() {
    let d = 4;
    let s = random_states_dims(7, d, 8);
    let prompt = build_fixed(&random_leaves(6, d, 1), &repeat_last(&[4], 6), PosMode::Fourier, 2).unwrap();
    let head = LeafStates {
        q: s.q[..6].to_vec(),
        k: s.k[..6].to_vec(),
        v: s.v[..6].to_vec(),
    };
    let cfg = CausalConfig {
        include_self: false,
        ..CausalConfig::default()
    };
    let mut cache = RightSkewedCache::from_prompt(&prompt, &head, PosMode::Fourier, cfg).unwrap();
    let row = cache.append(&s.q[6], &s.k[6], &s.v[6], &[]).unwrap();
    let full_h = build_fixed(&random_leaves(7, d, 1), &repeat_last(&[4], 7), PosMode::Fourier, 2).unwrap();
    let full = hsa_causal_forward(&full_h, &s, &cfg).unwrap();
    assert!(max_diff(&row, &full.grads[6]) <= 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_policies_match_recompute(seed in 0u64..10_000, b1 in 2usize..5, b2 in 2usize..5, n in 1usize..40, include_self: bool) {
        let s = random_states_dims(n, 4, seed);
        let cfg = CausalConfig { include_self, ..CausalConfig::default() };
        let gen = generate(&s, &GrowthPolicy::Fixed(vec![b1, b2]), 2, PosMode::Fourier, cfg, true).unwrap();
        for r in &gen.rows {
            prop_assert!(r.max_abs_diff.unwrap() <= 1e-9);
            prop_assert!(r.cache_nodes <= (b1.max(b2) + 1) * gen.final_depth + 1);
        }
    }
}
