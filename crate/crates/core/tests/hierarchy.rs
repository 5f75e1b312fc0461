use hsa_core::dp::{hsa_forward, hsa_forward_batch, DpOptions};
use hsa_core::fixtures::{random_flat, random_hierarchy, random_leaves, random_states, FixtureSpec};
use hsa_core::hierarchy::{batch_concat, build_fixed, build_text, hash_embed, DomainKind, PosMode, SignalHierarchy};
use hsa_core::{HsaError, LeafStates};
use proptest::prelude::*;

/// Family counts per level, from the leaves upward.
fn level_sizes(h: &SignalHierarchy) -> Vec<usize> {
    h.internal_by_depth().iter().rev().map(Vec::len).collect()
}

#[test]
fn two_leaf_document() {
    let doc = r#"{"dim":4,"pos_dim":2,"root":{"domain":"grid1d","children":[
        {"pos":[0,1],"leaf":{"x":[1,2,3,4]}},
        {"pos":[0.5,0.5],"leaf":{"x":[0,0,1]}}]}}"#;
    let h = SignalHierarchy::from_json(doc).unwrap();
    let st = h.stats();
    assert_eq!((st.n_leaves, st.n_families, st.max_branching, st.depth), (2, 1, 2, 1));
    assert_eq!(h.leaf_features(1), &[0.0, 0.0, 1.0, 0.0]);
    let again = SignalHierarchy::from_json(&h.to_json()).unwrap();
    assert_eq!(again.to_json(), h.to_json());
}

#[test]
fn website_document() {
    // A graph-like root holding a page (set of two grid sections) and a footer.
    let doc = r#"{"dim":2,"pos_dim":2,"root":{"domain":"custom","children":[
        {"pos":[0.3,-0.2],"node":{"domain":"set","children":[
            {"pos":[0,0],"node":{"domain":"grid1d","children":[
                {"pos":[0,1],"leaf":{"x":[1,0]}},{"pos":[0.84,0.54],"leaf":{"x":[0,1]}}]}},
            {"pos":[0,0],"node":{"domain":"grid1d","children":[
                {"pos":[0,1],"leaf":{"x":[1,1]}},{"pos":[0.84,0.54],"leaf":{"x":[1,-1]}},
                {"pos":[0.91,-0.42],"leaf":{"x":[0,2]}}]}}]}},
        {"pos":[-0.1,0.7],"leaf":{"x":[2,2]}}]}}"#;
    let h = SignalHierarchy::from_json(doc).unwrap();
    let st = h.stats();
    assert_eq!((st.n_leaves, st.depth, st.n_families, st.max_branching), (6, 3, 4, 3));
    assert!(h.validate().is_empty());
}

#[test]
fn schema_errors() {
    let bad = [
        r#"{"dim":2,"pos_dim":1,"root":{"domain":"set","children":[]}}"#,
        r#"{"dim":2,"pos_dim":1,"root":{"domain":"grid","children":[{"pos":[0],"leaf":{"x":[1]}}]}}"#,
        r#"{"dim":2,"pos_dim":1,"root":{"domain":"set","children":[{"pos":[1],"leaf":{"x":[1]}}]}}"#,
        r#"{"dim":2,"pos_dim":1,"root":{"domain":"grid1d","children":[{"pos":[0,1],"leaf":{"x":[1]}}]}}"#,
        r#"{"dim":1,"pos_dim":1,"root":{"domain":"grid1d","children":[{"pos":[0],"leaf":{"x":[1,2]}}]}}"#,
        r#"{"dim":2,"root":{"leaf":{"x":[1]}}}"#,
        r#"[1,2]"#,
    ];
    for doc in bad {
        assert!(SignalHierarchy::from_json(doc).is_err(), "{doc}");
    }
}

#[test]
fn fixed_builder_level_sizes() {
    let cases: [(usize, &[usize], &[usize], usize); 3] = [
        (8, &[2, 2, 2], &[4, 2, 1], 2),
        (264, &[2, 4, 8, 16], &[132, 33, 5, 1], 8),
        (5, &[2, 2], &[3, 2, 1], 2),
    ];
    for (n, b, sizes, max_b) in cases {
        let h = build_fixed(&random_leaves(n, 4, 0), b, PosMode::Fourier, 2).unwrap();
        assert_eq!(level_sizes(&h), sizes, "N={n}");
        let st = h.stats();
        assert_eq!(st.n_families, sizes.iter().sum::<usize>());
        assert_eq!(st.max_branching, max_b);
        assert_eq!(st.depth, sizes.len());
    }
    assert!(matches!(build_fixed(&[], &[2], PosMode::Zero, 2), Err(HsaError::EmptyInput(_))));
    assert!(matches!(
        build_fixed(&random_leaves(3, 2, 0), &[1], PosMode::Zero, 2),
        Err(HsaError::InvalidBranching(1))
    ));
    // Extra branching entries are ignored once a single root remains.
    let h = build_fixed(&random_leaves(4, 2, 0), &[4, 2, 2], PosMode::Fourier, 2).unwrap();
    assert_eq!(level_sizes(&h), [1]);
}

#[test]
fn text_builder() {
    let h = build_text("a b. c d.\n\ne f.", 8, 2, PosMode::Fourier).unwrap();
    assert_eq!(h.n_leaves(), 6);
    let root = h.root();
    assert_eq!(h.children(root).len(), 2);
    let sentences: Vec<usize> = h.children(root).iter().map(|&p| h.children(p).len()).collect();
    assert_eq!(sentences, [2, 1]);
    assert!((0..h.n_nodes()).filter_map(|i| h.domain(i)).all(|d| d == DomainKind::Grid1d));
    assert_eq!(h.leaf_features(0), hash_embed("a", 8).as_slice());

    let x = build_text("x", 4, 2, PosMode::Fourier).unwrap();
    let st = x.stats();
    assert_eq!((st.n_leaves, st.n_families, st.depth, st.max_branching), (1, 3, 3, 1));
    assert!(build_text(" \n\n ", 4, 2, PosMode::Fourier).is_err());

    let again = build_text("a b. c d.\n\ne f.", 8, 2, PosMode::Fourier).unwrap();
    assert_eq!(again.to_json(), h.to_json());
}

#[test]
fn hash_embedding_is_centred() {
    let e = hash_embed("token", 16);
    assert!(e.iter().sum::<f64>().abs() < 1e-12);
    assert_ne!(e, hash_embed("tokens", 16));
}

#[test]
fn flatten_preserves_leaves() {
    let h = random_hierarchy(7, &FixtureSpec::default());
    let f = h.flatten();
    let st = f.stats();
    assert_eq!((st.n_leaves, st.n_families, st.depth), (h.n_leaves(), 1, 1));
    for i in 0..h.n_leaves() {
        assert_eq!(f.leaf_features(i), h.leaf_features(i));
        assert_eq!(f.children(f.root())[i], f.leaf_node(i));
    }
    assert_eq!(f.flatten().to_json(), f.to_json());
    let flat = random_flat(1, 6, 4, 2, DomainKind::Set);
    let st = flat.stats();
    assert_eq!((st.n_leaves, st.n_families, st.max_branching, st.depth), (6, 1, 6, 1));
    assert_eq!(flat.flatten().to_json(), flat.to_json());
}

fn concat_states(parts: &[LeafStates]) -> LeafStates {
    let mut out = LeafStates {
        q: vec![],
        k: vec![],
        v: vec![],
    };
    for p in parts {
        out.q.extend(p.q.iter().cloned());
        out.k.extend(p.k.iter().cloned());
        out.v.extend(p.v.iter().cloned());
    }
    out
}

#[test]
fn batch_matches_individual_runs() {
    for size in 1..=4u64 {
        let hs: Vec<SignalHierarchy> = (0..size).map(|i| random_hierarchy(100 + i * 7 + size, &FixtureSpec::default())).collect();
        let states: Vec<LeafStates> = hs.iter().enumerate().map(|(i, h)| random_states(h, i as u64)).collect();
        let batch = batch_concat(&hs).unwrap();
        assert_eq!(batch.hierarchy.domain(batch.hierarchy.root()), Some(DomainKind::Set));
        assert!(batch.hierarchy.to_json().contains(r#""root":{"domain":"set""#));
        let mut next = 0;
        for (o, h) in batch.offsets.iter().zip(&hs) {
            assert_eq!(o.start, next);
            assert_eq!(o.len(), h.n_leaves());
            next = o.end;
        }
        let outs = hsa_forward_batch(&batch, &concat_states(&states), &DpOptions::default()).unwrap();
        for ((h, s), out) in hs.iter().zip(&states).zip(&outs) {
            let solo = hsa_forward(h, s, &DpOptions::default()).unwrap();
            for (a, b) in solo.grads.iter().flatten().zip(out.grads.iter().flatten()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
    let mixed = [random_flat(0, 3, 4, 2, DomainKind::Set), random_flat(0, 3, 5, 2, DomainKind::Set)];
    assert!(matches!(batch_concat(&mixed), Err(HsaError::MixedDims(..))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn leaf_ranges_are_contiguous_and_additive(seed in 0u64..100_000) {
        let h = random_hierarchy(seed, &FixtureSpec::default());
        prop_assert!(h.validate().is_empty());
        for id in 0..h.n_nodes() {
            let node = h.node(id);
            if h.is_leaf(id) {
                prop_assert_eq!(node.leaves.len(), 1);
                continue;
            }
            let kids = h.children(id);
            let total: usize = kids.iter().map(|&c| h.node(c).leaves.len()).sum();
            prop_assert_eq!(total, node.leaves.len());
            prop_assert_eq!(h.node(kids[0]).leaves.start, node.leaves.start);
            for w in kids.windows(2) {
                prop_assert_eq!(h.node(w[0]).leaves.end, h.node(w[1]).leaves.start);
            }
        }
        let back = SignalHierarchy::from_json(&h.to_json()).unwrap();
        prop_assert_eq!(back.to_json(), h.to_json());
    }

    #[test]
    fn fixed_builder_follows_ceil_division(n in 1usize..300, b1 in 2usize..6, b2 in 2usize..6) {
        let h = build_fixed(&random_leaves(n, 2, 0), &[b1, b2], PosMode::Fourier, 2).unwrap();
        let mut expect = Vec::new();
        let mut cur = n;
        for b in [b1, b2] {
            if cur == 1 {
                break;
            }
            cur = cur.div_ceil(b);
            expect.push(cur);
        }
        if cur > 1 {
            expect.push(1);
        }
        prop_assert_eq!(level_sizes(&h), expect);
    }
}
