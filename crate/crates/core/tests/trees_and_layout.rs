use esp_core::layout::{advance_layout_efficient, build_layout_naive};
use esp_core::tree::{build_dynamic_tree, build_static_tree, prune, BranchConfig, Slot};
use proptest::prelude::*;

fn logits(k: usize, v: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, v), k)
}

fn static_case() -> impl Strategy<Value = (Vec<usize>, Vec<Vec<f32>>)> {
    proptest::collection::vec(1usize..6, 1..4).prop_flat_map(|w| {
        let k = w.len();
        (Just(w), logits(k, 24))
    })
}

proptest! {
    #[test]
    fn dynamic_tree_order_and_size(k in 1usize..4, budget in 2usize..30, rows in logits(3, 32)) {
        let tree = build_dynamic_tree(5, &rows, budget, k).unwrap();
        prop_assert_eq!(tree.len(), budget - 1);
        tree.validate().unwrap();
        for w in tree.nodes.windows(2) {
            let key = |n: &esp_core::tree::TreeNode| (n.depth, -n.cum_prob);
            prop_assert!(key(&w[0]) <= key(&w[1]));
        }
        for n in &tree.nodes {
            if let Some(p) = n.parent {
                prop_assert!(tree.nodes[p].cum_prob >= n.cum_prob);
            }
        }
    }

    #[test]
    fn prune_is_idempotent((widths, rows) in static_case(), root in 0u32..24) {
        let cfg = BranchConfig::fixed(widths).unwrap();
        let tree = build_static_tree(root, &rows, &cfg).unwrap();
        let once = prune(&tree, &rows).unwrap();
        prop_assert_eq!(prune(&once, &rows).unwrap(), once.clone());
        for i in 0..once.nodes.len() {
            prop_assert_ne!(once.nodes[i].token, once.parent_token(i));
        }
    }

    #[test]
    fn naive_layout_is_causal_over_the_tree(
        (widths, rows) in static_case(),
        cache_len in 0usize..12,
    ) {
        let cfg = BranchConfig::fixed(widths).unwrap();
        let mut tree = build_static_tree(1, &rows, &cfg).unwrap();
        let layout = build_layout_naive(&mut tree, cache_len, cache_len as u32).unwrap();
        prop_assert_eq!(layout.block_len(), cfg.block_complexity());
        for (row, slot) in layout.slot_map.iter().enumerate() {
            for c in 0..cache_len {
                prop_assert!(layout.mask.get(row, c));
            }
            prop_assert!(layout.mask.get(row, cache_len + row));
            for col in row + 1..layout.block_len() {
                prop_assert!(!layout.mask.get(row, cache_len + col));
            }
            if *slot == Slot::Root {
                prop_assert_eq!(layout.position_ids[row], cache_len as u32);
            }
        }
    }

    #[test]
    fn efficient_shift_matches_rebuild(
        (widths, rows) in static_case(),
        cache_len in 0usize..10,
        be in 1usize..5,
    ) {
        let cfg = BranchConfig::fixed(widths).unwrap();
        let mut tree = build_static_tree(1, &rows, &cfg).unwrap();
        let prev = build_layout_naive(&mut tree.clone(), cache_len, cache_len as u32).unwrap();
        let next = cache_len + be;
        let naive = build_layout_naive(&mut tree, next, next as u32).unwrap();
        prop_assert_eq!(advance_layout_efficient(&prev, be).unwrap(), naive);
    }
}

#[test]
fn efficient_shift_rejects_dynamic_layouts() {
    let rows = vec![vec![0.5f32, 0.1, 0.3, 0.2]; 2];
    let mut tree = build_dynamic_tree(0, &rows, 3, 2).unwrap();
    let layout = build_layout_naive(&mut tree, 4, 4).unwrap();
    assert!(advance_layout_efficient(&layout, 1).is_err());
}
