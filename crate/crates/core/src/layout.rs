//! Tree attention masks and position ids for a flattened block.
//!
//! Every block row sees the whole cache (the cache holds exactly the
//! committed history). Within the block, a node sees its root-to-node path
//! and itself; mask `j` behind an anchor sees what the anchor sees, masks
//! `1..j` of the same anchor, and itself. The root sits at position `p0`, a
//! depth-`i` node at `p0 + i`, and mask `j` of a depth-`i` anchor at
//! `p0 + i + j`.
//!
//! For trees whose shape never changes, the next step's layout is the
//! previous one with `be` attended columns inserted at the cache/block
//! boundary and every position id shifted by `be`, where `be` is the number
//! of tokens the step added to the cache.

use crate::error::{EspError, Result};
use crate::lm::AttentionMask;
use crate::tree::{flatten, DraftTree, Slot, TreeShape};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub mask: AttentionMask,
    pub position_ids: Vec<u32>,
    pub slot_map: Vec<Slot>,
    pub cache_len: usize,
    pub p0: u32,
    pub static_shape: bool,
}

impl AttentionLayout {
    pub fn block_len(&self) -> usize {
        self.slot_map.len()
    }
}

/// Build the layout by walking the tree. Also records each node's slot.
pub fn build_layout_naive(tree: &mut DraftTree, cache_len: usize, p0: u32) -> Result<AttentionLayout> {
    tree.validate()?;
    let slots = flatten(tree);
    let n = slots.len();
    let k = tree.k;
    let num_nodes = tree.nodes.len();
    let mut mask = AttentionMask::new(n, cache_len + n);
    let mut position_ids = vec![0u32; n];

    // Block columns each slot sees, beyond the cache.
    let mut seen: Vec<Vec<usize>> = vec![Vec::new(); n];
    seen[0] = vec![0];
    for i in 0..num_nodes {
        let slot = 1 + i;
        let mut cols = match tree.nodes[i].parent {
            Some(p) => seen[1 + p].clone(),
            None => seen[0].clone(),
        };
        cols.push(slot);
        seen[slot] = cols;
    }
    let mask_base = 1 + num_nodes;
    for (a, anchor) in std::iter::once(None).chain((0..num_nodes).map(Some)).enumerate() {
        let anchor_slot = anchor.map_or(0, |i| 1 + i);
        let mut cols = seen[anchor_slot].clone();
        for j in 0..k {
            let slot = mask_base + a * k + j;
            debug_assert_eq!(slots[slot], Slot::Mask { anchor, index: j + 1 });
            cols.push(slot);
            seen[slot] = cols.clone();
        }
    }

    for (row, slot) in slots.iter().enumerate() {
        for c in 0..cache_len {
            mask.set(row, c, true);
        }
        for &col in &seen[row] {
            mask.set(row, cache_len + col, true);
        }
        let depth = match *slot {
            Slot::Root => 0,
            Slot::Node(i) => tree.nodes[i].depth,
            Slot::Mask { anchor, index } => anchor.map_or(0, |i| tree.nodes[i].depth) + index,
        };
        position_ids[row] = p0 + depth as u32;
    }
    Ok(AttentionLayout {
        mask,
        position_ids,
        slot_map: slots,
        cache_len,
        p0,
        static_shape: tree.shape == TreeShape::Static,
    })
}

/// Shift a static-shape layout after `be` tokens were committed to the
/// cache, without walking the tree.
pub fn advance_layout_efficient(prev: &AttentionLayout, be: usize) -> Result<AttentionLayout> {
    if !prev.static_shape {
        return Err(EspError::LayoutMisuse(
            "incremental layout update needs a static tree shape".into(),
        ));
    }
    let mut next = prev.clone();
    next.mask.insert_attended_columns(prev.cache_len, be);
    for p in &mut next.position_ids {
        *p += be as u32;
    }
    next.cache_len += be;
    next.p0 += be as u32;
    Ok(next)
}

/// Block slots of the root and an accepted root-to-node chain, in depth
/// order.
pub fn gather_accept_path_columns(layout: &AttentionLayout, tree: &DraftTree, chain: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(chain.len() + 1);
    out.push(0);
    let mut parent = None;
    for &c in chain {
        let node = tree
            .nodes
            .get(c)
            .ok_or_else(|| EspError::InvalidSlots(format!("node {c} not in tree")))?;
        if node.parent != parent {
            return Err(EspError::InvalidSlots(format!("node {c} does not extend the accepted path")));
        }
        let slot = layout
            .slot_map
            .iter()
            .position(|s| *s == Slot::Node(c))
            .ok_or_else(|| EspError::InvalidSlots(format!("node {c} has no slot")))?;
        out.push(slot);
        parent = Some(c);
    }
    Ok(out)
}
