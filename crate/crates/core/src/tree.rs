//! Draft token trees built from mask-token distributions.
//!
//! Depth-`i` nodes are proposed from mask `m_i`'s distribution. Only the
//! best node at each depth is expanded (Top-1 expansion), so a tree is a
//! fan of depth-1 candidates plus a spine of further fans hanging from the
//! best candidate of the previous depth.
//!
//! Ties are broken everywhere by descending probability, then ascending
//! token id.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EspError, Result};
use crate::lm::TokenId;

/// Tokens processed in one forward pass: `(k + 1)(1 + sum K_i)`.
pub fn block_complexity(k: usize, widths: &[usize]) -> usize {
    (k + 1) * (1 + widths.iter().sum::<usize>())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum BranchMode {
    Static { widths: Vec<usize> },
    /// `budget` counts tree tokens including the root.
    Dynamic { budget: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    #[serde(flatten)]
    pub mode: BranchMode,
    pub k: usize,
}

impl BranchConfig {
    pub fn fixed(widths: Vec<usize>) -> Result<Self> {
        let cfg = BranchConfig {
            k: widths.len(),
            mode: BranchMode::Static { widths },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Dynamic tree whose block (tree plus `k` masks per tree token) fits in
    /// `bc`: the tree gets `floor(bc / (k + 1))` tokens.
    pub fn dynamic(bc: usize, k: usize) -> Result<Self> {
        let cfg = BranchConfig {
            k,
            mode: BranchMode::Dynamic { budget: bc / (k + 1) },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The branch used when none is given: a single fan of `bc/2 - 1` for
    /// `k = 1`, the published two-mask shapes for 30 and 60, otherwise
    /// dynamic.
    pub fn default_for(bc: usize, k: usize) -> Result<Self> {
        match (k, bc) {
            (1, bc) if bc % 2 == 0 && bc >= 2 => Self::fixed(vec![bc / 2 - 1]),
            (2, 30) => Self::fixed(vec![7, 2]),
            (2, 60) => Self::fixed(vec![15, 4]),
            _ => Self::dynamic(bc, k),
        }
    }

    /// Parse `static:[K1,...]`, `dynamic`, or `dynamic:<bc>x<k>` against the
    /// configured block complexity and mask count.
    pub fn parse(s: &str, bc: usize, k: usize) -> Result<Self> {
        let cfg = Self::parse_with(s, Some((bc, k)))?;
        cfg.check_against(bc, k)?;
        Ok(cfg)
    }

    fn parse_with(s: &str, configured: Option<(usize, usize)>) -> Result<Self> {
        let s = s.trim();
        let number = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| EspError::InvalidBranch(format!("bad number {v:?} in {s:?}")))
        };
        if let Some(rest) = s.strip_prefix("static:") {
            let inner = rest
                .trim()
                .strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .ok_or_else(|| EspError::InvalidBranch(format!("expected static:[K1,...], got {s:?}")))?;
            let widths = inner.split(',').map(number).collect::<Result<Vec<_>>>()?;
            Self::fixed(widths)
        } else if s == "dynamic" {
            let (bc, k) = configured.ok_or_else(|| {
                EspError::InvalidBranch("bare \"dynamic\" needs a configured block complexity".into())
            })?;
            Self::dynamic(bc, k)
        } else if let Some(rest) = s.strip_prefix("dynamic:") {
            let (b, k) = rest
                .split_once('x')
                .ok_or_else(|| EspError::InvalidBranch(format!("expected dynamic:<bc>x<k>, got {s:?}")))?;
            Self::dynamic(number(b)?, number(k)?)
        } else {
            Err(EspError::InvalidBranch(format!(
                "unknown branch {s:?}; expected static:[K1,...], dynamic, or dynamic:<bc>x<k>"
            )))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(EspError::InvalidBranch("mask count k must be >= 1".into()));
        }
        match &self.mode {
            BranchMode::Static { widths } => {
                if widths.len() != self.k {
                    return Err(EspError::InvalidBranch(format!(
                        "{} widths given for k={}",
                        widths.len(),
                        self.k
                    )));
                }
                if let Some(i) = (1..widths.len()).find(|&i| widths[i - 1] == 0 && widths[i] > 0) {
                    return Err(EspError::InvalidBranch(format!(
                        "width K{} > 0 under an empty depth {}",
                        i + 1,
                        i
                    )));
                }
            }
            BranchMode::Dynamic { budget } => {
                if *budget < 2 {
                    return Err(EspError::InvalidBranch(format!("dynamic budget {budget} < 2")));
                }
            }
        }
        Ok(())
    }

    /// Fail unless this branch matches mask count `k` and, for static trees,
    /// block complexity `bc` exactly.
    pub fn check_against(&self, bc: usize, k: usize) -> Result<()> {
        if self.k != k {
            return Err(EspError::InvalidBranch(format!(
                "branch has k={} but {k} masks configured",
                self.k
            )));
        }
        if let BranchMode::Static { widths } = &self.mode {
            let got = block_complexity(k, widths);
            if got != bc {
                return Err(EspError::InvalidBranch(format!(
                    "block complexity {got} != {bc} for k={k}, widths {widths:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_static(&self) -> bool {
        matches!(self.mode, BranchMode::Static { .. })
    }

    /// Tokens in one forward pass for a full tree.
    pub fn block_complexity(&self) -> usize {
        match &self.mode {
            BranchMode::Static { widths } => block_complexity(self.k, widths),
            BranchMode::Dynamic { budget } => (self.k + 1) * budget,
        }
    }
}

impl fmt::Display for BranchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.mode {
            BranchMode::Static { widths } => {
                let ws: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                write!(f, "static:[{}]", ws.join(","))
            }
            BranchMode::Dynamic { .. } => write!(f, "dynamic:{}x{}", self.block_complexity(), self.k),
        }
    }
}

impl FromStr for BranchConfig {
    type Err = EspError;

    /// Parse without a block-complexity check; bare `dynamic` is rejected.
    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with(s, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreeShape {
    /// Same node structure every step (fixed widths).
    Static,
    Dynamic,
    /// A single path with no masks, as used by prompt lookup.
    Chain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub token: TokenId,
    /// Index into `DraftTree::nodes`; `None` means the root.
    pub parent: Option<usize>,
    pub depth: usize,
    pub prob: f64,
    pub cum_prob: f64,
    pub layout_slot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    pub root: TokenId,
    /// Parents precede children; ordered by depth, then descending
    /// `cum_prob`, then token id, as built.
    pub nodes: Vec<TreeNode>,
    /// Masks attached to every tree position.
    pub k: usize,
    pub shape: TreeShape,
}

impl DraftTree {
    pub fn empty(root: TokenId, k: usize, shape: TreeShape) -> Self {
        DraftTree {
            root,
            nodes: Vec::new(),
            k,
            shape,
        }
    }

    /// A single path of certain tokens (probability 1) with no masks.
    pub fn chain(root: TokenId, tokens: &[TokenId]) -> Self {
        let nodes = tokens
            .iter()
            .enumerate()
            .map(|(i, &token)| TreeNode {
                token,
                parent: i.checked_sub(1),
                depth: i + 1,
                prob: 1.0,
                cum_prob: 1.0,
                layout_slot: None,
            })
            .collect();
        DraftTree {
            root,
            nodes,
            k: 0,
            shape: TreeShape::Chain,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn parent_token(&self, i: usize) -> TokenId {
        match self.nodes[i].parent {
            Some(p) => self.nodes[p].token,
            None => self.root,
        }
    }

    pub fn children(&self, parent: Option<usize>) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.parent == parent)
            .map(|(i, _)| i)
    }

    /// Node indices on the path from the root to `node`, root excluded.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.nodes[p].parent;
        }
        path.reverse();
        path
    }

    /// Structural check: parents precede children, depths chain, sibling
    /// tokens distinct, cumulative scores consistent.
    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            let parent_depth = match n.parent {
                Some(p) if p >= i => {
                    return Err(EspError::InvalidTree(format!("node {i} has parent {p} not before it")));
                }
                Some(p) => self.nodes[p].depth,
                None => 0,
            };
            if n.depth != parent_depth + 1 {
                return Err(EspError::InvalidTree(format!(
                    "node {i} at depth {} under parent depth {parent_depth}",
                    n.depth
                )));
            }
            if self.nodes[..i].iter().any(|m| m.parent == n.parent && m.token == n.token) {
                return Err(EspError::InvalidTree(format!("node {i} duplicates a sibling token")));
            }
        }
        Ok(())
    }
}

/// Softmax in `f64` for scoring.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let mut p: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

fn by_prob(probs: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b))
}

/// Token ids ranked by descending probability, then ascending id.
pub fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(by_prob(probs));
    idx
}

/// The top `n` token ids under the tie rule.
pub fn top_n(probs: &[f64], n: usize) -> Vec<usize> {
    let mut idx = ranked(probs);
    idx.truncate(n);
    idx
}

fn check_rows(mask_logits: &[Vec<f32>], k: usize) -> Result<usize> {
    if mask_logits.len() < k {
        return Err(EspError::ShapeMismatch(format!(
            "{} mask-logit rows for k={k}",
            mask_logits.len()
        )));
    }
    let v = mask_logits.first().map_or(0, |r| r.len());
    if mask_logits.iter().any(|r| r.len() != v) {
        return Err(EspError::ShapeMismatch("ragged mask-logit rows".into()));
    }
    if mask_logits.iter().flatten().any(|x| !x.is_finite()) {
        return Err(EspError::ShapeMismatch("non-finite mask logits".into()));
    }
    Ok(v)
}

/// Order nodes by depth, descending `cum_prob`, token id, remapping parents.
fn canonical_order(root: TokenId, k: usize, shape: TreeShape, mut nodes: Vec<TreeNode>) -> DraftTree {
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&nodes[a], &nodes[b]);
        x.depth
            .cmp(&y.depth)
            .then(y.cum_prob.total_cmp(&x.cum_prob))
            .then(x.token.cmp(&y.token))
    });
    let mut new_index = vec![0; nodes.len()];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    for n in &mut nodes {
        n.parent = n.parent.map(|p| new_index[p]);
    }
    let mut slots: Vec<Option<TreeNode>> = nodes.into_iter().map(Some).collect();
    let nodes = order.iter().map(|&i| slots[i].take().expect("permutation")).collect();
    DraftTree { root, nodes, k, shape }
}

/// Fixed-width tree: top-`K_1` of mask 1 under the root, then for each
/// deeper level the top-`K_i` of mask `i` under the best node of level
/// `i - 1`.
pub fn build_static_tree(root: TokenId, mask_logits: &[Vec<f32>], config: &BranchConfig) -> Result<DraftTree> {
    config.validate()?;
    let BranchMode::Static { widths } = &config.mode else {
        return Err(EspError::InvalidBranch("build_static_tree needs a static branch".into()));
    };
    let v = check_rows(mask_logits, config.k)?;
    if let Some(&w) = widths.iter().find(|&&w| w > v) {
        return Err(EspError::InvalidBranch(format!("width {w} exceeds vocabulary {v}")));
    }
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut expand: Option<usize> = None;
    let mut expand_cum = 1.0;
    for (i, &w) in widths.iter().enumerate() {
        if w == 0 {
            break;
        }
        let probs = softmax(&mask_logits[i]);
        let first = nodes.len();
        for t in top_n(&probs, w) {
            nodes.push(TreeNode {
                token: t as TokenId,
                parent: expand,
                depth: i + 1,
                prob: probs[t],
                cum_prob: expand_cum * probs[t],
                layout_slot: None,
            });
        }
        expand = Some(first);
        expand_cum = nodes[first].cum_prob;
    }
    Ok(DraftTree {
        root,
        nodes,
        k: config.k,
        shape: TreeShape::Static,
    })
}

/// Candidate generation for the dynamic tree: at depth `i` the top
/// `budget - i` tokens of mask `i` become children of the best candidate at
/// depth `i - 1`. Returned in generation order.
pub fn dynamic_candidates(mask_logits: &[Vec<f32>], budget: usize, k: usize) -> Result<Vec<TreeNode>> {
    check_rows(mask_logits, k)?;
    let mut cands: Vec<TreeNode> = Vec::new();
    let mut expand: Option<usize> = None;
    let mut expand_cum = 1.0;
    for i in 1..=k {
        let take = budget.saturating_sub(i);
        if take == 0 {
            break;
        }
        let probs = softmax(&mask_logits[i - 1]);
        let first = cands.len();
        for t in top_n(&probs, take) {
            cands.push(TreeNode {
                token: t as TokenId,
                parent: expand,
                depth: i,
                prob: probs[t],
                cum_prob: expand_cum * probs[t],
                layout_slot: None,
            });
        }
        expand = Some(first);
        expand_cum = cands[first].cum_prob;
    }
    Ok(cands)
}

/// Global ranking key for final selection: descending `cum_prob`, then
/// shallower first, then token id.
fn selection_order(cands: &[TreeNode]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&cands[a], &cands[b]);
        y.cum_prob
            .total_cmp(&x.cum_prob)
            .then(x.depth.cmp(&y.depth))
            .then(x.token.cmp(&y.token))
    });
    order
}

/// Make a selection closed under "parent of": walk the ranking, admitting a
/// candidate together with any missing ancestors while room remains, so
/// the result never exceeds `limit` and never holds an orphan.
pub fn enforce_connectivity(cands: &[TreeNode], ranking: &[usize], limit: usize) -> Vec<usize> {
    let mut chosen = vec![false; cands.len()];
    let mut count = 0;
    for &c in ranking {
        if count >= limit {
            break;
        }
        if chosen[c] {
            continue;
        }
        let mut need = vec![c];
        let mut cur = cands[c].parent;
        while let Some(p) = cur {
            if chosen[p] {
                break;
            }
            need.push(p);
            cur = cands[p].parent;
        }
        if count + need.len() <= limit {
            for n in need {
                chosen[n] = true;
                count += 1;
            }
        }
    }
    (0..cands.len()).filter(|&i| chosen[i]).collect()
}

/// Budgeted tree: generate candidates, keep the `budget - 1` best by
/// cumulative probability, and return them connected.
pub fn build_dynamic_tree(root: TokenId, mask_logits: &[Vec<f32>], budget: usize, k: usize) -> Result<DraftTree> {
    if budget < 2 {
        return Err(EspError::InvalidBranch(format!("dynamic budget {budget} < 2")));
    }
    let cands = dynamic_candidates(mask_logits, budget, k)?;
    let ranking = selection_order(&cands);
    let keep = enforce_connectivity(&cands, &ranking, budget - 1);
    let mut remap = vec![usize::MAX; cands.len()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let nodes = keep
        .iter()
        .map(|&i| TreeNode {
            parent: cands[i].parent.map(|p| remap[p]),
            ..cands[i].clone()
        })
        .collect();
    Ok(canonical_order(root, k, TreeShape::Dynamic, nodes))
}

/// Build the tree for `config` from the current mask logits.
pub fn build_tree(root: TokenId, mask_logits: &[Vec<f32>], config: &BranchConfig) -> Result<DraftTree> {
    match &config.mode {
        BranchMode::Static { .. } => build_static_tree(root, mask_logits, config),
        BranchMode::Dynamic { budget } => build_dynamic_tree(root, mask_logits, *budget, config.k),
    }
}

/// Replace every node that repeats its parent's token (the root counts as
/// the parent of depth 1) with the best token of the same mask distribution
/// that is neither the parent's token nor a sibling's. Nodes keep their
/// place; scores below a replaced node are recomputed.
pub fn prune(tree: &DraftTree, mask_logits: &[Vec<f32>]) -> Result<DraftTree> {
    let mut out = tree.clone();
    if tree.shape == TreeShape::Chain {
        return Ok(out);
    }
    check_rows(mask_logits, tree.max_depth())?;
    let mut changed = false;
    for i in 0..out.nodes.len() {
        let parent_tok = out.parent_token(i);
        if out.nodes[i].token != parent_tok {
            continue;
        }
        let parent = out.nodes[i].parent;
        let siblings: Vec<TokenId> = out
            .nodes
            .iter()
            .enumerate()
            .filter(|&(j, n)| j != i && n.parent == parent)
            .map(|(_, n)| n.token)
            .collect();
        let probs = softmax(&mask_logits[out.nodes[i].depth - 1]);
        let replacement = ranked(&probs)
            .into_iter()
            .find(|&t| t as TokenId != parent_tok && !siblings.contains(&(t as TokenId)))
            .ok_or(EspError::VocabularyExhausted { node: i })?;
        out.nodes[i].token = replacement as TokenId;
        out.nodes[i].prob = probs[replacement];
        changed = true;
    }
    if changed {
        for i in 0..out.nodes.len() {
            let base = out.nodes[i].parent.map_or(1.0, |p| out.nodes[p].cum_prob);
            out.nodes[i].cum_prob = base * out.nodes[i].prob;
        }
    }
    Ok(out)
}

/// One entry of the flattened block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    Root,
    Node(usize),
    /// Mask `index` (1-based) of the chain behind `anchor` (`None` = root).
    Mask { anchor: Option<usize>, index: usize },
}

/// Block order: root, tree nodes in their stored order, then `k` masks per
/// tree position grouped by position in the same order. Records each
/// node's slot.
pub fn flatten(tree: &mut DraftTree) -> Vec<Slot> {
    let n = tree.nodes.len();
    let mut slots = Vec::with_capacity((tree.k + 1) * (n + 1));
    slots.push(Slot::Root);
    for (i, node) in tree.nodes.iter_mut().enumerate() {
        node.layout_slot = Some(slots.len());
        slots.push(Slot::Node(i));
    }
    for anchor in std::iter::once(None).chain((0..n).map(Some)) {
        for index in 1..=tree.k {
            slots.push(Slot::Mask { anchor, index });
        }
    }
    slots
}
