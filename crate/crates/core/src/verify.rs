//! Tree verification: flattening a draft tree into verifier inputs, walking
//! it under the target's decoding rule, and planning cache compaction.
//!
//! Flattened index 0 is the root (the bonus token); draft node `i` sits at
//! flattened index `i + 1`. Each entry attends to the root, its ancestors and
//! itself, and carries its tree depth as position offset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::treebuild::DraftTree;
use crate::TokenId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("node {parent:?} has more than one child with token {token}")]
    DuplicateChildToken {
        /// Tree index of the parent, `None` for the root.
        parent: Option<usize>,
        token: TokenId,
    },
}

/// Dense square boolean matrix, one bit per entry, rows padded to whole
/// words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    size: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl BitMatrix {
    pub fn new(size: usize) -> Self {
        let words_per_row = size.div_ceil(64);
        Self {
            size,
            words_per_row,
            bits: vec![0; size * words_per_row],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.words_per_row + col / 64] >> (col % 64) & 1 == 1
    }

    pub fn set(&mut self, row: usize, col: usize) {
        self.bits[row * self.words_per_row + col / 64] |= 1 << (col % 64);
    }

    /// Overwrites row `dst` with row `src`, for `src < dst`.
    fn copy_row(&mut self, src: usize, dst: usize) {
        let w = self.words_per_row;
        let (head, tail) = self.bits.split_at_mut(dst * w);
        tail[..w].copy_from_slice(&head[src * w..src * w + w]);
    }

    /// Column indices set in `row`, ascending.
    pub fn row_indices(&self, row: usize) -> Vec<usize> {
        (0..self.size).filter(|&c| self.get(row, c)).collect()
    }
}

/// Verifier-ready form of a draft tree.
#[derive(Debug, Clone, PartialEq)]
pub struct FlattenedTree {
    pub token_ids: Vec<TokenId>,
    /// Tree depth of each entry; the root is 0.
    pub position_offsets: Vec<usize>,
    /// `mask[i][j]` is set iff `j == i` or `j` is an ancestor of `i`.
    pub mask: BitMatrix,
    pub parent_of: Vec<Option<usize>>,
    /// Children of each entry as `(token, flattened index)`, sorted by token.
    pub children_of: Vec<Vec<(TokenId, usize)>>,
}

impl FlattenedTree {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn child_with_token(&self, index: usize, token: TokenId) -> Option<usize> {
        let children = &self.children_of[index];
        children
            .binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|pos| children[pos].1)
    }

    /// Drafted tokens from the root (exclusive) down to `index` (inclusive).
    pub fn path_tokens(&self, index: usize) -> Vec<TokenId> {
        let mut path = Vec::with_capacity(self.position_offsets[index]);
        let mut cur = index;
        while let Some(parent) = self.parent_of[cur] {
            path.push(self.token_ids[cur]);
            cur = parent;
        }
        path.reverse();
        path
    }
}

/// Compiles `tree` into verifier inputs rooted at `bonus`.
pub fn flatten(tree: &DraftTree, bonus: TokenId) -> FlattenedTree {
    let n = tree.len() + 1;
    let mut token_ids = Vec::with_capacity(n);
    let mut position_offsets = Vec::with_capacity(n);
    let mut parent_of = Vec::with_capacity(n);
    let mut children_of = vec![Vec::new(); n];
    let mut mask = BitMatrix::new(n);

    token_ids.push(bonus);
    position_offsets.push(0);
    parent_of.push(None);
    mask.set(0, 0);

    for (i, node) in tree.nodes().iter().enumerate() {
        let idx = i + 1;
        let parent = node.parent.map_or(0, |p| p + 1);
        assert!(parent < idx, "parent must precede child in node order");
        token_ids.push(node.token);
        position_offsets.push(node.depth);
        parent_of.push(Some(parent));
        children_of[parent].push((node.token, idx));
        mask.copy_row(parent, idx);
        mask.set(idx, idx);
    }
    for children in &mut children_of {
        children.sort_unstable();
    }
    FlattenedTree {
        token_ids,
        position_offsets,
        mask,
        parent_of,
        children_of,
    }
}

/// Result of one verifier walk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutcome {
    pub accepted_tokens: Vec<TokenId>,
    /// Flattened indices of the accepted nodes, in depth order.
    pub accepted_indices: Vec<usize>,
    pub acceptance_length: usize,
    /// First target token that did not match a child; carried to the next
    /// round as its root.
    pub next_bonus: TokenId,
    /// Root followed by the accepted path.
    pub keep_indices: Vec<usize>,
    /// The walk stopped because the target chose the end-of-sequence token.
    pub hit_eos: bool,
}

/// Walks the flattened tree from the root. `decode(index)` returns the
/// target's choice after flattened entry `index` (conditioned on the context
/// and the path through `index`); it is called exactly once per visited
/// entry, in walk order.
///
/// The walk stops at the first choice that is not a child of the current
/// entry, or at `eos` regardless of whether it matches a child.
pub fn verifier_walk<F>(flat: &FlattenedTree, mut decode: F, eos: Option<TokenId>) -> RoundOutcome
where
    F: FnMut(usize) -> TokenId,
{
    let mut current = 0;
    let mut accepted_tokens = Vec::new();
    let mut accepted_indices = Vec::new();
    let (next_bonus, hit_eos) = loop {
        let chosen = decode(current);
        if eos == Some(chosen) {
            break (chosen, true);
        }
        match flat.child_with_token(current, chosen) {
            Some(child) => {
                accepted_tokens.push(chosen);
                accepted_indices.push(child);
                current = child;
            }
            None => break (chosen, false),
        }
    };
    let keep_indices = std::iter::once(0)
        .chain(accepted_indices.iter().copied())
        .collect();
    RoundOutcome {
        acceptance_length: accepted_tokens.len(),
        accepted_tokens,
        accepted_indices,
        next_bonus,
        keep_indices,
        hit_eos,
    }
}

/// Which flattened entries survive the round in the cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactionPlan {
    pub keep: Vec<usize>,
    pub evict: Vec<usize>,
}

pub fn compaction_plan(outcome: &RoundOutcome, flat: &FlattenedTree) -> CompactionPlan {
    let keep = outcome.keep_indices.clone();
    let mut kept = vec![false; flat.len()];
    for &k in &keep {
        kept[k] = true;
    }
    let evict = (0..flat.len()).filter(|&i| !kept[i]).collect();
    CompactionPlan { keep, evict }
}

/// Rejects trees where one parent has two children carrying the same token.
pub fn duplicate_child_guard(tree: &DraftTree) -> Result<&DraftTree, VerifyError> {
    let mut seen = std::collections::HashSet::new();
    for node in tree.nodes() {
        if !seen.insert((node.parent, node.token)) {
            return Err(VerifyError::DuplicateChildToken {
                parent: node.parent,
                token: node.token,
            });
        }
    }
    Ok(tree)
}

/// One line of a round trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round_index: usize,
    pub budget: usize,
    pub tree_size: usize,
    pub acceptance_length: usize,
    pub next_bonus: TokenId,
    pub kept_indices: Vec<usize>,
}
