//! Best-first construction of the optimal draft tree under a node budget.
//!
//! The surrogate objective (expected acceptance length under the factorized
//! draft distribution) is the sum of prefix masses over the tree's nodes, and
//! every prefix has strictly smaller mass than its ancestors. The optimal tree
//! is therefore the `B` highest-mass prefixes. Only the top `K = min(B, |V|)`
//! tokens per depth can appear in it, so prefixes are indexed by per-depth
//! rank tuples and enumerated lazily from a max-heap: popping a tuple pushes
//! its next sibling and its first child.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::distributions::MarginalBlock;
use crate::TokenId;

/// Log scores closer than this (relative to their magnitude, with a floor of
/// 1) are treated as ties and resolved by depth, then by rank tuple.
pub const SCORE_TIE_TOLERANCE: f64 = 1e-12;

/// Allowed drift between the incrementally updated heap score and a direct
/// recomputation of the prefix log-mass.
pub const SCORE_DRIFT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("node {node} at depth {depth} has no parent")]
    MissingParent { node: usize, depth: usize },
    #[error("node {node} is a depth-1 node but has parent {parent}")]
    UnexpectedParent { node: usize, parent: usize },
    #[error("node {node} references parent {parent} that does not precede it")]
    ParentOrder { node: usize, parent: usize },
    #[error("node {node} has depth {depth} but its parent has depth {parent_depth}")]
    DepthMismatch {
        node: usize,
        depth: usize,
        parent_depth: usize,
    },
    #[error("node {node} has log-mass {child} not below its parent's {parent}")]
    AncestorDominance {
        node: usize,
        child: f64,
        parent: f64,
    },
    #[error("tree has {nodes} nodes, over the budget of {budget}")]
    BudgetExceeded { nodes: usize, budget: usize },
}

/// Tokens at one depth sorted by descending probability, ties broken by
/// ascending token id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedDepth {
    pub tokens: Vec<TokenId>,
    pub probs: Vec<f64>,
}

impl RankedDepth {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Full ranking of one row: token ids by descending probability, ascending
/// id among equals.
pub fn rank_tokens(row: &[f64]) -> Vec<TokenId> {
    let mut order: Vec<TokenId> = (0..row.len() as TokenId).collect();
    order.sort_by(|&a, &b| {
        row[b as usize]
            .total_cmp(&row[a as usize])
            .then_with(|| a.cmp(&b))
    });
    order
}

/// The `K = min(budget, |V|)` most probable tokens at every depth.
pub fn top_k_per_depth(block: &MarginalBlock, budget: usize) -> Vec<RankedDepth> {
    let k = budget.max(1).min(block.vocab_size());
    block
        .rows()
        .map(|row| {
            let tokens: Vec<TokenId> = rank_tokens(row).into_iter().take(k).collect();
            let probs = tokens.iter().map(|&t| row[t as usize]).collect();
            RankedDepth { tokens, probs }
        })
        .collect()
}

/// One accepted candidate prefix. `depth` is 1-based; `parent` is `None`
/// for depth-1 nodes, whose parent is the (unbudgeted) root.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub token: TokenId,
    pub depth: usize,
    pub parent: Option<usize>,
    pub log_mass: f64,
}

/// A prefix-closed set of candidate continuations rooted at the bonus token.
///
/// Nodes are stored so that every parent precedes its children. Trees from
/// [`build_tree`] keep pop order, i.e. nonincreasing mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    nodes: Vec<TreeNode>,
    budget: usize,
    surrogate_value: f64,
}

impl DraftTree {
    pub fn empty(budget: usize) -> Self {
        Self {
            nodes: Vec::new(),
            budget,
            surrogate_value: 0.0,
        }
    }

    /// Checks prefix closure, parent ordering, depth consistency, ancestor
    /// dominance and the budget. Duplicate child tokens are not checked here;
    /// see [`crate::verify::duplicate_child_guard`].
    pub fn new(nodes: Vec<TreeNode>, budget: usize) -> Result<Self, TreeError> {
        if nodes.len() > budget {
            return Err(TreeError::BudgetExceeded {
                nodes: nodes.len(),
                budget,
            });
        }
        for (i, node) in nodes.iter().enumerate() {
            match (node.depth, node.parent) {
                (1, None) => {}
                (1, Some(parent)) => return Err(TreeError::UnexpectedParent { node: i, parent }),
                (depth, None) => return Err(TreeError::MissingParent { node: i, depth }),
                (depth, Some(parent)) => {
                    if parent >= i {
                        return Err(TreeError::ParentOrder { node: i, parent });
                    }
                    let p = &nodes[parent];
                    if p.depth + 1 != depth {
                        return Err(TreeError::DepthMismatch {
                            node: i,
                            depth,
                            parent_depth: p.depth,
                        });
                    }
                    if node.log_mass.partial_cmp(&p.log_mass) != Some(Ordering::Less) {
                        return Err(TreeError::AncestorDominance {
                            node: i,
                            child: node.log_mass,
                            parent: p.log_mass,
                        });
                    }
                }
            }
        }
        Ok(Self::from_nodes_unchecked(nodes, budget))
    }

    fn from_nodes_unchecked(nodes: Vec<TreeNode>, budget: usize) -> Self {
        let surrogate_value = nodes.iter().map(|n| n.log_mass.exp()).sum();
        Self {
            nodes,
            budget,
            surrogate_value,
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Number of budgeted nodes in the tree (the root is excluded).
    pub fn budget_used(&self) -> usize {
        self.nodes.len()
    }

    pub fn surrogate_value(&self) -> f64 {
        self.surrogate_value
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Token path from the root to node `index`, inclusive.
    pub fn prefix(&self, index: usize) -> Vec<TokenId> {
        let mut path = Vec::with_capacity(self.nodes[index].depth);
        let mut cur = Some(index);
        while let Some(i) = cur {
            path.push(self.nodes[i].token);
            cur = self.nodes[i].parent;
        }
        path.reverse();
        path
    }

    /// All node prefixes, in node order.
    pub fn prefixes(&self) -> Vec<Vec<TokenId>> {
        (0..self.nodes.len()).map(|i| self.prefix(i)).collect()
    }
}

/// Expected acceptance length of `tree` under the factorized draft
/// distribution: the sum of its nodes' prefix masses.
pub fn surrogate_value(tree: &DraftTree) -> f64 {
    tree.surrogate_value()
}

/// Tie-break rule among equal-scoring candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Shallower depth first, then lexicographically smaller rank tuple.
    #[default]
    Canonical,
    /// Deeper first, then lexicographically larger rank tuple. Still yields a
    /// valid optimal-value tree but a different node set when ties straddle
    /// the budget; exists as a negative control for the oracle checks.
    Reversed,
}

/// Whether score `a` and score `b` are tied under [`SCORE_TIE_TOLERANCE`].
pub fn scores_tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= SCORE_TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// Total order on candidate prefixes: `Ordering::Less` means `a` is taken
/// before `b`.
pub fn candidate_order(
    a_score: f64,
    a_ranks: &[u32],
    b_score: f64,
    b_ranks: &[u32],
    tie_break: TieBreak,
) -> Ordering {
    if !scores_tied(a_score, b_score) {
        return b_score.total_cmp(&a_score);
    }
    let by_shape = a_ranks
        .len()
        .cmp(&b_ranks.len())
        .then_with(|| a_ranks.cmp(b_ranks));
    match tie_break {
        TieBreak::Canonical => by_shape,
        TieBreak::Reversed => by_shape.reverse(),
    }
}

/// A prefix indexed by its 1-based per-depth token ranks, with its log score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTuple {
    pub ranks: Vec<u32>,
    pub score: f64,
}

struct HeapEntry {
    tuple: RankTuple,
    /// Tree index of the parent prefix; `None` at depth 1.
    parent: Option<usize>,
    tie_break: TieBreak,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap pops the greatest element; the candidate taken first
        // must compare greatest.
        candidate_order(
            self.tuple.score,
            &self.tuple.ranks,
            other.tuple.score,
            &other.tuple.ranks,
            self.tie_break,
        )
        .reverse()
    }
}

/// Counters and pop log from one build, for checking the work bound and the
/// pop-order argument.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildTrace {
    pub pops: usize,
    pub pushes: usize,
    pub popped: Vec<RankTuple>,
    /// Largest gap seen between an incremental heap score and the node's
    /// directly accumulated log-mass.
    pub max_score_drift: f64,
}

/// Optimal draft tree for `block` under node budget `budget`.
pub fn build_tree(block: &MarginalBlock, budget: usize) -> DraftTree {
    build_tree_traced(block, budget, TieBreak::Canonical).0
}

/// [`build_tree`] with an explicit tie-break rule, also returning the
/// operation counters.
pub fn build_tree_traced(
    block: &MarginalBlock,
    budget: usize,
    tie_break: TieBreak,
) -> (DraftTree, BuildTrace) {
    let mut trace = BuildTrace::default();
    if budget == 0 {
        return (DraftTree::empty(budget), trace);
    }
    let ranked = top_k_per_depth(block, budget);
    let log_probs: Vec<Vec<f64>> = ranked
        .iter()
        .map(|d| d.probs.iter().map(|p| p.ln()).collect())
        .collect();
    let k = ranked[0].len();
    let depth_limit = block.block_len();

    let mut heap = BinaryHeap::with_capacity(2 * budget + 1);
    heap.push(HeapEntry {
        tuple: RankTuple {
            ranks: vec![1],
            score: log_probs[0][0],
        },
        parent: None,
        tie_break,
    });
    trace.pushes += 1;

    let mut nodes: Vec<TreeNode> = Vec::with_capacity(budget);
    while nodes.len() < budget {
        let Some(entry) = heap.pop() else { break };
        trace.pops += 1;
        let RankTuple { ranks, score } = entry.tuple;
        let depth = ranks.len();
        let rank = ranks[depth - 1] as usize;
        let token = ranked[depth - 1].tokens[rank - 1];
        let parent_log_mass = entry.parent.map_or(0.0, |p| nodes[p].log_mass);
        let log_mass = parent_log_mass + log_probs[depth - 1][rank - 1];
        trace.max_score_drift = trace.max_score_drift.max((score - log_mass).abs());
        debug_assert!((score - log_mass).abs() <= SCORE_DRIFT_TOLERANCE);

        let index = nodes.len();
        nodes.push(TreeNode {
            token,
            depth,
            parent: entry.parent,
            log_mass,
        });
        if nodes.len() == budget {
            // Successors of the last node can never be popped.
            trace.popped.push(RankTuple { ranks, score });
            break;
        }

        if rank < k {
            let mut sibling = ranks.clone();
            sibling[depth - 1] += 1;
            let sibling_score = score - log_probs[depth - 1][rank - 1] + log_probs[depth - 1][rank];
            heap.push(HeapEntry {
                tuple: RankTuple {
                    ranks: sibling,
                    score: sibling_score,
                },
                parent: entry.parent,
                tie_break,
            });
            trace.pushes += 1;
        }
        if depth < depth_limit {
            let mut child = ranks.clone();
            child.push(1);
            heap.push(HeapEntry {
                tuple: RankTuple {
                    ranks: child,
                    score: score + log_probs[depth][0],
                },
                parent: Some(index),
                tie_break,
            });
            trace.pushes += 1;
        }
        trace.popped.push(RankTuple { ranks, score });
    }
    (DraftTree::from_nodes_unchecked(nodes, budget), trace)
}

/// Single-path baseline: the rank-1 token at every depth.
pub fn chain_tree(block: &MarginalBlock) -> DraftTree {
    let mut nodes = Vec::with_capacity(block.block_len());
    let mut log_mass = 0.0;
    for (i, row) in block.rows().enumerate() {
        let token = rank_tokens(row)[0];
        log_mass += row[token as usize].ln();
        nodes.push(TreeNode {
            token,
            depth: i + 1,
            parent: i.checked_sub(1),
            log_mass,
        });
    }
    DraftTree::from_nodes_unchecked(nodes, block.block_len())
}
