#![allow(dead_code)]

use std::collections::HashSet;

use ddtree::distributions::{validate_block, MarginalBlock};
use ddtree::treebuild::{DraftTree, TreeNode};
use ddtree::TokenId;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

/// Block of `len` Dirichlet(1) rows over `vocab` tokens.
pub fn random_block<R: Rng>(rng: &mut R, vocab: usize, len: usize) -> MarginalBlock {
    let gamma = Gamma::new(1.0, 1.0).unwrap();
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|_| (0..vocab).map(|_| gamma.sample(rng) + 1e-9).collect())
        .collect();
    validate_block(&rows).unwrap()
}

/// Random prefix-closed tree of up to `size` nodes over `block`, grown by
/// attaching fresh children to uniformly chosen nodes (or the root).
pub fn random_tree<R: Rng>(rng: &mut R, block: &MarginalBlock, size: usize) -> DraftTree {
    let vocab = block.vocab_size();
    let len = block.block_len();
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut used: HashSet<(Option<usize>, TokenId)> = HashSet::new();
    let mut child_count: Vec<usize> = Vec::new();
    let mut root_children = 0;
    let mut attempts = 0;
    while nodes.len() < size && attempts < 50 * size + 100 {
        attempts += 1;
        let pick = rng.random_range(0..=nodes.len());
        let parent = (pick < nodes.len()).then_some(pick);
        let (depth, count) = match parent {
            None => (1, root_children),
            Some(p) => (nodes[p].depth + 1, child_count[p]),
        };
        if depth > len || count >= vocab {
            continue;
        }
        let token = rng.random_range(0..vocab) as TokenId;
        if !used.insert((parent, token)) {
            continue;
        }
        let base = parent.map_or(0.0, |p| nodes[p].log_mass);
        nodes.push(TreeNode {
            token,
            depth,
            parent,
            log_mass: base + block.prob(depth - 1, token).ln(),
        });
        child_count.push(0);
        match parent {
            None => root_children += 1,
            Some(p) => child_count[p] += 1,
        }
    }
    let budget = nodes.len();
    DraftTree::new(nodes, budget).unwrap()
}
