//! Brute-force ground truth for small instances.
//!
//! Everything here enumerates explicitly: every prefix up to length `L`,
//! every continuation in `V^L`, every prefix-closed subset. None of it calls
//! into [`crate::treebuild::build_tree`], so it can be used to check it.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use thiserror::Error;

use crate::distributions::MarginalBlock;
use crate::treebuild::{candidate_order, rank_tokens, DraftTree, TieBreak, TreeError, TreeNode};
use crate::TokenId;

/// Largest number of prefixes (or continuations) an oracle will enumerate.
pub const MAX_ENUMERATION: u64 = 1_000_000;

/// Largest prefix count for the all-subsets search (`2^12` subsets).
pub const MAX_SUBSET_PREFIXES: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("instance needs {needed} enumerated items, limit is {limit}")]
    InstanceTooLarge { needed: u64, limit: u64 },
    #[error("top-ranked prefixes are not prefix-closed at entry {entry}")]
    NotPrefixClosed { entry: usize },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

fn pow_sum(base: u64, max_exp: usize) -> u64 {
    let mut total: u64 = 0;
    let mut term: u64 = 1;
    for _ in 0..max_exp {
        term = term.saturating_mul(base);
        total = total.saturating_add(term);
    }
    total
}

fn guard(needed: u64, limit: u64) -> Result<(), OracleError> {
    if needed > limit {
        Err(OracleError::InstanceTooLarge { needed, limit })
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub prefix: Vec<TokenId>,
    /// 1-based per-depth ranks over the full vocabulary.
    pub ranks: Vec<u32>,
    pub log_mass: f64,
    pub mass: f64,
}

/// Every nonempty prefix of length at most `L` with its exact mass, sorted by
/// the same total order the tree builder uses.
#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveTable {
    pub entries: Vec<TableEntry>,
    pub vocab_size: usize,
    pub block_len: usize,
}

impl ExhaustiveTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn enumerate_prefixes(block: &MarginalBlock) -> Result<ExhaustiveTable, OracleError> {
    enumerate_prefixes_with(block, TieBreak::Canonical)
}

pub fn enumerate_prefixes_with(
    block: &MarginalBlock,
    tie_break: TieBreak,
) -> Result<ExhaustiveTable, OracleError> {
    let vocab = block.vocab_size();
    let len = block.block_len();
    guard(pow_sum(vocab as u64, len), MAX_ENUMERATION)?;

    let rankings: Vec<Vec<TokenId>> = block.rows().map(rank_tokens).collect();
    let mut entries = Vec::new();
    // Breadth-first over rank tuples; each level extends the previous one.
    let mut level: Vec<Vec<u32>> = vec![Vec::new()];
    for depth in 0..len {
        let mut next = Vec::with_capacity(level.len() * vocab);
        for ranks in &level {
            for r in 1..=vocab as u32 {
                let mut extended = ranks.clone();
                extended.push(r);
                next.push(extended);
            }
        }
        for ranks in &next {
            let prefix: Vec<TokenId> = ranks
                .iter()
                .enumerate()
                .map(|(i, &r)| rankings[i][r as usize - 1])
                .collect();
            let log_mass = block.log_prefix_mass(&prefix).expect("prefix within block");
            let mass = block.prefix_mass(&prefix).expect("prefix within block");
            entries.push(TableEntry {
                prefix,
                ranks: ranks.clone(),
                log_mass,
                mass,
            });
        }
        debug_assert_eq!(next[0].len(), depth + 1);
        level = next;
    }
    entries.sort_by(|a, b| candidate_order(a.log_mass, &a.ranks, b.log_mass, &b.ranks, tie_break));
    Ok(ExhaustiveTable {
        entries,
        vocab_size: vocab,
        block_len: len,
    })
}

fn tree_from_entries<'a>(
    entries: impl Iterator<Item = &'a TableEntry>,
    budget: usize,
) -> Result<DraftTree, OracleError> {
    let mut index_of: HashMap<&[TokenId], usize> = HashMap::new();
    let mut nodes = Vec::new();
    for (i, entry) in entries.enumerate() {
        let depth = entry.prefix.len();
        let parent = if depth == 1 {
            None
        } else {
            Some(
                *index_of
                    .get(&entry.prefix[..depth - 1])
                    .ok_or(OracleError::NotPrefixClosed { entry: i })?,
            )
        };
        index_of.insert(&entry.prefix, i);
        nodes.push(TreeNode {
            token: entry.prefix[depth - 1],
            depth,
            parent,
            log_mass: entry.log_mass,
        });
    }
    Ok(DraftTree::new(nodes, budget)?)
}

/// The first `budget` table entries as a tree. Errors if they are not
/// prefix-closed, which ancestor dominance rules out.
pub fn optimal_tree_exhaustive(
    block: &MarginalBlock,
    budget: usize,
) -> Result<DraftTree, OracleError> {
    let table = enumerate_prefixes(block)?;
    tree_from_entries(table.entries.iter().take(budget), budget)
}

/// Optimum when only the top `K = min(budget, |V|)` tokens per depth may be
/// used.
pub fn restricted_optimum(block: &MarginalBlock, budget: usize) -> Result<DraftTree, OracleError> {
    let k = budget.min(block.vocab_size()) as u32;
    let table = enumerate_prefixes(block)?;
    tree_from_entries(
        table
            .entries
            .iter()
            .filter(|e| e.ranks.iter().all(|&r| r <= k))
            .take(budget),
        budget,
    )
}

/// Longest prefix of `continuation` that is a node of `tree`, found by
/// membership tests against the tree's prefix set.
pub fn acceptance_length(prefixes: &HashSet<Vec<TokenId>>, continuation: &[TokenId]) -> usize {
    (1..=continuation.len())
        .take_while(|&d| prefixes.contains(&continuation[..d]))
        .last()
        .unwrap_or(0)
}

/// Expected acceptance length of `tree` under the factorized distribution,
/// by summing `Q(y) * alpha(y)` over every continuation `y` in `V^L`.
pub fn expected_acceptance_exact(
    block: &MarginalBlock,
    tree: &DraftTree,
) -> Result<f64, OracleError> {
    let vocab = block.vocab_size();
    let len = block.block_len();
    let count = (vocab as u64).checked_pow(len as u32).unwrap_or(u64::MAX);
    guard(count, MAX_ENUMERATION)?;

    let prefixes: HashSet<Vec<TokenId>> = tree.prefixes().into_iter().collect();
    let mut y: Vec<TokenId> = vec![0; len];
    let mut total = 0.0;
    for _ in 0..count {
        let q: f64 = y
            .iter()
            .enumerate()
            .map(|(i, &t)| block.prob(i, t))
            .product();
        total += q * acceptance_length(&prefixes, &y) as f64;
        // Odometer increment, last position fastest.
        for pos in (0..len).rev() {
            y[pos] += 1;
            if (y[pos] as usize) < vocab {
                break;
            }
            y[pos] = 0;
        }
    }
    Ok(total)
}

/// Monte Carlo estimate of the expected acceptance length with its standard
/// error.
pub fn monte_carlo_acceptance<R: Rng + ?Sized>(
    block: &MarginalBlock,
    tree: &DraftTree,
    samples: usize,
    rng: &mut R,
) -> (f64, f64) {
    let prefixes: HashSet<Vec<TokenId>> = tree.prefixes().into_iter().collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let a = acceptance_length(&prefixes, &block.sample_continuation(rng)) as f64;
        sum += a;
        sum_sq += a * a;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Best surrogate value over every prefix-closed set of at most `budget`
/// prefixes, by trying all subsets. Limited to [`MAX_SUBSET_PREFIXES`].
pub fn best_value_all_subsets(block: &MarginalBlock, budget: usize) -> Result<f64, OracleError> {
    let table = enumerate_prefixes(block)?;
    let n = table.len();
    guard(n as u64, MAX_SUBSET_PREFIXES as u64)?;

    let position: HashMap<&[TokenId], usize> = table
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.prefix.as_slice(), i))
        .collect();
    let parent_bit: Vec<Option<usize>> = table
        .entries
        .iter()
        .map(|e| {
            let d = e.prefix.len();
            (d > 1).then(|| position[&e.prefix[..d - 1]])
        })
        .collect();

    let mut best = 0.0f64;
    for subset in 0u32..(1u32 << n) {
        if subset.count_ones() as usize > budget {
            continue;
        }
        let closed = (0..n)
            .filter(|&i| subset & (1 << i) != 0)
            .all(|i| parent_bit[i].is_none_or(|p| subset & (1 << p) != 0));
        if !closed {
            continue;
        }
        let value: f64 = (0..n)
            .filter(|&i| subset & (1 << i) != 0)
            .map(|i| table.entries[i].mass)
            .sum();
        best = best.max(value);
    }
    Ok(best)
}
