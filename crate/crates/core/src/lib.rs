//! Draft-tree speculative decoding.
//!
//! A block drafter produces one marginal distribution per future position in
//! a single pass. This crate turns those marginals into the draft tree that
//! maximizes expected acceptance length under a node budget, compiles the
//! tree for single-pass verification (depth position ids and an
//! ancestor-only attention mask), walks it under the target's decoding rule,
//! and simulates whole decoding episodes against synthetic n-gram targets.
//!
//! Module map:
//!
//! - [`distributions`]: validated per-position marginals, prefix masses,
//!   sampling from the factorized draft distribution.
//! - [`treebuild`]: best-first top-`B` tree construction and the chain
//!   baseline.
//! - [`oracle`]: brute-force enumeration used to check [`treebuild`].
//! - [`verify`]: flattening, attention mask, verifier walk, compaction plan.
//! - [`models`]: n-gram target, exact marginals, noisy drafter.
//! - [`engine`]: episodes, acceptance statistics, cost model, sweeps.
//! - [`cli`]: the experiment commands behind the `ddtree` binary.
//!
//! ```
//! use ddtree::distributions::validate_block;
//! use ddtree::treebuild::build_tree;
//!
//! let block = validate_block(&[vec![0.6, 0.3, 0.1], vec![0.7, 0.2, 0.1]]).unwrap();
//! let tree = build_tree(&block, 4);
//! assert_eq!(tree.prefixes(), vec![vec![0], vec![0, 0], vec![1], vec![1, 0]]);
//! assert!((tree.surrogate_value() - 1.53).abs() < 1e-12);
//! ```

pub mod cli;
pub mod distributions;
pub mod engine;
pub mod models;
pub mod oracle;
pub mod treebuild;
pub mod verify;

/// Vocabulary index of a token.
pub type TokenId = u32;

pub use distributions::{validate_block, MarginalBlock};
pub use engine::{run_episode, CostModel, EpisodeConfig, EpisodeStats, Mode};
pub use models::{random_model, DrafterConfig, NgramModel};
pub use treebuild::{build_tree, chain_tree, DraftTree};
pub use verify::{flatten, verifier_walk, FlattenedTree, RoundOutcome};
