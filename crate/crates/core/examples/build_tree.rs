//! Builds the optimal draft tree for a small block and prints it.
//!
//! ```text
//! cargo run --example build_tree -- 6
//! ```

use ddtree::distributions::validate_block;
use ddtree::treebuild::{build_tree_traced, chain_tree, TieBreak};

fn main() {
    let budget: usize = std::env::args()
        .nth(1)
        .map_or(4, |s| s.parse().expect("budget"));

    // Three positions over a four-token vocabulary.
    let block = validate_block(&[
        vec![0.55, 0.25, 0.15, 0.05],
        vec![0.70, 0.10, 0.10, 0.10],
        vec![0.40, 0.35, 0.20, 0.05],
    ])
    .unwrap();

    let (tree, trace) = build_tree_traced(&block, budget, TieBreak::Canonical);
    println!(
        "budget {budget}: {} pops, {} pushes",
        trace.pops, trace.pushes
    );
    for (i, node) in tree.nodes().iter().enumerate() {
        println!(
            "  #{i:<2} depth {} prefix {:?} mass {:.4}",
            node.depth,
            tree.prefix(i),
            node.log_mass.exp()
        );
    }
    println!(
        "expected acceptance under the drafter: {:.4}",
        tree.surrogate_value()
    );
    println!(
        "single chain of length 3:              {:.4}",
        chain_tree(&block).surrogate_value()
    );
}
