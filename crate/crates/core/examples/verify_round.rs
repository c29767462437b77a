//! One verification round: flatten a tree, print its attention mask, walk it
//! against a fixed target continuation and show what stays in the cache.

use ddtree::distributions::validate_block;
use ddtree::treebuild::build_tree;
use ddtree::verify::{compaction_plan, flatten, verifier_walk};
use ddtree::TokenId;

fn main() {
    let block = validate_block(&[
        vec![0.5, 0.3, 0.2],
        vec![0.6, 0.3, 0.1],
        vec![0.5, 0.4, 0.1],
    ])
    .unwrap();
    let tree = build_tree(&block, 7);
    let bonus: TokenId = 2;
    let flat = flatten(&tree, bonus);

    println!("idx token depth  mask");
    for i in 0..flat.len() {
        let row: String = (0..flat.len())
            .map(|j| if flat.mask.get(i, j) { '1' } else { '.' })
            .collect();
        println!(
            "{i:>3} {:>5} {:>5}  {row}",
            flat.token_ids[i], flat.position_offsets[i]
        );
    }

    // What the target would pick after each depth.
    let target: [TokenId; 4] = [0, 1, 2, 0];
    let outcome = verifier_walk(&flat, |idx| target[flat.position_offsets[idx]], None);
    let plan = compaction_plan(&outcome, &flat);
    println!(
        "accepted {:?} (alpha = {}), next bonus {}",
        outcome.accepted_tokens, outcome.acceptance_length, outcome.next_bonus
    );
    println!("keep {:?}, evict {:?}", plan.keep, plan.evict);
}
