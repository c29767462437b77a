//! Checks the heap builder against brute-force enumeration on random
//! instances and prints the per-property counts.
//!
//! ```text
//! cargo run --release --example oracle_check -- 2000
//! ```

use ddtree::cli::{cmd_oracle_check, OracleCheckArgs};

fn main() {
    let trials = std::env::args()
        .nth(1)
        .map_or(500, |s| s.parse().expect("trials"));
    let report = cmd_oracle_check(&OracleCheckArgs {
        max_vocab: 8,
        max_len: 4,
        max_budget: 20,
        trials,
        seed: 0,
        out: None,
        corrupt_tie_break: false,
    })
    .unwrap();
    print!("{}", report.render());
    std::process::exit(if report.passed() { 0 } else { 1 });
}
