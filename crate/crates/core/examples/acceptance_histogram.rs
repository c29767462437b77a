//! Distribution of tokens committed per round, tree versus chain.

use ddtree::engine::{run_batch, CostModel, EpisodeConfig, Mode};
use ddtree::models::random_model;

fn main() {
    let budget = std::env::args()
        .nth(1)
        .map_or(64, |s| s.parse().expect("budget"));
    let model = random_model(7, 16, 2, 0.03).unwrap();
    let cfg = EpisodeConfig {
        seed: 1,
        max_new_tokens: 512,
        temperature: 1.0,
        budget,
        ..EpisodeConfig::default()
    };
    let cost = CostModel::default();
    let tree = run_batch(&model, &cfg, 20, &cost).unwrap();
    let chain = run_batch(
        &model,
        &EpisodeConfig {
            mode: Mode::Chain,
            ..cfg
        },
        20,
        &cost,
    )
    .unwrap();

    let bar = |count: u64, rounds: u64| "#".repeat((60 * count / rounds.max(1)) as usize);
    for (k, (t, c)) in tree
        .tau_histogram
        .iter()
        .zip(&chain.tau_histogram)
        .enumerate()
    {
        println!("{:>2} tree  {}", k + 1, bar(*t, tree.rounds));
        println!("   chain {}", bar(*c, chain.rounds));
    }
    println!(
        "mean tau: tree {:.2}, chain {:.2}",
        tree.mean_tau, chain.mean_tau
    );
}
