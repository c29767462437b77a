//! Mean acceptance length and modelled speedup as the node budget grows,
//! next to single-chain drafting.

use ddtree::engine::{budget_sweep, run_batch, CostModel, EpisodeConfig, Mode};
use ddtree::models::random_model;

fn main() {
    let model = random_model(7, 16, 2, 0.03).unwrap();
    let cost = CostModel::default();
    let base = EpisodeConfig {
        seed: 1,
        max_new_tokens: 512,
        temperature: 1.0,
        ..EpisodeConfig::default()
    };
    let budgets = [16, 32, 64, 128, 256, 512, 1024];
    let rows = budget_sweep(&model, &base, &budgets, 20, &cost).unwrap();
    let chain = run_batch(
        &model,
        &EpisodeConfig {
            mode: Mode::Chain,
            ..base
        },
        20,
        &cost,
    )
    .unwrap();

    println!("{:>6} {:>8} {:>8}", "budget", "tau", "speedup");
    for row in &rows {
        println!(
            "{:>6} {:>8.3} {:>8.3}",
            row.budget, row.mean_tau, row.est_speedup
        );
    }
    println!(
        "{:>6} {:>8.3} {:>8.3}",
        "chain", chain.mean_tau, chain.est_speedup
    );
}
