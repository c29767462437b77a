//! Speculative decoding never changes the output: tree drafting, chain
//! drafting and plain decoding commit the same tokens, greedy or sampled.

use ddtree::engine::{run_episode, EpisodeConfig, Mode};
use ddtree::models::random_model;

fn main() {
    let model = random_model(3, 8, 2, 0.5).unwrap();
    for temperature in [0.0, 1.0] {
        let base = EpisodeConfig {
            seed: 42,
            max_new_tokens: 48,
            temperature,
            block_len: 8,
            budget: 32,
            ..EpisodeConfig::default()
        };
        let mut outputs = Vec::new();
        for mode in [Mode::Baseline, Mode::Chain, Mode::Ddtree] {
            let run = run_episode(&model, &EpisodeConfig { mode, ..base }).unwrap();
            println!(
                "T={temperature} {mode:<8} rounds {:>3}  {:?}",
                run.stats.rounds,
                &run.tokens[..16]
            );
            outputs.push(run.tokens);
        }
        assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    }
    println!("all modes agree");
}
