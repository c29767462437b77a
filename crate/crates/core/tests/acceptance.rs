//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

mod common;

use std::time::{Duration, Instant};

use ddtree::cli::{cmd_oracle_check, OracleCheckArgs, OracleReport};
use ddtree::engine::{
    budget_sweep, run_batch, run_episode, CostModel, EpisodeConfig, EpisodeStats, Mode,
};
use ddtree::models::random_model;
use ddtree::oracle::{expected_acceptance_exact, monte_carlo_acceptance};
use ddtree::verify::flatten;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn property<'a>(report: &'a OracleReport, name: &str) -> &'a ddtree::cli::PropertyCount {
    report.properties.iter().find(|p| p.name == name).unwrap()
}

fn oracle_gate() -> (OracleReport, Duration) {
    let args = OracleCheckArgs {
        max_vocab: 8,
        max_len: 4,
        max_budget: 20,
        trials: 500,
        seed: 2024,
        out: None,
        corrupt_tie_break: false,
    };
    let start = Instant::now();
    let report = cmd_oracle_check(&args).unwrap();
    (report, start.elapsed())
}

fn optimality(report: &OracleReport, elapsed: Duration) -> Outcome {
    let value = property(report, "optimal_value");
    let nodes = property(report, "node_set");
    let pass = value.checked == 500
        && value.failed == 0
        && nodes.checked == 500
        && nodes.failed == 0
        && elapsed < Duration::from_secs(30);
    outcome(
        pass,
        format!(
            "500 instances, value mismatches {}, node-set mismatches {}, {:.2}s",
            value.failed,
            nodes.failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn work_bound(report: &OracleReport) -> Outcome {
    let pops = property(report, "pops_le_budget");
    let pushes = property(report, "pushes_le_2budget");
    let pass =
        pops.checked == 500 && pushes.checked == 500 && pops.failed == 0 && pushes.failed == 0;
    outcome(
        pass,
        format!(
            "pop violations {}, push violations {}",
            pops.failed, pushes.failed
        ),
    )
}

fn acceptance_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    while pairs < 200 {
        let vocab = rng.random_range(2..=10usize);
        let len = rng.random_range(1..=4usize);
        if (vocab as u64).pow(len as u32) > 10_000 {
            continue;
        }
        let block = common::random_block(&mut rng, vocab, len);
        let size = rng.random_range(1..=40);
        let tree = common::random_tree(&mut rng, &block, size);
        let exact = expected_acceptance_exact(&block, &tree).unwrap();
        worst = worst.max(rel_err(exact, tree.surrogate_value()));
        pairs += 1;
    }

    let mut mc_ok = 0;
    let mut worst_sigma: f64 = 0.0;
    let trials = 10;
    for _ in 0..trials {
        let block = common::random_block(&mut rng, 6, 4);
        let tree = common::random_tree(&mut rng, &block, 60);
        let exact = expected_acceptance_exact(&block, &tree).unwrap();
        let (mean, se) = monte_carlo_acceptance(&block, &tree, 100_000, &mut rng);
        let sigmas = (mean - exact).abs() / se;
        worst_sigma = worst_sigma.max(sigmas);
        mc_ok += usize::from(sigmas <= 3.0);
    }
    outcome(
        worst <= 1e-9 && mc_ok == trials,
        format!(
            "200 pairs, worst rel err {worst:.2e}; Monte Carlo {mc_ok}/{trials} within 3 sigma (worst {worst_sigma:.2})"
        ),
    )
}

fn losslessness() -> Outcome {
    let model = random_model(11, 8, 2, 0.3).unwrap();
    let mut mismatches = 0;
    let mut runs = 0;
    for temperature in [0.0, 1.0] {
        for seed in 0..50 {
            let base = EpisodeConfig {
                seed,
                prompt_len: 6,
                max_new_tokens: 128,
                temperature,
                budget: 8,
                block_len: 8,
                mode: Mode::Baseline,
                noise: 0.3,
                eos: None,
            };
            let reference = run_episode(&model, &base).unwrap().tokens;
            for budget in [8, 64] {
                let cfg = EpisodeConfig {
                    budget,
                    mode: Mode::Ddtree,
                    ..base
                };
                runs += 1;
                mismatches += usize::from(run_episode(&model, &cfg).unwrap().tokens != reference);
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{runs} episodes, {mismatches} differ from baseline"),
    )
}

fn mask_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut bad_cells = 0usize;
    let mut largest = 0;
    for _ in 0..100 {
        let block = common::random_block(&mut rng, 16, 16);
        let size = rng.random_range(1..=1024);
        let tree = common::random_tree(&mut rng, &block, size);
        largest = largest.max(tree.len());
        let flat = flatten(&tree, 3);
        let n = tree.len() + 1;
        for i in 0..n {
            let mut expected = vec![false; n];
            expected[0] = true;
            expected[i] = true;
            let mut cursor = i.checked_sub(1).and_then(|node| tree.nodes()[node].parent);
            while let Some(a) = cursor {
                expected[a + 1] = true;
                cursor = tree.nodes()[a].parent;
            }
            bad_cells += (0..n)
                .filter(|&j| flat.mask.get(i, j) != expected[j])
                .count();
        }
    }
    outcome(
        bad_cells == 0,
        format!("100 trees (largest {largest} nodes), {bad_cells} wrong mask cells"),
    )
}

const SWEEP_BUDGETS: [usize; 7] = [16, 32, 64, 128, 256, 512, 1024];

fn sweep_config() -> EpisodeConfig {
    EpisodeConfig {
        seed: 1,
        prompt_len: 8,
        max_new_tokens: 512,
        temperature: 1.0,
        budget: 16,
        block_len: 16,
        mode: Mode::Ddtree,
        noise: 0.3,
        eos: None,
    }
}

struct SweepRun {
    taus: Vec<f64>,
    speedups: Vec<f64>,
    stats: Vec<EpisodeStats>,
    elapsed: Duration,
}

fn run_sweep() -> SweepRun {
    let model = random_model(7, 16, 2, 0.03).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let start = Instant::now();
    let rows = pool
        .install(|| {
            budget_sweep(
                &model,
                &sweep_config(),
                &SWEEP_BUDGETS,
                20,
                &CostModel::default(),
            )
        })
        .unwrap();
    SweepRun {
        taus: rows.iter().map(|r| r.mean_tau).collect(),
        speedups: rows.iter().map(|r| r.est_speedup).collect(),
        stats: rows.into_iter().map(|r| r.stats).collect(),
        elapsed: start.elapsed(),
    }
}

fn argmax(values: &[f64]) -> usize {
    (0..values.len())
        .max_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap()
}

fn sweep_shape(sweep: &SweepRun) -> Outcome {
    let monotone = sweep.taus.windows(2).all(|w| w[1] >= w[0]);
    let best = argmax(&sweep.speedups);
    let interior = best != 0 && best != SWEEP_BUDGETS.len() - 1;
    let taus: Vec<String> = sweep.taus.iter().map(|t| format!("{t:.2}")).collect();
    outcome(
        monotone && interior && sweep.elapsed < Duration::from_secs(300),
        format!(
            "mean_tau [{}], speedup peak at B={} ({:.2}), {:.1}s single-threaded",
            taus.join(", "),
            SWEEP_BUDGETS[best],
            sweep.speedups[best],
            sweep.elapsed.as_secs_f64()
        ),
    )
}

fn fractions(stats: &EpisodeStats) -> (f64, f64) {
    let rounds = stats.rounds as f64;
    let top = *stats.tau_histogram.last().unwrap() as f64 / rounds;
    let low = stats.tau_histogram[..4].iter().sum::<u64>() as f64 / rounds;
    (top, low)
}

fn histogram_shape(sweep: &SweepRun) -> Outcome {
    let best = argmax(&sweep.speedups);
    let model = random_model(7, 16, 2, 0.03).unwrap();
    let chain_cfg = EpisodeConfig {
        mode: Mode::Chain,
        ..sweep_config()
    };
    let chain = run_batch(&model, &chain_cfg, 20, &CostModel::default()).unwrap();
    let (tree_top, tree_low) = fractions(&sweep.stats[best]);
    let (chain_top, chain_low) = fractions(&chain);
    outcome(
        tree_top > chain_top && tree_low < chain_low,
        format!(
            "B={}: top bin {tree_top:.3} vs chain {chain_top:.3}, bins<=4 {tree_low:.3} vs chain {chain_low:.3}",
            SWEEP_BUDGETS[best]
        ),
    )
}

fn perfect_drafter() -> Outcome {
    let model = random_model(5, 16, 2, 0.0).unwrap();
    let mut taus = Vec::new();
    for mode in [Mode::Ddtree, Mode::Chain] {
        let cfg = EpisodeConfig {
            mode,
            noise: 0.0,
            temperature: 0.0,
            budget: 64,
            ..sweep_config()
        };
        taus.push(
            run_batch(&model, &cfg, 5, &CostModel::default())
                .unwrap()
                .mean_tau,
        );
    }
    outcome(
        taus.iter().all(|&t| t == 17.0),
        format!(
            "L=16: ddtree mean_tau {}, chain mean_tau {}",
            taus[0], taus[1]
        ),
    )
}

fn main() {
    let (report, elapsed) = oracle_gate();
    let sweep = run_sweep();
    let results = [
        (
            "1 optimality vs exhaustive oracle",
            optimality(&report, elapsed),
        ),
        ("2 expected acceptance identity", acceptance_identity()),
        ("3 losslessness", losslessness()),
        ("4 mask correctness", mask_correctness()),
        ("5 work bound", work_bound(&report)),
        ("6 budget sweep shape", sweep_shape(&sweep)),
        ("7 acceptance histogram shape", histogram_shape(&sweep)),
        ("8 perfect drafter limit", perfect_drafter()),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "criterion {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
