//! Command-line front end: oracle checks, budget sweeps, histogram export and
//! round traces.
//!
//! Every output file starts with a `# `-prefixed JSON [`RunManifest`] line.
//! Exit codes: 0 on success, 1 when a checked property fails, 2 on bad flags
//! or an unwritable output path.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;
use thiserror::Error;

use crate::distributions::{validate_block, MarginalBlock};
use crate::engine::{
    budget_sweep, run_batch, run_episode_with, CostModel, EngineError, EpisodeConfig, EpisodeStats,
    Mode,
};
use crate::models::{random_model, ModelError, NgramModel};
use crate::oracle::{
    best_value_all_subsets, enumerate_prefixes_with, expected_acceptance_exact, restricted_optimum,
    MAX_ENUMERATION, MAX_SUBSET_PREFIXES,
};
use crate::treebuild::{build_tree_traced, DraftTree, TieBreak, SCORE_TIE_TOLERANCE};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "DDTREE_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        EXIT_USAGE
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ddtree",
    version,
    about = "Optimal draft trees for speculative decoding on synthetic targets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare the tree builder against brute-force oracles on random instances.
    OracleCheck(OracleCheckArgs),
    /// Mean acceptance length and modelled speedup across node budgets.
    Sweep(SweepArgs),
    /// Per-round acceptance length counts for ddtree and chain drafting.
    Histogram(HistogramArgs),
    /// Line-delimited JSON record of each decoding round.
    Trace(TraceArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OracleCheckArgs {
    #[arg(long, default_value_t = 8)]
    pub max_vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub max_len: usize,
    #[arg(long, default_value_t = 20)]
    pub max_budget: usize,
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional copy of the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Build with the reversed tie-break (negative control; must fail).
    #[arg(long, hide = true)]
    pub corrupt_tie_break: bool,
}

/// Synthetic target model flags.
#[derive(Debug, Clone, Copy, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 7)]
    pub model_seed: u64,
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Dirichlet concentration of target rows; 0 gives a deterministic
    /// target, `inf` a uniform one.
    #[arg(long, default_value_t = 0.03)]
    pub concentration: f64,
}

impl ModelArgs {
    fn build(&self) -> Result<NgramModel, CliError> {
        Ok(random_model(
            self.model_seed,
            self.vocab,
            self.order,
            self.concentration,
        )?)
    }
}

/// Decoding loop flags shared by sweep and histogram.
#[derive(Debug, Clone, Copy, Args, Serialize)]
pub struct DecodeArgs {
    /// Episode seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Drafter noise.
    #[arg(long, default_value_t = 0.3)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 16)]
    pub block_len: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    #[arg(long, default_value_t = 512)]
    pub max_new_tokens: usize,
}

impl DecodeArgs {
    fn config(&self, mode: Mode, budget: usize) -> EpisodeConfig {
        EpisodeConfig {
            seed: self.seed,
            prompt_len: self.prompt_len,
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            budget,
            block_len: self.block_len,
            mode,
            noise: self.epsilon,
            eos: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Args, Serialize)]
pub struct CostArgs {
    #[arg(long, default_value_t = 1.0)]
    pub t_target: f64,
    #[arg(long, default_value_t = 0.1)]
    pub t_draft: f64,
    #[arg(long, default_value_t = 1.0)]
    pub t_verify_base: f64,
    #[arg(long, default_value_t = 0.002)]
    pub kappa: f64,
}

impl CostArgs {
    fn cost(&self) -> Result<CostModel, CliError> {
        let cost = CostModel {
            t_target: self.t_target,
            t_draft: self.t_draft,
            t_verify_base: self.t_verify_base,
            kappa: self.kappa,
        };
        cost.validate()?;
        Ok(cost)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Comma-separated node budgets.
    #[arg(long, default_value = "16,32,64,128,256,512,1024")]
    pub budgets: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HistogramArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub cost: CostArgs,
    #[arg(long, default_value_t = 64)]
    pub budget: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TraceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 16)]
    pub block_len: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 64)]
    pub budget: usize,
    #[arg(long, default_value_t = 8)]
    pub rounds: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Header written as the first line of every output file.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub subcommand: &'a str,
    pub config: &'a C,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub tool_version: &'a str,
}

impl<C: Serialize> RunManifest<'_, C> {
    /// `# ` followed by the manifest as one line of JSON.
    pub fn header_line(&self) -> String {
        let json = serde_json::to_string(self).expect("manifest serializes");
        format!("# {json}\n")
    }
}

fn manifest<'a, C: Serialize>(
    subcommand: &'a str,
    config: &'a C,
    seed: u64,
    out: &Path,
) -> RunManifest<'a, C> {
    RunManifest {
        subcommand,
        config,
        seed,
        outputs: vec![out.display().to_string()],
        tool_version: env!("CARGO_PKG_VERSION"),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a comma-separated list of positive budgets.
pub fn parse_budgets(list: &str) -> Result<Vec<usize>, CliError> {
    list.split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(b) if b > 0 => Ok(b),
            _ => Err(CliError::Usage(format!("invalid budget {s:?}"))),
        })
        .collect()
}

/// Thread count from [`THREADS_ENV`], or the available parallelism.
pub fn thread_count() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be an integer >= 1, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command inside a rayon pool sized by [`thread_count`].
pub fn run(cli: Cli) -> Result<i32, CliError> {
    let threads = thread_count()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::OracleCheck(args) => {
            let report = cmd_oracle_check(&args)?;
            print!("{}", report.render());
            if let Some(out) = &args.out {
                let m = manifest("oracle-check", &args, args.seed, out);
                write_file(out, &(m.header_line() + &report.render()))?;
            }
            Ok(if report.passed() {
                EXIT_OK
            } else {
                EXIT_PROPERTY_FAILURE
            })
        }
        Command::Sweep(args) => {
            let body = cmd_sweep(&args)?;
            let m = manifest("sweep", &args, args.decode.seed, &args.out);
            write_file(&args.out, &(m.header_line() + &body))?;
            Ok(EXIT_OK)
        }
        Command::Histogram(args) => {
            let body = cmd_histogram(&args)?;
            let m = manifest("histogram", &args, args.decode.seed, &args.out);
            write_file(&args.out, &(m.header_line() + &body))?;
            Ok(EXIT_OK)
        }
        Command::Trace(args) => {
            let body = cmd_trace(&args)?;
            let m = manifest("trace", &args, args.seed, &args.out);
            write_file(&args.out, &(m.header_line() + &body))?;
            Ok(EXIT_OK)
        }
    })
}

/// Pass/fail counts for one checked property.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyCount {
    pub name: &'static str,
    pub checked: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleReport {
    pub trials: usize,
    pub properties: Vec<PropertyCount>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.failed == 0)
    }

    pub fn failures(&self) -> usize {
        self.properties.iter().map(|p| p.failed).sum()
    }

    pub fn render(&self) -> String {
        let mut s = format!("trials {}\n", self.trials);
        for p in &self.properties {
            let _ = writeln!(
                s,
                "{:<20} checked {:>6} failed {:>6}",
                p.name, p.checked, p.failed
            );
        }
        let _ = writeln!(s, "{}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

const PROPERTY_NAMES: [&str; 9] = [
    "optimal_value",
    "node_set",
    "pops_le_budget",
    "pushes_le_2budget",
    "prefix_closure",
    "pop_monotone",
    "restricted_optimum",
    "acceptance_identity",
    "all_subsets",
];

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Random block for the oracle check: even trials draw Dirichlet rows, odd
/// trials draw small integer weights so that ties are common.
pub fn random_instance_block<R: Rng + ?Sized>(
    rng: &mut R,
    vocab: usize,
    len: usize,
    quantized: bool,
) -> MarginalBlock {
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|_| {
            (0..vocab)
                .map(|_| {
                    if quantized {
                        rng.random_range(1..=3) as f64
                    } else {
                        gamma.sample(rng) + 1e-9
                    }
                })
                .collect()
        })
        .collect();
    validate_block(&rows).expect("positive weights form a valid block")
}

/// Checks the tree builder against the exhaustive oracles on `trials` random
/// instances.
pub fn cmd_oracle_check(args: &OracleCheckArgs) -> Result<OracleReport, CliError> {
    if args.max_vocab < 2 || args.max_len < 1 || args.max_budget < 1 {
        return Err(CliError::Usage(
            "need max-vocab >= 2, max-len >= 1, max-budget >= 1".into(),
        ));
    }
    let needed = (args.max_vocab as u64).checked_pow(args.max_len as u32);
    if needed.is_none_or(|n| n > MAX_ENUMERATION) {
        return Err(CliError::Usage(format!(
            "max-vocab^max-len exceeds the enumeration limit {MAX_ENUMERATION}"
        )));
    }
    let tie_break = if args.corrupt_tie_break {
        TieBreak::Reversed
    } else {
        TieBreak::Canonical
    };
    let mut counts: Vec<PropertyCount> = PROPERTY_NAMES
        .iter()
        .map(|&name| PropertyCount {
            name,
            checked: 0,
            failed: 0,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for trial in 0..args.trials {
        let vocab = rng.random_range(2..=args.max_vocab);
        let len = rng.random_range(1..=args.max_len);
        let budget = rng.random_range(1..=args.max_budget);
        let block = random_instance_block(&mut rng, vocab, len, trial % 2 == 1);
        let outcome = check_instance(&block, budget, tie_break);
        for (count, result) in counts.iter_mut().zip(outcome) {
            if let Some(ok) = result {
                count.checked += 1;
                count.failed += usize::from(!ok);
            }
        }
    }
    Ok(OracleReport {
        trials: args.trials,
        properties: counts,
    })
}

/// Outcome of each property in [`PROPERTY_NAMES`] order; `None` when the
/// property does not apply to this instance.
fn check_instance(block: &MarginalBlock, budget: usize, tie_break: TieBreak) -> [Option<bool>; 9] {
    let (tree, trace) = build_tree_traced(block, budget, tie_break);
    let table = enumerate_prefixes_with(block, TieBreak::Canonical).expect("within guard");
    let take = budget.min(table.len());
    let oracle_value: f64 = table.entries[..take].iter().map(|e| e.mass).sum();
    let built: std::collections::BTreeSet<Vec<u32>> = tree.prefixes().into_iter().collect();
    let expected: std::collections::BTreeSet<Vec<u32>> = table.entries[..take]
        .iter()
        .map(|e| e.prefix.clone())
        .collect();
    let value = tree.surrogate_value();

    let closure = DraftTree::new(tree.nodes().to_vec(), budget).is_ok();
    let monotone = trace
        .popped
        .windows(2)
        .all(|w| w[1].score <= w[0].score + SCORE_TIE_TOLERANCE * w[0].score.abs().max(1.0));
    let restricted = restricted_optimum(block, budget)
        .map(|t| rel_close(t.surrogate_value(), oracle_value, 1e-12))
        .unwrap_or(false);
    let identity = expected_acceptance_exact(block, &tree)
        .map(|e| rel_close(e, value, 1e-9))
        .unwrap_or(false);
    let subsets = (table.len() <= MAX_SUBSET_PREFIXES).then(|| {
        best_value_all_subsets(block, budget)
            .map(|best| rel_close(best, value, 1e-12))
            .unwrap_or(false)
    });

    [
        Some(rel_close(value, oracle_value, 1e-12)),
        Some(built == expected),
        Some(trace.pops <= budget),
        Some(trace.pushes <= 2 * budget),
        Some(closure),
        Some(monotone),
        Some(restricted),
        Some(identity),
        subsets,
    ]
}

fn validate_decode(decode: &DecodeArgs) -> Result<(), CliError> {
    if decode.episodes == 0 {
        return Err(CliError::Usage("episodes must be >= 1".into()));
    }
    Ok(())
}

/// Budget sweep as CSV (without the manifest line): one ddtree row per
/// budget, then one chain row (budget column = block length) and one
/// baseline row (budget column = 0).
pub fn cmd_sweep(args: &SweepArgs) -> Result<String, CliError> {
    validate_decode(&args.decode)?;
    let budgets = parse_budgets(&args.budgets)?;
    let model = args.model.build()?;
    let cost = args.cost.cost()?;
    let d = &args.decode;
    let base = d.config(Mode::Ddtree, budgets[0]);
    let mut rows: Vec<(usize, Mode, EpisodeStats)> =
        budget_sweep(&model, &base, &budgets, d.episodes, &cost)?
            .into_iter()
            .map(|r| (r.budget, r.mode, r.stats))
            .collect();
    for (mode, budget) in [(Mode::Chain, d.block_len), (Mode::Baseline, 0)] {
        let stats = run_batch(&model, &d.config(mode, budget), d.episodes, &cost)?;
        rows.push((budget, mode, stats));
    }
    let mut out = String::from(
        "budget,mode,temperature,epsilon,episodes,rounds,committed_tokens,mean_tau,est_speedup\n",
    );
    for (budget, mode, s) in rows {
        let _ = writeln!(
            out,
            "{budget},{mode},{},{},{},{},{},{},{}",
            d.temperature,
            d.epsilon,
            d.episodes,
            s.rounds,
            s.committed_tokens,
            s.mean_tau,
            s.est_speedup
        );
    }
    Ok(out)
}

/// Pooled ddtree and chain histograms for the same episodes.
pub fn histogram_stats(args: &HistogramArgs) -> Result<(EpisodeStats, EpisodeStats), CliError> {
    validate_decode(&args.decode)?;
    let model = args.model.build()?;
    let cost = args.cost.cost()?;
    let d = &args.decode;
    let tree = run_batch(
        &model,
        &d.config(Mode::Ddtree, args.budget),
        d.episodes,
        &cost,
    )?;
    let chain = run_batch(
        &model,
        &d.config(Mode::Chain, d.block_len),
        d.episodes,
        &cost,
    )?;
    Ok((tree, chain))
}

/// Histogram CSV (without the manifest line): `bin,ddtree_count,chain_count`
/// for bins `1..=L+1`.
pub fn cmd_histogram(args: &HistogramArgs) -> Result<String, CliError> {
    let (tree, chain) = histogram_stats(args)?;
    let mut out = String::from("bin,ddtree_count,chain_count\n");
    for (k, (t, c)) in tree
        .tau_histogram
        .iter()
        .zip(&chain.tau_histogram)
        .enumerate()
    {
        let _ = writeln!(out, "{},{t},{c}", k + 1);
    }
    Ok(out)
}

/// Trace lines (without the manifest line) for the first `rounds` rounds of
/// one ddtree episode.
pub fn cmd_trace(args: &TraceArgs) -> Result<String, CliError> {
    let model = args.model.build()?;
    if args.rounds == 0 {
        return Ok(String::new());
    }
    let cfg = EpisodeConfig {
        seed: args.seed,
        prompt_len: args.prompt_len,
        // Every round commits at most L+1 tokens, so this always yields at
        // least `rounds` rounds.
        max_new_tokens: args.rounds * (args.block_len + 1),
        temperature: args.temperature,
        budget: args.budget,
        block_len: args.block_len,
        mode: Mode::Ddtree,
        noise: args.epsilon,
        eos: None,
    };
    let result = run_episode_with(&model, &cfg, &CostModel::default(), true)?;
    let mut out = String::new();
    for record in result.trace.iter().take(args.rounds) {
        out.push_str(&serde_json::to_string(record).expect("trace record serializes"));
        out.push('\n');
    }
    Ok(out)
}
