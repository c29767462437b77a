//! Round-by-round speculative decoding episodes over a synthetic target.
//!
//! Each round starts from a bonus token already chosen by the target, runs
//! the drafter once, builds a tree (or a chain), verifies it with one walk
//! and carries the first unmatched target token into the next round. The
//! round commits the bonus plus the accepted drafted tokens, so `tau`, the
//! committed count per round, lies in `1..=L+1`.
//!
//! Under sampling, the target's choice for absolute output position `p`
//! always uses [`PositionStream::uniform`]`(p)`. Speculative and plain
//! decoding therefore commit identical sequences for the same seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{
    drafter_marginals, Decoding, DrafterConfig, ModelError, NgramModel, PositionStream,
};
use crate::treebuild::{build_tree, chain_tree, DraftTree};
use crate::verify::{flatten, verifier_walk, RoundOutcome, TraceRecord};
use crate::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("cost parameter {name} must be {requirement}, got {value}")]
    NonPositiveCost {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("max_new_tokens must be at least 1")]
    NoTokensRequested,
    #[error("speculative modes need a budget of at least 1")]
    ZeroBudget,
    #[error("temperature must be finite and nonnegative, got {0}")]
    BadTemperature(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Optimal draft tree under the node budget.
    Ddtree,
    /// Per-depth argmax chain of length `L`.
    Chain,
    /// Plain target-only decoding, one token per round.
    Baseline,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Ddtree => "ddtree",
            Mode::Chain => "chain",
            Mode::Baseline => "baseline",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub seed: u64,
    pub prompt_len: usize,
    pub max_new_tokens: usize,
    /// `0` is greedy decoding.
    pub temperature: f64,
    pub budget: usize,
    pub block_len: usize,
    pub mode: Mode,
    /// Drafter noise in `[0, 1]`.
    pub noise: f64,
    pub eos: Option<TokenId>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt_len: 8,
            max_new_tokens: 256,
            temperature: 0.0,
            budget: 64,
            block_len: 16,
            mode: Mode::Ddtree,
            noise: 0.3,
            eos: None,
        }
    }
}

impl EpisodeConfig {
    fn validate(&self) -> Result<(), EngineError> {
        if self.max_new_tokens == 0 {
            return Err(EngineError::NoTokensRequested);
        }
        if self.mode == Mode::Ddtree && self.budget == 0 {
            return Err(EngineError::ZeroBudget);
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(EngineError::BadTemperature(self.temperature));
        }
        DrafterConfig::new(self.noise, self.block_len)?;
        Ok(())
    }

    /// Number of drafted nodes the verifier scores per round.
    pub fn verified_nodes(&self) -> usize {
        match self.mode {
            Mode::Ddtree => self.budget,
            Mode::Chain => self.block_len,
            Mode::Baseline => 0,
        }
    }
}

/// Relative per-round costs for the speedup model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// One plain target forward pass.
    pub t_target: f64,
    pub t_draft: f64,
    pub t_verify_base: f64,
    /// Verification cost growth per drafted node.
    pub kappa: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            t_target: 1.0,
            t_draft: 0.1,
            t_verify_base: 1.0,
            kappa: 0.002,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), EngineError> {
        let positive = [
            ("t_target", self.t_target),
            ("t_verify_base", self.t_verify_base),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(EngineError::NonPositiveCost {
                    name,
                    requirement: "positive",
                    value,
                });
            }
        }
        let nonnegative = [("t_draft", self.t_draft), ("kappa", self.kappa)];
        for (name, value) in nonnegative {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(EngineError::NonPositiveCost {
                    name,
                    requirement: "nonnegative",
                    value,
                });
            }
        }
        Ok(())
    }
}

/// Speedup over plain decoding:
/// `mean_tau * t_target / (t_draft + t_verify_base * (1 + kappa * nodes))`.
pub fn estimate_speedup(
    mean_tau: f64,
    verified_nodes: usize,
    cost: &CostModel,
) -> Result<f64, EngineError> {
    cost.validate()?;
    let round_cost = cost.t_draft + cost.t_verify_base * (1.0 + cost.kappa * verified_nodes as f64);
    Ok(mean_tau * cost.t_target / round_cost)
}

/// Acceptance statistics over one or more episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub rounds: u64,
    /// Sum over rounds of the tokens each round committed (bonus plus
    /// accepted), before truncation to `max_new_tokens`.
    pub committed_tokens: u64,
    pub mean_tau: f64,
    /// `tau_histogram[k - 1]` counts rounds that committed `k` tokens,
    /// `k = 1..=L+1`.
    pub tau_histogram: Vec<u64>,
    pub est_speedup: f64,
}

impl EpisodeStats {
    fn empty(block_len: usize) -> Self {
        Self {
            rounds: 0,
            committed_tokens: 0,
            mean_tau: 0.0,
            tau_histogram: vec![0; block_len + 1],
            est_speedup: 0.0,
        }
    }

    fn record(&mut self, tau: usize) {
        self.rounds += 1;
        self.committed_tokens += tau as u64;
        self.tau_histogram[tau - 1] += 1;
    }

    fn finish(&mut self, cfg: &EpisodeConfig, cost: &CostModel) -> Result<(), EngineError> {
        self.mean_tau = if self.rounds == 0 {
            0.0
        } else {
            self.committed_tokens as f64 / self.rounds as f64
        };
        self.est_speedup = match cfg.mode {
            Mode::Baseline => 1.0,
            _ => estimate_speedup(self.mean_tau, cfg.verified_nodes(), cost)?,
        };
        Ok(())
    }

    /// Pools several episodes' statistics.
    pub fn merge<'a>(
        parts: impl IntoIterator<Item = &'a EpisodeStats>,
        cfg: &EpisodeConfig,
        cost: &CostModel,
    ) -> Result<Self, EngineError> {
        let mut total = Self::empty(cfg.block_len);
        for part in parts {
            total.rounds += part.rounds;
            total.committed_tokens += part.committed_tokens;
            for (t, p) in total.tau_histogram.iter_mut().zip(&part.tau_histogram) {
                *t += p;
            }
        }
        total.finish(cfg, cost)?;
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub prompt: Vec<TokenId>,
    /// Committed output, truncated to `max_new_tokens`.
    pub tokens: Vec<TokenId>,
    pub stats: EpisodeStats,
    pub trace: Vec<TraceRecord>,
}

/// Prompt tokens and sampling stream for an episode seed.
pub fn episode_setup(
    model: &NgramModel,
    seed: u64,
    prompt_len: usize,
) -> (Vec<TokenId>, PositionStream) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt = (0..prompt_len)
        .map(|_| rng.random_range(1..model.vocab_size()) as TokenId)
        .collect();
    (prompt, PositionStream::new(rng.random()))
}

/// Verifies one tree. `history` is everything committed before the bonus
/// token, which sits at absolute output position `bonus_position`.
#[allow(clippy::too_many_arguments)]
pub fn play_round(
    model: &NgramModel,
    history: &[TokenId],
    bonus: TokenId,
    bonus_position: usize,
    tree: &DraftTree,
    decoding: Decoding,
    stream: &PositionStream,
    eos: Option<TokenId>,
) -> RoundOutcome {
    let flat = flatten(tree, bonus);
    let m = model.order();
    let tail = &history[history.len().saturating_sub(m)..];
    verifier_walk(
        &flat,
        |idx| {
            let mut window = tail.to_vec();
            window.push(bonus);
            window.extend(flat.path_tokens(idx));
            let row = model.target_next(&window);
            let position = bonus_position + flat.position_offsets[idx] + 1;
            decoding.choose(row, stream.uniform(position))
        },
        eos,
    )
}

/// Runs one episode with the default cost model.
pub fn run_episode(model: &NgramModel, cfg: &EpisodeConfig) -> Result<EpisodeResult, EngineError> {
    run_episode_with(model, cfg, &CostModel::default(), false)
}

pub fn run_episode_with(
    model: &NgramModel,
    cfg: &EpisodeConfig,
    cost: &CostModel,
    record_trace: bool,
) -> Result<EpisodeResult, EngineError> {
    cfg.validate()?;
    cost.validate()?;
    let (prompt, stream) = episode_setup(model, cfg.seed, cfg.prompt_len);
    let decoding = Decoding::from_temperature(cfg.temperature);
    let mut stats = EpisodeStats::empty(cfg.block_len);
    let mut history = prompt.clone();
    let mut trace = Vec::new();
    let limit = cfg.prompt_len + cfg.max_new_tokens;

    if cfg.mode == Mode::Baseline {
        while history.len() < limit {
            let position = history.len() - cfg.prompt_len;
            let token = decoding.choose(model.target_next(&history), stream.uniform(position));
            history.push(token);
            stats.record(1);
            if cfg.eos == Some(token) {
                break;
            }
        }
    } else {
        let drafter = DrafterConfig::new(cfg.noise, cfg.block_len)?;
        // Prefill: the first bonus token.
        let mut bonus = decoding.choose(model.target_next(&history), stream.uniform(0));
        while history.len() < limit {
            let bonus_position = history.len() - cfg.prompt_len;
            if cfg.eos == Some(bonus) {
                history.push(bonus);
                stats.record(1);
                break;
            }
            let tree = match cfg.mode {
                Mode::Ddtree => build_tree(
                    &drafter_marginals(model, &history, bonus, &drafter)?,
                    cfg.budget,
                ),
                _ => chain_tree(&drafter_marginals(model, &history, bonus, &drafter)?),
            };
            let outcome = play_round(
                model,
                &history,
                bonus,
                bonus_position,
                &tree,
                decoding,
                &stream,
                cfg.eos,
            );
            stats.record(outcome.acceptance_length + 1);
            if record_trace {
                trace.push(TraceRecord {
                    round_index: trace.len(),
                    budget: tree.budget(),
                    tree_size: tree.len(),
                    acceptance_length: outcome.acceptance_length,
                    next_bonus: outcome.next_bonus,
                    kept_indices: outcome.keep_indices.clone(),
                });
            }
            let room = limit - history.len();
            history.extend(
                std::iter::once(bonus)
                    .chain(outcome.accepted_tokens.iter().copied())
                    .take(room),
            );
            bonus = outcome.next_bonus;
        }
    }
    stats.finish(cfg, cost)?;
    let tokens = history.split_off(cfg.prompt_len);
    Ok(EpisodeResult {
        prompt: history,
        tokens,
        stats,
        trace,
    })
}

/// Seed of episode `index` in a batch started from `seed` (splitmix64).
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pooled statistics of `episodes` episodes of `cfg`, episode `i` seeded
/// with [`episode_seed`]`(cfg.seed, i)`. Episodes run on the current rayon
/// pool; the result does not depend on the thread count.
pub fn run_batch(
    model: &NgramModel,
    cfg: &EpisodeConfig,
    episodes: usize,
    cost: &CostModel,
) -> Result<EpisodeStats, EngineError> {
    let parts = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let cfg = EpisodeConfig {
                seed: episode_seed(cfg.seed, i),
                ..*cfg
            };
            run_episode_with(model, &cfg, cost, false).map(|r| r.stats)
        })
        .collect::<Result<Vec<_>, _>>()?;
    EpisodeStats::merge(&parts, cfg, cost)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: usize,
    pub mode: Mode,
    pub mean_tau: f64,
    pub est_speedup: f64,
    pub stats: EpisodeStats,
}

/// Runs the same episodes at every budget in `budgets` (ddtree mode).
pub fn budget_sweep(
    model: &NgramModel,
    base: &EpisodeConfig,
    budgets: &[usize],
    episodes: usize,
    cost: &CostModel,
) -> Result<Vec<SweepRow>, EngineError> {
    budgets
        .par_iter()
        .map(|&budget| {
            let cfg = EpisodeConfig {
                budget,
                mode: Mode::Ddtree,
                ..*base
            };
            let stats = run_batch(model, &cfg, episodes, cost)?;
            Ok(SweepRow {
                budget,
                mode: Mode::Ddtree,
                mean_tau: stats.mean_tau,
                est_speedup: stats.est_speedup,
                stats,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::random_model;

    #[test]
    fn speedup_examples() {
        let ideal = CostModel {
            t_target: 1.0,
            t_draft: 0.0,
            t_verify_base: 1.0,
            kappa: 0.0,
        };
        assert_eq!(estimate_speedup(6.5, 512, &ideal).unwrap(), 6.5);
        assert_eq!(estimate_speedup(1.0, 64, &ideal).unwrap(), 1.0);
        let cost = CostModel::default();
        let a = estimate_speedup(5.0, 16, &cost).unwrap();
        let b = estimate_speedup(5.0, 32, &cost).unwrap();
        let c = estimate_speedup(5.0, 1024, &cost).unwrap();
        assert!(a > b && b > c);
        let bad = CostModel {
            t_target: 0.0,
            ..cost
        };
        assert!(matches!(
            estimate_speedup(5.0, 16, &bad),
            Err(EngineError::NonPositiveCost {
                name: "t_target",
                ..
            })
        ));
        let bad = CostModel {
            kappa: -1.0,
            ..cost
        };
        assert!(estimate_speedup(5.0, 16, &bad).is_err());
    }

    #[test]
    fn config_validation() {
        let model = random_model(1, 6, 2, 0.5).unwrap();
        let cfg = EpisodeConfig {
            max_new_tokens: 0,
            ..Default::default()
        };
        assert_eq!(
            run_episode(&model, &cfg).unwrap_err(),
            EngineError::NoTokensRequested
        );
        let cfg = EpisodeConfig {
            budget: 0,
            ..Default::default()
        };
        assert_eq!(
            run_episode(&model, &cfg).unwrap_err(),
            EngineError::ZeroBudget
        );
        let cfg = EpisodeConfig {
            noise: 2.0,
            ..Default::default()
        };
        assert!(run_episode(&model, &cfg).is_err());
    }

    #[test]
    fn baseline_greedy_matches_plain_rollout() {
        let model = random_model(2, 6, 2, 0.4).unwrap();
        let cfg = EpisodeConfig {
            mode: Mode::Baseline,
            max_new_tokens: 40,
            ..Default::default()
        };
        let result = run_episode(&model, &cfg).unwrap();
        let mut history = result.prompt.clone();
        for _ in 0..40 {
            let row = model.target_next(&history);
            history.push(Decoding::Greedy.choose(row, 0.0));
        }
        assert_eq!(&history[cfg.prompt_len..], result.tokens.as_slice());
        assert_eq!(result.stats.mean_tau, 1.0);
        assert_eq!(result.stats.est_speedup, 1.0);
    }

    #[test]
    fn histogram_matches_mean() {
        let model = random_model(3, 8, 2, 0.3).unwrap();
        let cfg = EpisodeConfig {
            max_new_tokens: 100,
            block_len: 6,
            budget: 20,
            ..Default::default()
        };
        let s = run_episode(&model, &cfg).unwrap().stats;
        assert_eq!(s.tau_histogram.iter().sum::<u64>(), s.rounds);
        let weighted: u64 = s
            .tau_histogram
            .iter()
            .enumerate()
            .map(|(i, c)| (i as u64 + 1) * c)
            .sum();
        assert_eq!(weighted, s.committed_tokens);
        assert_eq!(s.mean_tau, weighted as f64 / s.rounds as f64);
        assert!((1.0..=7.0).contains(&s.mean_tau));
    }

    #[test]
    fn single_token_request_is_one_round() {
        let model = random_model(3, 8, 2, 0.3).unwrap();
        let cfg = EpisodeConfig {
            max_new_tokens: 1,
            ..Default::default()
        };
        let r = run_episode(&model, &cfg).unwrap();
        assert_eq!(r.tokens.len(), 1);
        assert_eq!(r.stats.rounds, 1);
        assert_eq!(r.stats.tau_histogram.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn eos_ends_generation_in_every_mode() {
        let model = random_model(9, 5, 1, 0.8).unwrap();
        let base = EpisodeConfig {
            max_new_tokens: 200,
            temperature: 1.0,
            block_len: 4,
            budget: 8,
            eos: Some(2),
            ..Default::default()
        };
        let runs: Vec<Vec<TokenId>> = [Mode::Baseline, Mode::Ddtree, Mode::Chain]
            .into_iter()
            .map(|mode| {
                run_episode(&model, &EpisodeConfig { mode, ..base })
                    .unwrap()
                    .tokens
            })
            .collect();
        assert_eq!(runs[0], runs[1]);
        assert_eq!(runs[0], runs[2]);
        assert_eq!(runs[0].last(), Some(&2));
        assert_eq!(runs[0].iter().filter(|&&t| t == 2).count(), 1);
    }

    #[test]
    fn trace_records_every_round() {
        let model = random_model(4, 8, 2, 0.3).unwrap();
        let cfg = EpisodeConfig {
            max_new_tokens: 50,
            block_len: 5,
            budget: 12,
            ..Default::default()
        };
        let r = run_episode_with(&model, &cfg, &CostModel::default(), true).unwrap();
        assert_eq!(r.trace.len() as u64, r.stats.rounds);
        for (i, rec) in r.trace.iter().enumerate() {
            assert_eq!(rec.round_index, i);
            assert_eq!(rec.kept_indices.len(), rec.acceptance_length + 1);
            assert!(rec.tree_size <= 12);
        }
    }

    #[test]
    fn batch_is_independent_of_thread_count() {
        let model = random_model(5, 8, 2, 0.3).unwrap();
        let cfg = EpisodeConfig {
            max_new_tokens: 60,
            block_len: 6,
            budget: 16,
            temperature: 1.0,
            ..Default::default()
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_batch(&model, &cfg, 6, &CostModel::default()).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn exact_drafter_beats_uniform_drafter() {
        let model = random_model(9, 12, 2, 0.1).unwrap();
        let tau = |noise| {
            let cfg = EpisodeConfig {
                noise,
                temperature: 1.0,
                max_new_tokens: 200,
                block_len: 8,
                budget: 32,
                ..Default::default()
            };
            run_batch(&model, &cfg, 4, &CostModel::default()).unwrap().mean_tau
        };
        assert!(tau(0.0) >= tau(1.0));
    }

    #[test]
    fn uniform_drafter_on_large_vocab_rarely_matches() {
        let model = random_model(2, 200, 1, 1.0).unwrap();
        for budget in [4, 64] {
            let cfg = EpisodeConfig {
                noise: 1.0,
                temperature: 1.0,
                max_new_tokens: 200,
                budget,
                ..Default::default()
            };
            let tau = run_batch(&model, &cfg, 2, &CostModel::default()).unwrap().mean_tau;
            assert!((1.0..1.5).contains(&tau), "budget {budget}: {tau}");
        }
    }
}
