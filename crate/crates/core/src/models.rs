//! Synthetic target and drafter models.
//!
//! The target is an order-`m` n-gram table, so every conditional is exact
//! and the per-position marginals of its ancestral process can be computed
//! by a forward pass over the `|V|^m` context states. The drafter is those
//! exact marginals mixed with the uniform distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{sample_index, validate_block, DistributionError, MarginalBlock};
use crate::TokenId;

/// Fills the context window before the sequence start. Never generated:
/// every row gives it zero mass.
pub const PAD_TOKEN: TokenId = 0;

/// Largest number of context rows a model table may have.
pub const MAX_TABLE_ROWS: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("table needs {rows} rows, limit is {limit}")]
    TableTooLarge { rows: u64, limit: u64 },
    #[error("vocabulary must have at least 3 tokens (pad plus two), got {0}")]
    VocabTooSmall(usize),
    #[error("order must be at least 1")]
    ZeroOrder,
    #[error("concentration must be nonnegative, got {0}")]
    BadConcentration(f64),
    #[error("drafter noise must lie in [0, 1], got {0}")]
    BadNoise(f64),
    #[error("block length must be at least 1")]
    ZeroBlockLen,
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// Everything needed to regenerate a model. Tables are never stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub order: usize,
    /// Symmetric Dirichlet concentration of each row. `0` gives one-hot
    /// (deterministic) rows, `inf` gives uniform rows.
    pub concentration: f64,
}

impl ModelSpec {
    pub fn build(&self) -> Result<NgramModel, ModelError> {
        random_model(self.seed, self.vocab_size, self.order, self.concentration)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    spec: ModelSpec,
    num_states: usize,
    table: Vec<f64>,
}

pub fn random_model(
    seed: u64,
    vocab_size: usize,
    order: usize,
    concentration: f64,
) -> Result<NgramModel, ModelError> {
    if vocab_size < 3 {
        return Err(ModelError::VocabTooSmall(vocab_size));
    }
    if order == 0 {
        return Err(ModelError::ZeroOrder);
    }
    if concentration.is_nan() || concentration < 0.0 {
        return Err(ModelError::BadConcentration(concentration));
    }
    let rows = (vocab_size as u64)
        .checked_pow(order as u32)
        .filter(|&r| r <= MAX_TABLE_ROWS)
        .ok_or(ModelError::TableTooLarge {
            rows: (vocab_size as u64).saturating_pow(order as u32),
            limit: MAX_TABLE_ROWS,
        })?;
    let num_states = rows as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = (concentration > 0.0 && concentration.is_finite())
        .then(|| Gamma::new(concentration, 1.0).expect("positive finite shape"));
    let mut table = Vec::with_capacity(num_states * vocab_size);
    let mut row = vec![0.0; vocab_size];
    for _ in 0..num_states {
        row.fill(0.0);
        match gamma {
            Some(g) => {
                for p in &mut row[1..] {
                    *p = g.sample(&mut rng);
                }
            }
            None if concentration == 0.0 => {}
            None => row[1..].fill(1.0),
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|p| *p /= total);
        } else {
            // One-hot rows, and the underflow case of very small shapes.
            row[rng.random_range(1..vocab_size)] = 1.0;
        }
        table.extend_from_slice(&row);
    }
    Ok(NgramModel {
        spec: ModelSpec {
            seed,
            vocab_size,
            order,
            concentration,
        },
        num_states,
        table,
    })
}

impl NgramModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    pub fn order(&self) -> usize {
        self.spec.order
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// Context state of the last `order` tokens of `history`, left-padded
    /// with [`PAD_TOKEN`].
    pub fn state_of(&self, history: &[TokenId]) -> usize {
        let m = self.spec.order;
        let v = self.spec.vocab_size;
        let tail = &history[history.len().saturating_sub(m)..];
        tail.iter().fold(0, |s, &t| s * v + t as usize)
    }

    /// State reached from `state` after emitting `token`.
    pub fn next_state(&self, state: usize, token: TokenId) -> usize {
        (state * self.spec.vocab_size + token as usize) % self.num_states
    }

    pub fn row_for_state(&self, state: usize) -> &[f64] {
        let v = self.spec.vocab_size;
        &self.table[state * v..(state + 1) * v]
    }

    /// `p(. | history)`: the row for the last `order` tokens of `history`.
    pub fn target_next(&self, history: &[TokenId]) -> &[f64] {
        self.row_for_state(self.state_of(history))
    }
}

pub fn target_next<'a>(model: &'a NgramModel, history: &[TokenId]) -> &'a [f64] {
    model.target_next(history)
}

/// Exact distributions of `Y_1..Y_L` under ancestral sampling from the
/// target after `context` followed by `bonus`, unclamped.
pub fn exact_marginal_rows(
    model: &NgramModel,
    context: &[TokenId],
    bonus: TokenId,
    block_len: usize,
) -> Vec<Vec<f64>> {
    let v = model.vocab_size();
    let mut history: Vec<TokenId> = context[context.len().saturating_sub(model.order())..].to_vec();
    history.push(bonus);
    let start = model.state_of(&history);

    let mut state_probs = vec![0.0; model.num_states()];
    let mut next_probs = vec![0.0; model.num_states()];
    let mut active = vec![start];
    state_probs[start] = 1.0;
    let mut rows = Vec::with_capacity(block_len);
    for _ in 0..block_len {
        let mut marginal = vec![0.0; v];
        let mut next_active = Vec::new();
        for &s in &active {
            let ps = state_probs[s];
            state_probs[s] = 0.0;
            for (t, &p) in model.row_for_state(s).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                marginal[t] += ps * p;
                let ns = model.next_state(s, t as TokenId);
                if next_probs[ns] == 0.0 {
                    next_active.push(ns);
                }
                next_probs[ns] += ps * p;
            }
        }
        rows.push(marginal);
        std::mem::swap(&mut state_probs, &mut next_probs);
        active = next_active;
    }
    rows
}

/// Exact per-position marginals as a validated block.
pub fn exact_marginals(
    model: &NgramModel,
    context: &[TokenId],
    bonus: TokenId,
    block_len: usize,
) -> Result<MarginalBlock, ModelError> {
    if block_len == 0 {
        return Err(ModelError::ZeroBlockLen);
    }
    Ok(validate_block(&exact_marginal_rows(
        model, context, bonus, block_len,
    ))?)
}

/// Drafter fidelity knob and block length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrafterConfig {
    pub noise: f64,
    pub block_len: usize,
}

impl DrafterConfig {
    pub fn new(noise: f64, block_len: usize) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(ModelError::BadNoise(noise));
        }
        if block_len == 0 {
            return Err(ModelError::ZeroBlockLen);
        }
        Ok(Self { noise, block_len })
    }
}

/// `(1 - noise) * row + noise * uniform`.
pub fn mix_with_uniform(row: &[f64], noise: f64) -> Vec<f64> {
    let u = 1.0 / row.len() as f64;
    row.iter().map(|&p| (1.0 - noise) * p + noise * u).collect()
}

/// Drafter marginals: exact marginals blended towards uniform by the
/// configured noise.
pub fn drafter_marginals(
    model: &NgramModel,
    context: &[TokenId],
    bonus: TokenId,
    cfg: &DrafterConfig,
) -> Result<MarginalBlock, ModelError> {
    let cfg = DrafterConfig::new(cfg.noise, cfg.block_len)?;
    let rows: Vec<Vec<f64>> = exact_marginal_rows(model, context, bonus, cfg.block_len)
        .iter()
        .map(|row| mix_with_uniform(row, cfg.noise))
        .collect();
    Ok(validate_block(&rows)?)
}

/// The target's decoding rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Argmax, lowest token id among ties.
    Greedy,
    /// Sampling from `p^(1/temperature)`, renormalized.
    Sample { temperature: f64 },
}

impl Decoding {
    pub fn from_temperature(temperature: f64) -> Self {
        if temperature <= 0.0 {
            Decoding::Greedy
        } else {
            Decoding::Sample { temperature }
        }
    }

    /// Picks a token from `row` using `uniform` in `[0, 1)`; greedy decoding
    /// ignores it.
    pub fn choose(&self, row: &[f64], uniform: f64) -> TokenId {
        match *self {
            Decoding::Greedy => argmax(row),
            Decoding::Sample { temperature: 1.0 } => sample_index(row, uniform) as TokenId,
            Decoding::Sample { temperature } => {
                let inv = 1.0 / temperature;
                let weights: Vec<f64> = row
                    .iter()
                    .map(|&p| if p > 0.0 { p.powf(inv) } else { 0.0 })
                    .collect();
                let total: f64 = weights.iter().sum();
                if total > 0.0 && total.is_finite() {
                    sample_index(&weights, uniform * total) as TokenId
                } else {
                    argmax(row)
                }
            }
        }
    }
}

fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Uniform draws indexed by absolute output position, so that any decoding
/// loop that commits the token at position `p` uses the same randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionStream {
    seed: u64,
}

impl PositionStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn uniform(&self, position: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(position as u64);
        rng.random::<f64>()
    }
}
