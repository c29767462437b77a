//! Per-position marginal distributions from one drafter pass and the
//! factorized draft distribution they induce.
//!
//! A [`MarginalBlock`] holds `L` rows, one distribution over the vocabulary
//! for each future position after the bonus token. Under the factorized
//! distribution every position is drawn independently from its row, so the
//! probability that a continuation starts with a prefix `u` is the product
//! of the row entries along `u` (the prefix mass).

use rand::Rng;
use thiserror::Error;

use crate::TokenId;

/// Lower clamp applied to every marginal entry. Entries end up in
/// `[PROB_FLOOR, 1 - PROB_FLOOR]`, so every prefix extension strictly lowers
/// the prefix mass.
pub const PROB_FLOOR: f64 = 1e-12;

/// Maximum allowed deviation of a validated row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("row {row} has {len} entries, expected {expected}")]
    NonRectangular {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("row {row} sums to zero")]
    RowSumZero { row: usize },
    #[error("row {row} has a negative entry at token {token}")]
    NegativeEntry { row: usize, token: usize },
    #[error("row {row} has a non-finite entry at token {token}")]
    NonFinite { row: usize, token: usize },
    #[error("block must have at least one row and a vocabulary of at least 2, got {rows}x{vocab}")]
    InvalidShape { rows: usize, vocab: usize },
    #[error("prefix of length {len} exceeds block length {block_len}")]
    PrefixTooLong { len: usize, block_len: usize },
    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
}

/// The `L` per-position token distributions `q_1..q_L` produced by one
/// drafter pass. Immutable after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalBlock {
    block_len: usize,
    vocab_size: usize,
    probs: Vec<f64>,
}

/// Validates a raw `L x |V|` probability table.
///
/// Each row is normalized, clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` and
/// renormalized, so unnormalized but otherwise valid rows are accepted.
pub fn validate_block(raw: &[Vec<f64>]) -> Result<MarginalBlock, DistributionError> {
    let rows = raw.len();
    let vocab = raw.first().map_or(0, Vec::len);
    if rows == 0 || vocab < 2 {
        return Err(DistributionError::InvalidShape { rows, vocab });
    }
    let mut probs = Vec::with_capacity(rows * vocab);
    for (row_idx, row) in raw.iter().enumerate() {
        if row.len() != vocab {
            return Err(DistributionError::NonRectangular {
                row: row_idx,
                len: row.len(),
                expected: vocab,
            });
        }
        probs.extend(normalize_row(row_idx, row)?);
    }
    Ok(MarginalBlock {
        block_len: rows,
        vocab_size: vocab,
        probs,
    })
}

fn normalize_row(row_idx: usize, row: &[f64]) -> Result<Vec<f64>, DistributionError> {
    for (token, &p) in row.iter().enumerate() {
        if !p.is_finite() {
            return Err(DistributionError::NonFinite {
                row: row_idx,
                token,
            });
        }
        if p < 0.0 {
            return Err(DistributionError::NegativeEntry {
                row: row_idx,
                token,
            });
        }
    }
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return Err(DistributionError::RowSumZero { row: row_idx });
    }
    let clamped: Vec<f64> = row
        .iter()
        .map(|&p| (p / total).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
        .collect();
    let total: f64 = clamped.iter().sum();
    Ok(clamped
        .into_iter()
        .map(|p| (p / total).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
        .collect())
}

impl MarginalBlock {
    /// Builds a block where every position has the same distribution.
    pub fn repeated(row: &[f64], block_len: usize) -> Result<Self, DistributionError> {
        validate_block(&vec![row.to_vec(); block_len])
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Distribution at 0-based position `depth_index` (depth `depth_index + 1`).
    pub fn row(&self, depth_index: usize) -> &[f64] {
        let start = depth_index * self.vocab_size;
        &self.probs[start..start + self.vocab_size]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.vocab_size)
    }

    /// `q_{depth_index+1}(token)`.
    pub fn prob(&self, depth_index: usize, token: TokenId) -> f64 {
        self.row(depth_index)[token as usize]
    }

    fn check_prefix(&self, prefix: &[TokenId]) -> Result<(), DistributionError> {
        if prefix.len() > self.block_len {
            return Err(DistributionError::PrefixTooLong {
                len: prefix.len(),
                block_len: self.block_len,
            });
        }
        if let Some(&token) = prefix.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(DistributionError::TokenOutOfRange {
                token,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Probability that a continuation sampled from the factorized
    /// distribution begins with `prefix`.
    pub fn prefix_mass(&self, prefix: &[TokenId]) -> Result<f64, DistributionError> {
        self.check_prefix(prefix)?;
        Ok(prefix
            .iter()
            .enumerate()
            .map(|(i, &t)| self.prob(i, t))
            .product())
    }

    /// Natural log of [`prefix_mass`](Self::prefix_mass), accumulated left to
    /// right in depth order.
    pub fn log_prefix_mass(&self, prefix: &[TokenId]) -> Result<f64, DistributionError> {
        self.check_prefix(prefix)?;
        Ok(prefix
            .iter()
            .enumerate()
            .fold(0.0, |acc, (i, &t)| acc + self.prob(i, t).ln()))
    }

    /// Draws one full continuation `y_1..y_L`, each position independently
    /// from its row.
    pub fn sample_continuation<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<TokenId> {
        self.rows()
            .map(|row| sample_index(row, rng.random::<f64>()) as TokenId)
            .collect()
    }
}

/// Inverse-CDF draw from a (normalized) row given a uniform in `[0, 1)`.
pub(crate) fn sample_index(row: &[f64], uniform: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if uniform < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum short of `uniform`; take the last
    // token with nonzero mass.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example_block() -> MarginalBlock {
        validate_block(&[vec![0.6, 0.3, 0.1], vec![0.7, 0.2, 0.1]]).unwrap()
    }

    #[test]
    fn valid_simplex_is_unchanged() {
        let block = validate_block(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(block.row(0), &[0.5, 0.5]);
        assert_eq!(block.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn boundary_entries_are_clamped() {
        let block = validate_block(&[vec![1.0, 0.0]]).unwrap();
        let row = block.row(0);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOLERANCE);
        assert!(row[1] >= PROB_FLOOR * 0.5);
    }

    #[test]
    fn unnormalized_row_is_renormalized() {
        let block = validate_block(&[vec![0.3, 0.3]]).unwrap();
        assert_eq!(block.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn validation_errors() {
        assert_eq!(
            validate_block(&[vec![0.5, 0.5], vec![1.0]]),
            Err(DistributionError::NonRectangular {
                row: 1,
                len: 1,
                expected: 2
            })
        );
        assert_eq!(
            validate_block(&[vec![0.0, 0.0]]),
            Err(DistributionError::RowSumZero { row: 0 })
        );
        assert_eq!(
            validate_block(&[vec![0.5, -0.1, 0.6]]),
            Err(DistributionError::NegativeEntry { row: 0, token: 1 })
        );
        assert!(matches!(
            validate_block(&[vec![1.0]]),
            Err(DistributionError::InvalidShape { .. })
        ));
        assert!(matches!(
            validate_block(&[]),
            Err(DistributionError::InvalidShape { .. })
        ));
    }

    #[test]
    fn prefix_mass_examples() {
        let uniform = MarginalBlock::repeated(&[0.5, 0.5], 2).unwrap();
        assert_eq!(uniform.prefix_mass(&[0, 1]).unwrap(), 0.25);
        assert_eq!(uniform.log_prefix_mass(&[0, 1]).unwrap(), 0.25f64.ln());

        let block = example_block();
        assert_eq!(block.prefix_mass(&[2]).unwrap(), block.prob(0, 2));
        assert!((block.prefix_mass(&[1, 0]).unwrap() - 0.21).abs() < 1e-15);
        assert!((block.log_prefix_mass(&[0, 0]).unwrap() - 0.42f64.ln()).abs() < 1e-14);
        assert_eq!(block.prefix_mass(&[]).unwrap(), 1.0);
    }

    #[test]
    fn near_certain_token_has_log_mass_near_zero() {
        let block = validate_block(&[vec![1.0, 0.0]]).unwrap();
        let lm = block.log_prefix_mass(&[0]).unwrap();
        assert!(lm < 0.0 && lm > -1e-11);
    }

    #[test]
    fn prefix_errors() {
        let block = example_block();
        assert_eq!(
            block.prefix_mass(&[0, 0, 0]),
            Err(DistributionError::PrefixTooLong {
                len: 3,
                block_len: 2
            })
        );
        assert!(matches!(
            block.log_prefix_mass(&[0, 0, 0]),
            Err(DistributionError::PrefixTooLong { .. })
        ));
        assert!(matches!(
            block.prefix_mass(&[3]),
            Err(DistributionError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic_for_a_seed() {
        let block = example_block();
        let a = block.sample_continuation(&mut ChaCha8Rng::seed_from_u64(9));
        let b = block.sample_continuation(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn degenerate_rows_sample_their_mode() {
        let block = validate_block(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(block.sample_continuation(&mut rng), vec![1, 0]);
        }
    }

    #[test]
    fn monte_carlo_prefix_frequency_within_three_sigma() {
        let block = example_block();
        let prefix = [1, 0];
        let p = block.prefix_mass(&prefix).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let hits = (0..n)
            .filter(|_| block.sample_continuation(&mut rng).starts_with(&prefix))
            .count();
        let freq = hits as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * sigma, "freq {freq} vs {p}");
    }
}
