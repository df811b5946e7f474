//! The three grouping levels: fixed-length groups over the base stream,
//! N-gram tokens, and byte-grouped embeddings. Also strips N runs into a
//! side channel so downstream stages see a pure A/C/G/T stream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};
use crate::sequence_io::Base;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupingError {
    #[error("sequence consists only of N bases")]
    AllN,
    #[error("sequence of {len} bases is too short for a {context_len}-base context")]
    TooShort { len: usize, context_len: usize },
    #[error("length {len} is not a multiple of {multiple}")]
    LengthNotMultiple { len: usize, multiple: usize },
    #[error("N base at index {0} where only A/C/G/T are allowed")]
    UnexpectedN(usize),
    #[error("invalid grouping config: {0}")]
    InvalidConfig(String),
}

impl From<NumericsError> for GroupingError {
    fn from(e: NumericsError) -> Self {
        GroupingError::InvalidConfig(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingConfig {
    /// Bases per fixed-length group, initial fragment included.
    pub group_len: usize,
    /// Bases of context seen by the model for each prediction.
    pub context_len: usize,
    /// Bases per token.
    pub ngram: usize,
    /// Number of adjacent token embeddings concatenated into one encoder position.
    pub byte_group: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            group_len: 213_000,
            context_len: 64,
            ngram: 2,
            byte_group: 4,
        }
    }
}

impl GroupingConfig {
    pub const MAX_NGRAM: usize = 6;

    /// Builds a config whose context is the smallest multiple of
    /// `ngram * byte_group` that is at least `min_context` bases.
    pub fn aligned(group_len: usize, min_context: usize, ngram: usize, byte_group: usize) -> Self {
        let step = (ngram * byte_group).max(1);
        GroupingConfig {
            group_len,
            context_len: min_context.div_ceil(step) * step,
            ngram,
            byte_group,
        }
    }

    pub fn validate(&self) -> Result<(), GroupingError> {
        let bad = |m: String| Err(GroupingError::InvalidConfig(m));
        if self.ngram == 0 || self.ngram > Self::MAX_NGRAM {
            return bad(format!("ngram must be in 1..={}", Self::MAX_NGRAM));
        }
        if self.byte_group == 0 {
            return bad("byte_group must be at least 1".into());
        }
        if self.context_len == 0 || !self.context_len.is_multiple_of(self.ngram * self.byte_group) {
            return bad(format!(
                "context_len {} must be a positive multiple of ngram*byte_group = {}",
                self.context_len,
                self.ngram * self.byte_group
            ));
        }
        if self.group_len <= self.context_len {
            return bad(format!(
                "group_len {} must exceed context_len {}",
                self.group_len, self.context_len
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        4usize.pow(self.ngram as u32)
    }

    /// Tokens in one context window.
    pub fn context_tokens(&self) -> usize {
        self.context_len / self.ngram
    }

    /// Encoder positions after byte-grouping one context window.
    pub fn positions(&self) -> usize {
        self.context_tokens() / self.byte_group
    }
}

/// Runs of N removed from a sequence, as `(start, length)` in original coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NSideChannel {
    pub runs: Vec<(u64, u64)>,
}

impl NSideChannel {
    pub fn total_n(&self) -> u64 {
        self.runs.iter().map(|r| r.1).sum()
    }

    /// Re-expands `pure` by splicing the N runs back in.
    pub fn reinsert(&self, pure: &[Base]) -> Vec<Base> {
        let mut out = Vec::with_capacity(pure.len() + self.total_n() as usize);
        let mut src = pure.iter();
        for &(start, len) in &self.runs {
            while (out.len() as u64) < start {
                match src.next() {
                    Some(&b) => out.push(b),
                    None => break,
                }
            }
            out.extend(std::iter::repeat_n(Base::N, len as usize));
        }
        out.extend(src);
        out
    }

    pub fn is_well_formed(&self) -> bool {
        self.runs.iter().all(|r| r.1 > 0) && self.runs.windows(2).all(|w| w[0].0 + w[0].1 < w[1].0)
    }
}

/// Collects the N runs of `seq` (any length, possibly all N).
pub fn scan_n_runs(seq: &[Base]) -> (Vec<Base>, NSideChannel) {
    let mut pure = Vec::with_capacity(seq.len());
    let mut runs: Vec<(u64, u64)> = Vec::new();
    for (i, &b) in seq.iter().enumerate() {
        if b.is_n() {
            match runs.last_mut() {
                Some(last) if last.0 + last.1 == i as u64 => last.1 += 1,
                _ => runs.push((i as u64, 1)),
            }
        } else {
            pure.push(b);
        }
    }
    (pure, NSideChannel { runs })
}

/// Splits `seq` into its A/C/G/T content and the N side channel.
pub fn extract_n(seq: &[Base]) -> Result<(Vec<Base>, NSideChannel), GroupingError> {
    let (pure, side) = scan_n_runs(seq);
    if pure.is_empty() {
        return Err(GroupingError::AllN);
    }
    Ok((pure, side))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedGroup {
    pub index: usize,
    /// Stored verbatim; bootstraps the model context for the body.
    pub initial_fragment: Vec<Base>,
    /// Bases coded with the entropy model.
    pub body: Vec<Base>,
}

impl FixedGroup {
    pub fn len(&self) -> usize {
        self.initial_fragment.len() + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cuts a pure base stream into `ceil(len / group_len)` contiguous groups.
///
/// Each group's first `context_len` bases form its initial fragment. A
/// trailing group of at most `context_len` bases is all fragment.
pub fn split_fixed(pure: &[Base], cfg: &GroupingConfig) -> Result<Vec<FixedGroup>, GroupingError> {
    if pure.len() <= cfg.context_len {
        return Err(GroupingError::TooShort {
            len: pure.len(),
            context_len: cfg.context_len,
        });
    }
    Ok(split_fixed_unchecked(pure, cfg))
}

/// Like [`split_fixed`] but accepts streams no longer than one context;
/// those become a single fragment-only group (zero groups when empty).
pub fn split_fixed_unchecked(pure: &[Base], cfg: &GroupingConfig) -> Vec<FixedGroup> {
    pure.chunks(cfg.group_len.max(1))
        .enumerate()
        .map(|(index, chunk)| {
            let cut = chunk.len().min(cfg.context_len);
            FixedGroup {
                index,
                initial_fragment: chunk[..cut].to_vec(),
                body: chunk[cut..].to_vec(),
            }
        })
        .collect()
}

pub fn ungroup(groups: &[FixedGroup]) -> Vec<Base> {
    let mut out = Vec::with_capacity(groups.iter().map(FixedGroup::len).sum());
    for g in groups {
        out.extend_from_slice(&g.initial_fragment);
        out.extend_from_slice(&g.body);
    }
    out
}

/// Token ids over a `4^ngram` vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub ngram: usize,
}

impl TokenSeq {
    pub fn vocab(&self) -> usize {
        4usize.pow(self.ngram as u32)
    }
}

/// Big-endian base-4 value of one N-gram. `bases` must be N-free.
#[inline]
pub fn token_of(bases: &[Base]) -> u32 {
    bases.iter().fold(0u32, |acc, b| acc * 4 + b.code() as u32)
}

/// Inverse of [`token_of`].
pub fn bases_of(token: u32, ngram: usize, out: &mut Vec<Base>) {
    for j in (0..ngram).rev() {
        out.push(Base::ACGT[((token >> (2 * j)) & 3) as usize]);
    }
}

pub fn ngram_tokenize(bases: &[Base], ngram: usize) -> Result<TokenSeq, GroupingError> {
    if ngram == 0 || !bases.len().is_multiple_of(ngram) {
        return Err(GroupingError::LengthNotMultiple {
            len: bases.len(),
            multiple: ngram,
        });
    }
    if let Some(i) = bases.iter().position(|b| b.is_n()) {
        return Err(GroupingError::UnexpectedN(i));
    }
    Ok(TokenSeq {
        tokens: bases.chunks_exact(ngram).map(token_of).collect(),
        ngram,
    })
}

pub fn detokenize(tokens: &TokenSeq) -> Vec<Base> {
    let mut out = Vec::with_capacity(tokens.tokens.len() * tokens.ngram);
    for &t in &tokens.tokens {
        bases_of(t, tokens.ngram, &mut out);
    }
    out
}

/// Concatenates each run of `g` adjacent rows: `[L, e] -> [L/g, e*g]`.
pub fn byte_group_reshape(embeddings: &Tensor, g: usize) -> Result<Tensor, GroupingError> {
    let shape = embeddings.shape();
    if shape.len() != 2 {
        return Err(GroupingError::InvalidConfig(format!(
            "expected a 2-D embedding tensor, got shape {shape:?}"
        )));
    }
    let (rows, width) = (shape[0], shape[1]);
    if g == 0 || rows % g != 0 {
        return Err(GroupingError::LengthNotMultiple { len: rows, multiple: g });
    }
    // Row-major storage makes this a pure relabelling of the shape.
    Ok(embeddings.reshape(&[rows / g, width * g])?)
}

/// Inverse of [`byte_group_reshape`].
pub fn byte_ungroup_reshape(grouped: &Tensor, g: usize) -> Result<Tensor, GroupingError> {
    let shape = grouped.shape();
    if shape.len() != 2 || g == 0 || !shape[1].is_multiple_of(g) {
        return Err(GroupingError::LengthNotMultiple {
            len: shape.get(1).copied().unwrap_or(0),
            multiple: g,
        });
    }
    Ok(grouped.reshape(&[shape[0] * g, shape[1] / g])?)
}
