//! Row layout of a batch of channel-major token grids.
//!
//! Tokens are stored as one 2-d matrix whose row for `(sample b, channel c,
//! position n)` is `(b·C + c)·T + n`. Each attention arrangement and each
//! pooling stage is a different grouping of those rows.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::RowGroups;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    batch: usize,
    channels: usize,
    tokens: usize,
    present: Vec<bool>,
}

impl TokenLayout {
    /// `present` is `batch × channels`, row-major.
    pub fn new(batch: usize, channels: usize, tokens: usize, present: Vec<bool>) -> Result<Self> {
        if batch == 0 || channels == 0 || tokens == 0 {
            return Err(Error::invalid("layout", "batch, channels and tokens must be positive"));
        }
        if present.len() != batch * channels {
            return Err(Error::invalid(
                "layout",
                format!("mask has {} entries, expected {}", present.len(), batch * channels),
            ));
        }
        for b in 0..batch {
            if !present[b * channels..(b + 1) * channels].iter().any(|&p| p) {
                return Err(Error::invalid("layout", format!("sample {b} has no present channel")));
            }
        }
        Ok(Self {
            batch,
            channels,
            tokens,
            present,
        })
    }

    pub fn all_present(batch: usize, channels: usize, tokens: usize) -> Result<Self> {
        Self::new(batch, channels, tokens, vec![true; batch * channels])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn rows(&self) -> usize {
        self.batch * self.channels * self.tokens
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn is_present(&self, b: usize, c: usize) -> bool {
        self.present[b * self.channels + c]
    }

    pub fn row(&self, b: usize, c: usize, n: usize) -> usize {
        (b * self.channels + c) * self.tokens + n
    }

    /// Same layout with a different number of tokens per channel.
    pub fn with_tokens(&self, tokens: usize) -> Self {
        Self { tokens, ..self.clone() }
    }

    fn present_channels(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.channels).filter(move |&c| self.is_present(b, c))
    }

    /// One group per present `(b, c)`: that channel's tokens.
    pub fn spatial_groups(&self) -> RowGroups {
        let mut groups = Vec::new();
        for b in 0..self.batch {
            for c in self.present_channels(b) {
                groups.push((0..self.tokens).map(|n| self.row(b, c, n)).collect());
            }
        }
        Arc::new(groups)
    }

    /// One group per `(b, n)`: the present channels' tokens at position `n`.
    pub fn channel_groups(&self) -> RowGroups {
        let mut groups = Vec::new();
        for b in 0..self.batch {
            for n in 0..self.tokens {
                groups.push(self.present_channels(b).map(|c| self.row(b, c, n)).collect());
            }
        }
        Arc::new(groups)
    }

    /// One group per sample: every present token.
    pub fn joint_groups(&self) -> RowGroups {
        let groups = (0..self.batch)
            .map(|b| {
                self.present_channels(b)
                    .flat_map(|c| (0..self.tokens).map(move |n| (b, c, n)))
                    .map(|(b, c, n)| self.row(b, c, n))
                    .collect()
            })
            .collect();
        Arc::new(groups)
    }

    /// Groups the rows of the per-channel summary matrix (one row per
    /// present channel, in [`spatial_groups`](Self::spatial_groups) order)
    /// by sample.
    pub fn summary_groups(&self) -> RowGroups {
        let mut groups = Vec::with_capacity(self.batch);
        let mut next = 0;
        for b in 0..self.batch {
            let count = self.present_channels(b).count();
            groups.push((next..next + count).collect());
            next += count;
        }
        Arc::new(groups)
    }

    /// Per-row 0/1 factors zeroing absent channels, or `None` if every
    /// channel is present.
    pub fn mask_factors(&self) -> Option<Arc<Vec<f64>>> {
        if self.present.iter().all(|&p| p) {
            return None;
        }
        let factors = (0..self.rows())
            .map(|r| {
                let bc = r / self.tokens;
                if self.present[bc] { 1.0 } else { 0.0 }
            })
            .collect();
        Some(Arc::new(factors))
    }
}
