//! Additive attention mask described as a set of blocked (query, key) pairs.

use super::NnError;

/// Blocked query/key pairs for one attention call.
///
/// A blocked pair receives the most negative finite score before softmax and
/// its weight is clamped to exact zero afterwards.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    dense: Vec<bool>,
    blocked_count: usize,
}

impl AttentionMask {
    /// Build from explicit pairs. Rejects out-of-range pairs and rows that
    /// would be fully blocked (their softmax would be undefined).
    pub fn from_pairs(rows: usize, cols: usize, pairs: &[(usize, usize)]) -> Result<Self, NnError> {
        let mut mask = Self::from_pairs_unchecked(rows, cols, pairs);
        for (r, c) in pairs {
            if *r >= rows || *c >= cols {
                return Err(NnError::MaskOutOfRange {
                    row: *r,
                    col: *c,
                    rows,
                    cols,
                });
            }
        }
        mask.dense = vec![false; rows * cols];
        let mut per_row = vec![0usize; rows];
        for &(r, c) in pairs {
            if !mask.dense[r * cols + c] {
                mask.dense[r * cols + c] = true;
                per_row[r] += 1;
            }
        }
        mask.blocked_count = per_row.iter().sum();
        if cols > 0 {
            if let Some(row) = per_row.iter().position(|&n| n == cols) {
                return Err(NnError::FullyBlockedRow { row });
            }
        }
        Ok(mask)
    }

    /// Construction without the fully-blocked-row check, for tests that need
    /// to exercise the runtime error path.
    pub fn from_pairs_unchecked(rows: usize, cols: usize, pairs: &[(usize, usize)]) -> Self {
        let mut dense = vec![false; rows * cols];
        let mut blocked_count = 0;
        for &(r, c) in pairs {
            if r < rows && c < cols && !dense[r * cols + c] {
                dense[r * cols + c] = true;
                blocked_count += 1;
            }
        }
        AttentionMask {
            rows,
            cols,
            dense,
            blocked_count,
        }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            dense: vec![false; rows * cols],
            blocked_count: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.dense[row * self.cols + col]
    }

    pub fn num_blocked(&self) -> usize {
        self.blocked_count
    }

    pub(crate) fn dense(&self) -> &[bool] {
        &self.dense
    }

    pub fn blocked_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols;
        self.dense
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / cols, i % cols))
    }
}
