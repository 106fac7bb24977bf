//! Interval arithmetic, feature sequences and the resampling/splitting helpers
//! shared by every other stage.
//!
//! Intervals are half-open ranges of integer frame indices. Conversion to
//! seconds only happens when results are written out.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A half-open temporal segment `[start, end)` measured in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct TemporalInterval {
    start: usize,
    end: usize,
}

impl TemporalInterval {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if end <= start {
            return Err(Error::InvalidInterval {
                start,
                end,
                reason: "end must be greater than start",
            });
        }
        Ok(Self { start, end })
    }

    /// Interval starting at `start` spanning `duration` frames.
    pub fn with_duration(start: usize, duration: usize) -> Result<Self> {
        Self::new(start, start + duration)
    }

    #[inline]
    pub fn start(&self) -> usize {
        self.start
    }

    #[inline]
    pub fn end(&self) -> usize {
        self.end
    }

    /// Index of the last frame covered by the interval.
    #[inline]
    pub fn last(&self) -> usize {
        self.end - 1
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn intersection_len(&self, other: &Self) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    pub fn iou(&self, other: &Self) -> f64 {
        iou(self, other)
    }

    /// Checks that the interval fits inside a sequence of `length` frames.
    pub fn check_within(&self, length: usize) -> Result<()> {
        if self.end > length {
            return Err(Error::OutOfRange {
                start: self.start,
                end: self.end,
                length,
            });
        }
        Ok(())
    }

    /// Shifts by a signed number of frames, clamping to `[0, length)` while
    /// keeping at least one frame.
    pub fn shifted(&self, offset: isize, length: usize) -> Result<Self> {
        let shift = |x: usize| (x as isize + offset).clamp(0, length as isize) as usize;
        let mut start = shift(self.start);
        let end = shift(self.end).max(1);
        if start >= end {
            start = end - 1;
        }
        Self::new(start, end)
    }

    /// Start and end in seconds for a fixed frame duration.
    pub fn to_seconds(&self, seconds_per_frame: f64) -> (f64, f64) {
        (
            self.start as f64 * seconds_per_frame,
            self.end as f64 * seconds_per_frame,
        )
    }
}

impl TryFrom<[usize; 2]> for TemporalInterval {
    type Error = Error;

    fn try_from(v: [usize; 2]) -> Result<Self> {
        Self::new(v[0], v[1])
    }
}

impl From<TemporalInterval> for [usize; 2] {
    fn from(v: TemporalInterval) -> Self {
        [v.start, v.end]
    }
}

impl fmt::Display for TemporalInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Temporal intersection over union. Symmetric, 1 for identical intervals and
/// 0 for disjoint ones.
pub fn iou(a: &TemporalInterval, b: &TemporalInterval) -> f64 {
    let inter = a.intersection_len(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// A `T x d` matrix of per-frame features, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::shape(format!(
                "feature sequence needs at least one row and column, got {len}x{dim}"
            )));
        }
        if data.len() != len * dim {
            return Err(Error::shape(format!(
                "{len}x{dim} feature sequence needs {} values, got {}",
                len * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature sequence contains non-finite values".into(),
            ));
        }
        Ok(Self { len, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("ragged feature rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn zeros(len: usize, dim: usize) -> Result<Self> {
        Self::new(len, dim, vec![0.0; len * dim])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.len == other.len && self.dim == other.dim
    }

    /// Mean of the rows covered by `interval`.
    pub fn mean_over(&self, interval: &TemporalInterval) -> Result<Vec<f64>> {
        interval.check_within(self.len)?;
        let mut mean = vec![0.0; self.dim];
        for t in interval.start()..interval.end() {
            for (m, v) in mean.iter_mut().zip(self.row(t)) {
                *m += v;
            }
        }
        let n = interval.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(mean)
    }
}

/// Resamples a sequence to `target_len` rows by linear interpolation.
///
/// Output row `k` samples the input at position `k * (T - 1) / (target_len - 1)`;
/// a single output row samples the middle of the input.
pub fn rescale_features(seq: &FeatureSequence, target_len: usize) -> Result<FeatureSequence> {
    if target_len == 0 {
        return Err(Error::InvalidArgument("target length must be positive".into()));
    }
    if target_len == seq.len() {
        return Ok(seq.clone());
    }
    let span = (seq.len() - 1) as f64;
    let mut out = Vec::with_capacity(target_len * seq.dim());
    for k in 0..target_len {
        let pos = if target_len == 1 {
            span / 2.0
        } else {
            k as f64 * span / (target_len - 1) as f64
        };
        let lo = (pos.floor() as usize).min(seq.len() - 1);
        let hi = (lo + 1).min(seq.len() - 1);
        let frac = pos - lo as f64;
        out.extend(seq.row(lo).iter().zip(seq.row(hi)).map(|(a, b)| a + (b - a) * frac));
    }
    FeatureSequence::new(target_len, seq.dim(), out)
}

/// Splits `[0, length)` into `parts` contiguous intervals whose boundaries are
/// `round(i * length / parts)` with halves rounded up.
pub fn even_split(length: usize, parts: usize) -> Result<Vec<TemporalInterval>> {
    if parts == 0 {
        return Err(Error::InvalidArgument("part count must be positive".into()));
    }
    if length < parts {
        return Err(Error::InsufficientLength { length, parts });
    }
    // floor(x + 1/2) with x = i*T/N, in exact integer arithmetic
    let boundary = |i: usize| (2 * i * length + parts) / (2 * parts);
    (1..=parts)
        .map(|i| TemporalInterval::new(boundary(i - 1), boundary(i)))
        .collect()
}
