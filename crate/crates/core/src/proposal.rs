//! Boundary-matching proposal decoding.
//!
//! A [`TeacherOutput`] holds per-frame start/end probabilities and a
//! duration-by-start confidence map. Decoding scores every valid candidate,
//! suppresses near duplicates with Gaussian Soft-NMS and keeps the top `K`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::{iou, TemporalInterval};

pub const DEFAULT_SOFT_NMS_SIGMA: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 100;

/// Per-frame probabilities of a proposal starting or ending at that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryProbabilities {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl BoundaryProbabilities {
    pub fn new(start: Vec<f64>, end: Vec<f64>) -> Result<Self> {
        if start.len() != end.len() {
            return Err(Error::shape(format!(
                "start/end probability lengths differ: {} vs {}",
                start.len(),
                end.len()
            )));
        }
        Ok(Self { start, end })
    }

    pub fn zeros(length: usize) -> Self {
        Self {
            start: vec![0.0; length],
            end: vec![0.0; length],
        }
    }

    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }
}

/// Confidence for every `(duration, start)` pair. Row `d - 1` holds duration `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    max_duration: usize,
    length: usize,
    conf: Vec<f64>,
    valid: Vec<bool>,
}

impl ConfidenceMap {
    /// A map filled with `value` whose mask admits exactly the candidates that
    /// fit inside the sequence.
    pub fn filled(max_duration: usize, length: usize, value: f64) -> Result<Self> {
        check_grid(length, max_duration)?;
        let mut valid = vec![false; max_duration * length];
        for d in 1..=max_duration {
            for ts in 0..length {
                valid[(d - 1) * length + ts] = ts + d <= length;
            }
        }
        Ok(Self {
            max_duration,
            length,
            conf: vec![value; max_duration * length],
            valid,
        })
    }

    pub fn new(max_duration: usize, length: usize, conf: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        check_grid(length, max_duration)?;
        let cells = max_duration * length;
        if conf.len() != cells || valid.len() != cells {
            return Err(Error::shape(format!(
                "{max_duration}x{length} confidence map needs {cells} cells, got {} values and {} mask bits",
                conf.len(),
                valid.len()
            )));
        }
        for d in 1..=max_duration {
            for ts in 0..length {
                if ts + d > length && valid[(d - 1) * length + ts] {
                    return Err(Error::InvalidArgument(format!(
                        "mask admits out-of-range candidate (start {ts}, duration {d})"
                    )));
                }
            }
        }
        Ok(Self {
            max_duration,
            length,
            conf,
            valid,
        })
    }

    #[inline]
    pub fn max_duration(&self) -> usize {
        self.max_duration
    }

    #[inline]
    pub fn length(&self) -> usize {
        self.length
    }

    #[inline]
    fn index(&self, duration: usize, start: usize) -> usize {
        debug_assert!(duration >= 1 && duration <= self.max_duration && start < self.length);
        (duration - 1) * self.length + start
    }

    #[inline]
    pub fn get(&self, duration: usize, start: usize) -> f64 {
        self.conf[self.index(duration, start)]
    }

    #[inline]
    pub fn set(&mut self, duration: usize, start: usize, value: f64) {
        let i = self.index(duration, start);
        self.conf[i] = value;
    }

    #[inline]
    pub fn is_valid(&self, duration: usize, start: usize) -> bool {
        self.valid[self.index(duration, start)]
    }

    pub fn values(&self) -> &[f64] {
        &self.conf
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.conf
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    #[cfg(test)]
    pub(crate) fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Boundary probabilities plus confidence map, as produced by a teacher (or
/// the student) network for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub boundaries: BoundaryProbabilities,
    pub confidence: ConfidenceMap,
}

impl TeacherOutput {
    pub fn new(boundaries: BoundaryProbabilities, confidence: ConfidenceMap) -> Result<Self> {
        if boundaries.len() != confidence.length() {
            return Err(Error::shape(format!(
                "boundary length {} does not match confidence map length {}",
                boundaries.len(),
                confidence.length()
            )));
        }
        let out = Self { boundaries, confidence };
        if out.values().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "teacher output contains non-finite values".into(),
            ));
        }
        Ok(out)
    }

    pub fn zeros(length: usize, max_duration: usize) -> Result<Self> {
        Self::new(
            BoundaryProbabilities::zeros(length),
            ConfidenceMap::filled(max_duration, length, 0.0)?,
        )
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    #[inline]
    pub fn max_duration(&self) -> usize {
        self.confidence.max_duration()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.len() == other.len() && self.max_duration() == other.max_duration()
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.boundaries
            .start
            .iter()
            .chain(&self.boundaries.end)
            .chain(self.confidence.values())
            .copied()
    }

    /// Errors unless every probability and confidence lies in `[0, 1]`.
    pub fn check_probabilities(&self) -> Result<()> {
        if self.values().all(|v| (0.0..=1.0).contains(&v)) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "teacher output values must lie in [0, 1]".into(),
            ))
        }
    }

    /// Copy with every value clipped into `[0, 1]`.
    pub fn clipped(&self) -> Self {
        let mut out = self.clone();
        let clip = |v: &mut f64| *v = v.clamp(0.0, 1.0);
        out.boundaries.start.iter_mut().for_each(clip);
        out.boundaries.end.iter_mut().for_each(clip);
        out.confidence.values_mut().iter_mut().for_each(clip);
        out
    }
}

/// A candidate event segment with its decoded score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    pub interval: TemporalInterval,
    pub score: f64,
}

impl ScoredProposal {
    pub fn new(interval: TemporalInterval, score: f64) -> Self {
        Self { interval, score }
    }
}

/// Ranking order: score descending, then earlier start, then shorter duration.
pub fn rank_order(a: &ScoredProposal, b: &ScoredProposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.interval.start().cmp(&b.interval.start()))
        .then(a.interval.len().cmp(&b.interval.len()))
}

fn check_grid(length: usize, max_duration: usize) -> Result<()> {
    if max_duration == 0 || max_duration > length {
        return Err(Error::InvalidArgument(format!(
            "max duration must lie in [1, {length}], got {max_duration}"
        )));
    }
    Ok(())
}

/// Every `(start, duration)` pair with `start + duration <= length` and
/// `duration <= max_duration`, ordered by start then duration.
pub fn candidate_map(length: usize, max_duration: usize) -> Result<Vec<(usize, usize)>> {
    check_grid(length, max_duration)?;
    Ok((0..length)
        .flat_map(|ts| (1..=max_duration.min(length - ts)).map(move |d| (ts, d)))
        .collect())
}

/// Scores each valid candidate as `p_start(ts) * p_end(ts + d - 1) * conf(d, ts)`.
pub fn score_proposals(out: &TeacherOutput) -> Vec<ScoredProposal> {
    let t = out.len();
    let b = &out.boundaries;
    let mut scored = Vec::new();
    for d in 1..=out.max_duration() {
        for ts in 0..t {
            if !out.confidence.is_valid(d, ts) {
                continue;
            }
            let score = b.start[ts] * b.end[ts + d - 1] * out.confidence.get(d, ts);
            let interval = TemporalInterval::with_duration(ts, d).expect("duration is at least one frame");
            scored.push(ScoredProposal::new(interval, score));
        }
    }
    scored
}

/// Gaussian Soft-NMS. Repeatedly selects the best remaining proposal and
/// multiplies every other remaining score by `exp(-iou^2 / sigma)`.
///
/// Returns the full re-scored list in selection order, which is descending.
pub fn soft_nms(proposals: &[ScoredProposal], sigma: f64) -> Result<Vec<ScoredProposal>> {
    soft_nms_limited(proposals, sigma, proposals.len())
}

/// Soft-NMS that stops after `limit` selections. The output equals the first
/// `limit` entries of [`soft_nms`].
pub fn soft_nms_limited(proposals: &[ScoredProposal], sigma: f64, limit: usize) -> Result<Vec<ScoredProposal>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "soft-NMS sigma must be positive, got {sigma}"
        )));
    }
    let mut remaining = proposals.to_vec();
    let mut kept = Vec::with_capacity(limit.min(proposals.len()));
    while kept.len() < limit && !remaining.is_empty() {
        let best = remaining
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| rank_order(a, b))
            .map(|(i, _)| i)
            .expect("non-empty");
        let selected = remaining.swap_remove(best);
        for p in remaining.iter_mut() {
            let overlap = iou(&selected.interval, &p.interval);
            if overlap > 0.0 {
                p.score *= (-overlap * overlap / sigma).exp();
            }
        }
        kept.push(selected);
    }
    Ok(kept)
}

/// The `k` best proposals under [`rank_order`].
pub fn top_k(proposals: &[ScoredProposal], k: usize) -> Vec<ScoredProposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(rank_order);
    sorted.truncate(k);
    sorted
}

/// Full decoding: score, Soft-NMS, keep the top `k`.
pub fn decode_proposals(out: &TeacherOutput, sigma: f64, k: usize) -> Result<Vec<ScoredProposal>> {
    let scored = score_proposals(out);
    let suppressed = soft_nms_limited(&scored, sigma, k)?;
    Ok(top_k(&suppressed, k))
}

fn boundary_bump(t: usize, center: usize, sharpness: f64) -> f64 {
    if sharpness <= 0.0 {
        return if t == center { 1.0 } else { 0.0 };
    }
    let x = t as f64 - center as f64;
    (-x * x / (2.0 * sharpness * sharpness)).exp()
}

/// Synthetic teacher whose boundaries are Gaussian bumps of width `sharpness`
/// at the ground-truth start and last frames, and whose confidence is the best
/// IoU of each candidate against the ground truth. `sharpness = 0` gives
/// one-hot boundaries.
pub fn oracle_teacher_output(gt: &[TemporalInterval], length: usize, sharpness: f64) -> Result<TeacherOutput> {
    if length == 0 {
        return Err(Error::InvalidArgument("sequence length must be positive".into()));
    }
    for g in gt {
        g.check_within(length)?;
    }
    let mut boundaries = BoundaryProbabilities::zeros(length);
    for t in 0..length {
        for g in gt {
            boundaries.start[t] = boundaries.start[t].max(boundary_bump(t, g.start(), sharpness));
            boundaries.end[t] = boundaries.end[t].max(boundary_bump(t, g.last(), sharpness));
        }
    }
    let confidence = best_iou_map(gt, length, length)?;
    TeacherOutput::new(boundaries, confidence)
}

/// Confidence map holding, per candidate, its best IoU against `targets`.
pub(crate) fn best_iou_map(targets: &[TemporalInterval], length: usize, max_duration: usize) -> Result<ConfidenceMap> {
    let mut map = ConfidenceMap::filled(max_duration, length, 0.0)?;
    if targets.is_empty() {
        return Ok(map);
    }
    for d in 1..=max_duration {
        for ts in 0..=(length - d) {
            let cand = TemporalInterval::with_duration(ts, d)?;
            let best = targets.iter().map(|g| iou(&cand, g)).fold(0.0, f64::max);
            map.set(d, ts, best);
        }
    }
    Ok(map)
}
