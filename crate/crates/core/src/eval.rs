//! Proposal, retrieval and caption metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::caption::TokenSentence;
use crate::error::{Error, Result};
use crate::proposal::ScoredProposal;
use crate::temporal::{iou, TemporalInterval};

pub const DEFAULT_MAX_PROPOSALS: usize = 100;
pub const DEFAULT_CAPTION_GATE: f64 = 0.5;
pub const CIDER_MAX_ORDER: usize = 4;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (10..20).map(|k| k as f64 / 20.0).collect()
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold {t} outside (0, 1]")));
    }
    Ok(())
}

/// Fraction of `gt` intervals hit with IoU >= `iou_t` by one of the first
/// `an` proposals. Empty ground truth counts as full recall.
pub fn recall_at(proposals: &[ScoredProposal], gt: &[TemporalInterval], an: usize, iou_t: f64) -> Result<f64> {
    check_threshold(iou_t)?;
    if gt.is_empty() {
        return Ok(1.0);
    }
    let top = &proposals[..an.min(proposals.len())];
    let hit = gt
        .iter()
        .filter(|g| top.iter().any(|p| iou(&p.interval, g) >= iou_t))
        .count();
    Ok(hit as f64 / gt.len() as f64)
}

/// Average recall as a function of the number of proposals, `AN = 1..=a_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArCurve {
    points: Vec<f64>,
}

impl ArCurve {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("AR curve"));
        }
        if points.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("AR values must lie in [0, 1]".into()));
        }
        Ok(Self { points })
    }

    pub fn max_an(&self) -> usize {
        self.points.len()
    }

    /// Value at `an` (1-based).
    pub fn at(&self, an: usize) -> f64 {
        self.points[an - 1]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

/// Ranked proposals and ground truth of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoProposals {
    pub proposals: Vec<ScoredProposal>,
    pub gt: Vec<TemporalInterval>,
}

/// AR curve: recall averaged over `thresholds` within each video, then over
/// videos.
pub fn ar_at_an(videos: &[VideoProposals], a_max: usize, thresholds: &[f64]) -> Result<ArCurve> {
    if videos.is_empty() {
        return Err(Error::EmptyInput("videos"));
    }
    if thresholds.is_empty() {
        return Err(Error::EmptyInput("IoU thresholds"));
    }
    if a_max == 0 {
        return Err(Error::InvalidArgument("maximum AN must be positive".into()));
    }
    for &t in thresholds {
        check_threshold(t)?;
    }
    let mut curve = vec![0.0; a_max];
    for v in videos {
        if v.gt.is_empty() {
            curve.iter_mut().for_each(|c| *c += 1.0);
            continue;
        }
        // first_hit[an - 1] counts (gt, threshold) pairs first covered at rank an
        let mut first_hit = vec![0usize; a_max];
        for g in &v.gt {
            let ious: Vec<f64> = v.proposals.iter().take(a_max).map(|p| iou(&p.interval, g)).collect();
            for &t in thresholds {
                if let Some(r) = ious.iter().position(|&x| x >= t) {
                    first_hit[r] += 1;
                }
            }
        }
        let denom = (v.gt.len() * thresholds.len()) as f64;
        let mut covered = 0;
        for (an, c) in curve.iter_mut().enumerate() {
            covered += first_hit[an];
            *c += covered as f64 / denom;
        }
    }
    let n = videos.len() as f64;
    ArCurve::new(curve.into_iter().map(|c| (c / n).min(1.0)).collect())
}

/// Trapezoidal area under the curve over `AN in [1, a_max]`, divided by
/// `a_max - 1`.
pub fn auc(curve: &ArCurve) -> Result<f64> {
    let p = curve.points();
    if p.len() < 2 {
        return Err(Error::InvalidArgument("AUC needs at least two curve points".into()));
    }
    let area: f64 = p.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok(area / (p.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r_at_1: f64,
    pub median_rank: usize,
}

/// 1-based rank of the true gallery item for each query. Higher similarity
/// ranks first; equal similarities rank the lower gallery index first.
pub fn true_ranks(sim: &[Vec<f64>], truth: &[usize]) -> Result<Vec<usize>> {
    if sim.is_empty() {
        return Err(Error::EmptyInput("similarity matrix"));
    }
    if sim.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} queries vs {} truth entries",
            sim.len(),
            truth.len()
        )));
    }
    let g = sim[0].len();
    sim.iter()
        .zip(truth)
        .map(|(row, &t)| {
            if row.len() != g || t >= g {
                return Err(Error::shape("similarity row or truth index out of shape"));
            }
            if row.iter().any(|x| x.is_nan()) {
                return Err(Error::InvalidArgument("NaN similarity".into()));
            }
            let target = row[t];
            Ok(1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > target || (s == target && j < t))
                .count())
        })
        .collect()
}

/// R@1 and median rank (lower middle for an even number of queries).
pub fn retrieval_metrics(sim: &[Vec<f64>], truth: &[usize]) -> Result<RetrievalMetrics> {
    let mut ranks = true_ranks(sim, truth)?;
    let r_at_1 = ranks.iter().filter(|&&r| r == 1).count() as f64 / ranks.len() as f64;
    ranks.sort_unstable();
    Ok(RetrievalMetrics {
        r_at_1,
        median_rank: ranks[(ranks.len() - 1) / 2],
    })
}

fn ngram_counts(tokens: &[u32], n: usize) -> BTreeMap<&[u32], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with up to `n`-gram precisions, multiple references per
/// candidate. Candidate counts are clipped by the maximum count over the
/// references; the reference length is the closest one (shorter on ties).
/// No smoothing: any zero precision gives 0. EOS is ignored.
pub fn corpus_bleu(candidates: &[TokenSentence], references: &[Vec<TokenSentence>], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("BLEU corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::shape(format!(
            "{} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!("BLEU order {n} outside 1..=4")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::EmptyInput("reference set"));
        }
        let c = cand.content();
        cand_len += c.len();
        ref_len += refs
            .iter()
            .map(|r| r.content().len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .expect("non-empty references");
        for k in 1..=n {
            let mut max_ref: BTreeMap<&[u32], usize> = BTreeMap::new();
            for r in refs {
                for (g, cnt) in ngram_counts(r.content(), k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            for (g, cnt) in ngram_counts(c, k) {
                matched[k - 1] += cnt.min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += cnt;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Corpus BLEU with a single reference per candidate.
pub fn bleu_n(candidates: &[TokenSentence], references: &[TokenSentence], n: usize) -> Result<f64> {
    let refs: Vec<Vec<TokenSentence>> = references.iter().map(|r| vec![r.clone()]).collect();
    corpus_bleu(candidates, &refs, n)
}

type TfIdf<'a> = Vec<BTreeMap<&'a [u32], f64>>;

fn tfidf<'a>(tokens: &'a [u32], df: &BTreeMap<&[u32], usize>, log_n: f64) -> (TfIdf<'a>, Vec<f64>) {
    let mut vecs = Vec::with_capacity(CIDER_MAX_ORDER);
    let mut norms = Vec::with_capacity(CIDER_MAX_ORDER);
    for k in 1..=CIDER_MAX_ORDER {
        let v: BTreeMap<&[u32], f64> = ngram_counts(tokens, k)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                (g, tf as f64 * (log_n - d.ln()))
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    (vecs, norms)
}

/// CIDEr over the corpus: TF-IDF n-gram vectors (raw term counts, document
/// frequency over each item's reference set), cosine similarity per order
/// averaged over references and orders 1..=4, times 10. No length penalty.
/// Returns the corpus mean and the per-item scores.
pub fn cider_scores(candidates: &[TokenSentence], references: &[Vec<TokenSentence>]) -> Result<(f64, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("CIDEr corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::shape(format!(
            "{} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::EmptyInput("reference set"));
    }
    let mut df: BTreeMap<&[u32], usize> = BTreeMap::new();
    for refs in references {
        let mut seen = BTreeSet::new();
        for r in refs {
            for k in 1..=CIDER_MAX_ORDER {
                seen.extend(ngram_counts(r.content(), k).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (candidates.len() as f64).ln();
    let scores: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            let (cv, cn) = tfidf(cand.content(), &df, log_n);
            let mut sum = 0.0;
            for r in refs {
                let (rv, rn) = tfidf(r.content(), &df, log_n);
                for k in 0..CIDER_MAX_ORDER {
                    let mut dot: f64 = cv[k]
                        .iter()
                        .map(|(g, x)| x * rv[k].get(g).copied().unwrap_or(0.0))
                        .sum();
                    if cn[k] != 0.0 && rn[k] != 0.0 {
                        dot /= cn[k] * rn[k];
                    }
                    sum += dot;
                }
            }
            10.0 * sum / (CIDER_MAX_ORDER * refs.len()) as f64
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}

/// Corpus CIDEr score.
pub fn cider(candidates: &[TokenSentence], references: &[Vec<TokenSentence>]) -> Result<f64> {
    Ok(cider_scores(candidates, references)?.0)
}

/// For each ground-truth event, the predicted caption of the highest-IoU
/// prediction with IoU >= `gate` (earlier prediction on ties), or
/// [`TokenSentence::empty`] when none qualifies.
pub fn pair_captions(
    predictions: &[(TemporalInterval, TokenSentence)],
    gt: &[(TemporalInterval, TokenSentence)],
    gate: f64,
) -> Result<Vec<(TokenSentence, TokenSentence)>> {
    check_threshold(gate)?;
    Ok(gt
        .iter()
        .map(|(g, reference)| {
            let mut best: Option<(f64, &TokenSentence)> = None;
            for (p, s) in predictions {
                let v = iou(p, g);
                if v >= gate && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, s));
                }
            }
            let cand = best.map_or_else(TokenSentence::empty, |(_, s)| s.clone());
            (cand, reference.clone())
        })
        .collect())
}

/// Caption quality over gated (prediction, ground truth) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    pub bleu: [f64; 4],
    pub cider: f64,
    pub matched: usize,
    pub total: usize,
}

pub fn caption_scores(pairs: &[(TokenSentence, TokenSentence)]) -> Result<CaptionScores> {
    let cands: Vec<TokenSentence> = pairs.iter().map(|p| p.0.clone()).collect();
    let refs: Vec<Vec<TokenSentence>> = pairs.iter().map(|p| vec![p.1.clone()]).collect();
    let mut bleu = [0.0; 4];
    for (k, b) in bleu.iter_mut().enumerate() {
        *b = corpus_bleu(&cands, &refs, k + 1)?;
    }
    Ok(CaptionScores {
        bleu,
        cider: cider(&cands, &refs)?,
        matched: cands.iter().filter(|c| !c.content().is_empty()).count(),
        total: pairs.len(),
    })
}
