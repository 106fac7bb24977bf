//! Cross-modal proposal–sentence matching.
//!
//! Clips and sentences are embedded by linear maps over mean-pooled features
//! into a shared space. Training combines a margin contrastive loss on
//! cosine distances with a cycle-consistency loss on soft nearest neighbours;
//! each video is evenly split into as many clips as its paragraph has
//! sentences to form the positive pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::caption::TokenSentence;
use crate::error::{Error, Result};
use crate::proposal::ScoredProposal;
use crate::temporal::{even_split, FeatureSequence, TemporalInterval};

pub const DEFAULT_MARGIN: f64 = 0.2;

/// Small enough that the soft nearest neighbour of the cycle loss starts
/// unsaturated on unit-scale features; a saturated softmax has no gradient.
pub const INIT_SCALE: f64 = 0.1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// A vector in the shared visual–lexical space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("embedding must be finite".into()));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(Self(self.0.iter().map(|x| x / n).collect()))
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.iter().map(|x| x * k).collect())
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn add_scaled(acc: &mut [f64], k: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += k * v;
    }
}

/// Cosine distance `1 - a.b / (|a| |b|)`.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_pair(a.as_slice(), b.as_slice())?;
    Ok(cosine_distance_grad(a.as_slice(), b.as_slice()).0)
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("embedding dims {} vs {}", a.len(), b.len())));
    }
    if norm(a) == 0.0 || norm(b) == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(())
}

/// Distance plus its gradients with respect to both arguments.
fn cosine_distance_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let cos = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(y / (na * nb) - cos * x / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(x / (na * nb) - cos * y / (nb * nb)))
        .collect();
    (1.0 - cos, ga, gb)
}

/// Linear visual and lexical encoders into an `embed_dim` space. Matrices are
/// row-major `embed_dim x input_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedParams {
    pub embed_dim: usize,
    pub visual_dim: usize,
    pub lexical_dim: usize,
    pub visual: Vec<f64>,
    pub lexical: Vec<f64>,
}

impl EmbedParams {
    pub fn identity(dim: usize) -> Self {
        let eye: Vec<f64> = (0..dim * dim)
            .map(|i| if i / dim == i % dim { 1.0 } else { 0.0 })
            .collect();
        Self {
            embed_dim: dim,
            visual_dim: dim,
            lexical_dim: dim,
            visual: eye.clone(),
            lexical: eye,
        }
    }

    /// Gaussian init with standard deviation `INIT_SCALE / sqrt(input_dim)`.
    pub fn random(embed_dim: usize, visual_dim: usize, lexical_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, INIT_SCALE / (cols as f64).sqrt()).expect("valid std");
            (0..rows * cols).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>()
        };
        let visual = draw(embed_dim, visual_dim);
        let lexical = draw(embed_dim, lexical_dim);
        Self {
            embed_dim,
            visual_dim,
            lexical_dim,
            visual,
            lexical,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.visual.len() != self.embed_dim * self.visual_dim
            || self.lexical.len() != self.embed_dim * self.lexical_dim
        {
            return Err(Error::shape("embedding parameters inconsistent with their dims"));
        }
        Ok(())
    }

    fn project(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
        m.chunks_exact(cols).map(|row| dot(row, x)).collect()
    }

    /// Unnormalized visual projection of a pooled feature vector.
    pub fn project_visual(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.visual_dim {
            return Err(Error::shape(format!(
                "visual input dim {} vs {}",
                x.len(),
                self.visual_dim
            )));
        }
        Ok(Self::project(&self.visual, self.visual_dim, x))
    }

    /// Unnormalized lexical projection of a sentence vector.
    pub fn project_lexical(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.lexical_dim {
            return Err(Error::shape(format!(
                "lexical input dim {} vs {}",
                x.len(),
                self.lexical_dim
            )));
        }
        Ok(Self::project(&self.lexical, self.lexical_dim, x))
    }

    /// L2-normalized sentence embedding.
    pub fn embed_sentence(&self, x: &[f64]) -> Result<Embedding> {
        Embedding::new(self.project_lexical(x)?)?.normalized()
    }
}

/// L2-normalized projection of the mean feature row inside `interval`.
pub fn embed_clip(feats: &FeatureSequence, interval: &TemporalInterval, params: &EmbedParams) -> Result<Embedding> {
    let mean = feats.mean_over(interval)?;
    Embedding::new(params.project_visual(&mean)?)?.normalized()
}

/// Gradients of the contrastive loss for its four embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrads {
    pub clip_pos: Vec<f64>,
    pub sentence_pos: Vec<f64>,
    pub clip_neg: Vec<f64>,
    pub sentence_neg: Vec<f64>,
}

/// Margin contrastive loss for a positive pair and its negatives:
///
/// ```text
/// max(0, h + D(c+, s+) - D(c-, s+)) + max(0, h + D(c+, s+) - D(c+, s-))
///   + max(0, h - D(c+, c-)) + max(0, h - D(s+, s-))
/// ```
///
/// Hinges with argument exactly zero contribute a zero subgradient.
pub fn contrastive_loss(
    clip_pos: &Embedding,
    sentence_pos: &Embedding,
    clip_neg: &Embedding,
    sentence_neg: &Embedding,
    margin: f64,
) -> Result<(f64, ContrastiveGrads)> {
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin must be non-negative, got {margin}"
        )));
    }
    let (cp, sp, cn, sn) = (
        clip_pos.as_slice(),
        sentence_pos.as_slice(),
        clip_neg.as_slice(),
        sentence_neg.as_slice(),
    );
    for (a, b) in [(cp, sp), (cn, sn), (cp, cn)] {
        check_pair(a, b)?;
    }
    let zeros = || vec![0.0; cp.len()];
    let mut g = ContrastiveGrads {
        clip_pos: zeros(),
        sentence_pos: zeros(),
        clip_neg: zeros(),
        sentence_neg: zeros(),
    };
    let (d_pos, g_pos_c, g_pos_s) = cosine_distance_grad(cp, sp);
    let (d_cn_sp, g_cn, g_sp) = cosine_distance_grad(cn, sp);
    let (d_cp_sn, g_cp, g_sn) = cosine_distance_grad(cp, sn);
    let (d_cc, g_cc_p, g_cc_n) = cosine_distance_grad(cp, cn);
    let (d_ss, g_ss_p, g_ss_n) = cosine_distance_grad(sp, sn);

    let mut value = 0.0;
    let t = margin + d_pos - d_cn_sp;
    if t > 0.0 {
        value += t;
        add_scaled(&mut g.clip_pos, 1.0, &g_pos_c);
        add_scaled(&mut g.sentence_pos, 1.0, &g_pos_s);
        add_scaled(&mut g.clip_neg, -1.0, &g_cn);
        add_scaled(&mut g.sentence_pos, -1.0, &g_sp);
    }
    let t = margin + d_pos - d_cp_sn;
    if t > 0.0 {
        value += t;
        add_scaled(&mut g.clip_pos, 1.0, &g_pos_c);
        add_scaled(&mut g.sentence_pos, 1.0, &g_pos_s);
        add_scaled(&mut g.clip_pos, -1.0, &g_cp);
        add_scaled(&mut g.sentence_neg, -1.0, &g_sn);
    }
    let t = margin - d_cc;
    if t > 0.0 {
        value += t;
        add_scaled(&mut g.clip_pos, -1.0, &g_cc_p);
        add_scaled(&mut g.clip_neg, -1.0, &g_cc_n);
    }
    let t = margin - d_ss;
    if t > 0.0 {
        value += t;
        add_scaled(&mut g.sentence_pos, -1.0, &g_ss_p);
        add_scaled(&mut g.sentence_neg, -1.0, &g_ss_n);
    }
    Ok((value, g))
}

fn softmax_neg_sq_dist(x: &[f64], keys: &[&[f64]]) -> Vec<f64> {
    let logits: Vec<f64> = keys.iter().map(|k| -sq_dist(x, k)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

fn weighted_sum(weights: &[f64], rows: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (w, r) in weights.iter().zip(rows) {
        add_scaled(&mut out, *w, r);
    }
    out
}

fn as_rows(v: &[Embedding]) -> Vec<&[f64]> {
    v.iter().map(Embedding::as_slice).collect()
}

fn check_sequence(v: &[Embedding], dim: usize, what: &'static str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    if v.iter().any(|e| e.dim() != dim) {
        return Err(Error::shape(format!("{what} have inconsistent dimensions")));
    }
    Ok(())
}

/// Soft nearest neighbour of `sentence` among `clips`: weights are the
/// softmax of negative squared distances, and the neighbour is their
/// weighted sum (not renormalized).
pub fn soft_nearest_clip(sentence: &Embedding, clips: &[Embedding]) -> Result<(Vec<f64>, Embedding)> {
    check_sequence(clips, sentence.dim(), "clips")?;
    let rows = as_rows(clips);
    let alphas = softmax_neg_sq_dist(sentence.as_slice(), &rows);
    let cbar = weighted_sum(&alphas, &rows);
    Ok((alphas, Embedding(cbar)))
}

/// Expected 1-based position of `cbar` among `sentences` under the softmax of
/// negative squared distances.
pub fn soft_location(cbar: &Embedding, sentences: &[Embedding]) -> Result<f64> {
    check_sequence(sentences, cbar.dim(), "sentences")?;
    let betas = softmax_neg_sq_dist(cbar.as_slice(), &as_rows(sentences));
    Ok(betas.iter().enumerate().map(|(j, b)| b * (j + 1) as f64).sum())
}

/// One cycle direction: each query walks to its soft nearest key and back to
/// the queries; the loss is the mean squared gap between the start index and
/// the recovered soft location. Returns the value and gradients for queries
/// and keys. Index constants receive no gradient.
fn cycle_direction(queries: &[&[f64]], keys: &[&[f64]]) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = queries.len();
    let dim = queries[0].len();
    let mut gq = vec![vec![0.0; dim]; n];
    let mut gk = vec![vec![0.0; dim]; keys.len()];
    let mut total = 0.0;
    for (i, x) in queries.iter().enumerate() {
        let alpha = softmax_neg_sq_dist(x, keys);
        let kbar = weighted_sum(&alpha, keys);
        let beta = softmax_neg_sq_dist(&kbar, queries);
        let u: f64 = beta.iter().enumerate().map(|(k, b)| b * (k + 1) as f64).sum();
        let target = (i + 1) as f64;
        total += (target - u).powi(2) / n as f64;

        let g_u = -2.0 * (target - u) / n as f64;
        let mut g_kbar = vec![0.0; dim];
        for (k, (b, xk)) in beta.iter().zip(queries).enumerate() {
            // d u / d logit_k = beta_k (k - u); logit_k = -|kbar - x_k|^2
            let g_logit = g_u * b * ((k + 1) as f64 - u);
            for d in 0..dim {
                let diff = kbar[d] - xk[d];
                g_kbar[d] -= 2.0 * g_logit * diff;
                gq[k][d] += 2.0 * g_logit * diff;
            }
        }
        let g_alpha: Vec<f64> = keys.iter().map(|kj| dot(&g_kbar, kj)).collect();
        let mean_g: f64 = alpha.iter().zip(&g_alpha).map(|(a, g)| a * g).sum();
        for (j, (a, kj)) in alpha.iter().zip(keys).enumerate() {
            add_scaled(&mut gk[j], *a, &g_kbar);
            let g_logit = a * (g_alpha[j] - mean_g);
            for d in 0..dim {
                let diff = x[d] - kj[d];
                gq[i][d] -= 2.0 * g_logit * diff;
                gk[j][d] += 2.0 * g_logit * diff;
            }
        }
    }
    (total, gq, gk)
}

/// Gradients of the cycle loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleGrads {
    pub sentences: Vec<Vec<f64>>,
    pub clips: Vec<Vec<f64>>,
}

/// Cycle-consistency loss between aligned sentence and clip sequences:
/// sentence→clip→sentence plus clip→sentence→clip, each averaged over `N`.
pub fn cycle_loss(sentences: &[Embedding], clips: &[Embedding]) -> Result<(f64, CycleGrads)> {
    if sentences.len() != clips.len() {
        return Err(Error::shape(format!(
            "{} sentences vs {} clips",
            sentences.len(),
            clips.len()
        )));
    }
    let dim = sentences.first().ok_or(Error::EmptyInput("sentences"))?.dim();
    check_sequence(sentences, dim, "sentences")?;
    check_sequence(clips, dim, "clips")?;
    let (s, c) = (as_rows(sentences), as_rows(clips));
    let (l_sent, gs1, gc1) = cycle_direction(&s, &c);
    let (l_clip, gc2, gs2) = cycle_direction(&c, &s);
    let sum = |a: Vec<Vec<f64>>, b: Vec<Vec<f64>>| {
        a.into_iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(&y).map(|(p, q)| p + q).collect())
            .collect()
    };
    Ok((
        l_sent + l_clip,
        CycleGrads {
            sentences: sum(gs1, gs2),
            clips: sum(gc1, gc2),
        },
    ))
}

/// One contrastive tuple `(c+, s+, c-, s-)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTuple {
    pub clip_pos: Embedding,
    pub sentence_pos: Embedding,
    pub clip_neg: Embedding,
    pub sentence_neg: Embedding,
}

/// Sampled tuples plus aligned sentence/clip sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchingBatch {
    pub tuples: Vec<ContrastiveTuple>,
    pub sequences: Vec<(Vec<Embedding>, Vec<Embedding>)>,
}

impl MatchingBatch {
    /// All-pairs batch for aligned sequences: every `j != i` serves as the
    /// negative for positive pair `i`.
    pub fn all_pairs(sentences: Vec<Embedding>, clips: Vec<Embedding>) -> Self {
        let mut tuples = Vec::new();
        for i in 0..clips.len().min(sentences.len()) {
            for j in 0..clips.len().min(sentences.len()) {
                if i != j {
                    tuples.push(ContrastiveTuple {
                        clip_pos: clips[i].clone(),
                        sentence_pos: sentences[i].clone(),
                        clip_neg: clips[j].clone(),
                        sentence_neg: sentences[j].clone(),
                    });
                }
            }
        }
        Self {
            tuples,
            sequences: vec![(sentences, clips)],
        }
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.tuples.extend(other.tuples);
        self.sequences.extend(other.sequences);
        self
    }
}

/// Contrastive loss summed over the tuples plus cycle loss summed over the
/// sequences.
pub fn matching_loss(batch: &MatchingBatch, margin: f64) -> Result<f64> {
    let mut total = 0.0;
    for t in &batch.tuples {
        total += contrastive_loss(&t.clip_pos, &t.sentence_pos, &t.clip_neg, &t.sentence_neg, margin)?.0;
    }
    for (s, c) in &batch.sequences {
        total += cycle_loss(s, c)?.0;
    }
    Ok(total)
}

type Rows = Vec<Vec<f64>>;

/// Loss and gradients for one aligned video under the all-pairs scheme.
fn aligned_loss(sentences: &[Embedding], clips: &[Embedding], margin: f64) -> Result<(f64, Rows, Rows)> {
    let (mut value, cg) = cycle_loss(sentences, clips)?;
    let (mut gs, mut gc) = (cg.sentences, cg.clips);
    let n = clips.len();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (v, g) = contrastive_loss(&clips[i], &sentences[i], &clips[j], &sentences[j], margin)?;
            value += v;
            add_scaled(&mut gc[i], 1.0, &g.clip_pos);
            add_scaled(&mut gs[i], 1.0, &g.sentence_pos);
            add_scaled(&mut gc[j], 1.0, &g.clip_neg);
            add_scaled(&mut gs[j], 1.0, &g.sentence_neg);
        }
    }
    Ok((value, gs, gc))
}

/// One training video: its features and the lexical vectors of its paragraph
/// sentences, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingVideo {
    pub features: FeatureSequence,
    pub sentences: Vec<Vec<f64>>,
}

/// Optimizer settings for [`train_matcher`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    /// Adam step size.
    pub lr: f64,
    pub margin: f64,
    /// Videos per update; `None` uses the whole dataset.
    pub batch_size: Option<usize>,
    /// Seeds the mini-batch order.
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.01,
            margin: DEFAULT_MARGIN,
            batch_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EmbedParams,
    /// Full-dataset loss before each epoch, followed by the final loss.
    pub trace: Vec<f64>,
}

struct VideoCache {
    clip_means: Vec<Vec<f64>>,
    sentences: Vec<Vec<f64>>,
}

fn prepare(dataset: &[MatchingVideo], params: &EmbedParams) -> Result<Vec<VideoCache>> {
    dataset
        .iter()
        .map(|v| {
            if v.sentences.is_empty() {
                return Err(Error::EmptyInput("paragraph sentences"));
            }
            if v.features.dim() != params.visual_dim {
                return Err(Error::shape(format!(
                    "feature dim {} vs visual dim {}",
                    v.features.dim(),
                    params.visual_dim
                )));
            }
            if v.sentences.iter().any(|s| s.len() != params.lexical_dim) {
                return Err(Error::shape("sentence vector dim vs lexical dim"));
            }
            let clips = even_split(v.features.len(), v.sentences.len())?;
            let clip_means = clips
                .iter()
                .map(|c| v.features.mean_over(c))
                .collect::<Result<Vec<_>>>()?;
            Ok(VideoCache {
                clip_means,
                sentences: v.sentences.clone(),
            })
        })
        .collect()
}

fn dataset_loss(
    cache: &[VideoCache],
    videos: impl Iterator<Item = usize>,
    params: &EmbedParams,
    margin: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut grads = grads;
    for v in videos {
        let video = &cache[v];
        let clips = video
            .clip_means
            .iter()
            .map(|m| Embedding::new(EmbedParams::project(&params.visual, params.visual_dim, m)))
            .collect::<Result<Vec<_>>>()?;
        let sentences = video
            .sentences
            .iter()
            .map(|s| Embedding::new(EmbedParams::project(&params.lexical, params.lexical_dim, s)))
            .collect::<Result<Vec<_>>>()?;
        let (value, gs, gc) = aligned_loss(&sentences, &clips, margin)?;
        total += value;
        if let Some((gv, gl)) = grads.as_mut() {
            for (g, m) in gc.iter().zip(&video.clip_means) {
                outer_add(gv, g, m);
            }
            for (g, s) in gs.iter().zip(&video.sentences) {
                outer_add(gl, g, s);
            }
        }
    }
    Ok(total)
}

fn outer_add(acc: &mut [f64], left: &[f64], right: &[f64]) {
    let cols = right.len();
    for (r, l) in left.iter().enumerate() {
        add_scaled(&mut acc[r * cols..(r + 1) * cols], *l, right);
    }
}

/// Total matching loss of `params` over `dataset` (all-pairs contrastive
/// terms plus cycle terms, clips from an even split of each video).
pub fn dataset_matching_loss(dataset: &[MatchingVideo], params: &EmbedParams, margin: f64) -> Result<f64> {
    params.check()?;
    let cache = prepare(dataset, params)?;
    dataset_loss(&cache, 0..cache.len(), params, margin, None)
}

/// Gradient of [`dataset_matching_loss`] with respect to the visual and
/// lexical projection matrices.
pub fn dataset_matching_grad(
    dataset: &[MatchingVideo],
    params: &EmbedParams,
    margin: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    params.check()?;
    let cache = prepare(dataset, params)?;
    let mut gv = vec![0.0; params.visual.len()];
    let mut gl = vec![0.0; params.lexical.len()];
    let value = dataset_loss(&cache, 0..cache.len(), params, margin, Some((&mut gv, &mut gl)))?;
    Ok((value, gv, gl))
}

/// Adam on the matching loss through the linear encoders, one update per
/// batch. Embeddings are used unnormalized during training: the contrastive
/// term is scale-invariant and the cycle term sharpens as the embeddings
/// spread. The two terms' gradients scale oppositely with the embedding norm,
/// which a fixed-step descent cannot balance.
pub fn train_matcher(dataset: &[MatchingVideo], init: &EmbedParams, hyper: &TrainHyper) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("matching dataset"));
    }
    init.check()?;
    let cache = prepare(dataset, init)?;
    let mut params = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..cache.len()).collect();
    let batch = hyper.batch_size.unwrap_or(cache.len()).max(1);
    let mut trace = Vec::with_capacity(hyper.epochs + 1);
    let mut visual_opt = Adam::new(params.visual.len());
    let mut lexical_opt = Adam::new(params.lexical.len());

    let full = |p: &EmbedParams| dataset_loss(&cache, 0..cache.len(), p, hyper.margin, None);
    for epoch in 0..hyper.epochs {
        let loss = full(&params)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: epoch, loss });
        }
        trace.push(loss);
        if hyper.batch_size.is_some() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let mut gv = vec![0.0; params.visual.len()];
            let mut gl = vec![0.0; params.lexical.len()];
            dataset_loss(
                &cache,
                chunk.iter().copied(),
                &params,
                hyper.margin,
                Some((&mut gv, &mut gl)),
            )?;
            visual_opt.step(&mut params.visual, &gv, hyper.lr);
            lexical_opt.step(&mut params.lexical, &gl, hyper.lr);
        }
    }
    let loss = full(&params)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: hyper.epochs,
            loss,
        });
    }
    trace.push(loss);
    Ok(TrainOutcome { params, trace })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((x, g), m), v) in x.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// A sentence matched to the proposal most similar to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub sentence_index: usize,
    pub proposal: ScoredProposal,
    pub similarity: f64,
}

/// Assigns each sentence the proposal with the highest cosine similarity to
/// it; ties go to the earlier start, then the shorter proposal, then the
/// earlier list position. Proposals may be reused across sentences.
pub fn assign_proposals(
    proposals: &[ScoredProposal],
    feats: &FeatureSequence,
    sentences: &[Embedding],
    params: &EmbedParams,
) -> Result<Vec<MatchPair>> {
    if proposals.is_empty() {
        return Err(Error::EmptyInput("proposals"));
    }
    let clips = proposals
        .iter()
        .map(|p| embed_clip(feats, &p.interval, params))
        .collect::<Result<Vec<_>>>()?;
    sentences
        .iter()
        .enumerate()
        .map(|(sentence_index, s)| {
            let mut best: Option<(usize, f64)> = None;
            for (k, c) in clips.iter().enumerate() {
                let sim = 1.0 - cosine_distance(c, s)?;
                let better = match best {
                    None => true,
                    Some((b, best_sim)) => {
                        let (pb, pk) = (&proposals[b].interval, &proposals[k].interval);
                        sim > best_sim || (sim == best_sim && (pk.start(), pk.len()) < (pb.start(), pb.len()))
                    }
                };
                if better {
                    best = Some((k, sim));
                }
            }
            let (k, similarity) = best.expect("non-empty proposals");
            Ok(MatchPair {
                sentence_index,
                proposal: proposals[k],
                similarity,
            })
        })
        .collect()
}

/// Builds a pseudo video by repeating each image feature `frames_per_image`
/// times with additive Gaussian noise; the paragraph is the captions in order.
pub fn make_pseudo_video(
    images: &[Vec<f64>],
    captions: &[TokenSentence],
    frames_per_image: usize,
    sigma: f64,
    seed: u64,
) -> Result<(FeatureSequence, Vec<TokenSentence>)> {
    if images.is_empty() {
        return Err(Error::EmptyInput("images"));
    }
    if images.len() != captions.len() {
        return Err(Error::shape(format!(
            "{} images vs {} captions",
            images.len(),
            captions.len()
        )));
    }
    if frames_per_image == 0 {
        return Err(Error::InvalidArgument("frames per image must be positive".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be non-negative, got {sigma}"
        )));
    }
    let dim = images[0].len();
    if images.iter().any(|im| im.len() != dim) {
        return Err(Error::shape("images have inconsistent dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("non-negative sigma");
    let mut data = Vec::with_capacity(images.len() * frames_per_image * dim);
    for im in images {
        for _ in 0..frames_per_image {
            data.extend(im.iter().map(|x| x + noise.sample(&mut rng)));
        }
    }
    Ok((
        FeatureSequence::new(images.len() * frames_per_image, dim, data)?,
        captions.to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn iv(s: usize, t: usize) -> TemporalInterval {
        TemporalInterval::new(s, t).unwrap()
    }

    #[test]
    fn cosine_distance_examples() {
        assert_eq!(cosine_distance(&e(&[1.0, 0.0]), &e(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(cosine_distance(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(cosine_distance(&e(&[1.0, 0.0]), &e(&[-1.0, 0.0])).unwrap(), 2.0);
        assert!(matches!(
            cosine_distance(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn embed_clip_examples() {
        let p = EmbedParams::identity(2);
        let constant = FeatureSequence::new(6, 2, [0.2, 0.7].repeat(6)).unwrap();
        let a = embed_clip(&constant, &iv(0, 2), &p).unwrap();
        let b = embed_clip(&constant, &iv(3, 6), &p).unwrap();
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| (x - y).abs() < 1e-15));

        let single = FeatureSequence::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(embed_clip(&single, &iv(0, 1), &p).unwrap().as_slice(), &[0.6, 0.8]);

        let two = FeatureSequence::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let got = embed_clip(&two, &iv(0, 2), &p).unwrap();
        assert!((got.as_slice()[0] - h).abs() < 1e-15 && (got.as_slice()[1] - h).abs() < 1e-15);

        assert!(embed_clip(&two, &iv(1, 3), &p).is_err());
        let zero = FeatureSequence::zeros(2, 2).unwrap();
        assert!(matches!(
            embed_clip(&zero, &iv(0, 2), &p),
            Err(Error::DegenerateEmbedding)
        ));
    }

    /// Unit vector at angle `theta` in the plane.
    fn at(theta: f64) -> Embedding {
        e(&[theta.cos(), theta.sin()])
    }

    /// Angle with cosine distance `d` from the positive x axis.
    fn angle_for(d: f64) -> f64 {
        (1.0 - d).acos()
    }

    #[test]
    fn contrastive_hand_example() {
        // place the four embeddings in 3D so that all five distances match
        // the worked example: D(c+,s+)=0.1, D(c-,s+)=0.5, D(c+,s-)=0.05,
        // D(c+,c-)=0.3, D(s+,s-)=0.1. Only the hinge values matter, so
        // evaluate the closed form directly on the given distances too.
        let h: f64 = 0.2;
        let (d_pos, d_cn_sp, d_cp_sn, d_cc, d_ss): (f64, f64, f64, f64, f64) = (0.1, 0.5, 0.05, 0.3, 0.1);
        let closed =
            (h + d_pos - d_cn_sp).max(0.0) + (h + d_pos - d_cp_sn).max(0.0) + (h - d_cc).max(0.0) + (h - d_ss).max(0.0);
        assert!((closed - 0.35).abs() < 1e-12);

        // realize a configuration: c+ on the x axis, s+ and c- in the plane,
        // s- solved for its distances to c+ and s+.
        let cp = e(&[1.0, 0.0, 0.0]);
        let sp = at(angle_for(d_pos));
        let sp = e(&[sp.as_slice()[0], sp.as_slice()[1], 0.0]);
        let cos_sn_cp = 1.0 - d_cp_sn;
        let cos_sn_sp = 1.0 - d_ss;
        let (a, b) = (sp.as_slice()[0], sp.as_slice()[1]);
        let y = (cos_sn_sp - a * cos_sn_cp) / b;
        let z = (1.0 - cos_sn_cp * cos_sn_cp - y * y).sqrt();
        let sn = e(&[cos_sn_cp, y, z]);
        // c- at distance 0.3 from c+ and 0.5 from s+
        let cos_cn_cp = 1.0 - d_cc;
        let cos_cn_sp = 1.0 - d_cn_sp;
        let y = (cos_cn_sp - a * cos_cn_cp) / b;
        let z = -(1.0 - cos_cn_cp * cos_cn_cp - y * y).sqrt();
        let cn = e(&[cos_cn_cp, y, z]);
        for (x, y, want) in [
            (&cp, &sp, d_pos),
            (&cn, &sp, d_cn_sp),
            (&cp, &sn, d_cp_sn),
            (&cp, &cn, d_cc),
            (&sp, &sn, d_ss),
        ] {
            assert!((cosine_distance(x, y).unwrap() - want).abs() < 1e-12);
        }
        let (v, _) = contrastive_loss(&cp, &sp, &cn, &sn, h).unwrap();
        assert!((v - 0.35).abs() < 1e-12, "{v}");
    }

    #[test]
    fn contrastive_inactive_when_negatives_antiparallel() {
        let p = e(&[0.3, -0.4]);
        let n = p.scaled(-2.0);
        let (v, g) = contrastive_loss(&p, &p, &n, &n, 0.2).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.clip_pos.iter().all(|x| *x == 0.0));
        assert!(contrastive_loss(&p, &p, &n, &n, -0.1).is_err());
        assert!(contrastive_loss(&p, &e(&[0.0, 0.0]), &n, &n, 0.2).is_err());
    }

    #[test]
    fn soft_nearest_clip_examples() {
        let c = e(&[0.5, -1.0]);
        let (alpha, cbar) = soft_nearest_clip(&e(&[3.0, 3.0]), &[c.clone(), c.clone(), c.clone()]).unwrap();
        assert!(alpha.iter().all(|a| (a - 1.0 / 3.0).abs() < 1e-15));
        assert!(cbar
            .as_slice()
            .iter()
            .zip(c.as_slice())
            .all(|(x, y)| (x - y).abs() < 1e-15));

        let (alpha, cbar) = soft_nearest_clip(&e(&[1.0, 1.0]), std::slice::from_ref(&c)).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(cbar, c);

        let c1 = e(&[0.0, 0.0]);
        let c2 = e(&[2.0, 0.0]);
        let (alpha, _) = soft_nearest_clip(&c1, &[c1.clone(), c2]).unwrap();
        let w = (-4.0f64).exp();
        assert!((alpha[0] - 1.0 / (1.0 + w)).abs() < 1e-15);
        assert!((alpha[1] - w / (1.0 + w)).abs() < 1e-15);
        assert!((alpha[0] - 0.9820).abs() < 1e-4);
        assert!(soft_nearest_clip(&c, &[]).is_err());
    }

    #[test]
    fn soft_location_examples() {
        let s = e(&[1.0, 2.0]);
        let u = soft_location(&e(&[0.0, 0.0]), &[s.clone(), s.clone(), s.clone(), s.clone()]).unwrap();
        assert!((u - 2.5).abs() < 1e-12);
        assert_eq!(soft_location(&e(&[5.0, 5.0]), &[s]).unwrap(), 1.0);

        let sentences = [e(&[3.0, 0.0]), e(&[0.0, 0.0]), e(&[0.0, 3.0])];
        let u = soft_location(&sentences[1], &sentences).unwrap();
        let w = (-9.0f64).exp();
        assert!((u - (w + 2.0 + 3.0 * w) / (1.0 + 2.0 * w)).abs() < 1e-12);
        assert!((u - 2.0).abs() < 1e-3);
    }

    #[test]
    fn cycle_loss_examples() {
        let (v, _) = cycle_loss(&[e(&[0.4, 0.1])], &[e(&[-3.0, 2.0])]).unwrap();
        assert_eq!(v, 0.0);

        let x = e(&[0.3, 0.3]);
        let (v, _) = cycle_loss(&[x.clone(), x.clone(), x.clone()], &[x.clone(), x.clone(), x.clone()]).unwrap();
        assert!((v - 4.0 / 3.0).abs() < 1e-12);

        assert!(cycle_loss(std::slice::from_ref(&x), &[x.clone(), x.clone()]).is_err());
    }

    #[test]
    fn matching_loss_additivity() {
        assert_eq!(matching_loss(&MatchingBatch::default(), 0.2).unwrap(), 0.0);

        let x = e(&[0.3, 0.3]);
        let same = vec![x.clone(), x.clone(), x.clone()];
        let cycle_only = MatchingBatch {
            tuples: vec![],
            sequences: vec![(same.clone(), same.clone())],
        };
        assert!((matching_loss(&cycle_only, 0.2).unwrap() - 4.0 / 3.0).abs() < 1e-12);

        let tuple = ContrastiveTuple {
            clip_pos: e(&[1.0, 0.0]),
            sentence_pos: at(0.3),
            clip_neg: at(1.1),
            sentence_neg: at(-0.2),
        };
        let con = contrastive_loss(
            &tuple.clip_pos,
            &tuple.sentence_pos,
            &tuple.clip_neg,
            &tuple.sentence_neg,
            0.2,
        )
        .unwrap()
        .0;
        let both = MatchingBatch {
            tuples: vec![tuple.clone()],
            sequences: cycle_only.sequences.clone(),
        };
        assert!((matching_loss(&both, 0.2).unwrap() - con - 4.0 / 3.0).abs() < 1e-12);
        let con_only = MatchingBatch {
            tuples: vec![tuple],
            sequences: vec![],
        };
        assert_eq!(matching_loss(&con_only, 0.2).unwrap(), con);
    }

    fn planted_video(seed: u64) -> MatchingVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let (n, len, dim) = (3, 12, 4);
        let mut rows = Vec::new();
        for t in 0..len {
            let event = t * n / len;
            rows.push(
                (0..dim)
                    .map(|d| if d == event { 3.0 } else { 0.0 } + noise.sample(&mut rng))
                    .collect::<Vec<_>>(),
            );
        }
        let features = FeatureSequence::from_rows(&rows).unwrap();
        let sentences = even_split(len, n)
            .unwrap()
            .iter()
            .map(|c| features.mean_over(c).unwrap())
            .collect();
        MatchingVideo { features, sentences }
    }

    #[test]
    fn train_matcher_with_zero_lr_keeps_params() {
        let data = vec![planted_video(1)];
        let init = EmbedParams::random(4, 4, 4, 3);
        let hyper = TrainHyper {
            epochs: 5,
            lr: 0.0,
            ..TrainHyper::default()
        };
        let out = train_matcher(&data, &init, &hyper).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.trace.len(), 6);
        assert!(out.trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn train_matcher_reports_divergence() {
        let data = vec![planted_video(1), planted_video(2)];
        let init = EmbedParams::random(4, 4, 4, 3);
        let hyper = TrainHyper {
            epochs: 50,
            lr: 1e300,
            ..TrainHyper::default()
        };
        assert!(train_matcher(&data, &init, &hyper).is_err());
        assert!(train_matcher(&[], &init, &TrainHyper::default()).is_err());
    }

    #[test]
    fn small_steps_give_a_non_increasing_trace() {
        let data = crate::synth::gen_synthetic(&crate::synth::SynthSpec::default()).unwrap();
        let videos = data.matching_videos();
        assert_eq!(videos.len(), 4);
        let init = EmbedParams::random(8, 8, 8, 1);
        let hyper = TrainHyper {
            epochs: 300,
            lr: 1e-3,
            ..TrainHyper::default()
        };
        let trace = train_matcher(&videos, &init, &hyper).unwrap().trace;
        let rises = trace.windows(2).map(|w| w[1] - w[0]).fold(f64::MIN, f64::max);
        assert!(rises <= 1e-6, "largest rise {rises}");
        assert!(trace[300] < trace[0]);
    }

    #[test]
    fn minibatch_training_is_seeded() {
        let data: Vec<_> = (0..4).map(planted_video).collect();
        let init = EmbedParams::random(4, 4, 4, 9);
        let hyper = TrainHyper {
            epochs: 10,
            lr: 0.01,
            batch_size: Some(2),
            seed: 5,
            ..TrainHyper::default()
        };
        let a = train_matcher(&data, &init, &hyper).unwrap();
        let b = train_matcher(&data, &init, &hyper).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn assign_examples() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let feats = FeatureSequence::from_rows(&rows).unwrap();
        let p = EmbedParams::identity(2);
        let props = [
            ScoredProposal::new(iv(2, 4), 0.9),
            ScoredProposal::new(iv(0, 2), 0.8),
            ScoredProposal::new(iv(0, 4), 0.7),
        ];
        let sents = [e(&[1.0, 0.0]), e(&[0.0, 1.0])];
        let pairs = assign_proposals(&props, &feats, &sents, &p).unwrap();
        assert_eq!(pairs[0].proposal.interval, iv(0, 2));
        assert_eq!(pairs[1].proposal.interval, iv(2, 4));
        assert!((pairs[0].similarity - 1.0).abs() < 1e-12);

        let only = [props[2]];
        let pairs = assign_proposals(&only, &feats, &sents, &p).unwrap();
        assert!(pairs.iter().all(|m| m.proposal == props[2]));

        // identical similarity: earlier start wins regardless of list order
        let constant = FeatureSequence::new(6, 2, [1.0, 1.0].repeat(6)).unwrap();
        let tied = [ScoredProposal::new(iv(3, 5), 0.9), ScoredProposal::new(iv(1, 3), 0.1)];
        let pairs = assign_proposals(&tied, &constant, &sents[..1], &p).unwrap();
        assert_eq!(pairs[0].proposal.interval, iv(1, 3));

        assert!(assign_proposals(&[], &feats, &sents, &p).is_err());
    }

    #[test]
    fn pseudo_video_examples() {
        let images = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let caps = vec![
            TokenSentence::new(vec![5, 6]).unwrap(),
            TokenSentence::new(vec![7]).unwrap(),
        ];
        let (seq, para) = make_pseudo_video(&images, &caps, 3, 0.0, 1).unwrap();
        assert_eq!(seq.len(), 6);
        assert!(seq.rows().take(3).all(|r| r == [1.0, 2.0]));
        assert!(seq.rows().skip(3).all(|r| r == [-1.0, 0.5]));
        assert_eq!(para, caps);

        let (seq, _) = make_pseudo_video(&images, &caps, 1, 0.0, 1).unwrap();
        assert_eq!(seq.as_slice(), &[1.0, 2.0, -1.0, 0.5]);

        let a = make_pseudo_video(&images, &caps, 4, 0.3, 11).unwrap();
        assert_eq!(a, make_pseudo_video(&images, &caps, 4, 0.3, 11).unwrap());
        assert!(make_pseudo_video(&images, &caps[..1], 4, 0.3, 11).is_err());
    }

    #[test]
    fn pseudo_video_noise_scale() {
        let images = vec![vec![0.5, -2.0, 1.0]];
        let caps = vec![TokenSentence::new(vec![4]).unwrap()];
        let (seq, _) = make_pseudo_video(&images, &caps, 10_000, 0.1, 2024).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = seq.rows().map(|r| r[c]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            let std = var.sqrt();
            assert!((0.095..=0.105).contains(&std), "column {c}: std {std}");
        }
    }

    fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..1.0, dim).prop_filter("non-zero", |v| norm(v) > 0.1)
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(a in unit_vec(4), b in unit_vec(4), k1 in 0.01f64..100.0, k2 in 0.01f64..100.0) {
            let (a, b) = (e(&a), e(&b));
            let d = cosine_distance(&a, &b).unwrap();
            prop_assert!((d - cosine_distance(&a.scaled(k1), &b.scaled(k2)).unwrap()).abs() < 1e-12);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&d));
        }

        #[test]
        fn contrastive_zero_when_separated(
            h in 0.0f64..0.3,
            seed in 0u64..1000,
        ) {
            // positives equal, negatives pushed far enough
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let p: Vec<f64> = (0..5).map(|_| normal.sample(&mut rng)).collect();
            let n: Vec<f64> = p.iter().map(|x| -x + 0.01 * normal.sample(&mut rng)).collect();
            let (p, n) = (e(&p), e(&n));
            let dn = cosine_distance(&p, &n).unwrap();
            prop_assume!(h <= dn);
            let (v, _) = contrastive_loss(&p, &p, &n, &n, h).unwrap();
            prop_assert_eq!(v, 0.0);
        }

        #[test]
        fn soft_location_in_range(
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            s in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..6),
        ) {
            let sents: Vec<_> = s.iter().map(|v| e(v)).collect();
            let (alpha, cbar) = soft_nearest_clip(&e(&x), &sents).unwrap();
            prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(alpha.iter().all(|a| *a >= 0.0));
            let u = soft_location(&cbar, &sents).unwrap();
            prop_assert!(u >= 1.0 - 1e-12 && u <= sents.len() as f64 + 1e-12);
        }

        #[test]
        fn cycle_loss_orthogonal_invariance(
            raw in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 2), 2..5),
            theta in 0.0f64..std::f64::consts::TAU,
            flip in proptest::bool::ANY,
        ) {
            let n = raw.len();
            let s: Vec<_> = raw.iter().map(|v| e(v)).collect();
            let c: Vec<_> = raw.iter().map(|v| e(&[v[1] * 0.7 + 0.1, v[0] - 0.2])).collect();
            let (ct, st) = (theta.cos(), theta.sin());
            let sign = if flip { -1.0 } else { 1.0 };
            let rot = |x: &Embedding| {
                let v = x.as_slice();
                e(&[ct * v[0] - st * v[1], sign * (st * v[0] + ct * v[1])])
            };
            let (a, _) = cycle_loss(&s, &c).unwrap();
            let (b, _) = cycle_loss(&s.iter().map(rot).collect::<Vec<_>>(), &c.iter().map(rot).collect::<Vec<_>>()).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "n={} {} vs {}", n, a, b);
        }

        #[test]
        fn assignment_invariant_to_positive_rescaling(
            seed in 0u64..500,
            k in 0.01f64..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let feats = FeatureSequence::new(10, 3, (0..30).map(|_| normal.sample(&mut rng)).collect()).unwrap();
            let props: Vec<_> = [(0, 3), (2, 6), (5, 10), (1, 9)]
                .iter()
                .map(|&(a, b)| ScoredProposal::new(iv(a, b), 0.5))
                .collect();
            let sents: Vec<_> = (0..3)
                .map(|_| e(&(0..3).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>()))
                .collect();
            let params = EmbedParams::random(3, 3, 3, seed);
            let a = assign_proposals(&props, &feats, &sents, &params).unwrap();
            let scaled: Vec<_> = sents.iter().map(|s| s.scaled(k)).collect();
            let b = assign_proposals(&props, &feats, &scaled, &params).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.proposal, y.proposal);
            }
        }
    }
}
