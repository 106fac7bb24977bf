//! Caption loss and beam-search decoding over an abstract next-token model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::Embedding;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const DEFAULT_BEAM: usize = 5;

/// Tolerance on the total mass of a next-token distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

/// A token sequence without the leading BOS. Non-empty; BOS never appears;
/// EOS appears at most once and only as the last token.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenSentence(Vec<u32>);

impl TokenSentence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sentence"));
        }
        if tokens.contains(&BOS) {
            return Err(Error::InvalidArgument("BOS inside a token sentence".into()));
        }
        if let Some(p) = tokens.iter().position(|&t| t == EOS) {
            if p + 1 != tokens.len() {
                return Err(Error::InvalidArgument("EOS before the end of a token sentence".into()));
            }
        }
        Ok(Self(tokens))
    }

    /// The sentence consisting of EOS alone; stands in for "no caption".
    pub fn empty() -> Self {
        Self(vec![EOS])
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finished(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    /// Tokens with EOS removed.
    pub fn content(&self) -> &[u32] {
        if self.is_finished() {
            &self.0[..self.0.len() - 1]
        } else {
            &self.0
        }
    }
}

impl TryFrom<Vec<u32>> for TokenSentence {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TokenSentence> for Vec<u32> {
    fn from(s: TokenSentence) -> Self {
        s.0
    }
}

/// Next-token distribution conditioned on the tokens emitted so far (BOS
/// implied) and a context embedding.
pub trait ConditionalTokenModel {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities of length `vocab_size`; their exponentials sum to 1.
    fn next_log_probs(&self, prefix: &[u32], context: &Embedding) -> Result<Vec<f64>>;
}

fn check_distribution(prefix: &[u32], probs: &[f64], vocab: usize) -> Result<()> {
    let bad = |reason: String| Error::InvalidDistribution {
        prefix: prefix.to_vec(),
        reason,
    };
    if probs.len() != vocab {
        return Err(bad(format!("length {} vs vocabulary {vocab}", probs.len())));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(bad("negative or non-finite probability".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(bad(format!("mass {total}")));
    }
    Ok(())
}

fn uniform_log_probs(vocab: usize) -> Vec<f64> {
    vec![-(vocab as f64).ln(); vocab]
}

/// Prefix-indexed probability table; the context is ignored and unlisted
/// prefixes get the uniform distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TabularModelRepr", into = "TabularModelRepr")]
pub struct TabularModel {
    vocab_size: usize,
    table: BTreeMap<Vec<u32>, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TabularEntry {
    prefix: Vec<u32>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TabularModelRepr {
    vocab_size: usize,
    table: Vec<TabularEntry>,
}

impl TryFrom<TabularModelRepr> for TabularModel {
    type Error = Error;

    fn try_from(r: TabularModelRepr) -> Result<Self> {
        Self::new(r.vocab_size, r.table.into_iter().map(|e| (e.prefix, e.probs)).collect())
    }
}

impl From<TabularModel> for TabularModelRepr {
    fn from(m: TabularModel) -> Self {
        Self {
            vocab_size: m.vocab_size,
            table: m
                .table
                .into_iter()
                .map(|(prefix, probs)| TabularEntry { prefix, probs })
                .collect(),
        }
    }
}

impl TabularModel {
    /// Rejects distributions that are not probability vectors over the
    /// vocabulary. The vocabulary must include BOS and EOS.
    pub fn new(vocab_size: usize, table: BTreeMap<Vec<u32>, Vec<f64>>) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary of {vocab_size} cannot hold BOS and EOS"
            )));
        }
        for (prefix, probs) in &table {
            check_distribution(prefix, probs, vocab_size)?;
        }
        Ok(Self { vocab_size, table })
    }

    /// A table that emits `sentence` followed by EOS with probability 1.
    pub fn forced(sentence: &[u32], vocab_size: usize) -> Result<Self> {
        let mut table = BTreeMap::new();
        let mut tokens = sentence.to_vec();
        if tokens.last() != Some(&EOS) {
            tokens.push(EOS);
        }
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= vocab_size {
                return Err(Error::InvalidArgument(format!("token {t} outside vocabulary")));
            }
            let mut probs = vec![0.0; vocab_size];
            probs[t as usize] = 1.0;
            table.insert(tokens[..i].to_vec(), probs);
        }
        Self::new(vocab_size, table)
    }

    pub fn table(&self) -> &BTreeMap<Vec<u32>, Vec<f64>> {
        &self.table
    }
}

impl ConditionalTokenModel for TabularModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_log_probs(&self, prefix: &[u32], _context: &Embedding) -> Result<Vec<f64>> {
        Ok(match self.table.get(prefix) {
            Some(p) => p.iter().map(|x| x.ln()).collect(),
            None => uniform_log_probs(self.vocab_size),
        })
    }
}

/// Follows the prototype sentence whose embedding is most cosine-similar to
/// the context: the next token of that sentence (EOS once it is exhausted)
/// gets mass `confidence`, the rest is spread evenly over the other
/// non-BOS tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeModel {
    pub vocab_size: usize,
    pub confidence: f64,
    pub prototypes: Vec<(Embedding, TokenSentence)>,
}

impl PrototypeModel {
    pub fn new(vocab_size: usize, confidence: f64, prototypes: Vec<(Embedding, TokenSentence)>) -> Result<Self> {
        if vocab_size < 3 {
            return Err(Error::InvalidArgument("prototype model needs a content token".into()));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidArgument(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        if prototypes.is_empty() {
            return Err(Error::EmptyInput("prototypes"));
        }
        for (e, s) in &prototypes {
            if e.norm() == 0.0 {
                return Err(Error::DegenerateEmbedding);
            }
            if s.tokens().iter().any(|&t| t as usize >= vocab_size) {
                return Err(Error::InvalidArgument("prototype token outside vocabulary".into()));
            }
        }
        Ok(Self {
            vocab_size,
            confidence,
            prototypes,
        })
    }

    /// Index of the prototype nearest to `context`; ties go to the lower index.
    pub fn nearest(&self, context: &Embedding) -> Result<usize> {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, (e, _)) in self.prototypes.iter().enumerate() {
            let sim = 1.0 - crate::matching::cosine_distance(e, context)?;
            if sim > best.1 {
                best = (k, sim);
            }
        }
        Ok(best.0)
    }
}

impl ConditionalTokenModel for PrototypeModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_log_probs(&self, prefix: &[u32], context: &Embedding) -> Result<Vec<f64>> {
        let sentence = self.prototypes[self.nearest(context)?].1.content();
        let next = sentence.get(prefix.len()).copied().unwrap_or(EOS);
        let rest = (1.0 - self.confidence) / (self.vocab_size - 2) as f64;
        let mut probs = vec![rest; self.vocab_size];
        probs[BOS as usize] = 0.0;
        probs[next as usize] = self.confidence;
        Ok(probs.into_iter().map(f64::ln).collect())
    }
}

/// Caption model stored on disk, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaptionModel {
    Tabular(TabularModel),
    Prototype(PrototypeModel),
}

impl ConditionalTokenModel for CaptionModel {
    fn vocab_size(&self) -> usize {
        match self {
            Self::Tabular(m) => m.vocab_size(),
            Self::Prototype(m) => m.vocab_size(),
        }
    }

    fn next_log_probs(&self, prefix: &[u32], context: &Embedding) -> Result<Vec<f64>> {
        match self {
            Self::Tabular(m) => m.next_log_probs(prefix, context),
            Self::Prototype(m) => m.next_log_probs(prefix, context),
        }
    }
}

/// Negative summed log-probability of the target tokens, one prediction
/// vector per target position.
pub fn caption_ce_loss(pred: &[Vec<f64>], target: &TokenSentence) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} target tokens",
            pred.len(),
            target.len()
        )));
    }
    let mut total = 0.0;
    for (lp, &t) in pred.iter().zip(target.tokens()) {
        let v = lp
            .get(t as usize)
            .ok_or_else(|| Error::shape(format!("token {t} outside prediction of length {}", lp.len())))?;
        total -= v;
    }
    Ok(total)
}

/// Beam-search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Rank final hypotheses by mean instead of total log-probability.
    pub length_norm: bool,
}

impl BeamConfig {
    pub fn new(width: usize, max_len: usize) -> Self {
        Self {
            width,
            max_len,
            length_norm: false,
        }
    }
}

/// A hypothesis and its total log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
}

impl Hypothesis {
    fn rank_score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

/// Higher score first; equal scores go to the lexicographically lower tokens.
fn better(a: &Hypothesis, b: &Hypothesis, length_norm: bool) -> std::cmp::Ordering {
    b.rank_score(length_norm)
        .total_cmp(&a.rank_score(length_norm))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search from BOS. Each step keeps the best `width - finished`
/// expansions; those ending in EOS are finalized and hold their slot for the
/// rest of the search. BOS is never emitted and zero-probability tokens are
/// never expanded. Returns the best finished hypothesis, or the best
/// unfinished one of length `max_len` when nothing finished.
pub fn beam_search_hypothesis(
    model: &dyn ConditionalTokenModel,
    context: &Embedding,
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    if cfg.width == 0 || cfg.max_len == 0 {
        return Err(Error::InvalidArgument(
            "beam width and length cap must be positive".into(),
        ));
    }
    let vocab = model.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let slots = cfg.width - finished.len();
        if slots == 0 || live.is_empty() {
            break;
        }
        let mut expansions = Vec::new();
        for h in &live {
            let lp = model.next_log_probs(&h.tokens, context)?;
            if lp.len() != vocab {
                return Err(Error::InvalidDistribution {
                    prefix: h.tokens.clone(),
                    reason: format!("length {} vs vocabulary {vocab}", lp.len()),
                });
            }
            for (t, &l) in lp.iter().enumerate() {
                if t as u32 == BOS || l == f64::NEG_INFINITY {
                    continue;
                }
                if l.is_nan() {
                    return Err(Error::InvalidDistribution {
                        prefix: h.tokens.clone(),
                        reason: "NaN log-probability".into(),
                    });
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t as u32);
                expansions.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                });
            }
        }
        expansions.sort_by(|a, b| better(a, b, false));
        expansions.truncate(slots);
        live.clear();
        for h in expansions {
            if h.tokens.last() == Some(&EOS) {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
    }
    let pool = if finished.is_empty() { live } else { finished };
    pool.into_iter()
        .min_by(|a, b| better(a, b, cfg.length_norm))
        .ok_or_else(|| Error::Infeasible("model assigns zero probability to every token".into()))
}

/// [`beam_search_hypothesis`] returning only the sentence.
pub fn beam_search(
    model: &dyn ConditionalTokenModel,
    context: &Embedding,
    beam: usize,
    max_len: usize,
) -> Result<TokenSentence> {
    let h = beam_search_hypothesis(model, context, &BeamConfig::new(beam, max_len))?;
    TokenSentence::new(h.tokens)
}

/// Greedy decoding: the most probable non-BOS token at each step, lowest id
/// on ties, until EOS or `max_len` tokens.
pub fn greedy(model: &dyn ConditionalTokenModel, context: &Embedding, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("length cap must be positive".into()));
    }
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    while h.tokens.len() < max_len && h.tokens.last() != Some(&EOS) {
        let lp = model.next_log_probs(&h.tokens, context)?;
        let mut best: Option<(usize, f64)> = None;
        for (t, &l) in lp.iter().enumerate() {
            if t as u32 == BOS || l == f64::NEG_INFINITY {
                continue;
            }
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((t, l));
            }
        }
        let (t, l) = best.ok_or_else(|| Error::Infeasible("model assigns zero probability to every token".into()))?;
        h.tokens.push(t as u32);
        h.log_prob += l;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> Embedding {
        Embedding::new(vec![1.0]).unwrap()
    }

    #[test]
    fn token_sentence_invariants() {
        assert!(TokenSentence::new(vec![]).is_err());
        assert!(TokenSentence::new(vec![3, BOS]).is_err());
        assert!(TokenSentence::new(vec![3, EOS, 4]).is_err());
        let s = TokenSentence::new(vec![3, 4, EOS]).unwrap();
        assert_eq!(s.content(), &[3, 4]);
        assert_eq!(TokenSentence::empty().content(), &[] as &[u32]);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "[3,4,1]");
        assert!(serde_json::from_str::<TokenSentence>("[1,1]").is_err());
    }

    #[test]
    fn ce_loss_examples() {
        let target = TokenSentence::new(vec![2, EOS]).unwrap();
        let onehot = vec![
            vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY],
            vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
        ];
        assert_eq!(caption_ce_loss(&onehot, &target).unwrap(), 0.0);
        let uniform = vec![vec![(0.25f64).ln(); 4]; 2];
        assert!((caption_ce_loss(&uniform, &target).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((caption_ce_loss(&uniform, &target).unwrap() - 2.7726).abs() < 1e-4);
        let half = vec![vec![(0.5f64).ln(), (0.5f64).ln()]];
        let one = TokenSentence::new(vec![EOS]).unwrap();
        assert!((caption_ce_loss(&half, &one).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(caption_ce_loss(&uniform[..1], &target).is_err());
    }

    #[test]
    fn tabular_validation() {
        let mut t = BTreeMap::new();
        t.insert(vec![], vec![0.5, 0.4]);
        assert!(TabularModel::new(2, t).is_err());
        let m = TabularModel::new(4, BTreeMap::new()).unwrap();
        let lp = m.next_log_probs(&[2, 3], &ctx()).unwrap();
        assert!(lp.iter().all(|l| (l + 4f64.ln()).abs() < 1e-15));
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<TabularModel>(&json).unwrap(), m);
        let tagged = CaptionModel::Tabular(TabularModel::forced(&[2], 3).unwrap());
        let json = serde_json::to_string(&tagged).unwrap();
        assert!(json.starts_with(r#"{"kind":"tabular""#));
        assert_eq!(serde_json::from_str::<CaptionModel>(&json).unwrap(), tagged);
    }

    /// vocab {BOS, EOS, x=2, y=3}: step one prefers x (0.6) over y (0.4),
    /// but x is followed by EOS with 0.1 while y is followed by EOS with 0.9.
    pub(crate) fn lookahead_table() -> TabularModel {
        let mut t = BTreeMap::new();
        t.insert(vec![], vec![0.0, 0.0, 0.6, 0.4]);
        t.insert(vec![2], vec![0.0, 0.1, 0.9, 0.0]);
        t.insert(vec![3], vec![0.0, 0.9, 0.0, 0.1]);
        t.insert(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]);
        t.insert(vec![3, 3], vec![0.0, 1.0, 0.0, 0.0]);
        TabularModel::new(4, t).unwrap()
    }

    #[test]
    fn beam_beats_greedy_on_lookahead_table() {
        let m = lookahead_table();
        let g = greedy(&m, &ctx(), 2).unwrap();
        assert_eq!(g.tokens, vec![2, 2]);
        let b1 = beam_search(&m, &ctx(), 1, 2).unwrap();
        assert_eq!(b1.tokens(), &[2, 2]);
        let b2 = beam_search_hypothesis(&m, &ctx(), &BeamConfig::new(2, 2)).unwrap();
        assert_eq!(b2.tokens, vec![3, EOS]);
        assert!((b2.log_prob - (0.4f64 * 0.9).ln()).abs() < 1e-12);
        let greedy_finished = beam_search_hypothesis(&m, &ctx(), &BeamConfig::new(1, 3)).unwrap();
        assert_eq!(greedy_finished.tokens, vec![2, 2, EOS]);
        assert!((greedy_finished.log_prob - (0.6f64 * 0.9).ln()).abs() < 1e-12);
    }

    /// Width monotonicity is not a theorem: a wider beam can evict the
    /// greedy path for two siblings whose continuations are poor.
    #[test]
    fn wider_beam_can_finish_worse() {
        let mut t = BTreeMap::new();
        t.insert(vec![], vec![0.0, 0.25, 0.4, 0.35]);
        t.insert(vec![2], vec![0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        t.insert(vec![3], vec![0.0, 0.0, 0.5, 0.5]);
        t.insert(vec![3, 2], vec![0.0, 0.5, 0.25, 0.25]);
        t.insert(vec![3, 3], vec![0.0, 0.5, 0.25, 0.25]);
        let m = TabularModel::new(4, t).unwrap();
        let w1 = beam_search_hypothesis(&m, &ctx(), &BeamConfig::new(1, 3)).unwrap();
        let w2 = beam_search_hypothesis(&m, &ctx(), &BeamConfig::new(2, 3)).unwrap();
        assert_eq!(w1.tokens, vec![2, EOS]);
        assert_eq!(w2.tokens, vec![3, 2, EOS]);
        assert!(w2.log_prob < w1.log_prob);
    }

    #[test]
    fn forced_model_decodes_its_sentence() {
        let m = TabularModel::forced(&[2, 3], 5).unwrap();
        for w in 1..5 {
            assert_eq!(beam_search(&m, &ctx(), w, 6).unwrap().tokens(), &[2, 3, EOS]);
        }
        // capped before EOS: the unfinished best is returned
        assert_eq!(beam_search(&m, &ctx(), 3, 1).unwrap().tokens(), &[2]);
    }

    #[test]
    fn length_norm_flag_changes_final_choice() {
        // "EOS" scores ln 0.45 > ln(0.55 * 0.7) for "2 EOS", but per token
        // ln(0.385) / 2 > ln 0.45.
        let mut t = BTreeMap::new();
        t.insert(vec![], vec![0.0, 0.45, 0.55]);
        t.insert(vec![2], vec![0.0, 0.7, 0.3]);
        t.insert(vec![2, 2], vec![0.0, 1.0, 0.0]);
        let m = TabularModel::new(3, t).unwrap();
        let plain = beam_search_hypothesis(&m, &ctx(), &BeamConfig::new(3, 3)).unwrap();
        assert_eq!(plain.tokens, vec![EOS]);
        let cfg = BeamConfig {
            length_norm: true,
            ..BeamConfig::new(3, 3)
        };
        let normed = beam_search_hypothesis(&m, &ctx(), &cfg).unwrap();
        assert_eq!(normed.tokens, vec![2, EOS]);
    }

    #[test]
    fn prototype_model_follows_nearest_sentence() {
        let a = TokenSentence::new(vec![2, 3, EOS]).unwrap();
        let b = TokenSentence::new(vec![4, EOS]).unwrap();
        let m = PrototypeModel::new(
            5,
            0.9,
            vec![
                (Embedding::new(vec![1.0, 0.0]).unwrap(), a.clone()),
                (Embedding::new(vec![0.0, 1.0]).unwrap(), b.clone()),
            ],
        )
        .unwrap();
        let near_b = Embedding::new(vec![0.1, 2.0]).unwrap();
        assert_eq!(beam_search(&m, &near_b, 5, 8).unwrap(), b);
        let near_a = Embedding::new(vec![3.0, 0.2]).unwrap();
        assert_eq!(beam_search(&m, &near_a, 5, 8).unwrap(), a);
        let lp = m.next_log_probs(&[], &near_a).unwrap();
        assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_beam_settings() {
        let m = TabularModel::new(3, BTreeMap::new()).unwrap();
        assert!(beam_search(&m, &ctx(), 0, 3).is_err());
        assert!(beam_search(&m, &ctx(), 2, 0).is_err());
    }
}
