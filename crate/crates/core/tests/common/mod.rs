//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use densecap::caption::{ConditionalTokenModel, TabularModel, TokenSentence, BOS, EOS};
use densecap::io::{DatasetManifest, GtEvent, TeacherRef, VideoEntry, Vocab};
use densecap::matching::Embedding;
use densecap::TemporalInterval;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm; zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Best sentence by exhaustive enumeration: every token sequence of length
/// at most `max_len` with EOS only at the end and BOS never emitted, scored
/// by total log-probability. Finished sequences win over unfinished ones
/// (which must have length `max_len`); ties go to the lexicographically
/// lower sequence.
pub fn brute_force_decode(
    model: &dyn ConditionalTokenModel,
    ctx: &Embedding,
    max_len: usize,
) -> Option<(Vec<u32>, f64)> {
    let vocab = model.vocab_size() as u32;
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    let mut unfinished: Vec<(Vec<u32>, f64)> = Vec::new();
    let mut stack = vec![(Vec::<u32>::new(), 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let lp = model.next_log_probs(&prefix, ctx).unwrap();
        for t in 0..vocab {
            if t == BOS || lp[t as usize] == f64::NEG_INFINITY {
                continue;
            }
            let mut seq = prefix.clone();
            seq.push(t);
            let s = score + lp[t as usize];
            if t == EOS {
                finished.push((seq, s));
            } else if seq.len() == max_len {
                unfinished.push((seq, s));
            } else {
                stack.push((seq, s));
            }
        }
    }
    let pool = if finished.is_empty() { unfinished } else { finished };
    pool.into_iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
}

/// A table over every emitting prefix shorter than `max_len`; each row puts
/// zero mass on BOS and, with probability 0.2 per token, on other tokens.
pub fn random_table(rng: &mut impl Rng, vocab: usize, max_len: usize) -> TabularModel {
    let mut table = BTreeMap::new();
    let mut prefixes: Vec<Vec<u32>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &prefixes {
            let mut w: Vec<f64> = (0..vocab)
                .map(|t| {
                    if t as u32 == BOS || rng.random_bool(0.2) {
                        0.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            if w.iter().sum::<f64>() == 0.0 {
                w[EOS as usize] = 1.0;
            }
            let total: f64 = w.iter().sum();
            table.insert(p.clone(), w.iter().map(|x| x / total).collect());
            for t in 2..vocab as u32 {
                let mut q = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        prefixes = next;
    }
    TabularModel::new(vocab, table).unwrap()
}

/// Rank of each query's true item by explicit sorting: gallery indices are
/// ordered by similarity descending, then index ascending.
pub fn brute_force_ranks(sim: &[Vec<f64>], truth: &[usize]) -> Vec<usize> {
    sim.iter()
        .zip(truth)
        .map(|(row, &t)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.iter().position(|&g| g == t).unwrap() + 1
        })
        .collect()
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn random_sentence(rng: &mut impl Rng, vocab: usize) -> TokenSentence {
    let len = rng.random_range(1..6);
    let mut t: Vec<u32> = (0..len).map(|_| rng.random_range(2..vocab as u32)).collect();
    if rng.random_bool(0.5) {
        t.push(EOS);
    }
    TokenSentence::new(t).unwrap()
}

fn random_float(rng: &mut impl Rng) -> f64 {
    // mix of ordinary, tiny and huge magnitudes
    let base: f64 = rng.random_range(-1.0..1.0);
    match rng.random_range(0..4) {
        0 => base * 1e-300,
        1 => base * 1e200,
        _ => base,
    }
}

/// A valid manifest exercising every optional field.
pub fn random_manifest(rng: &mut impl Rng) -> DatasetManifest {
    let words = rng.random_range(1..8);
    let vocab = Vocab::with_words((0..words).map(|i| format!("w{i}_{}", rng.random_range(0..1000u32)))).unwrap();
    let v = vocab.len();
    let videos = (0..rng.random_range(0..5))
        .map(|i| {
            let length = rng.random_range(1..200);
            let gt_events = rng.random_bool(0.7).then(|| {
                (0..rng.random_range(0..4))
                    .map(|_| {
                        let s = rng.random_range(0..length);
                        let e = rng.random_range(s + 1..=length);
                        GtEvent {
                            interval: TemporalInterval::new(s, e).unwrap(),
                            sentence: random_sentence(rng, v),
                        }
                    })
                    .collect()
            });
            let paragraph: Option<Vec<TokenSentence>> = rng
                .random_bool(0.7)
                .then(|| (0..rng.random_range(0..4)).map(|_| random_sentence(rng, v)).collect());
            let sentence_embeddings = match &paragraph {
                Some(p) if rng.random_bool(0.7) => {
                    let d = rng.random_range(1..5);
                    Some(p.iter().map(|_| (0..d).map(|_| random_float(rng)).collect()).collect())
                }
                _ => None,
            };
            VideoEntry {
                id: format!("vid-{i}-{}", rng.random_range(0..1_000_000)),
                feature_path: PathBuf::from(format!("features/{i}.txt")),
                length,
                gt_events,
                paragraph,
                sentence_embeddings,
                proposal_map: rng.random_bool(0.5).then(|| PathBuf::from(format!("maps/{i}.json"))),
                teachers: rng.random_bool(0.5).then(|| {
                    (0..rng.random_range(0..3))
                        .map(|k| TeacherRef {
                            output: PathBuf::from(format!("t/{i}_{k}.json")),
                            features: PathBuf::from(format!("t/{i}_{k}.txt")),
                        })
                        .collect()
                }),
            }
        })
        .collect();
    DatasetManifest {
        videos,
        vocab,
        caption_model: rng.random_bool(0.5).then(|| PathBuf::from("model.json")),
        embed_params: rng.random_bool(0.5).then(|| PathBuf::from("/abs/params.json")),
    }
}
