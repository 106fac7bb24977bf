//! Seeded synthetic datasets with planted events.
//!
//! Each event carries one of a set of orthogonal feature signatures (a scaled
//! basis vector) plus Gaussian noise, and a sentence tied to its signature.
//! The planted lexical vector of a sentence is the mean feature of its event,
//! so identity embedding maps align clips and sentences exactly.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::caption::{CaptionModel, PrototypeModel, TokenSentence, EOS};
use crate::error::{Error, Result};
use crate::io::{
    write_features, write_json, write_teacher_output, DatasetManifest, GtEvent, TeacherRef, VideoEntry, Vocab,
};
use crate::matching::{Embedding, MatchingVideo};
use crate::proposal::{oracle_teacher_output, TeacherOutput};
use crate::temporal::{even_split, FeatureSequence, TemporalInterval};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Events partition the video as an even split.
    Tiled,
    /// Events of random length separated by random background gaps.
    Scattered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub videos: usize,
    pub length: usize,
    pub events_per_video: usize,
    /// Distinct event signatures; events within a video never share one.
    pub signatures: usize,
    pub feature_dim: usize,
    /// Norm of each signature vector.
    pub amplitude: f64,
    /// Per-coordinate noise standard deviation of video features.
    pub noise: f64,
    pub layout: Layout,
    pub min_event_len: usize,
    /// Boundary bump width of the decoded proposal map; 0 gives one-hot boundaries.
    pub proposal_sharpness: f64,
    /// Boundary bump width of the blurred teacher.
    pub teacher_blur: f64,
    /// Frame offset of the biased teacher's events.
    pub teacher_bias: isize,
    /// Extra per-coordinate noise on teacher features.
    pub teacher_noise: f64,
    pub words_per_sentence: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            videos: 4,
            length: 100,
            events_per_video: 3,
            signatures: 6,
            feature_dim: 8,
            amplitude: 5.0,
            noise: 0.1,
            layout: Layout::Tiled,
            min_event_len: 4,
            proposal_sharpness: 0.0,
            teacher_blur: 2.0,
            teacher_bias: 2,
            teacher_noise: 0.05,
            words_per_sentence: 4,
            seed: 0,
        }
    }
}

const VERBS: [&str; 8] = ["runs", "jumps", "plays", "walks", "throws", "holds", "rides", "cuts"];

impl SynthSpec {
    fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Infeasible(m));
        if self.videos == 0 || self.events_per_video == 0 {
            return fail("need at least one video and one event per video".into());
        }
        if self.min_event_len < 2 {
            return fail("events must span at least two frames".into());
        }
        // tiled events are at least floor(T / N) long; scattered ones draw
        // their lengths from [min_event_len, floor(T / N)]
        if self.length / self.events_per_video < self.min_event_len {
            return fail(format!(
                "{} events of at least {} frames do not fit in {} frames",
                self.events_per_video, self.min_event_len, self.length
            ));
        }
        if self.signatures < self.events_per_video {
            return fail(format!(
                "{} signatures cannot label {} distinct events per video",
                self.signatures, self.events_per_video
            ));
        }
        if self.feature_dim < self.signatures {
            return fail(format!(
                "{} orthogonal signatures need feature_dim >= {}",
                self.signatures, self.signatures
            ));
        }
        if !(self.amplitude > 0.0) || !(self.noise >= 0.0) || !(self.teacher_noise >= 0.0) {
            return fail("amplitude must be positive and noise scales non-negative".into());
        }
        if self.words_per_sentence == 0 {
            return fail("sentences need at least one word".into());
        }
        Ok(())
    }
}

/// Everything generated for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub features: FeatureSequence,
    pub events: Vec<TemporalInterval>,
    /// Signature index of each event.
    pub signatures: Vec<usize>,
    pub proposal_map: TeacherOutput,
    /// Sharp, blurred and biased teachers with their features.
    pub teachers: Vec<(TeacherOutput, FeatureSequence)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub manifest: DatasetManifest,
    pub videos: Vec<SynthVideo>,
    pub caption_model: CaptionModel,
}

fn event_layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<TemporalInterval>> {
    let n = spec.events_per_video;
    match spec.layout {
        Layout::Tiled => even_split(spec.length, n),
        Layout::Scattered => {
            let max_len = spec.length / n;
            let lens: Vec<usize> = (0..n).map(|_| rng.random_range(spec.min_event_len..=max_len)).collect();
            let slack = spec.length - lens.iter().sum::<usize>();
            let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
            cuts.sort_unstable();
            let mut events = Vec::with_capacity(n);
            let (mut pos, mut prev) = (0, 0);
            for (len, cut) in lens.iter().zip(&cuts) {
                pos += cut - prev;
                prev = *cut;
                events.push(TemporalInterval::with_duration(pos, *len)?);
                pos += len;
            }
            Ok(events)
        }
    }
}

fn noisy(base: &FeatureSequence, sigma: f64, rng: &mut ChaCha8Rng) -> Result<FeatureSequence> {
    let normal = Normal::new(0.0, sigma).expect("non-negative sigma");
    let data = base.as_slice().iter().map(|x| x + normal.sample(rng)).collect();
    FeatureSequence::new(base.len(), base.dim(), data)
}

/// Generates a dataset; identical specs give identical datasets.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise).expect("non-negative noise");

    let s = spec.signatures;
    let vocab = Vocab::with_words(
        (0..s)
            .map(|k| format!("event{k}"))
            .chain(VERBS.iter().map(|v| v.to_string())),
    )?;
    let sentences: Vec<TokenSentence> = (0..s)
        .map(|k| {
            let mut t = vec![2 + k as u32];
            t.extend((1..spec.words_per_sentence).map(|_| 2 + s as u32 + rng.random_range(0..VERBS.len() as u32)));
            t.push(EOS);
            TokenSentence::new(t)
        })
        .collect::<Result<_>>()?;
    let signature = |k: usize| -> Vec<f64> {
        (0..spec.feature_dim)
            .map(|d| if d == k { spec.amplitude } else { 0.0 })
            .collect()
    };

    let mut videos = Vec::with_capacity(spec.videos);
    let mut entries = Vec::with_capacity(spec.videos);
    for v in 0..spec.videos {
        let id = format!("video_{v:03}");
        let events = event_layout(spec, &mut rng)?;
        let mut pool: Vec<usize> = (0..s).collect();
        pool.shuffle(&mut rng);
        let sigs = pool[..events.len()].to_vec();

        let mut data = Vec::with_capacity(spec.length * spec.feature_dim);
        for t in 0..spec.length {
            let base = events
                .iter()
                .position(|e| e.start() <= t && t < e.end())
                .map(|j| signature(sigs[j]))
                .unwrap_or_else(|| vec![0.0; spec.feature_dim]);
            data.extend(base.into_iter().map(|x| x + normal.sample(&mut rng)));
        }
        let features = FeatureSequence::new(spec.length, spec.feature_dim, data)?;

        let proposal_map = oracle_teacher_output(&events, spec.length, spec.proposal_sharpness)?;
        let biased: Vec<TemporalInterval> = events
            .iter()
            .map(|e| e.shifted(spec.teacher_bias, spec.length))
            .collect::<Result<_>>()?;
        let teacher_maps = [
            oracle_teacher_output(&events, spec.length, 0.0)?,
            oracle_teacher_output(&events, spec.length, spec.teacher_blur)?,
            oracle_teacher_output(&biased, spec.length, 0.0)?,
        ];
        let teachers = teacher_maps
            .into_iter()
            .map(|m| Ok((m, noisy(&features, spec.teacher_noise, &mut rng)?)))
            .collect::<Result<Vec<_>>>()?;

        let gt_events: Vec<GtEvent> = events
            .iter()
            .zip(&sigs)
            .map(|(e, &k)| GtEvent {
                interval: *e,
                sentence: sentences[k].clone(),
            })
            .collect();
        let embeddings = events
            .iter()
            .map(|e| features.mean_over(e))
            .collect::<Result<Vec<_>>>()?;
        entries.push(VideoEntry {
            id: id.clone(),
            feature_path: PathBuf::from(format!("features/{id}.txt")),
            length: spec.length,
            paragraph: Some(gt_events.iter().map(|g| g.sentence.clone()).collect()),
            gt_events: Some(gt_events),
            sentence_embeddings: Some(embeddings),
            proposal_map: Some(PathBuf::from(format!("maps/{id}.json"))),
            teachers: Some(
                (0..teachers.len())
                    .map(|k| TeacherRef {
                        output: PathBuf::from(format!("teachers/{id}_t{k}.json")),
                        features: PathBuf::from(format!("teachers/{id}_t{k}.txt")),
                    })
                    .collect(),
            ),
        });
        videos.push(SynthVideo {
            features,
            events,
            signatures: sigs,
            proposal_map,
            teachers,
        });
    }

    let prototypes = (0..s)
        .map(|k| Ok((Embedding::new(signature(k))?, sentences[k].clone())))
        .collect::<Result<Vec<_>>>()?;
    let caption_model = CaptionModel::Prototype(PrototypeModel::new(vocab.len(), 0.9, prototypes)?);
    let manifest = DatasetManifest {
        videos: entries,
        vocab,
        caption_model: Some(PathBuf::from("caption_model.json")),
        embed_params: None,
    };
    manifest.validate()?;
    Ok(SynthDataset {
        spec: spec.clone(),
        manifest,
        videos,
        caption_model,
    })
}

impl SynthDataset {
    /// Ground-truth events per video.
    pub fn gt(&self) -> Vec<Vec<TemporalInterval>> {
        self.videos.iter().map(|v| v.events.clone()).collect()
    }

    /// Videos paired with their planted sentence vectors.
    pub fn matching_videos(&self) -> Vec<MatchingVideo> {
        self.videos
            .iter()
            .zip(&self.manifest.videos)
            .map(|(v, e)| MatchingVideo {
                features: v.features.clone(),
                sentences: e.sentence_embeddings.clone().unwrap_or_default(),
            })
            .collect()
    }

    /// Writes the manifest and every referenced file under `dir`; returns the
    /// manifest path. Fails if any target file already exists.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for (v, e) in self.videos.iter().zip(&self.manifest.videos) {
            write_features(&dir.join(&e.feature_path), &v.features)?;
            if let Some(p) = &e.proposal_map {
                write_teacher_output(&dir.join(p), &v.proposal_map)?;
            }
            for ((out, feats), r) in v.teachers.iter().zip(e.teachers.iter().flatten()) {
                write_teacher_output(&dir.join(&r.output), out)?;
                write_features(&dir.join(&r.features), feats)?;
            }
        }
        if let Some(p) = &self.manifest.caption_model {
            write_json(&dir.join(p), &self.caption_model)?;
        }
        let path = dir.join(MANIFEST_FILE);
        write_json(&path, &self.manifest)?;
        Ok(path)
    }
}
