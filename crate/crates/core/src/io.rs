//! On-disk formats.
//!
//! Structured records are JSON (one document per file) or JSON Lines (one
//! record per line); feature matrices are plain text with a `shape T d`
//! header followed by `T` lines of `d` whitespace-separated numbers. Every
//! output file is created once and never overwritten. Relative paths inside a
//! manifest resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::caption::{TokenSentence, BOS, EOS};
use crate::error::{Error, Result};
use crate::matching::MatchPair;
use crate::proposal::{BoundaryProbabilities, ConfidenceMap, ScoredProposal, TeacherOutput};
use crate::temporal::{FeatureSequence, TemporalInterval};

pub const RESULT_VERSION: &str = "VERSION 1.0";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |error| Error::Io {
        path: path.to_path_buf(),
        error,
    }
}

fn parse_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Creates `path` (and missing parent directories) and writes `contents`;
/// fails if the file already exists.
pub fn write_new(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(contents.as_bytes()).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory values serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_new(path, &to_json(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(path, e))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("in-memory values serialize") + "\n")
        .collect()
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_new(path, &to_jsonl(items))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(&read_text(path)?, path)
}

/// Renders a feature matrix in the text format. Numbers use the shortest
/// representation that parses back to the same value.
pub fn format_features(seq: &FeatureSequence) -> String {
    let mut out = format!("shape {} {}\n", seq.len(), seq.dim());
    for row in seq.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_features(text: &str, path: &Path) -> Result<FeatureSequence> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| parse_err(path, "missing shape header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (len, dim) = match fields.as_slice() {
        ["shape", t, d] => (
            t.parse::<usize>().map_err(|e| parse_err(path, format!("shape: {e}")))?,
            d.parse::<usize>().map_err(|e| parse_err(path, format!("shape: {e}")))?,
        ),
        _ => return Err(parse_err(path, format!("bad shape header {header:?}"))),
    };
    let mut data = Vec::with_capacity(len * dim);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|e| parse_err(path, format!("row {}: {e}", i + 1)))?,
            );
        }
        if data.len() - before != dim {
            return Err(parse_err(
                path,
                format!("row {} has {} values, expected {dim}", i + 1, data.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != len {
        return Err(parse_err(path, format!("{rows} rows, header declares {len}")));
    }
    FeatureSequence::new(len, dim, data).map_err(|e| parse_err(path, e))
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    write_new(path, &format_features(seq))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    parse_features(&read_text(path)?, path)
}

/// JSON form of a [`TeacherOutput`]; map rows are indexed by duration - 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherOutputFile {
    pub length: usize,
    pub max_duration: usize,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub confidence: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
}

impl From<&TeacherOutput> for TeacherOutputFile {
    fn from(o: &TeacherOutput) -> Self {
        let t = o.len();
        Self {
            length: t,
            max_duration: o.max_duration(),
            start: o.boundaries.start.clone(),
            end: o.boundaries.end.clone(),
            confidence: o.confidence.values().chunks(t).map(<[f64]>::to_vec).collect(),
            valid: o.confidence.mask().chunks(t).map(<[bool]>::to_vec).collect(),
        }
    }
}

impl TryFrom<TeacherOutputFile> for TeacherOutput {
    type Error = Error;

    fn try_from(f: TeacherOutputFile) -> Result<Self> {
        if f.confidence.iter().any(|r| r.len() != f.length) || f.valid.iter().any(|r| r.len() != f.length) {
            return Err(Error::shape("confidence rows must have one entry per start frame"));
        }
        if f.start.len() != f.length || f.end.len() != f.length {
            return Err(Error::shape("boundary length differs from declared length"));
        }
        let map = ConfidenceMap::new(f.max_duration, f.length, f.confidence.concat(), f.valid.concat())?;
        TeacherOutput::new(BoundaryProbabilities::new(f.start, f.end)?, map)
    }
}

pub fn write_teacher_output(path: &Path, out: &TeacherOutput) -> Result<()> {
    write_json(path, &TeacherOutputFile::from(out))
}

pub fn read_teacher_output(path: &Path) -> Result<TeacherOutput> {
    let f: TeacherOutputFile = read_json(path)?;
    TeacherOutput::try_from(f).map_err(|e| parse_err(path, e))
}

/// Word list indexed by token id; ids 0 and 1 are BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab(Vec<String>);

pub const BOS_WORD: &str = "<bos>";
pub const EOS_WORD: &str = "<eos>";

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[BOS as usize] != BOS_WORD || words[EOS as usize] != EOS_WORD {
            return Err(Error::InvalidArgument(format!(
                "vocabulary must start with {BOS_WORD} and {EOS_WORD}"
            )));
        }
        let mut seen = BTreeSet::new();
        for w in &words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("bad vocabulary word {w:?}")));
            }
            if !seen.insert(w.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self(words))
    }

    /// Reserved tokens followed by `words`.
    pub fn with_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut all = vec![BOS_WORD.to_string(), EOS_WORD.to_string()];
        all.extend(words);
        Self::new(all)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.0
    }

    pub fn contains(&self, s: &TokenSentence) -> bool {
        s.tokens().iter().all(|&t| (t as usize) < self.len())
    }

    /// Space-joined words of the sentence, EOS omitted.
    pub fn decode(&self, s: &TokenSentence) -> Result<String> {
        let words = s
            .content()
            .iter()
            .map(|&t| {
                self.0
                    .get(t as usize)
                    .map(String::as_str)
                    .ok_or_else(|| Error::InvalidArgument(format!("token {t} outside vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Inverse of [`Vocab::decode`]; the result ends in EOS.
    pub fn encode(&self, text: &str) -> Result<TokenSentence> {
        let mut tokens = text
            .split_whitespace()
            .map(|w| {
                self.0
                    .iter()
                    .position(|v| v == w)
                    .filter(|&i| i as u32 != BOS && i as u32 != EOS)
                    .map(|i| i as u32)
                    .ok_or_else(|| Error::InvalidArgument(format!("word {w:?} not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        tokens.push(EOS);
        TokenSentence::new(tokens)
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.0
    }
}

/// A ground-truth event and its caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtEvent {
    pub interval: TemporalInterval,
    pub sentence: TokenSentence,
}

/// Output and feature files of one teacher for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherRef {
    pub output: PathBuf,
    pub features: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub feature_path: PathBuf,
    pub length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_events: Option<Vec<GtEvent>>,
    /// Video-level paragraph, sentences in temporal order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paragraph: Option<Vec<TokenSentence>>,
    /// Lexical vector of each paragraph sentence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_embeddings: Option<Vec<Vec<f64>>>,
    /// Boundary and confidence output decoded into proposals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_map: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teachers: Option<Vec<TeacherRef>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub videos: Vec<VideoEntry>,
    pub vocab: Vocab,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_params: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for v in &self.videos {
            let bad = |m: String| Err(Error::InvalidArgument(format!("video {:?}: {m}", v.id)));
            if !ids.insert(v.id.as_str()) {
                return bad("duplicate id".into());
            }
            if v.length == 0 {
                return bad("length must be positive".into());
            }
            for e in v.gt_events.iter().flatten() {
                e.interval.check_within(v.length)?;
                if !self.vocab.contains(&e.sentence) {
                    return bad("ground-truth sentence uses tokens outside the vocabulary".into());
                }
            }
            if let Some(p) = &v.paragraph {
                if p.iter().any(|s| !self.vocab.contains(s)) {
                    return bad("paragraph uses tokens outside the vocabulary".into());
                }
            }
            if let Some(emb) = &v.sentence_embeddings {
                let n = v.paragraph.as_ref().map_or(0, Vec::len);
                if emb.len() != n {
                    return bad(format!("{} sentence embeddings for {n} paragraph sentences", emb.len()));
                }
                if emb.iter().flatten().any(|x| !x.is_finite()) {
                    return bad("non-finite sentence embedding".into());
                }
            }
        }
        Ok(())
    }

    /// Parses and validates a manifest file; returns it with the directory
    /// its relative paths resolve against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let m: Self = read_json(path)?;
        m.validate().map_err(|e| parse_err(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }
}

/// Joins `p` onto `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// One decoded proposal, in frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalRecord {
    pub video: String,
    pub interval: TemporalInterval,
    pub score: f64,
}

impl ProposalRecord {
    pub fn proposal(&self) -> ScoredProposal {
        ScoredProposal::new(self.interval, self.score)
    }
}

/// One sentence–proposal match, in frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub video: String,
    pub sentence_index: usize,
    pub interval: TemporalInterval,
    pub score: f64,
    pub similarity: f64,
}

impl PairRecord {
    pub fn new(video: &str, pair: &MatchPair) -> Self {
        Self {
            video: video.to_string(),
            sentence_index: pair.sentence_index,
            interval: pair.proposal.interval,
            score: pair.proposal.score,
            similarity: pair.similarity,
        }
    }

    pub fn pair(&self) -> MatchPair {
        MatchPair {
            sentence_index: self.sentence_index,
            proposal: ScoredProposal::new(self.interval, self.score),
            similarity: self.similarity,
        }
    }
}

/// One captioned event of a [`DenseCaptionResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionEntry {
    pub sentence: String,
    /// `[start, end]` in seconds.
    pub timestamp: [f64; 2],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalData {
    pub used: bool,
    pub details: String,
}

/// Dense captioning output: captioned events per video id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseCaptionResult {
    pub version: String,
    pub results: std::collections::BTreeMap<String, Vec<CaptionEntry>>,
    pub external_data: ExternalData,
}

impl DenseCaptionResult {
    pub fn new() -> Self {
        Self {
            version: RESULT_VERSION.to_string(),
            results: Default::default(),
            external_data: ExternalData {
                used: false,
                details: String::new(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (vid, entries) in &self.results {
            for e in entries {
                let [s, t] = e.timestamp;
                if !(s >= 0.0 && t > s && t.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "video {vid:?}: bad timestamp [{s}, {t}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Default for DenseCaptionResult {
    fn default() -> Self {
        Self::new()
    }
}

/// Converts a frame interval to `[start, end]` seconds.
pub fn interval_seconds(iv: &TemporalInterval, frame_seconds: f64) -> [f64; 2] {
    [iv.start() as f64 * frame_seconds, iv.end() as f64 * frame_seconds]
}

/// Inverse of [`interval_seconds`], rounding to the nearest frame.
pub fn seconds_interval(ts: [f64; 2], frame_seconds: f64) -> Result<TemporalInterval> {
    let s = (ts[0] / frame_seconds).round();
    let e = (ts[1] / frame_seconds).round();
    if !(s >= 0.0 && e.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad timestamp {ts:?}")));
    }
    TemporalInterval::new(s as usize, e as usize)
}
