//! Stage orchestration over a manifest and a per-run output directory.
//!
//! Every stage reads the manifest plus the artifacts earlier stages left in
//! the run directory, and writes its own artifacts there exactly once.
//! Errors carry the name of the failing stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::caption::{beam_search, CaptionModel, ConditionalTokenModel};
use crate::config::PipelineConfig;
use crate::distill::{
    boundary_bce, distill_student, intervals_to_hard_labels, pairs_to_hard_labels, DistillProblem, GatingParams,
    StudentFit,
};
use crate::error::{Error, Result};
use crate::eval::{
    ar_at_an, auc, caption_scores, pair_captions, retrieval_metrics, CaptionScores, RetrievalMetrics, VideoProposals,
};
use crate::io::{
    interval_seconds, read_features, read_json, read_jsonl, read_teacher_output, resolve, seconds_interval, write_json,
    write_jsonl, write_teacher_output, CaptionEntry, DatasetManifest, DenseCaptionResult, PairRecord, ProposalRecord,
    VideoEntry,
};
use crate::matching::{
    assign_proposals, cosine_distance, embed_clip, train_matcher, EmbedParams, MatchPair, MatchingVideo, TrainHyper,
};
use crate::proposal::{decode_proposals, rank_order, ScoredProposal, TeacherOutput};
use crate::temporal::{rescale_features, FeatureSequence, TemporalInterval};

pub const PROPOSALS_FILE: &str = "proposals.jsonl";
pub const MATCHER_FILE: &str = "matcher.json";
pub const MATCH_TRACE_FILE: &str = "match_trace.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const RESULTS_FILE: &str = "results.json";
pub const REPORT_FILE: &str = "report.json";
pub const DISTILL_FILE: &str = "distill.json";
pub const STUDENT_DIR: &str = "students";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Propose,
    TrainMatch,
    Caption,
    Eval,
    DistillDemo,
}

impl Mode {
    pub fn stage(self) -> &'static str {
        match self {
            Self::Propose => "propose",
            Self::TrainMatch => "match",
            Self::Caption => "caption",
            Self::Eval => "eval",
            Self::DistillDemo => "distill-demo",
        }
    }
}

/// Manifest, configuration and output directory of one run.
#[derive(Debug, Clone)]
pub struct Run<'a> {
    pub manifest: &'a DatasetManifest,
    /// Directory relative manifest paths resolve against.
    pub base: PathBuf,
    pub cfg: &'a PipelineConfig,
    pub out: PathBuf,
}

/// Runs one stage and returns the files it wrote.
pub fn run_pipeline(run: &Run<'_>, mode: Mode) -> Result<Vec<PathBuf>> {
    let inner = || -> Result<Vec<PathBuf>> {
        run.cfg.validate()?;
        run.manifest.validate()?;
        match mode {
            Mode::Propose => propose(run),
            Mode::TrainMatch => train_match(run),
            Mode::Caption => caption(run),
            Mode::Eval => evaluate(run),
            Mode::DistillDemo => distill_demo(run),
        }
    };
    inner().map_err(|e| e.in_stage(mode.stage()))
}

fn missing(what: String) -> Error {
    Error::InvalidArgument(format!("missing input: {what}"))
}

fn require_artifact(run: &Run<'_>, name: &str, producer: &str) -> Result<PathBuf> {
    let p = run.out.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(missing(format!("{} (run `{producer}` first)", p.display())))
    }
}

fn load_features(run: &Run<'_>, v: &VideoEntry) -> Result<FeatureSequence> {
    let seq = read_features(&resolve(&run.base, &v.feature_path))?;
    if seq.len() != v.length {
        return Err(Error::shape(format!(
            "video {:?}: {} feature rows, manifest length {}",
            v.id,
            seq.len(),
            v.length
        )));
    }
    Ok(seq)
}

/// Maps an interval on a grid of `from` cells onto `to` frames, rounding
/// both ends to the nearest frame and keeping at least one frame.
pub fn map_interval(iv: &TemporalInterval, from: usize, to: usize) -> Result<TemporalInterval> {
    if from == to {
        return Ok(*iv);
    }
    let scale = |x: usize| (2 * x * to + from) / (2 * from);
    let end = scale(iv.end()).clamp(1, to);
    let start = scale(iv.start()).min(end - 1);
    TemporalInterval::new(start, end)
}

/// Decodes a boundary/confidence output into ranked proposals on a
/// `length`-frame video, dropping proposals with zero score.
pub fn proposals_for(map: &TeacherOutput, length: usize, cfg: &PipelineConfig) -> Result<Vec<ScoredProposal>> {
    let decoded = decode_proposals(map, cfg.soft_nms_sigma, cfg.top_k)?;
    let mut out = decoded
        .into_iter()
        .filter(|p| p.score > 0.0)
        .map(|p| {
            Ok(ScoredProposal::new(
                map_interval(&p.interval, map.len(), length)?,
                p.score,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(rank_order);
    Ok(out)
}

fn propose(run: &Run<'_>) -> Result<Vec<PathBuf>> {
    let mut records = Vec::new();
    for v in &run.manifest.videos {
        let p = v
            .proposal_map
            .as_ref()
            .ok_or_else(|| missing(format!("proposal_map for video {:?}", v.id)))?;
        let map = read_teacher_output(&resolve(&run.base, p))?;
        for prop in proposals_for(&map, v.length, run.cfg)? {
            records.push(ProposalRecord {
                video: v.id.clone(),
                interval: prop.interval,
                score: prop.score,
            });
        }
    }
    let path = run.out.join(PROPOSALS_FILE);
    write_jsonl(&path, &records)?;
    Ok(vec![path])
}

/// Proposals of the run grouped by video id, in file order.
pub fn read_proposals(path: &Path) -> Result<BTreeMap<String, Vec<ScoredProposal>>> {
    let mut by_video: BTreeMap<String, Vec<ScoredProposal>> = BTreeMap::new();
    for r in read_jsonl::<ProposalRecord>(path)? {
        by_video.entry(r.video.clone()).or_default().push(r.proposal());
    }
    Ok(by_video)
}

fn sentence_vectors(v: &VideoEntry) -> Result<&Vec<Vec<f64>>> {
    v.sentence_embeddings
        .as_ref()
        .ok_or_else(|| missing(format!("sentence_embeddings for video {:?}", v.id)))
}

fn hyper(cfg: &PipelineConfig) -> TrainHyper {
    TrainHyper {
        epochs: cfg.match_epochs,
        lr: cfg.match_lr,
        margin: cfg.margin,
        batch_size: cfg.match_batch,
        seed: cfg.seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTrace {
    pub loss: Vec<f64>,
}

/// Trains the matcher on even-split clips of every video, then pairs each
/// paragraph sentence with its most similar proposal.
fn train_match(run: &Run<'_>) -> Result<Vec<PathBuf>> {
    let proposals_path = require_artifact(run, PROPOSALS_FILE, "propose")?;
    let mut dataset = Vec::new();
    for v in &run.manifest.videos {
        dataset.push(MatchingVideo {
            features: load_features(run, v)?,
            sentences: sentence_vectors(v)?.clone(),
        });
    }
    let visual = dataset.first().ok_or(Error::EmptyInput("videos"))?.features.dim();
    let lexical = dataset
        .iter()
        .flat_map(|v| v.sentences.first())
        .map(Vec::len)
        .next()
        .ok_or(Error::EmptyInput("paragraph sentences"))?;
    let init = EmbedParams::random(run.cfg.embed_dim.unwrap_or(visual), visual, lexical, run.cfg.seed);
    let outcome = train_matcher(&dataset, &init, &hyper(run.cfg))?;
    let proposals = read_proposals(&proposals_path)?;

    let mut records = Vec::new();
    for (v, data) in run.manifest.videos.iter().zip(&dataset) {
        let props = proposals
            .get(&v.id)
            .ok_or_else(|| missing(format!("proposals for video {:?}", v.id)))?;
        for pair in match_video(&outcome.params, props, data)? {
            records.push(PairRecord::new(&v.id, &pair));
        }
    }
    let (m, t, p) = (
        run.out.join(MATCHER_FILE),
        run.out.join(MATCH_TRACE_FILE),
        run.out.join(PAIRS_FILE),
    );
    write_json(&m, &outcome.params)?;
    write_json(&t, &MatchTrace { loss: outcome.trace })?;
    write_jsonl(&p, &records)?;
    Ok(vec![m, t, p])
}

fn match_video(params: &EmbedParams, props: &[ScoredProposal], video: &MatchingVideo) -> Result<Vec<MatchPair>> {
    let sentences = video
        .sentences
        .iter()
        .map(|s| params.embed_sentence(s))
        .collect::<Result<Vec<_>>>()?;
    assign_proposals(props, &video.features, &sentences, params)
}

fn caption_params(run: &Run<'_>, visual_dim: usize) -> Result<EmbedParams> {
    match &run.manifest.embed_params {
        Some(p) => {
            let params: EmbedParams = read_json(&resolve(&run.base, p))?;
            params.check()?;
            Ok(params)
        }
        None => Ok(EmbedParams::identity(visual_dim)),
    }
}

fn load_caption_model(run: &Run<'_>) -> Result<CaptionModel> {
    let p = run
        .manifest
        .caption_model
        .as_ref()
        .ok_or_else(|| missing("caption_model in the manifest".into()))?;
    let model: CaptionModel = read_json(&resolve(&run.base, p))?;
    if model.vocab_size() > run.manifest.vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "caption model vocabulary {} exceeds manifest vocabulary {}",
            model.vocab_size(),
            run.manifest.vocab.len()
        )));
    }
    Ok(model)
}

/// Captions every proposal, conditioning the decoder on the proposal's clip
/// embedding.
fn caption(run: &Run<'_>) -> Result<Vec<PathBuf>> {
    let proposals = read_proposals(&require_artifact(run, PROPOSALS_FILE, "propose")?)?;
    let model = load_caption_model(run)?;
    let mut result = DenseCaptionResult::new();
    let mut params: Option<EmbedParams> = None;
    for v in &run.manifest.videos {
        let feats = load_features(run, v)?;
        let params = match &params {
            Some(p) => p,
            None => params.insert(caption_params(run, feats.dim())?),
        };
        let mut entries = Vec::new();
        for p in proposals.get(&v.id).map(Vec::as_slice).unwrap_or_default() {
            let context = embed_clip(&feats, &p.interval, params)?;
            let sentence = beam_search(&model, &context, run.cfg.beam, run.cfg.max_caption_len)?;
            entries.push(CaptionEntry {
                sentence: run.manifest.vocab.decode(&sentence)?,
                timestamp: interval_seconds(&p.interval, run.cfg.frame_seconds),
                score: p.score,
            });
        }
        result.results.insert(v.id.clone(), entries);
    }
    let path = run.out.join(RESULTS_FILE);
    write_json(&path, &result)?;
    Ok(vec![path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalReport {
    /// Average recall at selected numbers of proposals, keyed `AR@n`.
    pub ar: BTreeMap<String, f64>,
    pub auc: f64,
    pub curve: Vec<f64>,
}

/// Metric report written by the eval stage; absent sections had no input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposals: Option<ProposalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<CaptionScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalMetrics>,
}

fn gt_of(v: &VideoEntry) -> Result<&Vec<crate::io::GtEvent>> {
    v.gt_events
        .as_ref()
        .ok_or_else(|| missing(format!("gt_events for video {:?}", v.id)))
}

pub fn proposal_report(videos: &[VideoProposals], cfg: &PipelineConfig) -> Result<ProposalReport> {
    let curve = ar_at_an(videos, cfg.max_proposals, &cfg.iou_thresholds)?;
    let ar = [1, 10, 100]
        .into_iter()
        .filter(|&n| n <= curve.max_an())
        .map(|n| (format!("AR@{n}"), curve.at(n)))
        .collect();
    Ok(ProposalReport {
        ar,
        auc: auc(&curve)?,
        curve: curve.points().to_vec(),
    })
}

fn evaluate(run: &Run<'_>) -> Result<Vec<PathBuf>> {
    let proposals_path = run.out.join(PROPOSALS_FILE);
    let results_path = run.out.join(RESULTS_FILE);
    let matcher_path = run.out.join(MATCHER_FILE);
    if !proposals_path.is_file() && !results_path.is_file() {
        return Err(missing(format!(
            "{} or {} in {} (run `propose` or `caption` first)",
            PROPOSALS_FILE,
            RESULTS_FILE,
            run.out.display()
        )));
    }
    let mut report = MetricReport {
        proposals: None,
        captions: None,
        retrieval: None,
    };
    if proposals_path.is_file() {
        let by_video = read_proposals(&proposals_path)?;
        let videos = run
            .manifest
            .videos
            .iter()
            .map(|v| {
                Ok(VideoProposals {
                    proposals: by_video.get(&v.id).cloned().unwrap_or_default(),
                    gt: gt_of(v)?.iter().map(|g| g.interval).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        report.proposals = Some(proposal_report(&videos, run.cfg)?);
    }
    if results_path.is_file() {
        let result: DenseCaptionResult = read_json(&results_path)?;
        result.validate()?;
        let mut pairs = Vec::new();
        for v in &run.manifest.videos {
            let preds = result
                .results
                .get(&v.id)
                .map(Vec::as_slice)
                .unwrap_or_default()
                .iter()
                .map(|e| {
                    Ok((
                        seconds_interval(e.timestamp, run.cfg.frame_seconds)?,
                        run.manifest.vocab.encode(&e.sentence)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let gt: Vec<_> = gt_of(v)?.iter().map(|g| (g.interval, g.sentence.clone())).collect();
            pairs.extend(pair_captions(&preds, &gt, run.cfg.caption_gate)?);
        }
        if !pairs.is_empty() {
            report.captions = Some(caption_scores(&pairs)?);
        }
    }
    if matcher_path.is_file() {
        let params: EmbedParams = read_json(&matcher_path)?;
        params.check()?;
        report.retrieval = Some(retrieval(run, &params)?);
    }
    let path = run.out.join(REPORT_FILE);
    write_json(&path, &report)?;
    Ok(vec![path])
}

/// Sentence-to-clip retrieval over all ground-truth events of the corpus;
/// paragraph sentence `i` of a video belongs to its `i`-th event.
fn retrieval(run: &Run<'_>, params: &EmbedParams) -> Result<RetrievalMetrics> {
    let (mut queries, mut gallery) = (Vec::new(), Vec::new());
    for v in &run.manifest.videos {
        let feats = load_features(run, v)?;
        let gt = gt_of(v)?;
        let sents = sentence_vectors(v)?;
        if sents.len() != gt.len() {
            return Err(Error::shape(format!(
                "video {:?}: {} sentences for {} events",
                v.id,
                sents.len(),
                gt.len()
            )));
        }
        for (s, g) in sents.iter().zip(gt) {
            queries.push(params.embed_sentence(s)?);
            gallery.push(embed_clip(&feats, &g.interval, params)?);
        }
    }
    let sim = queries
        .iter()
        .map(|q| {
            gallery
                .iter()
                .map(|c| Ok(1.0 - cosine_distance(q, c)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = (0..queries.len()).collect();
    retrieval_metrics(&sim, &truth)
}

/// Per-video summary of a distillation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillVideoReport {
    pub video: String,
    pub round: usize,
    pub teacher_scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub suppression: Vec<f64>,
    pub lp: f64,
    pub lp_bar: f64,
    pub total: f64,
    pub hard_labels: bool,
    /// Boundary BCE of the student against dilated ground-truth boundaries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_bce: Option<f64>,
}

/// Distills each video's teachers into a free student output. Round 0 uses
/// soft labels only; each further refinement round (when a trained matcher
/// is present) decodes the previous student, matches paragraph sentences to
/// its proposals and adds the matches as hard labels.
fn distill_demo(run: &Run<'_>) -> Result<Vec<PathBuf>> {
    let matcher_path = run.out.join(MATCHER_FILE);
    let matcher: Option<EmbedParams> = if matcher_path.is_file() {
        Some(read_json(&matcher_path)?)
    } else {
        None
    };
    let rounds = if matcher.is_some() {
        run.cfg.refine_iterations
    } else {
        0
    };
    let fit = StudentFit {
        steps: run.cfg.distill_steps,
        ..StudentFit::default()
    };
    let mut reports = Vec::new();
    let mut written = Vec::new();
    for v in &run.manifest.videos {
        let teachers = v
            .teachers
            .as_ref()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| missing(format!("teachers for video {:?}", v.id)))?;
        let feats = load_features(run, v)?;
        let student_feats = rescale_features(&feats, run.cfg.target_len)?;
        let mut outputs = Vec::new();
        let mut teacher_feats = Vec::new();
        for t in teachers {
            outputs.push(read_teacher_output(&resolve(&run.base, &t.output))?);
            teacher_feats.push(rescale_features(
                &read_features(&resolve(&run.base, &t.features))?,
                run.cfg.target_len,
            )?);
        }
        let gating = GatingParams::identity(feats.dim());
        let grid = (outputs[0].len(), outputs[0].max_duration());
        let gt_labels = match &v.gt_events {
            Some(gt) => {
                let ivs = gt
                    .iter()
                    .map(|g| map_interval(&g.interval, v.length, grid.0))
                    .collect::<Result<Vec<_>>>()?;
                Some(intervals_to_hard_labels(&ivs, grid.0, grid.1)?)
            }
            None => None,
        };

        let mut hard: Option<TeacherOutput> = None;
        let mut student = None;
        for round in 0..=rounds {
            if round > 0 {
                let (params, prev) = (
                    matcher.as_ref().expect("rounds imply a matcher"),
                    student.as_ref().expect("previous round"),
                );
                let props = proposals_for(prev, v.length, run.cfg)?;
                if props.is_empty() {
                    break;
                }
                let video = MatchingVideo {
                    features: feats.clone(),
                    sentences: sentence_vectors(v)?.clone(),
                };
                let pairs: Vec<MatchPair> = match_video(params, &props, &video)?
                    .into_iter()
                    .map(|mut p| {
                        p.proposal.interval = map_interval(&p.proposal.interval, v.length, grid.0)?;
                        Ok(p)
                    })
                    .collect::<Result<_>>()?;
                hard = Some(pairs_to_hard_labels(&pairs, grid.0, grid.1)?);
            }
            let problem = DistillProblem {
                student_feats: &student_feats,
                teacher_outputs: &outputs,
                teacher_feats: &teacher_feats,
                gating: &gating,
                gamma: run.cfg.gamma,
                eta: run.cfg.eta,
                hard_labels: hard.as_ref().map(|h| (run.cfg.hard_label_weight, h)),
            };
            let r = distill_student(&problem, &fit)?;
            reports.push(DistillVideoReport {
                video: v.id.clone(),
                round,
                teacher_scores: r.scores.clone(),
                weights: r.weights.as_slice().to_vec(),
                suppression: r.suppression.clone(),
                lp: r.lp,
                lp_bar: r.lp_bar,
                total: r.total,
                hard_labels: hard.is_some(),
                boundary_bce: gt_labels.as_ref().map(|g| boundary_bce(&r.student, g)).transpose()?,
            });
            student = Some(r.student);
        }
        let path = run.out.join(STUDENT_DIR).join(format!("{}.json", v.id));
        write_teacher_output(&path, student.as_ref().expect("at least one round"))?;
        written.push(path);
    }
    let path = run.out.join(DISTILL_FILE);
    write_json(&path, &reports)?;
    written.insert(0, path);
    Ok(written)
}
