//! Multi-teacher distillation for the proposal generator.
//!
//! Each teacher gets an adaptive weight from a small gating network applied to
//! its features and the student's features. The student is trained against
//! the weighted fusion of teacher outputs plus a feature-matching term, and
//! against a second fusion with reciprocal "suppression" weights so no single
//! teacher dominates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matching::MatchPair;
use crate::proposal::{best_iou_map, BoundaryProbabilities, ConfidenceMap, TeacherOutput};
use crate::temporal::{FeatureSequence, TemporalInterval};

/// Clamp applied inside the logarithms of the boundary BCE.
pub const BCE_EPS: f64 = 1e-7;
pub const DEFAULT_GAMMA: f64 = 0.8;
pub const DEFAULT_ETA: f64 = 0.2;
const DEGENERATE_WEIGHT: f64 = 1e-12;

/// Normalized teacher weights (positive, summing to one).
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherWeights(Vec<f64>);

impl TeacherWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }
}

/// Parameters of the gating network: two `d x d` affine maps followed by an
/// affine map to a scalar. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GatingParams {
    pub dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

impl GatingParams {
    /// Identity inner maps and a summing output map, all biases zero.
    pub fn identity(dim: usize) -> Self {
        let eye: Vec<f64> = (0..dim * dim)
            .map(|i| if i / dim == i % dim { 1.0 } else { 0.0 })
            .collect();
        Self {
            dim,
            w1: eye.clone(),
            b1: vec![0.0; dim],
            w2: eye,
            b2: vec![0.0; dim],
            w3: vec![1.0; dim],
            b3: 0.0,
        }
    }

    /// Gaussian init with variance `1 / dim`, zero biases.
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let mut draw = |n: usize| (0..n).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>();
        Self {
            dim,
            w1: draw(dim * dim),
            b1: vec![0.0; dim],
            w2: draw(dim * dim),
            b2: vec![0.0; dim],
            w3: draw(dim),
            b3: 0.0,
        }
    }

    fn check(&self) -> Result<()> {
        let d = self.dim;
        if self.w1.len() != d * d
            || self.w2.len() != d * d
            || self.b1.len() != d
            || self.b2.len() != d
            || self.w3.len() != d
        {
            return Err(Error::shape(format!("gating parameters inconsistent with dim {d}")));
        }
        Ok(())
    }
}

fn affine_relu(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| {
            let dot: f64 = w[r * d..(r + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum();
            (dot + bias).max(0.0)
        })
        .collect()
}

/// Teacher compatibility score: elementwise product of teacher and student
/// features, a per-frame affine+ReLU, max-pooling over time, another
/// affine+ReLU and a final affine map to a scalar.
pub fn compatibility_score(teacher: &FeatureSequence, student: &FeatureSequence, params: &GatingParams) -> Result<f64> {
    if !teacher.same_shape(student) {
        return Err(Error::shape(format!(
            "teacher features {}x{} vs student features {}x{}",
            teacher.len(),
            teacher.dim(),
            student.len(),
            student.dim()
        )));
    }
    params.check()?;
    if params.dim != teacher.dim() {
        return Err(Error::shape(format!(
            "gating dim {} vs feature dim {}",
            params.dim,
            teacher.dim()
        )));
    }
    let mut pooled = vec![f64::NEG_INFINITY; params.dim];
    let mut product = vec![0.0; params.dim];
    for (a, b) in teacher.rows().zip(student.rows()) {
        for ((p, x), y) in product.iter_mut().zip(a).zip(b) {
            *p = x * y;
        }
        for (m, h) in pooled.iter_mut().zip(affine_relu(&params.w1, &params.b1, &product)) {
            *m = m.max(h);
        }
    }
    let hidden = affine_relu(&params.w2, &params.b2, &pooled);
    Ok(hidden.iter().zip(&params.w3).map(|(h, w)| h * w).sum::<f64>() + params.b3)
}

/// Softmax of the compatibility scores, shifted by the maximum for stability.
pub fn teacher_weights(q: &[f64]) -> Result<TeacherWeights> {
    if q.is_empty() {
        return Err(Error::EmptyInput("teacher scores"));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("teacher scores must be finite".into()));
    }
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = q.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Ok(TeacherWeights(exp.into_iter().map(|e| e / total).collect()))
}

/// Reciprocal weights `1 / (n * g_i)`; uniform weights map to all ones.
pub fn suppression_weights(g: &TeacherWeights) -> Result<Vec<f64>> {
    let n = g.len() as f64;
    g.as_slice()
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value <= DEGENERATE_WEIGHT {
                Err(Error::DegenerateWeight { index, value })
            } else {
                Ok(1.0 / (n * value))
            }
        })
        .collect()
}

/// Elementwise weighted sum of teacher outputs. The result's mask is the
/// intersection of the inputs' masks. Values are not clipped.
pub fn fuse_labels(weights: &[f64], outputs: &[TeacherOutput]) -> Result<TeacherOutput> {
    let first = outputs.first().ok_or(Error::EmptyInput("teacher outputs"))?;
    if weights.len() != outputs.len() {
        return Err(Error::shape(format!(
            "{} weights for {} teacher outputs",
            weights.len(),
            outputs.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidArgument("fusion weights must be finite".into()));
    }
    if let Some(o) = outputs.iter().find(|o| !o.same_shape(first)) {
        return Err(Error::shape(format!(
            "teacher output {}x{} vs {}x{}",
            o.max_duration(),
            o.len(),
            first.max_duration(),
            first.len()
        )));
    }
    let t = first.len();
    let cells = first.confidence.values().len();
    let mut start = vec![0.0; t];
    let mut end = vec![0.0; t];
    let mut conf = vec![0.0; cells];
    let mut mask = vec![true; cells];
    for (w, o) in weights.iter().zip(outputs) {
        axpy(&mut start, *w, &o.boundaries.start);
        axpy(&mut end, *w, &o.boundaries.end);
        axpy(&mut conf, *w, o.confidence.values());
        for (m, v) in mask.iter_mut().zip(o.confidence.mask()) {
            *m &= v;
        }
    }
    TeacherOutput::new(
        BoundaryProbabilities::new(start, end)?,
        ConfidenceMap::new(first.max_duration(), t, conf, mask)?,
    )
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, v) in acc.iter_mut().zip(x) {
        *y += a * v;
    }
}

/// Gradient of a loss with respect to a [`TeacherOutput`]; same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGradient {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub conf: Vec<f64>,
}

impl OutputGradient {
    fn zeros_like(out: &TeacherOutput) -> Self {
        Self {
            start: vec![0.0; out.len()],
            end: vec![0.0; out.len()],
            conf: vec![0.0; out.confidence.values().len()],
        }
    }

    fn add_scaled(&mut self, a: f64, other: &Self) {
        axpy(&mut self.start, a, &other.start);
        axpy(&mut self.end, a, &other.end);
        axpy(&mut self.conf, a, &other.conf);
    }

    pub fn max_abs(&self) -> f64 {
        self.start
            .iter()
            .chain(&self.end)
            .chain(&self.conf)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Binary cross entropy of `p` against soft target `y`, with the log
/// arguments clamped below at [`BCE_EPS`]. Returns value and derivative.
fn bce(p: f64, y: f64) -> (f64, f64) {
    let mut value = 0.0;
    let mut grad = 0.0;
    if y != 0.0 {
        if p > BCE_EPS {
            value -= y * p.ln();
            grad -= y / p;
        } else {
            value -= y * BCE_EPS.ln();
        }
    }
    if y != 1.0 {
        let q = 1.0 - p;
        if q > BCE_EPS {
            value -= (1.0 - y) * q.ln();
            grad += (1.0 - y) / q;
        } else {
            value -= (1.0 - y) * BCE_EPS.ln();
        }
    }
    (value, grad)
}

fn mean_bce(pred: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
    let n = pred.len() as f64;
    let mut total = 0.0;
    for ((p, y), g) in pred.iter().zip(target).zip(grad.iter_mut()) {
        let (v, d) = bce(*p, *y);
        total += v;
        *g = d / n;
    }
    total / n
}

/// Proposal loss between a student output and a target: mean BCE on start
/// probabilities, mean BCE on end probabilities and mean squared error over
/// the valid confidence cells. Returns the value and its gradient with respect
/// to the student output.
pub fn bmn_loss(student: &TeacherOutput, target: &TeacherOutput) -> Result<(f64, OutputGradient)> {
    if !student.same_shape(target) {
        return Err(Error::shape(format!(
            "student output {}x{} vs target {}x{}",
            student.max_duration(),
            student.len(),
            target.max_duration(),
            target.len()
        )));
    }
    target.check_probabilities()?;
    let mut grad = OutputGradient::zeros_like(student);
    let mut value = mean_bce(&student.boundaries.start, &target.boundaries.start, &mut grad.start);
    value += mean_bce(&student.boundaries.end, &target.boundaries.end, &mut grad.end);

    let mask = target.confidence.mask();
    let valid = mask
        .iter()
        .zip(student.confidence.mask())
        .filter(|(a, b)| **a && **b)
        .count();
    if valid > 0 {
        let n = valid as f64;
        let mut sq = 0.0;
        for (i, (c, y)) in student
            .confidence
            .values()
            .iter()
            .zip(target.confidence.values())
            .enumerate()
        {
            if mask[i] && student.confidence.mask()[i] {
                let diff = c - y;
                sq += diff * diff;
                grad.conf[i] = 2.0 * diff / n;
            }
        }
        value += sq / n;
    }
    Ok((value, grad))
}

/// Value and gradients of one distillation objective.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillLoss {
    pub value: f64,
    pub output_grad: OutputGradient,
    pub feature_grad: Vec<f64>,
}

/// `f(O', clip(sum w_i O_i)) + sum w_i MSE(V', V_i)`. Called with the teacher
/// weights it is the main distillation loss; with the suppression weights it
/// is the suppression loss. The fused target is clipped into `[0, 1]` since
/// suppression weights sum to more than one. Weights are treated as constants.
pub fn distill_loss(
    student: &TeacherOutput,
    student_feats: &FeatureSequence,
    outputs: &[TeacherOutput],
    feats: &[FeatureSequence],
    weights: &[f64],
) -> Result<DistillLoss> {
    if feats.len() != outputs.len() {
        return Err(Error::shape(format!(
            "{} teacher feature sequences for {} teacher outputs",
            feats.len(),
            outputs.len()
        )));
    }
    let target = fuse_labels(weights, outputs)?.clipped();
    let (mut value, output_grad) = bmn_loss(student, &target)?;

    let n = student_feats.as_slice().len() as f64;
    let mut feature_grad = vec![0.0; student_feats.as_slice().len()];
    for (w, f) in weights.iter().zip(feats) {
        if !f.same_shape(student_feats) {
            return Err(Error::shape(format!(
                "teacher features {}x{} vs student features {}x{}",
                f.len(),
                f.dim(),
                student_feats.len(),
                student_feats.dim()
            )));
        }
        let mut mse = 0.0;
        for ((g, s), t) in feature_grad.iter_mut().zip(student_feats.as_slice()).zip(f.as_slice()) {
            let diff = s - t;
            mse += diff * diff;
            *g += w * 2.0 * diff / n;
        }
        value += w * mse / n;
    }
    Ok(DistillLoss {
        value,
        output_grad,
        feature_grad,
    })
}

/// `gamma * L_p + eta * L_p_bar`.
pub fn final_distill_loss(lp: f64, lp_bar: f64, gamma: f64, eta: f64) -> Result<f64> {
    if gamma < 0.0 || eta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be non-negative, got gamma={gamma}, eta={eta}"
        )));
    }
    Ok(gamma * lp + eta * lp_bar)
}

/// Hard proposal labels from matched proposal–sentence pairs. Boundary
/// probabilities are one on the matched start/last frames dilated by one
/// frame; confidence is the best IoU against the matched intervals.
pub fn pairs_to_hard_labels(pairs: &[MatchPair], length: usize, max_duration: usize) -> Result<TeacherOutput> {
    let intervals: Vec<TemporalInterval> = pairs.iter().map(|p| p.proposal.interval).collect();
    intervals_to_hard_labels(&intervals, length, max_duration)
}

/// Hard labels for explicit intervals; see [`pairs_to_hard_labels`].
pub fn intervals_to_hard_labels(
    intervals: &[TemporalInterval],
    length: usize,
    max_duration: usize,
) -> Result<TeacherOutput> {
    for iv in intervals {
        iv.check_within(length)?;
    }
    let mut b = BoundaryProbabilities::zeros(length);
    let mark = |v: &mut [f64], center: usize| {
        v[center.saturating_sub(1)..=(center + 1).min(length - 1)].fill(1.0);
    };
    for iv in intervals {
        mark(&mut b.start, iv.start());
        mark(&mut b.end, iv.last());
    }
    TeacherOutput::new(b, best_iou_map(intervals, length, max_duration)?)
}

/// Weighted sum of proposal losses `sum_k w_k f(O', target_k)`.
pub fn weighted_bmn_loss(student: &TeacherOutput, targets: &[(f64, TeacherOutput)]) -> Result<(f64, OutputGradient)> {
    let mut value = 0.0;
    let mut grad = OutputGradient::zeros_like(student);
    for (w, target) in targets {
        let (v, g) = bmn_loss(student, target)?;
        value += w * v;
        grad.add_scaled(*w, &g);
    }
    Ok((value, grad))
}

/// Settings for fitting a free student output by gradient descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentFit {
    pub steps: usize,
    /// Step size in per-element units: gradients are rescaled by the element
    /// count of their mean and by the total target weight.
    pub lr: f64,
    /// Stop once every rescaled gradient entry is below this.
    pub tol: f64,
}

impl Default for StudentFit {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 1.0,
            tol: 1e-9,
        }
    }
}

/// Fits a free student output to `sum_k w_k f(O', target_k)`.
///
/// Boundary probabilities are optimized through their logits, confidences by
/// projected descent on `[0, 1]`. Returns the fitted output and the loss trace.
pub fn fit_student_outputs(
    init: &TeacherOutput,
    targets: &[(f64, TeacherOutput)],
    fit: &StudentFit,
) -> Result<(TeacherOutput, Vec<f64>)> {
    let total_weight: f64 = targets.iter().map(|(w, _)| *w).sum();
    if targets.is_empty() || !(total_weight > 0.0) {
        return Err(Error::EmptyInput("weighted distillation targets"));
    }
    let t = init.len() as f64;
    let valid = init.confidence.valid_count().max(1) as f64;
    let to_logit = |p: f64| {
        let p = p.clamp(1e-4, 1.0 - 1e-4);
        (p / (1.0 - p)).ln()
    };
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut z_start: Vec<f64> = init.boundaries.start.iter().map(|p| to_logit(*p)).collect();
    let mut z_end: Vec<f64> = init.boundaries.end.iter().map(|p| to_logit(*p)).collect();
    let mut student = init.clone();
    let step = fit.lr / total_weight;
    let mut trace = Vec::new();
    for _ in 0..fit.steps {
        let (value, grad) = weighted_bmn_loss(&student, targets)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: trace.len(),
                loss: value,
            });
        }
        trace.push(value);
        let mut largest: f64 = 0.0;
        for (z, (p, g)) in z_start
            .iter_mut()
            .zip(student.boundaries.start.iter_mut().zip(&grad.start))
            .chain(z_end.iter_mut().zip(student.boundaries.end.iter_mut().zip(&grad.end)))
        {
            let gz = g * *p * (1.0 - *p) * t;
            largest = largest.max(gz.abs());
            *z -= step * gz;
            *p = sigmoid(*z);
        }
        for (c, g) in student.confidence.values_mut().iter_mut().zip(&grad.conf) {
            let gc = g * valid / 2.0;
            largest = largest.max(gc.abs());
            *c = (*c - step * gc).clamp(0.0, 1.0);
        }
        if largest < fit.tol {
            break;
        }
    }
    Ok((student, trace))
}

/// Weights, losses and fitted output of one distillation run.
#[derive(Debug, Clone)]
pub struct DistillReport {
    pub scores: Vec<f64>,
    pub weights: TeacherWeights,
    pub suppression: Vec<f64>,
    pub lp: f64,
    pub lp_bar: f64,
    pub total: f64,
    pub student: TeacherOutput,
    pub trace: Vec<f64>,
}

/// Inputs to a full distillation run for one video.
pub struct DistillProblem<'a> {
    pub student_feats: &'a FeatureSequence,
    pub teacher_outputs: &'a [TeacherOutput],
    pub teacher_feats: &'a [FeatureSequence],
    pub gating: &'a GatingParams,
    pub gamma: f64,
    pub eta: f64,
    /// Optional hard labels from matched pairs and their loss weight.
    pub hard_labels: Option<(f64, &'a TeacherOutput)>,
}

/// Computes adaptive and suppression weights, fits the student output to the
/// combined objective and reports the final losses.
pub fn distill_student(problem: &DistillProblem<'_>, fit: &StudentFit) -> Result<DistillReport> {
    let first = problem
        .teacher_outputs
        .first()
        .ok_or(Error::EmptyInput("teacher outputs"))?;
    final_distill_loss(0.0, 0.0, problem.gamma, problem.eta)?;
    let scores = problem
        .teacher_feats
        .iter()
        .map(|f| compatibility_score(f, problem.student_feats, problem.gating))
        .collect::<Result<Vec<_>>>()?;
    let weights = teacher_weights(&scores)?;
    let suppression = suppression_weights(&weights)?;

    let mut targets = vec![
        (
            problem.gamma,
            fuse_labels(weights.as_slice(), problem.teacher_outputs)?.clipped(),
        ),
        (
            problem.eta,
            fuse_labels(&suppression, problem.teacher_outputs)?.clipped(),
        ),
    ];
    if let Some((w, hard)) = problem.hard_labels {
        targets.push((w, hard.clone()));
    }
    targets.retain(|(w, _)| *w > 0.0);
    let init = TeacherOutput::new(
        BoundaryProbabilities::new(vec![0.5; first.len()], vec![0.5; first.len()])?,
        ConfidenceMap::new(
            first.max_duration(),
            first.len(),
            vec![0.5; first.confidence.values().len()],
            first.confidence.mask().to_vec(),
        )?,
    )?;
    let (student, trace) = fit_student_outputs(&init, &targets, fit)?;

    let lp = distill_loss(
        &student,
        problem.student_feats,
        problem.teacher_outputs,
        problem.teacher_feats,
        weights.as_slice(),
    )?
    .value;
    let lp_bar = distill_loss(
        &student,
        problem.student_feats,
        problem.teacher_outputs,
        problem.teacher_feats,
        &suppression,
    )?
    .value;
    let total = final_distill_loss(lp, lp_bar, problem.gamma, problem.eta)?;
    Ok(DistillReport {
        scores,
        weights,
        suppression,
        lp,
        lp_bar,
        total,
        student,
        trace,
    })
}

/// Mean boundary BCE (start plus end) of `pred` against `target`.
pub fn boundary_bce(pred: &TeacherOutput, target: &TeacherOutput) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("boundary length mismatch"));
    }
    let mut scratch = vec![0.0; pred.len()];
    Ok(mean_bce(&pred.boundaries.start, &target.boundaries.start, &mut scratch)
        + mean_bce(&pred.boundaries.end, &target.boundaries.end, &mut scratch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposal::{oracle_teacher_output, ScoredProposal};
    use proptest::prelude::*;
    use rand::Rng;

    fn iv(s: usize, e: usize) -> TemporalInterval {
        TemporalInterval::new(s, e).unwrap()
    }

    fn single(start: f64, end: f64, conf: f64) -> TeacherOutput {
        let mut map = ConfidenceMap::filled(1, 1, 0.0).unwrap();
        map.set(1, 0, conf);
        TeacherOutput::new(BoundaryProbabilities::new(vec![start], vec![end]).unwrap(), map).unwrap()
    }

    #[test]
    fn compatibility_examples() {
        let vi = FeatureSequence::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let vs = FeatureSequence::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let params = GatingParams::identity(2);
        assert_eq!(compatibility_score(&vi, &vs, &params).unwrap(), 3.0);

        let mut biased = params.clone();
        biased.b3 = -0.7;
        let zeros = FeatureSequence::zeros(3, 2).unwrap();
        let any = FeatureSequence::new(3, 2, vec![1.0, -2.0, 0.5, 3.0, 4.0, 4.0]).unwrap();
        assert_eq!(compatibility_score(&zeros, &any, &biased).unwrap(), -0.7);

        let neg = FeatureSequence::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        let pos = FeatureSequence::from_rows(&[vec![1.0, -3.0]]).unwrap();
        assert_eq!(compatibility_score(&neg, &pos, &biased).unwrap(), -0.7);

        let short = FeatureSequence::zeros(2, 2).unwrap();
        assert!(compatibility_score(&short, &any, &params).is_err());
    }

    #[test]
    fn compatibility_max_pools_over_time() {
        let vi = FeatureSequence::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let vs = FeatureSequence::from_rows(&[vec![2.0, 5.0], vec![7.0, 3.0]]).unwrap();
        // products (2,0) and (0,3); pooled (2,3)
        assert_eq!(compatibility_score(&vi, &vs, &GatingParams::identity(2)).unwrap(), 5.0);
    }

    #[test]
    fn teacher_weight_examples() {
        let w = teacher_weights(&[0.0, 0.0, 0.0]).unwrap();
        assert!(w.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let w = teacher_weights(&[2f64.ln(), 0.0]).unwrap();
        assert!((w.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
        let w = teacher_weights(&[800.0, 800.0, 800.0, 800.0]).unwrap();
        assert!(w.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(teacher_weights(&[]).is_err());
        assert!(teacher_weights(&[f64::NAN]).is_err());
    }

    #[test]
    fn suppression_weight_examples() {
        let s = suppression_weights(&teacher_weights(&[0.0; 3]).unwrap()).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let s = suppression_weights(&TeacherWeights(vec![0.5, 0.5])).unwrap();
        assert_eq!(s, vec![1.0, 1.0]);
        let s = suppression_weights(&TeacherWeights(vec![0.8, 0.2])).unwrap();
        assert!((s[0] - 0.625).abs() < 1e-12 && (s[1] - 2.5).abs() < 1e-12);
        assert!(matches!(
            suppression_weights(&TeacherWeights(vec![1.0, 1e-13])),
            Err(Error::DegenerateWeight { index: 1, .. })
        ));
    }

    #[test]
    fn fuse_label_examples() {
        let a = TeacherOutput::new(
            BoundaryProbabilities::new(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap(),
            ConfidenceMap::filled(2, 2, 0.2).unwrap(),
        )
        .unwrap();
        let b = TeacherOutput::new(
            BoundaryProbabilities::new(vec![0.0, 1.0], vec![0.0, 0.0]).unwrap(),
            ConfidenceMap::filled(2, 2, 0.6).unwrap(),
        )
        .unwrap();
        let fused = fuse_labels(&[0.5, 0.5], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(fused.boundaries.start, vec![0.5, 0.5]);
        assert!((fused.confidence.get(1, 0) - 0.4).abs() < 1e-15);
        assert_eq!(fused.confidence.mask(), a.confidence.mask());

        assert_eq!(fuse_labels(&[1.0], std::slice::from_ref(&a)).unwrap(), a);

        let g = teacher_weights(&[0.3, 0.3]).unwrap();
        let sup = suppression_weights(&g).unwrap();
        let summed = fuse_labels(&sup, &[a.clone(), b.clone()]).unwrap();
        let mean = fuse_labels(&[0.5, 0.5], &[a.clone(), b.clone()]).unwrap();
        for (s, m) in summed.confidence.values().iter().zip(mean.confidence.values()) {
            assert!((s - 2.0 * m).abs() < 1e-12);
        }

        let mut masked = b.clone();
        masked.confidence.mask_mut()[0] = false;
        let fused = fuse_labels(&[0.5, 0.5], &[a.clone(), masked]).unwrap();
        assert!(!fused.confidence.mask()[0]);
        assert!(fuse_labels(&[1.0], &[a.clone(), b]).is_err());
        let other = TeacherOutput::zeros(3, 2).unwrap();
        assert!(fuse_labels(&[0.5, 0.5], &[a, other]).is_err());
    }

    #[test]
    fn bmn_loss_examples() {
        let exact = oracle_teacher_output(&[iv(1, 4)], 6, 0.0).unwrap();
        let (v, _) = bmn_loss(&exact, &exact).unwrap();
        assert_eq!(v, 0.0);

        let (v, _) = bmn_loss(&single(0.5, 0.0, 0.3), &single(1.0, 0.0, 0.3)).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);

        // saturated wrong prediction stays finite
        let (v, _) = bmn_loss(&single(0.0, 1.0, 0.0), &single(1.0, 0.0, 0.0)).unwrap();
        assert!((v - 2.0 * -(BCE_EPS.ln())).abs() < 1e-9);

        assert!(bmn_loss(&single(0.5, 0.5, 0.5), &single(1.5, 0.0, 0.0)).is_err());
    }

    #[test]
    fn distill_loss_examples() {
        let target = oracle_teacher_output(&[iv(0, 2)], 3, 0.0).unwrap();
        let feats = FeatureSequence::new(3, 2, vec![0.3; 6]).unwrap();
        let l = distill_loss(
            &target,
            &feats,
            &[target.clone(), target.clone()],
            &[feats.clone(), feats.clone()],
            &[0.4, 0.6],
        )
        .unwrap();
        assert_eq!(l.value, 0.0);

        let student = single(0.5, 0.5, 0.5);
        let v_s = FeatureSequence::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let v_1 = FeatureSequence::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let l = distill_loss(&student, &v_s, std::slice::from_ref(&student), &[v_1], &[1.0]).unwrap();
        let (f_only, _) = bmn_loss(&student, &student).unwrap();
        assert!((l.value - f_only - 1.0).abs() < 1e-12);
        assert_eq!(l.feature_grad, vec![-1.0, -1.0]);
    }

    #[test]
    fn final_loss_examples() {
        assert!((final_distill_loss(1.0, 1.0, DEFAULT_GAMMA, DEFAULT_ETA).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(final_distill_loss(2.0, 5.0, 0.8, 0.0).unwrap(), 1.6);
        assert_eq!(final_distill_loss(0.0, 0.0, 0.8, 0.2).unwrap(), 0.0);
        assert!(final_distill_loss(1.0, 1.0, -0.1, 0.2).is_err());
    }

    fn pair(s: usize, e: usize) -> MatchPair {
        MatchPair {
            sentence_index: 0,
            proposal: ScoredProposal::new(iv(s, e), 1.0),
            similarity: 1.0,
        }
    }

    #[test]
    fn hard_label_examples() {
        let h = pairs_to_hard_labels(&[pair(2, 5)], 8, 8).unwrap();
        let on = |set: &[usize]| {
            (0..8)
                .map(|t| if set.contains(&t) { 1.0 } else { 0.0 })
                .collect::<Vec<_>>()
        };
        assert_eq!(h.boundaries.start, on(&[1, 2, 3]));
        assert_eq!(h.boundaries.end, on(&[3, 4, 5]));
        assert_eq!(h.confidence.get(3, 2), 1.0);

        assert_eq!(
            pairs_to_hard_labels(&[], 8, 8).unwrap(),
            TeacherOutput::zeros(8, 8).unwrap()
        );
        assert_eq!(pairs_to_hard_labels(&[pair(2, 5), pair(2, 5)], 8, 8).unwrap(), h);
        assert!(pairs_to_hard_labels(&[pair(6, 9)], 8, 8).is_err());

        // dilation is cut at the sequence edges
        let h = pairs_to_hard_labels(&[pair(0, 8)], 8, 8).unwrap();
        assert_eq!(h.boundaries.start, on(&[0, 1]));
        assert_eq!(h.boundaries.end, on(&[6, 7]));
    }

    #[test]
    fn student_fit_reaches_weighted_average_target() {
        let a = oracle_teacher_output(&[iv(2, 6)], 10, 1.0).unwrap();
        let b = oracle_teacher_output(&[iv(4, 9)], 10, 0.0).unwrap();
        let targets = vec![(0.25, a.clone()), (0.75, b.clone())];
        let init = TeacherOutput::zeros(10, 10).unwrap();
        let (fit, trace) = fit_student_outputs(&init, &targets, &StudentFit::default()).unwrap();
        let expected = fuse_labels(&[0.25, 0.75], &[a, b]).unwrap();
        for (x, y) in fit.confidence.values().iter().zip(expected.confidence.values()) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in fit.boundaries.start.iter().zip(&expected.boundaries.start) {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
        assert!(trace.first() > trace.last());
    }

    proptest! {
        #[test]
        fn suppression_identities(raw in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
            let g = teacher_weights(&raw).unwrap();
            prop_assert!((g.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let s = suppression_weights(&g).unwrap();
            let n = g.len() as f64;
            for (gi, si) in g.as_slice().iter().zip(&s) {
                prop_assert!((gi * si * n - 1.0).abs() < 1e-9);
            }
            prop_assert!(s.iter().sum::<f64>() >= 1.0 - 1e-12);
        }

        #[test]
        fn teacher_weights_shift_invariant(
            raw in proptest::collection::vec(-5.0f64..5.0, 1..8),
            shift in -50.0f64..50.0,
        ) {
            let a = teacher_weights(&raw).unwrap();
            let shifted: Vec<f64> = raw.iter().map(|v| v + shift).collect();
            let b = teacher_weights(&shifted).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gating_random_is_seeded() {
        assert_eq!(GatingParams::random(4, 7), GatingParams::random(4, 7));
        assert_ne!(GatingParams::random(4, 7), GatingParams::random(4, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = |rng: &mut ChaCha8Rng| {
            FeatureSequence::new(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (a, b) = (feats(&mut rng), feats(&mut rng));
        assert!(compatibility_score(&a, &b, &GatingParams::random(4, 3))
            .unwrap()
            .is_finite());
    }
}
