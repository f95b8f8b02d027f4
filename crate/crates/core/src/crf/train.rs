//! Reverse-mode gradients through the unrolled mean-field iterations and the
//! slice-level training stages built on them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    pixels_to_planes, unrolled_forward, CrfParameters, CrfTrace, MessagePassing, PairwiseOperator,
    PixelFeatures, UnaryMaps,
};
use crate::error::{Error, Result};
use crate::fcnn::{Gradients, NetworkParameters, ProbabilityMaps, Tensor};
use crate::volume::{LabelSlice, SliceTensor};

/// A pre-processed slice with its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSlice {
    pub slice: SliceTensor,
    pub labels: LabelSlice,
}

/// Per-slice gradient descent with momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceSchedule {
    pub learning_rate: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
    pub message_passing: MessagePassing,
}

impl Default for SliceSchedule {
    fn default() -> Self {
        SliceSchedule {
            learning_rate: 1e-8,
            epochs: 1,
            momentum: 0.9,
            seed: 0,
            message_passing: MessagePassing::Windowed,
        }
    }
}

impl SliceSchedule {
    /// Default schedule of the whole-network fine-tuning stage.
    pub fn finetune() -> Self {
        SliceSchedule {
            learning_rate: 1e-10,
            ..SliceSchedule::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Gradients of a slice loss with respect to the FCNN scores (`[pixel][label]`)
/// and the trainable CRF parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfGradients {
    pub dscores: Vec<f64>,
    pub dw: [f64; 2],
    pub dmu: Vec<Vec<f64>>,
}

impl CrfGradients {
    fn all_finite(&self) -> bool {
        self.dscores.iter().chain(&self.dw).chain(self.dmu.iter().flatten()).all(|v| v.is_finite())
    }
}

/// Mean per-pixel cross-entropy of `Q^T` and its gradient with respect to
/// the final logits.
pub fn slice_loss(trace: &CrfTrace, labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    let l = trace.labels;
    let m = trace.height * trace.width;
    if labels.len() != m {
        return Err(Error::DimMismatch(format!("{} labels for {m} pixels", labels.len())));
    }
    let q = trace.beliefs.last().expect("Q0");
    let mut loss = 0.0;
    let mut dlogits = q.clone();
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= l {
            return Err(Error::InvalidLabel {
                label: y as u8,
                offset: i,
            });
        }
        let z = &trace.logits[i * l..(i + 1) * l];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[y];
        dlogits[i * l + y] -= 1.0;
    }
    let scale = 1.0 / m as f64;
    dlogits.iter_mut().for_each(|d| *d *= scale);
    Ok((loss * scale, dlogits))
}

/// `dz = q * (dq - <dq, q>)` per pixel.
fn softmax_backward(q: &[f64], dq: &[f64], l: usize) -> Vec<f64> {
    let mut dz = vec![0.0; q.len()];
    for ((qi, dqi), dzi) in q.chunks(l).zip(dq.chunks(l)).zip(dz.chunks_mut(l)) {
        let dot: f64 = qi.iter().zip(dqi).map(|(a, b)| a * b).sum();
        for u in 0..l {
            dzi[u] = qi[u] * (dqi[u] - dot);
        }
    }
    dz
}

/// Back-propagates `dlogits` of the final iteration through every unrolled
/// mean-field update and the initial softmax.
pub fn crf_backward(op: &PairwiseOperator, trace: &CrfTrace, params: &CrfParameters, dlogits: &[f64]) -> CrfGradients {
    let l = trace.labels;
    let m = trace.height * trace.width;
    let mut grads = CrfGradients {
        dscores: vec![0.0; m * l],
        dw: [0.0; 2],
        dmu: vec![vec![0.0; l]; l],
    };
    let mut dz = dlogits.to_vec();
    let mut e = vec![0.0; m * l];
    let mut da = vec![0.0; m * l];
    let mut dq = vec![0.0; m * l];
    for t in (0..trace.a1.len()).rev() {
        let (a1, a2) = (&trace.a1[t], &trace.a2[t]);
        for (s, d) in grads.dscores.iter_mut().zip(&dz) {
            *s += d;
        }
        for i in 0..m {
            for u in 0..l {
                let db = -dz[i * l + u];
                for v in 0..l {
                    let msg = params.w[0] * a1[i * l + v] + params.w[1] * a2[i * l + v];
                    grads.dmu[u][v] += db * msg;
                }
            }
            for v in 0..l {
                e[i * l + v] = (0..l).map(|u| -dz[i * l + u] * params.mu[u][v]).sum();
            }
        }
        grads.dw[0] += e.iter().zip(a1).map(|(a, b)| a * b).sum::<f64>();
        grads.dw[1] += e.iter().zip(a2).map(|(a, b)| a * b).sum::<f64>();

        for (d, x) in da.iter_mut().zip(&e) {
            *d = params.w[0] * x;
        }
        op.apply_k1(&da, &mut dq);
        let mut tmp = vec![0.0; m * l];
        for (d, x) in da.iter_mut().zip(&e) {
            *d = params.w[1] * x;
        }
        op.apply_k2(&da, &mut tmp);
        for (a, b) in dq.iter_mut().zip(&tmp) {
            *a += b;
        }
        dz = softmax_backward(&trace.beliefs[t], &dq, l);
    }
    // What remains is the gradient through Q0 = softmax(scores).
    for (s, d) in grads.dscores.iter_mut().zip(&dz) {
        *s += d;
    }
    grads
}

fn check_labels(slice: &SliceTensor, labels: &LabelSlice) -> Result<()> {
    if (slice.height, slice.width) != (labels.height, labels.width) {
        return Err(Error::DimMismatch(format!(
            "slice {}x{} vs labels {}x{}",
            slice.height, slice.width, labels.height, labels.width
        )));
    }
    Ok(())
}

/// Slice loss of the CRF applied to fixed FCNN scores, with gradients.
pub fn crf_loss_from_scores(
    scores: &ProbabilityMaps,
    slice: &SliceTensor,
    labels: &LabelSlice,
    params: &CrfParameters,
    mode: MessagePassing,
) -> Result<(f64, CrfGradients)> {
    params.validate()?;
    check_labels(slice, labels)?;
    let unary = UnaryMaps::from_scores(scores)?;
    if unary.labels != params.labels() || (unary.height, unary.width) != (slice.height, slice.width) {
        return Err(Error::DimMismatch("scores do not match slice or compatibility".into()));
    }
    let op = PairwiseOperator::new(&PixelFeatures::from_slice(slice), &params.theta, mode);
    let trace = unrolled_forward(&op, &unary, params)?;
    let (loss, dlogits) = slice_loss(&trace, &labels.data)?;
    Ok((loss, crf_backward(&op, &trace, params, &dlogits)))
}

/// Slice loss of the full FCNN and CRF composition, with gradients for both.
pub fn joint_loss(
    fcnn: &NetworkParameters,
    crf: &CrfParameters,
    slice: &SliceTensor,
    labels: &LabelSlice,
    mode: MessagePassing,
) -> Result<(f64, Gradients, CrfGradients)> {
    check_labels(slice, labels)?;
    let (small, large) = fcnn.slice_inputs(slice)?;
    let ftrace = fcnn.forward_trace(&small, &large)?;
    let scores = ftrace.scores();
    let maps = ProbabilityMaps::from_scores(scores.clone());
    let (loss, crf_grads) = crf_loss_from_scores(&maps, slice, labels, crf, mode)?;
    let dplanes = pixels_to_planes(&crf_grads.dscores, scores.channels, scores.plane());
    let dscores = Tensor::from_vec(scores.channels, scores.height, scores.width, dplanes)?;
    let mut grads = Gradients::zeros_like(fcnn);
    fcnn.backward(&ftrace, &dscores, &mut grads);
    Ok((loss, grads, crf_grads))
}

struct CrfVelocity {
    w: [f64; 2],
    mu: Vec<Vec<f64>>,
}

impl CrfVelocity {
    fn new(l: usize) -> Self {
        CrfVelocity {
            w: [0.0; 2],
            mu: vec![vec![0.0; l]; l],
        }
    }

    fn step(&mut self, params: &mut CrfParameters, grads: &CrfGradients, lr: f64, momentum: f64) {
        for m in 0..2 {
            self.w[m] = momentum * self.w[m] - lr * grads.dw[m];
            params.w[m] += self.w[m];
        }
        for (u, row) in self.mu.iter_mut().enumerate() {
            for (v, vel) in row.iter_mut().enumerate() {
                *vel = momentum * *vel - lr * grads.dmu[u][v];
                params.mu[u][v] += *vel;
            }
        }
    }
}

/// Trains the CRF weights and compatibility on slices with the FCNN frozen.
/// Returns the new CRF parameters and the mean slice loss of every epoch.
pub fn train_step2(
    fcnn: &NetworkParameters,
    crf: &CrfParameters,
    slices: &[TrainingSlice],
    schedule: &SliceSchedule,
) -> Result<(CrfParameters, Vec<f64>)> {
    schedule.validate()?;
    crf.validate()?;
    if slices.is_empty() {
        return Err(Error::InvalidArgument("no training slices".into()));
    }
    let scores = slices
        .iter()
        .map(|s| fcnn.segment_slice(&s.slice))
        .collect::<Result<Vec<_>>>()?;
    let mut crf = crf.clone();
    let mut velocity = CrfVelocity::new(crf.labels());
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..slices.len()).collect();
    let mut trace = Vec::with_capacity(schedule.epochs);
    for _ in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let s = &slices[k];
            let (loss, grads) = crf_loss_from_scores(&scores[k], &s.slice, &s.labels, &crf, schedule.message_passing)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteGradient);
            }
            total += loss;
            velocity.step(&mut crf, &grads, schedule.learning_rate, schedule.momentum);
        }
        trace.push(total / slices.len() as f64);
    }
    Ok((crf, trace))
}

/// Fine-tunes the FCNN and CRF jointly on slices.
pub fn finetune_step3(
    fcnn: &NetworkParameters,
    crf: &CrfParameters,
    slices: &[TrainingSlice],
    schedule: &SliceSchedule,
) -> Result<(NetworkParameters, CrfParameters, Vec<f64>)> {
    schedule.validate()?;
    crf.validate()?;
    if slices.is_empty() {
        return Err(Error::InvalidArgument("no training slices".into()));
    }
    let mut fcnn = fcnn.clone();
    let mut crf = crf.clone();
    let mut crf_velocity = CrfVelocity::new(crf.labels());
    let mut fcnn_velocity = Gradients::zeros_like(&fcnn);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..slices.len()).collect();
    let mut trace = Vec::with_capacity(schedule.epochs);
    for _ in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let s = &slices[k];
            let (loss, mut grads, crf_grads) = joint_loss(&fcnn, &crf, &s.slice, &s.labels, schedule.message_passing)?;
            if !loss.is_finite() || !grads.all_finite() || !crf_grads.all_finite() {
                return Err(Error::NonFiniteGradient);
            }
            total += loss;
            fcnn_velocity.scale(schedule.momentum);
            grads.scale(-schedule.learning_rate);
            fcnn_velocity.add(&grads);
            fcnn.apply(&fcnn_velocity, 1.0);
            crf_velocity.step(&mut crf, &crf_grads, schedule.learning_rate, schedule.momentum);
        }
        trace.push(total / slices.len() as f64);
    }
    Ok((fcnn, crf, trace))
}
