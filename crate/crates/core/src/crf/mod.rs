//! Fully connected CRF over the pixels of a slice, solved by mean-field
//! iterations unrolled as a recurrent network.

mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcnn::ProbabilityMaps;
use crate::volume::{SliceTensor, NUM_CLASSES};

pub use train::{
    crf_backward, crf_loss_from_scores, finetune_step3, joint_loss, slice_loss, train_step2, CrfGradients,
    SliceSchedule, TrainingSlice,
};

/// Default kernel bandwidths `[alpha, beta, gamma]`.
pub const DEFAULT_THETA: [f64; 3] = [160.0, 3.0, 3.0];
pub const DEFAULT_ITERATIONS: usize = 5;

/// Above this many stored bilateral weights the kernel is evaluated on the fly.
const CACHED_KERNEL_LIMIT: usize = 1 << 23;

/// Trainable kernel weights and label compatibility plus fixed bandwidths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfParameters {
    pub w: [f64; 2],
    /// `mu[u][v]`, the penalty for label `u` at a pixel whose neighbour holds `v`.
    pub mu: Vec<Vec<f64>>,
    /// Bandwidths `[alpha, beta, gamma]`.
    pub theta: [f64; 3],
    #[serde(rename = "T")]
    pub iterations: usize,
}

impl Default for CrfParameters {
    fn default() -> Self {
        CrfParameters {
            w: [1.0, 1.0],
            mu: potts(NUM_CLASSES),
            theta: DEFAULT_THETA,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

/// `mu(u, v) = 1` when `u != v`, else 0.
pub fn potts(labels: usize) -> Vec<Vec<f64>> {
    (0..labels)
        .map(|u| (0..labels).map(|v| if u == v { 0.0 } else { 1.0 }).collect())
        .collect()
}

impl CrfParameters {
    pub fn labels(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidths must be positive, got {:?}", self.theta)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("at least one mean-field iteration is required".into()));
        }
        let l = self.mu.len();
        if l == 0 || self.mu.iter().any(|row| row.len() != l) {
            return Err(Error::InvalidArgument("compatibility must be a square matrix".into()));
        }
        if self.mu.iter().flatten().chain(&self.w).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite CRF weight".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let params: CrfParameters = serde_json::from_slice(&fs::read(path)?)?;
        params.validate()?;
        Ok(params)
    }
}

/// Position and intensity features of every pixel of one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `[pixel][channel]`.
    pub intensities: Vec<f64>,
}

/// Features of a single pixel.
#[derive(Clone, Copy, Debug)]
pub struct Feature<'a> {
    pub position: [f64; 2],
    pub intensity: &'a [f64],
}

impl PixelFeatures {
    pub fn new(height: usize, width: usize, channels: usize, intensities: Vec<f64>) -> Result<Self> {
        if intensities.len() != height * width * channels {
            return Err(Error::DimMismatch(format!(
                "{} intensities for {height}x{width} pixels with {channels} channels",
                intensities.len()
            )));
        }
        Ok(PixelFeatures {
            height,
            width,
            channels,
            intensities,
        })
    }

    pub fn from_slice(slice: &SliceTensor) -> Self {
        let m = slice.pixels();
        let mut intensities = vec![0.0; m * slice.channels];
        for c in 0..slice.channels {
            for i in 0..m {
                intensities[i * slice.channels + c] = slice.data[c * m + i] as f64;
            }
        }
        PixelFeatures {
            height: slice.height,
            width: slice.width,
            channels: slice.channels,
            intensities,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn feature(&self, i: usize) -> Feature<'_> {
        Feature {
            position: [(i / self.width) as f64, (i % self.width) as f64],
            intensity: &self.intensities[i * self.channels..(i + 1) * self.channels],
        }
    }
}

/// Appearance and smoothness kernel values between two pixels.
pub fn pairwise_kernels(fi: &Feature, fj: &Feature, theta: &[f64; 3]) -> (f64, f64) {
    let ds = (fi.position[0] - fj.position[0]).powi(2) + (fi.position[1] - fj.position[1]).powi(2);
    let de: f64 = fi.intensity.iter().zip(fj.intensity).map(|(a, b)| (a - b) * (a - b)).sum();
    let [alpha, beta, gamma] = *theta;
    let k1 = (-ds / (2.0 * alpha * alpha) - de / (2.0 * beta * beta)).exp();
    let k2 = (-ds / (2.0 * gamma * gamma)).exp();
    (k1, k2)
}

/// Negated FCNN scores, `[pixel][label]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryMaps {
    pub height: usize,
    pub width: usize,
    pub labels: usize,
    pub phi: Vec<f64>,
}

impl UnaryMaps {
    pub fn new(height: usize, width: usize, labels: usize, phi: Vec<f64>) -> Result<Self> {
        if phi.len() != height * width * labels {
            return Err(Error::DimMismatch(format!(
                "{} potentials for {height}x{width} pixels and {labels} labels",
                phi.len()
            )));
        }
        if let Some(k) = phi.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinitePixel(k / labels));
        }
        Ok(UnaryMaps {
            height,
            width,
            labels,
            phi,
        })
    }

    pub fn from_scores(maps: &ProbabilityMaps) -> Result<Self> {
        let scores = planes_to_pixels(&maps.scores, maps.classes(), maps.pixels());
        Self::new(maps.height, maps.width, maps.classes(), scores.iter().map(|s| -s).collect())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// `[class][pixel]` to `[pixel][class]`.
pub fn planes_to_pixels(planes: &[f64], classes: usize, pixels: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes.len()];
    for u in 0..classes {
        for i in 0..pixels {
            out[i * classes + u] = planes[u * pixels + i];
        }
    }
    out
}

/// `[pixel][class]` to `[class][pixel]`.
pub fn pixels_to_planes(values: &[f64], classes: usize, pixels: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for i in 0..pixels {
        for u in 0..classes {
            out[u * pixels + i] = values[i * classes + u];
        }
    }
    out
}

/// Per-pixel label distributions, `[pixel][label]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefMaps {
    pub height: usize,
    pub width: usize,
    pub labels: usize,
    pub q: Vec<f64>,
}

impl BeliefMaps {
    pub fn uniform(height: usize, width: usize, labels: usize) -> Self {
        BeliefMaps {
            height,
            width,
            labels,
            q: vec![1.0 / labels as f64; height * width * labels],
        }
    }

    /// Row-wise softmax of `[pixel][label]` logits.
    pub fn softmax(height: usize, width: usize, labels: usize, logits: &[f64]) -> Result<Self> {
        let mut q = vec![0.0; logits.len()];
        for (i, (row, out)) in logits.chunks(labels).zip(q.chunks_mut(labels)).enumerate() {
            softmax_row(row, out, i)?;
        }
        Ok(BeliefMaps {
            height,
            width,
            labels,
            q,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, i: usize, u: usize) -> f64 {
        self.q[i * self.labels + u]
    }

    pub fn distribution(&self, i: usize) -> &[f64] {
        &self.q[i * self.labels..(i + 1) * self.labels]
    }

    /// Most probable label per pixel; ties go to the lower label.
    pub fn argmax(&self) -> Vec<u8> {
        self.q
            .chunks(self.labels)
            .map(|d| {
                let mut best = 0;
                for (u, &p) in d.iter().enumerate() {
                    if p > d[best] {
                        best = u;
                    }
                }
                best as u8
            })
            .collect()
    }
}

fn softmax_row(logits: &[f64], out: &mut [f64], pixel: usize) -> Result<()> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinitePixel(pixel));
    }
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// How pairwise messages are summed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessagePassing {
    /// Every other pixel of the slice.
    Exact,
    /// Pixels within a square window of radius `ceil(3 theta)` per kernel.
    Windowed,
}

struct SparseRows {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

/// Applies both Gaussian kernels (without the self term) to label fields.
pub struct PairwiseOperator {
    feats: PixelFeatures,
    theta: [f64; 3],
    r1: usize,
    r2: usize,
    /// `exp(-d^2 / (2 gamma^2))` for `d = 0..=r2`.
    g2: Vec<f64>,
    k1: Option<SparseRows>,
}

impl PairwiseOperator {
    pub fn new(feats: &PixelFeatures, theta: &[f64; 3], mode: MessagePassing) -> Self {
        let span = feats.height.max(feats.width);
        let radius = |t: f64| match mode {
            MessagePassing::Exact => span,
            MessagePassing::Windowed => ((3.0 * t).ceil() as usize).min(span),
        };
        let (r1, r2) = (radius(theta[0]), radius(theta[2]));
        let g2 = (0..=r2).map(|d| (-((d * d) as f64) / (2.0 * theta[2] * theta[2])).exp()).collect();
        let mut op = PairwiseOperator {
            feats: feats.clone(),
            theta: *theta,
            r1,
            r2,
            g2,
            k1: None,
        };
        let stored: usize = (0..feats.pixels())
            .map(|i| {
                let (rows, cols) = op.window(i);
                rows.len() * cols.len() - 1
            })
            .sum();
        if stored <= CACHED_KERNEL_LIMIT {
            op.k1 = Some(op.build_k1());
        }
        op
    }

    pub fn pixels(&self) -> usize {
        self.feats.pixels()
    }

    fn window(&self, i: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (h, w) = (self.feats.height, self.feats.width);
        let (y, x) = (i / w, i % w);
        (
            y.saturating_sub(self.r1)..(y + self.r1 + 1).min(h),
            x.saturating_sub(self.r1)..(x + self.r1 + 1).min(w),
        )
    }

    fn k1_between(&self, i: usize, j: usize) -> f64 {
        pairwise_kernels(&self.feats.feature(i), &self.feats.feature(j), &self.theta).0
    }

    fn build_k1(&self) -> SparseRows {
        let w = self.feats.width;
        let mut rows = SparseRows {
            offsets: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        };
        for i in 0..self.pixels() {
            let (ys, xs) = self.window(i);
            for y in ys {
                for x in xs.clone() {
                    let j = y * w + x;
                    if j != i {
                        rows.cols.push(j as u32);
                        rows.vals.push(self.k1_between(i, j));
                    }
                }
            }
            rows.offsets.push(rows.cols.len());
        }
        rows
    }

    /// `out[i] = sum_{j != i} k1(i, j) x[j]` for `[pixel][label]` fields.
    pub fn apply_k1(&self, x: &[f64], out: &mut [f64]) {
        let l = x.len() / self.pixels();
        out.iter_mut().for_each(|o| *o = 0.0);
        match &self.k1 {
            Some(rows) => {
                for i in 0..self.pixels() {
                    let acc = &mut out[i * l..(i + 1) * l];
                    for k in rows.offsets[i]..rows.offsets[i + 1] {
                        let j = rows.cols[k] as usize;
                        let v = rows.vals[k];
                        for (a, &xj) in acc.iter_mut().zip(&x[j * l..(j + 1) * l]) {
                            *a += v * xj;
                        }
                    }
                }
            }
            None => {
                let w = self.feats.width;
                for i in 0..self.pixels() {
                    let (ys, xs) = self.window(i);
                    for y in ys {
                        for xc in xs.clone() {
                            let j = y * w + xc;
                            if j == i {
                                continue;
                            }
                            let v = self.k1_between(i, j);
                            for u in 0..l {
                                out[i * l + u] += v * x[j * l + u];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out[i] = sum_{j != i} k2(i, j) x[j]`, evaluated separably.
    pub fn apply_k2(&self, x: &[f64], out: &mut [f64]) {
        let (h, w) = (self.feats.height, self.feats.width);
        let l = x.len() / self.pixels();
        let r = self.r2 as isize;
        let mut tmp = vec![0.0; x.len()];
        for y in 0..h {
            for xc in 0..w {
                let acc = &mut tmp[(y * w + xc) * l..(y * w + xc + 1) * l];
                for d in -r..=r {
                    let c = xc as isize + d;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    let g = self.g2[d.unsigned_abs()];
                    let src = (y * w + c as usize) * l;
                    for (a, &v) in acc.iter_mut().zip(&x[src..src + l]) {
                        *a += g * v;
                    }
                }
            }
        }
        for y in 0..h {
            for xc in 0..w {
                let i = y * w + xc;
                let acc = &mut out[i * l..(i + 1) * l];
                acc.copy_from_slice(&x[i * l..(i + 1) * l]);
                acc.iter_mut().for_each(|a| *a = -*a);
                for d in -r..=r {
                    let row = y as isize + d;
                    if row < 0 || row >= h as isize {
                        continue;
                    }
                    let g = self.g2[d.unsigned_abs()];
                    let src = (row as usize * w + xc) * l;
                    for (a, &v) in acc.iter_mut().zip(&tmp[src..src + l]) {
                        *a += g * v;
                    }
                }
            }
        }
    }
}

/// Logits of one Jacobi mean-field update and the kernel messages used.
pub(crate) struct MeanFieldStep {
    pub logits: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

pub(crate) fn mean_field_logits(op: &PairwiseOperator, q: &[f64], unary: &UnaryMaps, params: &CrfParameters) -> MeanFieldStep {
    let l = unary.labels;
    let mut a1 = vec![0.0; q.len()];
    let mut a2 = vec![0.0; q.len()];
    op.apply_k1(q, &mut a1);
    op.apply_k2(q, &mut a2);
    let mut logits = vec![0.0; q.len()];
    for i in 0..unary.pixels() {
        for u in 0..l {
            let mut msg = 0.0;
            for v in 0..l {
                msg += params.mu[u][v] * (params.w[0] * a1[i * l + v] + params.w[1] * a2[i * l + v]);
            }
            logits[i * l + u] = -unary.phi[i * l + u] - msg;
        }
    }
    MeanFieldStep { logits, a1, a2 }
}

fn check_shapes(q: &BeliefMaps, unary: &UnaryMaps, feats: &PixelFeatures, params: &CrfParameters) -> Result<()> {
    params.validate()?;
    if (q.height, q.width, q.labels) != (unary.height, unary.width, unary.labels) {
        return Err(Error::DimMismatch(format!(
            "beliefs {}x{}x{} vs unaries {}x{}x{}",
            q.height, q.width, q.labels, unary.height, unary.width, unary.labels
        )));
    }
    if (feats.height, feats.width) != (unary.height, unary.width) {
        return Err(Error::DimMismatch(format!(
            "features {}x{} vs unaries {}x{}",
            feats.height, feats.width, unary.height, unary.width
        )));
    }
    if params.labels() != unary.labels {
        return Err(Error::DimMismatch(format!(
            "{}x{} compatibility for {} labels",
            params.labels(),
            params.labels(),
            unary.labels
        )));
    }
    Ok(())
}

/// One simultaneous mean-field update of every pixel.
pub fn mean_field_iteration_with(
    qin: &BeliefMaps,
    unary: &UnaryMaps,
    feats: &PixelFeatures,
    params: &CrfParameters,
    mode: MessagePassing,
) -> Result<BeliefMaps> {
    check_shapes(qin, unary, feats, params)?;
    let op = PairwiseOperator::new(feats, &params.theta, mode);
    let step = mean_field_logits(&op, &qin.q, unary, params);
    BeliefMaps::softmax(qin.height, qin.width, qin.labels, &step.logits)
}

/// One mean-field update using windowed message passing.
pub fn mean_field_iteration(qin: &BeliefMaps, unary: &UnaryMaps, feats: &PixelFeatures, params: &CrfParameters) -> Result<BeliefMaps> {
    mean_field_iteration_with(qin, unary, feats, params, MessagePassing::Windowed)
}

/// Everything the unrolled forward pass computes, kept for the backward pass.
pub struct CrfTrace {
    /// `Q^0 ..= Q^T`.
    pub beliefs: Vec<Vec<f64>>,
    pub(crate) a1: Vec<Vec<f64>>,
    pub(crate) a2: Vec<Vec<f64>>,
    /// Logits whose softmax is `Q^T`.
    pub logits: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub labels: usize,
}

impl CrfTrace {
    pub fn output(&self) -> BeliefMaps {
        BeliefMaps {
            height: self.height,
            width: self.width,
            labels: self.labels,
            q: self.beliefs.last().expect("at least Q0").clone(),
        }
    }
}

/// `Q^0 = softmax(-phi)` followed by `T` mean-field updates.
pub fn unrolled_forward(op: &PairwiseOperator, unary: &UnaryMaps, params: &CrfParameters) -> Result<CrfTrace> {
    let (h, w, l) = (unary.height, unary.width, unary.labels);
    let scores: Vec<f64> = unary.phi.iter().map(|p| -p).collect();
    let mut trace = CrfTrace {
        beliefs: vec![BeliefMaps::softmax(h, w, l, &scores)?.q],
        a1: Vec::with_capacity(params.iterations),
        a2: Vec::with_capacity(params.iterations),
        logits: scores,
        height: h,
        width: w,
        labels: l,
    };
    for _ in 0..params.iterations {
        let step = mean_field_logits(op, trace.beliefs.last().expect("Q0"), unary, params);
        let q = BeliefMaps::softmax(h, w, l, &step.logits)?;
        trace.beliefs.push(q.q);
        trace.a1.push(step.a1);
        trace.a2.push(step.a2);
        trace.logits = step.logits;
    }
    Ok(trace)
}

/// Refines FCNN scores on one slice with the chosen message passing.
pub fn crf_rnn_forward_with(p: &ProbabilityMaps, slice: &SliceTensor, params: &CrfParameters, mode: MessagePassing) -> Result<BeliefMaps> {
    if (p.height, p.width) != (slice.height, slice.width) {
        return Err(Error::DimMismatch(format!(
            "scores {}x{} vs slice {}x{}",
            p.height, p.width, slice.height, slice.width
        )));
    }
    let unary = UnaryMaps::from_scores(p)?;
    let feats = PixelFeatures::from_slice(slice);
    check_shapes(&BeliefMaps::uniform(p.height, p.width, unary.labels), &unary, &feats, params)?;
    let op = PairwiseOperator::new(&feats, &params.theta, mode);
    Ok(unrolled_forward(&op, &unary, params)?.output())
}

/// Refines FCNN scores on one slice.
pub fn crf_rnn_forward(p: &ProbabilityMaps, slice: &SliceTensor, params: &CrfParameters) -> Result<BeliefMaps> {
    crf_rnn_forward_with(p, slice, params, MessagePassing::Windowed)
}

/// Mean-field free energy: expected unary and pairwise energy minus entropy.
pub fn free_energy(q: &BeliefMaps, unary: &UnaryMaps, feats: &PixelFeatures, params: &CrfParameters) -> Result<f64> {
    check_shapes(q, unary, feats, params)?;
    let l = q.labels;
    let m = q.pixels();
    let mut energy = 0.0;
    for i in 0..m {
        for u in 0..l {
            let p = q.at(i, u);
            energy += p * unary.phi[i * l + u];
            if p > 0.0 {
                energy += p * p.ln();
            }
        }
    }
    for i in 0..m {
        let fi = feats.feature(i);
        for j in i + 1..m {
            let (k1, k2) = pairwise_kernels(&fi, &feats.feature(j), &params.theta);
            let k = params.w[0] * k1 + params.w[1] * k2;
            let mut pair = 0.0;
            for u in 0..l {
                for v in 0..l {
                    pair += q.at(i, u) * q.at(j, v) * params.mu[u][v];
                }
            }
            energy += k * pair;
        }
    }
    Ok(energy)
}
