//! Class-balanced patch sampling, patch-mode training and gradient checking.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Gradients, NetworkParameters};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::{Axis, LabelVolume, MultiModalVolume, NUM_CLASSES};

/// Side lengths of the paired training patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub small: usize,
    pub large: usize,
}

impl PatchGeometry {
    /// Patch sides of the reference architecture with pooling window `n`.
    pub fn for_pool(n: usize) -> Self {
        let small = 18 + 3 * n;
        PatchGeometry {
            small,
            large: 2 * small - 1,
        }
    }

    pub fn of(params: &NetworkParameters) -> Self {
        PatchGeometry {
            small: params.small_patch(),
            large: params.large_patch(),
        }
    }
}

/// Paired small/large patches sharing their centres, with class labels.
#[derive(Clone, Debug, Default)]
pub struct PatchBatch {
    pub small: Vec<Tensor>,
    pub large: Vec<Tensor>,
    pub labels: Vec<u8>,
    /// Centre voxel `(z, y, x)` of every patch.
    pub centers: Vec<(usize, usize, usize)>,
    pub class_counts: [usize; NUM_CLASSES],
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extend(&mut self, other: PatchBatch) {
        self.small.extend(other.small);
        self.large.extend(other.large);
        self.labels.extend(other.labels);
        self.centers.extend(other.centers);
        for (a, b) in self.class_counts.iter_mut().zip(other.class_counts) {
            *a += b;
        }
    }
}

/// Square patch of side `side` centred on `(row, col)` of slice `index`,
/// zero outside the slice.
fn read_patch(volume: &MultiModalVolume, axis: Axis, index: usize, row: usize, col: usize, side: usize) -> Tensor {
    let dims = volume.dims();
    let (h, w) = dims.slice_shape(axis);
    let r = (side / 2) as isize;
    let mut t = Tensor::zeros(volume.channels(), side, side);
    for c in 0..volume.channels() {
        let chan = volume.channel(c);
        for py in 0..side {
            let sy = row as isize - r + py as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for px in 0..side {
                let sx = col as isize - r + px as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                *t.at_mut(c, py, px) = chan[dims.slice_voxel(axis, index, sy as usize, sx as usize)] as f64;
            }
        }
    }
    t
}

/// Draws `per_class` patch centres for every class, uniformly without
/// replacement (with replacement when a class has fewer voxels), and reads
/// the patches from slices along `axis`.
pub fn sample_training_patches(
    volume: &MultiModalVolume,
    labels: &LabelVolume,
    per_class: usize,
    geometry: PatchGeometry,
    axis: Axis,
    seed: u64,
) -> Result<PatchBatch> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    if volume.dims() != labels.dims() {
        return Err(Error::DimMismatch(format!(
            "volume {} vs labels {}",
            volume.dims(),
            labels.dims()
        )));
    }
    if geometry.small % 2 == 0 || geometry.large % 2 == 0 {
        return Err(Error::InvalidArgument("patch sides must be odd".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (v, &l) in labels.data().iter().enumerate() {
        by_class[l as usize].push(v);
    }
    if let Some(missing) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::MissingClass(missing as u8));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = volume.dims();
    let mut batch = PatchBatch::default();
    for (class, voxels) in by_class.iter().enumerate() {
        let picks: Vec<usize> = if voxels.len() >= per_class {
            index::sample(&mut rng, voxels.len(), per_class).into_vec()
        } else {
            (0..per_class).map(|_| rng.random_range(0..voxels.len())).collect()
        };
        for p in picks {
            let v = voxels[p];
            let (z, y, x) = dims.coords(v);
            let (slice_index, row, col) = match axis {
                Axis::Axial => (z, y, x),
                Axis::Coronal => (y, z, x),
                Axis::Sagittal => (x, z, y),
            };
            batch.small.push(read_patch(volume, axis, slice_index, row, col, geometry.small));
            batch.large.push(read_patch(volume, axis, slice_index, row, col, geometry.large));
            batch.labels.push(class as u8);
            batch.centers.push((z, y, x));
            batch.class_counts[class] += 1;
        }
    }
    Ok(batch)
}

/// Mini-batch gradient descent with momentum and step decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSchedule {
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            learning_rate: 1e-5,
            decay_factor: 0.1,
            decay_every: 20,
            epochs: 60,
            batch_size: 128,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainingSchedule {
    /// Learning rate used during zero-based epoch `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.learning_rate * self.decay_factor.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Cross-entropy of the softmax of one patch's scores, plus its gradient.
fn patch_loss(params: &NetworkParameters, small: &Tensor, large: &Tensor, label: u8, grads: Option<&mut Gradients>) -> Result<f64> {
    let trace = params.forward_trace(small, large)?;
    let scores = trace.scores();
    if scores.plane() != 1 {
        return Err(Error::DimMismatch(format!(
            "patch produced {}x{} scores instead of 1x1",
            scores.height, scores.width
        )));
    }
    let max = scores.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scores.data.iter().map(|s| (s - max).exp()).sum();
    let log_z = max + total.ln();
    let loss = log_z - scores.data[label as usize];
    if let Some(grads) = grads {
        let mut d = Tensor::zeros(scores.channels, 1, 1);
        for (u, s) in scores.data.iter().enumerate() {
            d.data[u] = (s - log_z).exp() - if u == label as usize { 1.0 } else { 0.0 };
        }
        params.backward(&trace, &d, grads);
    }
    Ok(loss)
}

/// Mean patch loss over `indices` and, optionally, its gradient.
pub fn batch_loss(params: &NetworkParameters, batch: &PatchBatch, indices: &[usize], mut grads: Option<&mut Gradients>) -> Result<f64> {
    let mut total = 0.0;
    for &i in indices {
        total += patch_loss(params, &batch.small[i], &batch.large[i], batch.labels[i], grads.as_deref_mut())?;
    }
    let n = indices.len().max(1) as f64;
    if let Some(g) = grads {
        g.scale(1.0 / n);
    }
    Ok(total / n)
}

/// Trains on class-balanced patches, returning the new parameters and the
/// mean training loss of every epoch.
pub fn train_step1(params: &NetworkParameters, batch: &PatchBatch, schedule: &TrainingSchedule) -> Result<(NetworkParameters, Vec<f64>)> {
    schedule.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut params = params.clone();
    let mut velocity = Gradients::zeros_like(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut trace = Vec::with_capacity(schedule.epochs);
    let mut batch_counter = 0;

    for epoch in 0..schedule.epochs {
        let lr = schedule.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            let mut grads = Gradients::zeros_like(&params);
            let loss = batch_loss(&params, batch, chunk, Some(&mut grads))?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss(batch_counter));
            }
            epoch_loss += loss * chunk.len() as f64;
            velocity.scale(schedule.momentum);
            velocity.add(&{
                let mut g = grads;
                g.scale(-lr);
                g
            });
            params.apply(&velocity, 1.0);
            batch_counter += 1;
        }
        trace.push(epoch_loss / batch.len() as f64);
    }
    Ok((params, trace))
}

/// Outcome of comparing reverse-mode and finite-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters whose finite-difference stencil crossed a rectifier or
    /// pooling switch and therefore was not comparable.
    pub skipped: usize,
}

/// Relative discrepancy with a floor on the denominator, so gradients
/// below the floor compare by absolute error instead of amplifying
/// finite-difference rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn patterns(params: &NetworkParameters, batch: &PatchBatch) -> Result<Vec<u64>> {
    (0..batch.len())
        .map(|i| Ok(params.forward_trace(&batch.small[i], &batch.large[i])?.activation_pattern()))
        .collect()
}

/// Compares reverse-mode gradients of the mean patch loss against central
/// differences with step `epsilon` on up to `max_params` parameters (all of
/// them when the network is smaller).
pub fn gradient_check(params: &NetworkParameters, batch: &PatchBatch, epsilon: f64, max_params: usize, seed: u64) -> Result<GradientCheck> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::DegenerateStep);
    }
    let all: Vec<usize> = (0..batch.len()).collect();
    let mut grads = Gradients::zeros_like(params);
    batch_loss(params, batch, &all, Some(&mut grads))?;
    let analytic = grads.flat();
    let base_patterns = patterns(params, batch)?;

    let count = params.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<usize> = (0..count).collect();
    if count > max_params {
        candidates.shuffle(&mut rng);
    }

    let mut probe = params.clone();
    let mut result = GradientCheck {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &i in &candidates {
        if result.checked >= max_params {
            break;
        }
        let original = params.param(i);
        probe.set_param(i, original + epsilon);
        let plus = batch_loss(&probe, batch, &all, None)?;
        let plus_patterns = patterns(&probe, batch)?;
        probe.set_param(i, original - epsilon);
        let minus = batch_loss(&probe, batch, &all, None)?;
        let minus_patterns = patterns(&probe, batch)?;
        probe.set_param(i, original);
        if plus_patterns != base_patterns || minus_patterns != base_patterns {
            result.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        result.max_relative_error = result.max_relative_error.max(relative_error(analytic[i], numeric));
        result.checked += 1;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcnn::layers::LayerSpec;
    use crate::fcnn::network::Architecture;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn conv(i: usize, o: usize, k: usize, relu: bool) -> LayerSpec {
        LayerSpec::Conv {
            in_channels: i,
            out_channels: o,
            kernel: k,
            relu,
        }
    }

    fn random_batch(params: &NetworkParameters, n: usize, seed: u64) -> PatchBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = PatchGeometry::of(params);
        let mut batch = PatchBatch::default();
        for k in 0..n {
            let mk = |side: usize, rng: &mut ChaCha8Rng| {
                let data = (0..params.in_channels * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::from_vec(params.in_channels, side, side, data).unwrap()
            };
            batch.small.push(mk(g.small, &mut rng));
            batch.large.push(mk(g.large, &mut rng));
            let label = (k % NUM_CLASSES) as u8;
            batch.labels.push(label);
            batch.centers.push((0, 0, 0));
            batch.class_counts[label as usize] += 1;
        }
        batch
    }

    fn randomize(params: &mut NetworkParameters, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..params.param_count() {
            params.set_param(i, rng.random_range(-0.5..0.5));
        }
    }

    #[test]
    fn step_decay() {
        let s = TrainingSchedule::default();
        assert_eq!(s.learning_rate_at(0), 1e-5);
        assert_eq!(s.learning_rate_at(19), 1e-5);
        // The 21st epoch is the first after one decay.
        assert!((s.learning_rate_at(20) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let params = NetworkParameters::new(Architecture { pool: 1, width: 2, ..Architecture::default() }, 3).unwrap();
        let batch = random_batch(&params, 4, 1);
        let schedule = TrainingSchedule {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 2,
            ..TrainingSchedule::default()
        };
        let (trained, trace) = train_step1(&params, &batch, &schedule).unwrap();
        assert_eq!(trained, params);
        assert_eq!(trace.len(), 2);
    }

    #[test]
    fn overfits_single_sample() {
        // Two-class toy: one labeled patch, repeated steps drive the loss to zero.
        let front = [conv(1, 2, 3, true)];
        let trunk = [conv(3, 3, 3, true), conv(3, 5, 1, false)];
        let mut params = NetworkParameters::from_specs(&front, &trunk, 1, 1, 0).unwrap();
        randomize(&mut params, 9);
        let mut batch = random_batch(&params, 1, 2);
        batch.labels[0] = 1;
        let schedule = TrainingSchedule {
            learning_rate: 0.5,
            epochs: 200,
            batch_size: 1,
            momentum: 0.0,
            ..TrainingSchedule::default()
        };
        let (_, trace) = train_step1(&params, &batch, &schedule).unwrap();
        assert!(trace[199] < 0.1 * trace[0], "final loss {}", trace[199]);
        for w in trace[20..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn sampling_is_balanced_and_centred() {
        let (vol, labels) = generate_phantom(5, &PhantomConfig::default()).unwrap();
        let g = PatchGeometry::for_pool(1);
        let batch = sample_training_patches(&vol, &labels, 3, g, Axis::Coronal, 1).unwrap();
        assert_eq!(batch.len(), 15);
        assert_eq!(batch.class_counts, [3; 5]);
        for (k, &(z, y, x)) in batch.centers.iter().enumerate() {
            assert_eq!(labels.get(z, y, x), batch.labels[k]);
            // Centre pixel of both patches is the centre voxel.
            let c = g.small / 2;
            assert_eq!(batch.small[k].at(0, c, c), vol.get(0, z, y, x) as f64);
            let c = g.large / 2;
            assert_eq!(batch.large[k].at(2, c, c), vol.get(2, z, y, x) as f64);
        }
        let again = sample_training_patches(&vol, &labels, 3, g, Axis::Coronal, 1).unwrap();
        assert_eq!(again.centers, batch.centers);
    }

    #[test]
    fn missing_class_is_named() {
        let (vol, labels) = generate_phantom(5, &PhantomConfig::default()).unwrap();
        let stripped: Vec<u8> = labels.data().iter().map(|&l| if l == 3 { 4 } else { l }).collect();
        let labels = LabelVolume::new(labels.dims(), stripped).unwrap();
        let err = sample_training_patches(&vol, &labels, 1, PatchGeometry::for_pool(1), Axis::Axial, 0).unwrap_err();
        assert!(matches!(err, Error::MissingClass(3)));
    }

    #[test]
    fn zero_epsilon_is_degenerate() {
        let params = NetworkParameters::new(Architecture { pool: 1, width: 1, ..Architecture::default() }, 0).unwrap();
        let batch = random_batch(&params, 1, 0);
        assert!(matches!(gradient_check(&params, &batch, 0.0, 10, 0), Err(Error::DegenerateStep)));
    }

    #[test]
    fn rectified_network_gradients() {
        let front = [conv(2, 3, 3, true), LayerSpec::Pool { size: 3 }];
        let trunk = [conv(5, 3, 3, true), conv(3, 5, 1, false)];
        let mut params = NetworkParameters::from_specs(&front, &trunk, 2, 3, 0).unwrap();
        randomize(&mut params, 8);
        let batch = random_batch(&params, 3, 5);
        let check = gradient_check(&params, &batch, 1e-3, usize::MAX, 0).unwrap();
        assert!(check.checked > check.skipped);
        assert!(check.max_relative_error <= 1e-4, "{check:?}");
    }

    #[test]
    fn linear_network_gradients_are_exact() {
        let front = [conv(2, 2, 3, false)];
        let trunk = [conv(4, 3, 3, false), conv(3, 5, 1, false)];
        let mut params = NetworkParameters::from_specs(&front, &trunk, 2, 1, 0).unwrap();
        randomize(&mut params, 4);
        let batch = random_batch(&params, 3, 5);
        let check = gradient_check(&params, &batch, 1e-5, usize::MAX, 0).unwrap();
        assert_eq!(check.skipped, 0);
        assert_eq!(check.checked, params.param_count());
        assert!(check.max_relative_error <= 1e-7, "{check:?}");
    }
}
