//! Synthetic multi-modal tumor phantoms with known ground truth.
//!
//! A phantom is an ellipsoidal "brain" of healthy tissue on a zero
//! background (as after skull stripping) containing one nested ellipsoidal
//! lesion: edema outermost, then an enhancing rim, an optional thin
//! non-enhancing shell and a necrotic centre.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{default_channel_names, Dims, LabelVolume, MultiModalVolume, NUM_CLASSES};

/// Class means per channel, indexed `[class][channel]` for flair, t1c, t2.
/// Every channel's five means differ pairwise by at least 20.
const MEANS_3: [[f64; 3]; NUM_CLASSES] = [
    [100.0, 100.0, 100.0], // healthy
    [125.0, 50.0, 220.0],  // necrosis
    [200.0, 80.0, 190.0],  // edema
    [170.0, 125.0, 155.0], // non-enhancing core
    [150.0, 200.0, 130.0], // enhancing core
];

/// T1 means, used for the fourth channel.
const MEANS_T1: [f64; NUM_CLASSES] = [100.0, 60.0, 80.0, 120.0, 140.0];

/// Smallest gap between any two class means of one channel.
pub const MIN_MEAN_GAP: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: Dims,
    /// Brain semi-axes as a fraction of each dimension.
    pub brain_fraction: f64,
    /// Outer (edema) lesion radius in voxels before anisotropy.
    pub tumor_radius: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Emit the thin non-enhancing shell between necrosis and enhancing rim.
    pub non_enhancing_shell: bool,
    /// Per-channel multiplicative gain is drawn from `1 ± gain_jitter`.
    pub gain_jitter: f64,
    /// Maximum relative stretch of the lesion along each axis.
    pub anisotropy: f64,
    pub channels: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: Dims::new(32, 32, 32),
            brain_fraction: 0.45,
            tumor_radius: 10.0,
            noise: 5.0,
            non_enhancing_shell: true,
            gain_jitter: 0.2,
            anisotropy: 0.1,
            channels: 3,
        }
    }
}

/// Normalized lesion radii (fractions of the edema radius) of each inner boundary.
const ENHANCING_RADIUS: f64 = 0.6;
const SHELL_RADIUS: f64 = 0.45;
const NECROSIS_RADIUS: f64 = 0.3;

fn class_mean(class: usize, channel: usize, channels: usize) -> f64 {
    if channels == 4 {
        // flair, t1, t1c, t2
        match channel {
            0 => MEANS_3[class][0],
            1 => MEANS_T1[class],
            2 => MEANS_3[class][1],
            _ => MEANS_3[class][2],
        }
    } else {
        MEANS_3[class][channel]
    }
}

/// Generates a phantom volume and its ground-truth labels.
pub fn generate_phantom(seed: u64, config: &PhantomConfig) -> Result<(MultiModalVolume, LabelVolume)> {
    let dims = config.dims;
    if dims.z < 24 || dims.y < 24 || dims.x < 24 {
        return Err(Error::InvalidArgument(format!(
            "phantom dims must be at least 24 per side, got {dims}"
        )));
    }
    if !(config.noise >= 0.0) || !config.noise.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be non-negative, got {}",
            config.noise
        )));
    }
    if config.channels != 3 && config.channels != 4 {
        return Err(Error::InvalidArgument("phantoms have 3 or 4 channels".into()));
    }
    if !(0.0..1.0).contains(&config.gain_jitter) || !(0.0..0.5).contains(&config.anisotropy) {
        return Err(Error::InvalidArgument("gain jitter or anisotropy out of range".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let centre = [
        (dims.z as f64 - 1.0) / 2.0,
        (dims.y as f64 - 1.0) / 2.0,
        (dims.x as f64 - 1.0) / 2.0,
    ];
    let brain_axes = [
        config.brain_fraction * dims.z as f64,
        config.brain_fraction * dims.y as f64,
        config.brain_fraction * dims.x as f64,
    ];
    let tumor_axes: Vec<f64> = (0..3)
        .map(|_| config.tumor_radius * (1.0 + rng.random_range(-1.0..=1.0) * config.anisotropy))
        .collect();

    // Lesion must sit inside the brain with one voxel to spare.
    let slack: Vec<f64> = (0..3).map(|a| brain_axes[a] - tumor_axes[a] - 1.0).collect();
    if config.tumor_radius <= 0.0 || slack.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tumor of radius {} does not fit inside the brain",
            config.tumor_radius
        )));
    }
    // Shift the lesion within the box that keeps it inside the brain ellipsoid.
    let shift_scale = 0.5;
    let tumor_centre: Vec<f64> = (0..3)
        .map(|a| centre[a] + rng.random_range(-1.0..=1.0) * slack[a] * shift_scale / 3f64.sqrt())
        .collect();

    let gains: Vec<f64> = (0..config.channels)
        .map(|_| 1.0 + rng.random_range(-1.0..=1.0) * config.gain_jitter)
        .collect();

    let mut labels = vec![0u8; dims.len()];
    let mut inside_brain = vec![false; dims.len()];
    for v in 0..dims.len() {
        let (z, y, x) = dims.coords(v);
        let p = [z as f64, y as f64, x as f64];
        let brain_r: f64 = (0..3)
            .map(|a| ((p[a] - centre[a]) / brain_axes[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        if brain_r > 1.0 {
            continue;
        }
        inside_brain[v] = true;
        let r: f64 = (0..3)
            .map(|a| ((p[a] - tumor_centre[a]) / tumor_axes[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        labels[v] = if r > 1.0 {
            0
        } else if r > ENHANCING_RADIUS {
            2
        } else if r > SHELL_RADIUS || (!config.non_enhancing_shell && r > NECROSIS_RADIUS) {
            4
        } else if r > NECROSIS_RADIUS {
            3
        } else {
            1
        };
    }

    let noise = if config.noise > 0.0 {
        Some(Normal::new(0.0, config.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let mut data = vec![0f32; config.channels * dims.len()];
    for c in 0..config.channels {
        for v in 0..dims.len() {
            if !inside_brain[v] {
                continue;
            }
            let mut value = class_mean(labels[v] as usize, c, config.channels);
            if let Some(n) = &noise {
                value += n.sample(&mut rng);
            }
            // Keep brain voxels strictly positive so they stay distinct from background.
            data[c * dims.len() + v] = (value * gains[c]).max(1.0) as f32;
        }
    }

    let volume = MultiModalVolume::new(dims, default_channel_names(config.channels), data)?;
    let labels = LabelVolume::new(dims, labels)?;
    Ok((volume, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let cfg = PhantomConfig::default();
        let (a, la) = generate_phantom(7, &cfg).unwrap();
        let (b, lb) = generate_phantom(7, &cfg).unwrap();
        assert_eq!(la, lb);
        let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
        let (c, _) = generate_phantom(8, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_config_has_all_classes() {
        let (_, labels) = generate_phantom(1, &PhantomConfig::default()).unwrap();
        let h = labels.histogram();
        assert!(h.iter().all(|&n| n > 0), "{h:?}");
        // Healthy tissue dominates.
        assert!(h[0] > h[1] + h[2] + h[3] + h[4]);
    }

    #[test]
    fn zero_noise_gives_single_intensity_per_class() {
        let cfg = PhantomConfig {
            noise: 0.0,
            ..PhantomConfig::default()
        };
        let (vol, labels) = generate_phantom(3, &cfg).unwrap();
        for c in 0..vol.channels() {
            let mut seen: [Option<f32>; NUM_CLASSES] = [None; NUM_CLASSES];
            for (v, &l) in labels.data().iter().enumerate() {
                let value = vol.channel(c)[v];
                if value == 0.0 {
                    continue; // background
                }
                match seen[l as usize] {
                    None => seen[l as usize] = Some(value),
                    Some(prev) => assert_eq!(prev, value),
                }
            }
        }
    }

    #[test]
    fn means_are_separated_by_three_noise_scales() {
        let cfg = PhantomConfig::default();
        for channels in [3, 4] {
            for c in 0..channels {
                for a in 0..NUM_CLASSES {
                    for b in a + 1..NUM_CLASSES {
                        let gap = (class_mean(a, c, channels) - class_mean(b, c, channels)).abs();
                        assert!(gap >= MIN_MEAN_GAP && gap >= 3.0 * cfg.noise);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let small = PhantomConfig {
            dims: Dims::new(16, 32, 32),
            ..PhantomConfig::default()
        };
        assert!(generate_phantom(0, &small).is_err());
        let huge = PhantomConfig {
            tumor_radius: 20.0,
            ..PhantomConfig::default()
        };
        assert!(generate_phantom(0, &huge).is_err());
        let noisy = PhantomConfig {
            noise: -1.0,
            ..PhantomConfig::default()
        };
        assert!(generate_phantom(0, &noisy).is_err());
    }
}
