//! Robust per-channel intensity normalization.
//!
//! Each channel is linearly rescaled to `[0, 255]`, the mode of a 256-bin
//! histogram and the RMS deviation about that mode are measured, and the
//! channel is mapped so the mode lands on a target offset with a target
//! spread. Exactly-zero voxels (skull-stripped background) are left out of
//! the statistics and stay zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::MultiModalVolume;

pub const HISTOGRAM_BINS: usize = 256;

/// 256 unit-width bins over `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityHistogram {
    pub bins: [usize; HISTOGRAM_BINS],
    pub mode_bin: usize,
    pub voxel_count: usize,
}

impl IntensityHistogram {
    /// Gray value represented by the mode bin.
    pub fn mode_value(&self) -> f64 {
        self.mode_bin as f64
    }
}

/// Per-channel target spread `sigma` and offset for the mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTargets {
    pub sigma: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Default for NormalizationTargets {
    /// Flair, T1c, T2 reference constants.
    fn default() -> Self {
        NormalizationTargets {
            sigma: vec![30.0, 31.0, 37.0],
            offset: vec![75.0, 99.0, 55.0],
        }
    }
}

impl NormalizationTargets {
    /// Targets matched to channel names; T1, which has no reference
    /// constants, borrows those of T1c.
    pub fn for_channels(names: &[String]) -> Result<Self> {
        let mut t = NormalizationTargets {
            sigma: Vec::new(),
            offset: Vec::new(),
        };
        for name in names {
            let (s, o) = match name.to_ascii_lowercase().as_str() {
                "flair" => (30.0, 75.0),
                "t1c" | "t1" => (31.0, 99.0),
                "t2" => (37.0, 55.0),
                other => return Err(Error::InvalidArgument(format!("no normalization targets for channel {other:?}"))),
            };
            t.sigma.push(s);
            t.offset.push(o);
        }
        Ok(t)
    }

    pub fn channels(&self) -> usize {
        self.sigma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.len() != self.offset.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sigma values but {} offsets",
                self.sigma.len(),
                self.offset.len()
            )));
        }
        for (&s, &o) in self.sigma.iter().zip(&self.offset) {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!("sigma must be positive, got {s}")));
            }
            if !(0.0..=255.0).contains(&o) {
                return Err(Error::InvalidArgument(format!("offset must lie in [0, 255], got {o}")));
            }
        }
        Ok(())
    }
}

/// Affine map sending the channel minimum to 0 and maximum to 255.
pub fn rescale_to_255(channel: &[f32]) -> Result<Vec<f32>> {
    let (min, max) = channel
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if !(max > min) {
        return Err(Error::DegenerateRange);
    }
    let scale = 255.0 / (max - min);
    Ok(channel
        .iter()
        .map(|&v| ((v as f64 - min) * scale) as f32)
        .collect())
}

#[inline]
fn counted(v: f32) -> bool {
    v != 0.0
}

/// Histogram of the non-zero voxels of a channel already in `[0, 255]`.
///
/// Ties for the highest bin resolve to the lowest index.
pub fn histogram_mode(channel: &[f32]) -> Result<IntensityHistogram> {
    let mut bins = [0usize; HISTOGRAM_BINS];
    let mut voxel_count = 0;
    for &v in channel.iter().filter(|&&v| counted(v)) {
        let bin = (v.max(0.0).floor() as usize).min(HISTOGRAM_BINS - 1);
        bins[bin] += 1;
        voxel_count += 1;
    }
    if voxel_count == 0 {
        return Err(Error::EmptyForeground);
    }
    let mut mode_bin = 0;
    for (i, &count) in bins.iter().enumerate() {
        if count > bins[mode_bin] {
            mode_bin = i;
        }
    }
    Ok(IntensityHistogram {
        bins,
        mode_bin,
        voxel_count,
    })
}

/// RMS deviation of the non-zero voxels from `mode_value`.
pub fn robust_deviation(channel: &[f32], mode_value: f64) -> Result<f64> {
    let (sum, n) = channel
        .iter()
        .filter(|&&v| counted(v))
        .fold((0.0f64, 0usize), |(s, n), &v| {
            let d = mode_value - v as f64;
            (s + d * d, n + 1)
        });
    if n == 0 {
        return Err(Error::EmptyForeground);
    }
    Ok((sum / n as f64).sqrt())
}

/// Statistics measured while normalizing one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mode: f64,
    pub deviation: f64,
}

/// Maps counted voxels to `((I - mode) / deviation) * sigma + offset`, clamped to `[0, 255]`.
pub fn normalize_channel(channel: &[f32], sigma: f64, offset: f64) -> Result<(Vec<f32>, ChannelStats)> {
    let hist = histogram_mode(channel)?;
    let mode = hist.mode_value();
    let deviation = robust_deviation(channel, mode)?;
    if !(deviation > 0.0) {
        return Err(Error::DegenerateDeviation);
    }
    let out = channel
        .iter()
        .map(|&v| {
            if !counted(v) {
                return 0.0;
            }
            let z = (v as f64 - mode) / deviation;
            (z * sigma + offset).clamp(0.0, 255.0) as f32
        })
        .collect();
    Ok((out, ChannelStats { mode, deviation }))
}

/// Rescales and normalizes every channel of a volume.
pub fn normalize_volume(volume: &MultiModalVolume, targets: &NormalizationTargets) -> Result<MultiModalVolume> {
    targets.validate()?;
    if targets.channels() != volume.channels() {
        return Err(Error::InvalidArgument(format!(
            "{} normalization targets for a {}-channel volume",
            targets.channels(),
            volume.channels()
        )));
    }
    let mut out = volume.clone();
    for c in 0..volume.channels() {
        let rescaled = rescale_to_255(volume.channel(c))?;
        let (normalized, _) = normalize_channel(&rescaled, targets.sigma[c], targets.offset[c])?;
        out.channel_mut(c).copy_from_slice(&normalized);
    }
    Ok(out)
}
