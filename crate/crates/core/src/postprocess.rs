//! Rule-based clean-up of a fused segmentation using component statistics
//! and the normalized intensities.

use serde::{Deserialize, Serialize};

use crate::components::{connected_components_3d, enclosed_holes, Connectivity, Mask};
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, MultiModalVolume};

pub const ALL_STEPS: [u8; 6] = [1, 2, 3, 4, 5, 6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessThresholds {
    /// Mean Flair above which a bright component is dropped.
    pub theta11: f64,
    /// Mean T2 above which a bright component is dropped.
    pub theta12: f64,
    /// Fraction of the tumor Flair mean below which voxels are cleared.
    pub theta21: f64,
    /// T1c level below which voxels are cleared.
    pub theta22: f64,
    /// Fraction of the tumor T2 mean below which voxels are cleared.
    pub theta23: f64,
    /// Minimum component size relative to the largest one.
    pub theta31: f64,
    /// T1c level below which enhancing core becomes necrosis.
    pub theta41: f64,
    /// Enhancing fraction of the tumor below which edema is revisited.
    pub theta61: f64,
    /// T1c level below which revisited edema becomes non-enhancing core.
    pub theta62: f64,
}

impl Default for PostprocessThresholds {
    fn default() -> Self {
        PostprocessThresholds {
            theta11: 150.0,
            theta12: 150.0,
            theta21: 0.8,
            theta22: 125.0,
            theta23: 0.9,
            theta31: 0.1,
            theta41: 100.0,
            theta61: 0.05,
            theta62: 85.0,
        }
    }
}

impl PostprocessThresholds {
    /// Sets a threshold by name, e.g. `theta31` (the `theta` prefix is optional).
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let key = name.trim().trim_start_matches("theta").trim_start_matches('_');
        let slot = match key {
            "11" => &mut self.theta11,
            "12" => &mut self.theta12,
            "21" => &mut self.theta21,
            "22" => &mut self.theta22,
            "23" => &mut self.theta23,
            "31" => &mut self.theta31,
            "41" => &mut self.theta41,
            "61" => &mut self.theta61,
            "62" => &mut self.theta62,
            _ => return Err(Error::InvalidArgument(format!("unknown threshold {name:?}"))),
        };
        *slot = value;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.theta11,
            self.theta12,
            self.theta21,
            self.theta22,
            self.theta23,
            self.theta31,
            self.theta41,
            self.theta61,
            self.theta62,
        ];
        if all.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::InvalidArgument("thresholds must be positive".into()));
        }
        for (name, r) in [
            ("theta21", self.theta21),
            ("theta23", self.theta23),
            ("theta31", self.theta31),
            ("theta61", self.theta61),
        ] {
            if r > 1.0 {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

/// Mean of `channel` over the voxel indices of a component.
pub fn region_mean_intensity(channel: &[f32], component: &[usize]) -> Result<f64> {
    if component.is_empty() {
        return Err(Error::InvalidArgument("empty component".into()));
    }
    let sum: f64 = component.iter().map(|&v| channel[v] as f64).sum();
    Ok(sum / component.len() as f64)
}

fn tumor_mask(res: &LabelVolume) -> Mask {
    Mask::from_fn(res.dims(), |v| res.data()[v] > 0)
}

fn named_channel<'a>(volume: &'a MultiModalVolume, name: &str) -> Result<&'a [f32]> {
    volume
        .channel_index(name)
        .map(|c| volume.channel(c))
        .ok_or_else(|| Error::InvalidArgument(format!("volume has no {name} channel")))
}

/// Applies the enabled steps (a subset of 1..=6) in ascending order.
pub fn postprocess(res: &LabelVolume, volume: &MultiModalVolume, th: &PostprocessThresholds, steps: &[u8]) -> Result<LabelVolume> {
    th.validate()?;
    if res.dims() != volume.dims() {
        return Err(Error::DimMismatch(format!("labels {} vs volume {}", res.dims(), volume.dims())));
    }
    if let Some(&bad) = steps.iter().find(|s| !ALL_STEPS.contains(s)) {
        return Err(Error::InvalidArgument(format!("no post-processing step {bad}")));
    }
    let flair = named_channel(volume, "flair")?;
    let t1c = named_channel(volume, "t1c")?;
    let t2 = named_channel(volume, "t2")?;
    let mut out = res.clone();
    let enabled = |k: u8| steps.contains(&k);

    if enabled(1) {
        let comps = connected_components_3d(&tumor_mask(&out), Connectivity::TwentySix);
        let data = out.data_mut();
        for voxels in comps.voxel_lists() {
            if region_mean_intensity(flair, &voxels)? > th.theta11 && region_mean_intensity(t2, &voxels)? > th.theta12 {
                voxels.iter().for_each(|&v| data[v] = 0);
            }
        }
    }

    if enabled(2) {
        let positive: Vec<usize> = (0..out.data().len()).filter(|&v| out.data()[v] > 0).collect();
        if !positive.is_empty() {
            let mean_flair = region_mean_intensity(flair, &positive)?;
            let mean_t2 = region_mean_intensity(t2, &positive)?;
            for (v, r) in out.data_mut().iter_mut().enumerate() {
                if (flair[v] as f64) < th.theta21 * mean_flair
                    && (t1c[v] as f64) < th.theta22
                    && (t2[v] as f64) < th.theta23 * mean_t2
                    && *r < 4
                {
                    *r = 0;
                }
            }
        }
    }

    if enabled(3) {
        let comps = connected_components_3d(&tumor_mask(&out), Connectivity::TwentySix);
        if let Some(&largest) = comps.sizes().iter().max() {
            let data = out.data_mut();
            for voxels in comps.voxel_lists() {
                if (voxels.len() as f64) / (largest as f64) < th.theta31 {
                    voxels.iter().for_each(|&v| data[v] = 0);
                }
            }
        }
    }

    if enabled(4) {
        let holes = enclosed_holes(&tumor_mask(&out), Connectivity::Six);
        for (r, &hole) in out.data_mut().iter_mut().zip(holes.data()) {
            if hole {
                *r = 1;
            }
        }
    }

    if enabled(5) {
        for (v, r) in out.data_mut().iter_mut().enumerate() {
            if (t1c[v] as f64) < th.theta41 && *r == 4 {
                *r = 1;
            }
        }
    }

    if enabled(6) {
        let vol_t = out.data().iter().filter(|&&r| r > 0).count();
        let vol_e = out.data().iter().filter(|&&r| r == 4).count();
        if vol_t > 0 && (vol_e as f64) / (vol_t as f64) < th.theta61 {
            for (v, r) in out.data_mut().iter_mut().enumerate() {
                if (t1c[v] as f64) < th.theta62 && *r == 2 {
                    *r = 3;
                }
            }
        }
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    #[test]
    fn means() {
        let chan = [100.0, 90.0, 110.0, 7.0];
        assert_eq!(region_mean_intensity(&chan, &[0]).unwrap(), 100.0);
        assert_eq!(region_mean_intensity(&chan, &[1, 2]).unwrap(), 100.0);
        assert!(region_mean_intensity(&chan, &[]).is_err());
    }

    #[test]
    fn defaults_and_setter() {
        let mut th = PostprocessThresholds::default();
        assert_eq!((th.theta21, th.theta22, th.theta23), (0.8, 125.0, 0.9));
        th.set("theta31", 0.2).unwrap();
        th.set("62", 90.0).unwrap();
        assert_eq!((th.theta31, th.theta62), (0.2, 90.0));
        assert!(th.set("theta99", 1.0).is_err());
        assert!(th.set("theta61", 1.5).is_err());
    }

    #[test]
    fn no_steps_is_identity() {
        let dims = Dims::new(3, 3, 3);
        let res = LabelVolume::new(dims, (0..27).map(|v| (v % 5) as u8).collect()).unwrap();
        let vol = MultiModalVolume::filled(dims, 3, 10.0).unwrap();
        let out = postprocess(&res, &vol, &PostprocessThresholds::default(), &[]).unwrap();
        assert_eq!(out, res);
        assert!(postprocess(&res, &vol, &PostprocessThresholds::default(), &[7]).is_err());
    }
}
