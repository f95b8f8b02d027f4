//! Region overlap metrics between predicted and reference label volumes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::components::Mask;
use crate::error::{Error, Result};
use crate::volume::LabelVolume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    /// Labels 1 to 4.
    Complete,
    /// Necrosis, non-enhancing and enhancing core.
    Core,
    Enhancing,
}

impl RegionKind {
    pub const ALL: [RegionKind; 3] = [RegionKind::Complete, RegionKind::Core, RegionKind::Enhancing];

    pub fn labels(&self) -> &'static [u8] {
        match self {
            RegionKind::Complete => &[1, 2, 3, 4],
            RegionKind::Core => &[1, 3, 4],
            RegionKind::Enhancing => &[4],
        }
    }

    pub fn contains(&self, label: u8) -> bool {
        self.labels().contains(&label)
    }

    pub fn name(&self) -> &'static str {
        match self {
            RegionKind::Complete => "complete",
            RegionKind::Core => "core",
            RegionKind::Enhancing => "enhancing",
        }
    }
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegionKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown region {s:?}")))
    }
}

pub fn region_mask(labels: &LabelVolume, kind: RegionKind) -> Mask {
    Mask::from_fn(labels.dims(), |v| kind.contains(labels.data()[v]))
}

/// Metrics of one region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: RegionKind,
    pub dice: f64,
    pub ppv: f64,
    pub sensitivity: f64,
    pub predicted: usize,
    pub truth: usize,
    pub overlap: usize,
}

impl RegionScore {
    /// Metrics from voxel counts. Both sets empty scores 1; a metric whose
    /// denominator alone is empty scores 0.
    pub fn from_counts(region: RegionKind, predicted: usize, truth: usize, overlap: usize) -> Self {
        let ratio = |num: usize, den: f64| if den == 0.0 { 0.0 } else { num as f64 / den };
        let (dice, ppv, sensitivity) = if predicted == 0 && truth == 0 {
            (1.0, 1.0, 1.0)
        } else {
            (
                ratio(2 * overlap, (predicted + truth) as f64),
                ratio(overlap, predicted as f64),
                ratio(overlap, truth as f64),
            )
        };
        RegionScore {
            region,
            dice,
            ppv,
            sensitivity,
            predicted,
            truth,
            overlap,
        }
    }
}

pub fn score(pred: &LabelVolume, truth: &LabelVolume, kind: RegionKind) -> Result<RegionScore> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimMismatch(format!("prediction {} vs truth {}", pred.dims(), truth.dims())));
    }
    let (mut p, mut t, mut both) = (0, 0, 0);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let (ia, ib) = (kind.contains(a), kind.contains(b));
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(RegionScore::from_counts(kind, p, t, both))
}

/// Scores of all three regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub regions: Vec<RegionScore>,
}

impl ScoreReport {
    pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume) -> Result<Self> {
        Ok(ScoreReport {
            regions: RegionKind::ALL
                .into_iter()
                .map(|k| score(pred, truth, k))
                .collect::<Result<_>>()?,
        })
    }

    pub fn get(&self, kind: RegionKind) -> Option<&RegionScore> {
        self.regions.iter().find(|r| r.region == kind)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    #[test]
    fn worked_counts() {
        let s = RegionScore::from_counts(RegionKind::Core, 4, 6, 3);
        assert_eq!((s.dice, s.ppv, s.sensitivity), (0.6, 0.75, 0.5));
        let s = RegionScore::from_counts(RegionKind::Core, 0, 0, 0);
        assert_eq!((s.dice, s.ppv, s.sensitivity), (1.0, 1.0, 1.0));
        let s = RegionScore::from_counts(RegionKind::Core, 0, 5, 0);
        assert_eq!((s.dice, s.ppv, s.sensitivity), (0.0, 0.0, 0.0));
    }

    #[test]
    fn necrosis_regions() {
        let v = LabelVolume::new(Dims::new(1, 1, 2), vec![1, 1]).unwrap();
        assert_eq!(region_mask(&v, RegionKind::Enhancing).count(), 0);
        assert_eq!(region_mask(&v, RegionKind::Core).count(), 2);
        assert_eq!("Core".parse::<RegionKind>().unwrap(), RegionKind::Core);
    }

    #[test]
    fn report_json_has_all_regions() {
        let v = LabelVolume::new(Dims::new(1, 1, 3), vec![2, 4, 0]).unwrap();
        let report = ScoreReport::evaluate(&v, &v).unwrap();
        let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(json["regions"].as_array().unwrap().len(), 3);
        assert_eq!(json["regions"][2]["region"], "enhancing");
        assert_eq!(json["regions"][0]["dice"], 1.0);
    }
}
