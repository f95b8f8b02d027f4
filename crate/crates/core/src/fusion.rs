//! Majority-vote fusion of per-view label volumes.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, NUM_CLASSES};

/// Labels assigned to one voxel by the axial, coronal and sagittal passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ViewTriple {
    pub axial: u8,
    pub coronal: u8,
    pub sagittal: u8,
}

impl ViewTriple {
    pub fn new(axial: u8, coronal: u8, sagittal: u8) -> Self {
        ViewTriple {
            axial,
            coronal,
            sagittal,
        }
    }

    fn votes(&self, pred: impl Fn(u8) -> bool) -> usize {
        [self.axial, self.coronal, self.sagittal].into_iter().filter(|&l| pred(l)).count()
    }
}

/// Any positive majority yields edema; necrosis, non-enhancing and
/// enhancing majorities then override in that order.
pub fn fuse_voxel(t: ViewTriple) -> Result<u8> {
    for (offset, l) in [t.axial, t.coronal, t.sagittal].into_iter().enumerate() {
        if l as usize >= NUM_CLASSES {
            return Err(Error::InvalidLabel { label: l, offset });
        }
    }
    let mut r = 0;
    if t.votes(|l| l > 0) >= 2 {
        r = 2;
    }
    for label in [1, 3, 4] {
        if t.votes(|l| l == label) >= 2 {
            r = label;
        }
    }
    Ok(r)
}

/// Voxelwise fusion of three views.
pub fn fuse_volumes(axial: &LabelVolume, coronal: &LabelVolume, sagittal: &LabelVolume) -> Result<LabelVolume> {
    let dims = axial.dims();
    if coronal.dims() != dims || sagittal.dims() != dims {
        return Err(Error::DimMismatch(format!(
            "views {} / {} / {}",
            dims,
            coronal.dims(),
            sagittal.dims()
        )));
    }
    let data = axial
        .data()
        .iter()
        .zip(coronal.data())
        .zip(sagittal.data())
        .map(|((&a, &c), &s)| fuse_voxel(ViewTriple::new(a, c, s)))
        .collect::<Result<Vec<u8>>>()?;
    LabelVolume::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn fuse(a: u8, c: u8, s: u8) -> u8 {
        fuse_voxel(ViewTriple::new(a, c, s)).unwrap()
    }

    #[test]
    fn worked_triples() {
        assert_eq!(fuse(0, 0, 4), 0);
        assert_eq!(fuse(2, 3, 0), 2);
        assert_eq!(fuse(4, 4, 1), 4);
        assert_eq!(fuse(1, 3, 0), 2);
        assert_eq!(fuse(2, 2, 0), 2);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(
            fuse_voxel(ViewTriple::new(0, 5, 0)),
            Err(Error::InvalidLabel { label: 5, offset: 1 })
        ));
    }

    #[test]
    fn unanimity_and_mismatch() {
        let dims = Dims::new(2, 2, 2);
        let v = LabelVolume::new(dims, vec![0, 1, 2, 3, 4, 0, 1, 2]).unwrap();
        assert_eq!(fuse_volumes(&v, &v, &v).unwrap(), v);
        let other = LabelVolume::zeros(Dims::new(2, 2, 1)).unwrap();
        assert!(fuse_volumes(&v, &v, &other).is_err());
    }
}
