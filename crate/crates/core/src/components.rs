//! 3D connected-component labeling and border-flood hole detection.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::volume::Dims;

/// Neighbourhood used when growing components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<(isize, isize, isize)> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push((dz, dy, dx));
                    }
                }
            }
        }
        out
    }
}

/// Boolean voxel grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("mask dims must be positive".into()));
        }
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} mask values for {dims}",
                data.len()
            )));
        }
        Ok(Mask { dims, data })
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize) -> bool) -> Self {
        Mask {
            dims,
            data: (0..dims.len()).map(f).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.data[idx]
    }
}

/// Result of labeling a mask: `ids[v] == 0` outside the mask, otherwise `1..=count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    dims: Dims,
    ids: Vec<u32>,
    sizes: Vec<usize>,
}

impl ComponentLabeling {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn component_count(&self) -> usize {
        self.sizes.len()
    }

    /// Size of component `id` (1-based).
    pub fn size(&self, id: u32) -> usize {
        self.sizes[id as usize - 1]
    }

    /// Sizes indexed by `id - 1`.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Voxel indices grouped per component, in scan order.
    pub fn voxel_lists(&self) -> Vec<Vec<usize>> {
        let mut lists: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (v, &id) in self.ids.iter().enumerate() {
            if id > 0 {
                lists[id as usize - 1].push(v);
            }
        }
        lists
    }

    /// Mask of all labeled voxels.
    pub fn to_mask(&self) -> Mask {
        Mask {
            dims: self.dims,
            data: self.ids.iter().map(|&id| id > 0).collect(),
        }
    }
}

#[inline]
fn neighbour(dims: Dims, z: usize, y: usize, x: usize, d: (isize, isize, isize)) -> Option<usize> {
    let nz = z as isize + d.0;
    let ny = y as isize + d.1;
    let nx = x as isize + d.2;
    if nz < 0 || ny < 0 || nx < 0 {
        return None;
    }
    let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
    if nz >= dims.z || ny >= dims.y || nx >= dims.x {
        return None;
    }
    Some(dims.index(nz, ny, nx))
}

/// Labels maximal connected components of `mask`.
///
/// Component ids follow the z-major scan order of each component's first voxel.
pub fn connected_components_3d(mask: &Mask, connectivity: Connectivity) -> ComponentLabeling {
    let dims = mask.dims;
    let offsets = connectivity.offsets();
    let mut ids = vec![0u32; dims.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..dims.len() {
        if !mask.data[start] || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(v) = queue.pop_front() {
            size += 1;
            let (z, y, x) = dims.coords(v);
            for &d in &offsets {
                if let Some(n) = neighbour(dims, z, y, x, d) {
                    if mask.data[n] && ids[n] == 0 {
                        ids[n] = id;
                        queue.push_back(n);
                    }
                }
            }
        }
        sizes.push(size);
    }

    ComponentLabeling { dims, ids, sizes }
}

/// Voxels outside `mask` that cannot reach the volume border through
/// other voxels outside `mask` under `connectivity`.
pub fn enclosed_holes(mask: &Mask, connectivity: Connectivity) -> Mask {
    let dims = mask.dims;
    let offsets = connectivity.offsets();
    let mut reached = vec![false; dims.len()];
    let mut queue = VecDeque::new();
    for v in 0..dims.len() {
        let (z, y, x) = dims.coords(v);
        let border = z == 0
            || y == 0
            || x == 0
            || z + 1 == dims.z
            || y + 1 == dims.y
            || x + 1 == dims.x;
        if border && !mask.data[v] {
            reached[v] = true;
            queue.push_back(v);
        }
    }
    while let Some(v) = queue.pop_front() {
        let (z, y, x) = dims.coords(v);
        for &d in &offsets {
            if let Some(n) = neighbour(dims, z, y, x, d) {
                if !mask.data[n] && !reached[n] {
                    reached[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    Mask {
        dims,
        data: (0..dims.len())
            .map(|v| !mask.data[v] && !reached[v])
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(dims: Dims, on: &[(usize, usize, usize)]) -> Mask {
        let mut data = vec![false; dims.len()];
        for &(z, y, x) in on {
            data[dims.index(z, y, x)] = true;
        }
        Mask::new(dims, data).unwrap()
    }

    #[test]
    fn corner_touching_voxels() {
        let m = mask_with(Dims::new(2, 2, 2), &[(0, 0, 0), (1, 1, 1)]);
        assert_eq!(connected_components_3d(&m, Connectivity::TwentySix).component_count(), 1);
        assert_eq!(connected_components_3d(&m, Connectivity::Six).component_count(), 2);
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = Mask::new(Dims::new(3, 3, 3), vec![false; 27]).unwrap();
        let l = connected_components_3d(&m, Connectivity::TwentySix);
        assert_eq!(l.component_count(), 0);
        assert!(l.ids().iter().all(|&i| i == 0));
    }

    #[test]
    fn ids_follow_scan_order() {
        let m = mask_with(Dims::new(1, 1, 5), &[(0, 0, 0), (0, 0, 3), (0, 0, 4)]);
        let l = connected_components_3d(&m, Connectivity::Six);
        assert_eq!(l.ids(), &[1, 0, 0, 2, 2]);
        assert_eq!(l.sizes(), &[1, 2]);
        assert_eq!(l.voxel_lists(), vec![vec![0], vec![3, 4]]);
    }

    #[test]
    fn hollow_cube_hole() {
        let dims = Dims::new(5, 5, 5);
        let m = Mask::from_fn(dims, |v| {
            let (z, y, x) = dims.coords(v);
            (1..=3).contains(&z) && (1..=3).contains(&y) && (1..=3).contains(&x) && v != dims.index(2, 2, 2)
        });
        let holes = enclosed_holes(&m, Connectivity::Six);
        assert_eq!(holes.count(), 1);
        assert!(holes.get(dims.index(2, 2, 2)));
    }

    #[test]
    fn open_cavity_is_not_a_hole() {
        let dims = Dims::new(5, 5, 5);
        // Shell with one face voxel removed: the centre connects to the outside.
        let m = Mask::from_fn(dims, |v| {
            let (z, y, x) = dims.coords(v);
            (1..=3).contains(&z)
                && (1..=3).contains(&y)
                && (1..=3).contains(&x)
                && v != dims.index(2, 2, 2)
                && v != dims.index(2, 2, 3)
        });
        assert_eq!(enclosed_holes(&m, Connectivity::Six).count(), 0);
    }
}
