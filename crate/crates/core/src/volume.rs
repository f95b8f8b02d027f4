//! Volume containers, slicing, and the MMV1 on-disk format.
//!
//! An MMV1 file is a single line of UTF-8 JSON terminated by `\n`, followed
//! immediately by the raw little-endian payload in `[c][z][y][x]` order with
//! `x` varying fastest. Intensity volumes use dtype `f32le`; label volumes use
//! dtype `u8` with one channel.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &str = "MMV1";
pub const NUM_CLASSES: usize = 5;

/// Default modality order.
pub const DEFAULT_CHANNELS: [&str; 3] = ["flair", "t1c", "t2"];

/// Voxel counts along (z, y, x).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Dims {
    pub fn new(z: usize, y: usize, x: usize) -> Self {
        Dims { z, y, x }
    }

    pub fn len(&self) -> usize {
        self.z * self.y * self.x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.y + y) * self.x + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.x;
        let y = (idx / self.x) % self.y;
        let z = idx / (self.x * self.y);
        (z, y, x)
    }

    fn validate(&self) -> Result<()> {
        if self.z == 0 || self.y == 0 || self.x == 0 {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive, got {self}"
            )));
        }
        Ok(())
    }

    /// Extent along `axis` (number of slices).
    pub fn extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::Axial => self.z,
            Axis::Coronal => self.y,
            Axis::Sagittal => self.x,
        }
    }

    /// (height, width) of a slice taken along `axis`.
    pub fn slice_shape(&self, axis: Axis) -> (usize, usize) {
        match axis {
            Axis::Axial => (self.y, self.x),
            Axis::Coronal => (self.z, self.x),
            Axis::Sagittal => (self.z, self.y),
        }
    }

    /// Maps slice pixel (row, col) of slice `index` along `axis` to a voxel index.
    #[inline]
    pub fn slice_voxel(&self, axis: Axis, index: usize, row: usize, col: usize) -> usize {
        match axis {
            Axis::Axial => self.index(index, row, col),
            Axis::Coronal => self.index(row, index, col),
            Axis::Sagittal => self.index(row, col, index),
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.z, self.y, self.x)
    }
}

/// Viewing direction for 2D slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Coronal, Axis::Sagittal];

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Axis::Axial),
            "coronal" => Ok(Axis::Coronal),
            "sagittal" => Ok(Axis::Sagittal),
            other => Err(Error::InvalidArgument(format!("unknown axis {other:?}"))),
        }
    }
}

/// Multi-channel intensity volume, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    dims: Dims,
    channel_names: Vec<String>,
    data: Vec<f32>,
}

impl MultiModalVolume {
    pub fn new(dims: Dims, channel_names: Vec<String>, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        let c = channel_names.len();
        if !(3..=4).contains(&c) {
            return Err(Error::InvalidArgument(format!(
                "volumes carry 3 or 4 channels, got {c}"
            )));
        }
        if data.len() != c * dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} values for {c} channels of {dims}",
                data.len()
            )));
        }
        if let Some(offset) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(offset));
        }
        Ok(MultiModalVolume {
            dims,
            channel_names,
            data,
        })
    }

    /// Volume of the given shape with every channel filled with `value`.
    pub fn filled(dims: Dims, channels: usize, value: f32) -> Result<Self> {
        let names = default_channel_names(channels);
        Self::new(dims, names, vec![value; channels * dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.dims.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Position of a named channel, if present.
    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.dims.len() + self.dims.index(z, y, x)]
    }

    pub fn extract_slice(&self, axis: Axis, index: usize) -> Result<SliceTensor> {
        let extent = self.dims.extent(axis);
        if index >= extent {
            return Err(Error::SliceIndex { index, extent });
        }
        let (height, width) = self.dims.slice_shape(axis);
        let channels = self.channels();
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            let chan = self.channel(c);
            for row in 0..height {
                for col in 0..width {
                    data.push(chan[self.dims.slice_voxel(axis, index, row, col)]);
                }
            }
        }
        Ok(SliceTensor {
            axis,
            index,
            height,
            width,
            channels,
            data,
        })
    }

    /// Writes a slice back to the position it was taken from.
    pub fn insert_slice(&mut self, slice: &SliceTensor) -> Result<()> {
        let extent = self.dims.extent(slice.axis);
        if slice.index >= extent {
            return Err(Error::SliceIndex {
                index: slice.index,
                extent,
            });
        }
        if self.dims.slice_shape(slice.axis) != (slice.height, slice.width)
            || slice.channels != self.channels()
        {
            return Err(Error::DimMismatch(format!(
                "slice {}x{}x{} does not fit {} slices of {}",
                slice.channels, slice.height, slice.width, slice.axis, self.dims
            )));
        }
        let dims = self.dims;
        let plane = slice.height * slice.width;
        for c in 0..slice.channels {
            let chan = self.channel_mut(c);
            for row in 0..slice.height {
                for col in 0..slice.width {
                    chan[dims.slice_voxel(slice.axis, slice.index, row, col)] =
                        slice.data[c * plane + row * slice.width + col];
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = Header {
            magic: MAGIC.to_string(),
            dtype: DType::F32Le,
            dims: [self.dims.z, self.dims.y, self.dims.x],
            channels: self.channels(),
            channel_names: self.channel_names.clone(),
        };
        let mut bytes = header.to_line()?;
        bytes.reserve(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = Header::parse(bytes)?;
        if header.dtype != DType::F32Le {
            return Err(Error::Header(
                "intensity volumes must use dtype \"f32le\"".into(),
            ));
        }
        let dims = header.dims()?;
        if header.channel_names.len() != header.channels {
            return Err(Error::Header(format!(
                "{} channel names for {} channels",
                header.channel_names.len(),
                header.channels
            )));
        }
        let expected = header.channels * dims.len() * 4;
        if payload.len() != expected {
            return Err(Error::PayloadLength {
                expected,
                found: payload.len(),
            });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(dims, header.channel_names, data)
    }
}

/// Convenience wrapper matching the CLI vocabulary.
pub fn load_volume(path: impl AsRef<Path>) -> Result<MultiModalVolume> {
    MultiModalVolume::load(path)
}

pub fn default_channel_names(channels: usize) -> Vec<String> {
    let mut names: Vec<String> = DEFAULT_CHANNELS.iter().map(|s| s.to_string()).collect();
    if channels == 4 {
        names.insert(1, "t1".to_string());
    }
    names.truncate(channels);
    while names.len() < channels {
        names.push(format!("c{}", names.len()));
    }
    names
}

/// Voxel labels in `{0 healthy, 1 necrosis, 2 edema, 3 non-enhancing, 4 enhancing}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} labels for {dims}",
                data.len()
            )));
        }
        if let Some(offset) = data.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel {
                label: data[offset],
                offset,
            });
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![0; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Mutable access; callers must keep labels in `0..5`.
    pub(crate) fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Number of voxels carrying each label.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.data {
            h[l as usize] += 1;
        }
        h
    }

    pub fn extract_slice(&self, axis: Axis, index: usize) -> Result<LabelSlice> {
        let extent = self.dims.extent(axis);
        if index >= extent {
            return Err(Error::SliceIndex { index, extent });
        }
        let (height, width) = self.dims.slice_shape(axis);
        let mut data = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                data.push(self.data[self.dims.slice_voxel(axis, index, row, col)]);
            }
        }
        Ok(LabelSlice {
            axis,
            index,
            height,
            width,
            data,
        })
    }

    pub fn insert_slice(&mut self, slice: &LabelSlice) -> Result<()> {
        let extent = self.dims.extent(slice.axis);
        if slice.index >= extent {
            return Err(Error::SliceIndex {
                index: slice.index,
                extent,
            });
        }
        if self.dims.slice_shape(slice.axis) != (slice.height, slice.width) {
            return Err(Error::DimMismatch(format!(
                "label slice {}x{} does not fit {} slices of {}",
                slice.height, slice.width, slice.axis, self.dims
            )));
        }
        if let Some(offset) = slice.data.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel {
                label: slice.data[offset],
                offset,
            });
        }
        let dims = self.dims;
        for row in 0..slice.height {
            for col in 0..slice.width {
                self.data[dims.slice_voxel(slice.axis, slice.index, row, col)] =
                    slice.data[row * slice.width + col];
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = Header {
            magic: MAGIC.to_string(),
            dtype: DType::U8,
            dims: [self.dims.z, self.dims.y, self.dims.x],
            channels: 1,
            channel_names: vec!["labels".to_string()],
        };
        let mut bytes = header.to_line()?;
        bytes.extend_from_slice(&self.data);
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = Header::parse(bytes)?;
        if header.dtype != DType::U8 || header.channels != 1 {
            return Err(Error::Header(
                "label volumes must use dtype \"u8\" with 1 channel".into(),
            ));
        }
        let dims = header.dims()?;
        if payload.len() != dims.len() {
            return Err(Error::PayloadLength {
                expected: dims.len(),
                found: payload.len(),
            });
        }
        Self::new(dims, payload.to_vec())
    }
}

/// One slice of a label volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSlice {
    pub axis: Axis,
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// A copied 2D slice `[c][row][col]` of a multi-modal volume.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceTensor {
    pub axis: Axis,
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl SliceTensor {
    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum DType {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "u8")]
    U8,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    dtype: DType,
    dims: [usize; 3],
    channels: usize,
    channel_names: Vec<String>,
}

impl Header {
    fn to_line(&self) -> Result<Vec<u8>> {
        let mut line = serde_json::to_vec(self)?;
        line.push(b'\n');
        Ok(line)
    }

    fn parse(bytes: &[u8]) -> Result<(Header, &[u8])> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Header("missing header terminator".into()))?;
        let text = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::Header("header is not UTF-8".into()))?;
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::Header(e.to_string()))?;
        if header.magic != MAGIC {
            return Err(Error::Header(format!("bad magic {:?}", header.magic)));
        }
        Ok((header, &bytes[newline + 1..]))
    }

    fn dims(&self) -> Result<Dims> {
        let dims = Dims::new(self.dims[0], self.dims[1], self.dims[2]);
        dims.validate().map_err(|e| Error::Header(e.to_string()))?;
        Ok(dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: Dims, channels: usize) -> MultiModalVolume {
        let data = (0..channels * dims.len()).map(|i| i as f32 * 0.5).collect();
        MultiModalVolume::new(dims, default_channel_names(channels), data).unwrap()
    }

    #[test]
    fn header_and_payload_sizes() {
        let v = MultiModalVolume::filled(Dims::new(2, 2, 2), 3, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mmv");
        v.save(&p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.data().len(), 24);
        assert_eq!(back.channel_names(), ["flair", "t1c", "t2"]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let v = MultiModalVolume::filled(Dims::new(2, 2, 2), 3, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mmv");
        v.save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = MultiModalVolume::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn non_finite_payload_reports_offset() {
        let v = MultiModalVolume::filled(Dims::new(1, 1, 2), 3, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mmv");
        v.save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        match MultiModalVolume::from_bytes(&bytes) {
            Err(Error::NonFinite(5)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(
            MultiModalVolume::from_bytes(b"{\"magic\":\"MMV1\"}"),
            Err(Error::Header(_))
        ));
        assert!(matches!(
            MultiModalVolume::from_bytes(
                b"{\"magic\":\"XXXX\",\"dtype\":\"f32le\",\"dims\":[1,1,1],\"channels\":3,\"channel_names\":[\"a\",\"b\",\"c\"]}\n"
            ),
            Err(Error::Header(_))
        ));
        assert!(matches!(
            MultiModalVolume::from_bytes(
                b"{\"magic\":\"MMV1\",\"dtype\":\"f32le\",\"dims\":[0,1,1],\"channels\":3,\"channel_names\":[\"a\",\"b\",\"c\"]}\n"
            ),
            Err(Error::Header(_))
        ));
    }

    #[test]
    fn label_volume_rejects_out_of_range() {
        let err = LabelVolume::new(Dims::new(1, 1, 2), vec![0, 5]).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { label: 5, offset: 1 }));
    }

    #[test]
    fn constant_axial_slice() {
        let v = MultiModalVolume::filled(Dims::new(3, 4, 5), 3, 7.0).unwrap();
        let s = v.extract_slice(Axis::Axial, 1).unwrap();
        assert_eq!((s.height, s.width), (4, 5));
        assert!(s.data.iter().all(|&x| x == 7.0));
    }

    #[test]
    fn slice_index_out_of_range() {
        let v = MultiModalVolume::filled(Dims::new(3, 4, 5), 3, 0.0).unwrap();
        assert!(matches!(
            v.extract_slice(Axis::Sagittal, 5),
            Err(Error::SliceIndex { index: 5, extent: 5 })
        ));
    }

    #[test]
    fn axial_pixel_matches_voxel() {
        let v = ramp(Dims::new(3, 4, 5), 3);
        for z in 0..3 {
            let s = v.extract_slice(Axis::Axial, z).unwrap();
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        assert_eq!(s.get(c, y, x), v.get(c, z, y, x));
                    }
                }
            }
        }
        let s = v.extract_slice(Axis::Sagittal, 2).unwrap();
        assert_eq!(s.get(1, 2, 3), v.get(1, 2, 3, 2));
        let s = v.extract_slice(Axis::Coronal, 3).unwrap();
        assert_eq!(s.get(2, 1, 4), v.get(2, 1, 3, 4));
    }

    #[test]
    fn reinserting_every_slice_is_identity() {
        let v = ramp(Dims::new(3, 4, 5), 4);
        for axis in Axis::ALL {
            let mut w = MultiModalVolume::filled(v.dims(), 4, 0.0).unwrap();
            for i in 0..v.dims().extent(axis) {
                w.insert_slice(&v.extract_slice(axis, i).unwrap()).unwrap();
            }
            assert_eq!(w.data(), v.data());
        }
    }

    #[test]
    fn four_channel_names() {
        assert_eq!(default_channel_names(4), ["flair", "t1", "t1c", "t2"]);
    }
}
