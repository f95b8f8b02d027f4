use crate::error::{Error, Result};

/// Dense `(channels, height, width)` array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimMismatch(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Copy of the `height x width` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Tensor {
        let mut out = Tensor::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let src = (c * self.height + y0 + y) * self.width + x0;
                let dst = (c * height + y) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }

    /// Zero-pads by `pad` on every side.
    pub fn pad(&self, pad: usize) -> Tensor {
        let (h, w) = (self.height + 2 * pad, self.width + 2 * pad);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = (c * self.height + y) * self.width;
                let dst = (c * h + y + pad) * w + pad;
                out.data[dst..dst + self.width].copy_from_slice(&self.data[src..src + self.width]);
            }
        }
        out
    }

    /// Stacks the channels of `self` followed by those of `other`.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::DimMismatch(format!(
                "cannot concatenate {}x{} with {}x{} feature maps",
                self.height, self.width, other.height, other.width
            )));
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
