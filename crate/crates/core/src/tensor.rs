//! The real-valued C×H×W array that carries images and latents everywhere.

use crate::error::{Error, Result};
use ndarray::Array3;

/// A real-valued image-or-latent tensor with shape (channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        Self {
            data: Array3::from_shape_fn((channels, height, width), |(c, y, x)| f(c, y, x)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checks finiteness and that both spatial axes are large enough for an FFT.
    pub fn validate_for_fft(&self) -> Result<()> {
        let (_, h, w) = self.shape();
        if h < 2 || w < 2 {
            return Err(Error::DegenerateShape(format!("{:?}", self.shape())));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("image tensor"));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
            });
        }
        Ok(())
    }

    /// BT.601 luminance; identity on single-channel tensors.
    pub fn to_luminance(&self) -> ImageTensor {
        let (c, h, w) = self.shape();
        if c == 1 {
            return self.clone();
        }
        let mut out = Array3::zeros((1, h, w));
        let weights: &[f64] = match c {
            3 => &[0.299, 0.587, 0.114],
            _ => {
                // Uniform average for channel counts without a colour convention.
                return ImageTensor::new(
                    self.data
                        .mean_axis(ndarray::Axis(0))
                        .expect("non-empty channel axis")
                        .insert_axis(ndarray::Axis(0)),
                );
            }
        };
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[0, y, x]] += weights[ch] * self.data[[ch, y, x]];
                }
            }
        }
        ImageTensor::new(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor::new(self.data.mapv(|v| f(v)))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> ImageTensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scaled_add(&mut self, scale: f64, other: &ImageTensor) {
        self.data.zip_mut_with(&other.data, |a, b| *a += scale * b);
    }

    /// Maps a [0,1] image to the [-1,1] range the diffusion process works in.
    pub fn to_model_range(&self) -> ImageTensor {
        self.map(|v| 2.0 * v - 1.0)
    }

    /// Inverse of [`to_model_range`](Self::to_model_range), clamped to [0,1].
    pub fn to_unit_range(&self) -> ImageTensor {
        self.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
    }
}

impl std::ops::Sub for &ImageTensor {
    type Output = ImageTensor;
    fn sub(self, rhs: &ImageTensor) -> ImageTensor {
        ImageTensor::new(&self.data - &rhs.data)
    }
}

impl std::ops::Add for &ImageTensor {
    type Output = ImageTensor;
    fn add(self, rhs: &ImageTensor) -> ImageTensor {
        ImageTensor::new(&self.data + &rhs.data)
    }
}
