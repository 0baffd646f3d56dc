use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Planar (channel-major) image; depth and weight maps use one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: T) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(Error::ShapeMismatch(
                vec![self.channels, self.height, self.width],
                vec![other.channels, other.height, other.width],
            ));
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("image buffer matches its shape")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(w, h, c, t.data().to_vec()),
            ref s => Err(Error::InvalidArgument(format!("expected [C, H, W], got {s:?}"))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| cast(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Concatenates images of equal height side by side.
    pub fn hstack(images: &[Self]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
        let (h, c) = (first.height, first.channels);
        if images.iter().any(|im| im.height != h || im.channels != c) {
            return Err(Error::InvalidArgument("hstack needs equal height and channels".into()));
        }
        let width: usize = images.iter().map(|im| im.width).sum();
        let mut data = Vec::with_capacity(width * h * c);
        for ch in 0..c {
            for y in 0..h {
                for im in images {
                    let start = (ch * h + y) * im.width;
                    data.extend_from_slice(&im.data[start..start + im.width]);
                }
            }
        }
        Self::new(width, h, c, data)
    }
}
