//! Dense pixel grids.
//!
//! Every grid is row-major with the channel index varying fastest, so pixel
//! `(row, col)` of an `H×W×C` image occupies `data[(row * W + col) * C..][..C]`.

use std::fmt;

use rayon::prelude::*;

use crate::{Error, Result};

/// Grid dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same spatial extent with a different channel count.
    pub const fn with_channels(&self, channels: usize) -> Self {
        Self::new(self.height, self.width, channels)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// An `H×W×C` grid of `f64` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        let shape = Shape::new(height, width, channels);
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros_like(other: &Image) -> Self {
        Self {
            shape: other.shape,
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(height, width, channels);
        if data.len() != shape.len() {
            return Err(Error::BadBuffer {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds an image by evaluating `f(row, col, channel)` for every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let shape = Shape::new(height, width, channels);
        let mut data = Vec::with_capacity(shape.len());
        for row in 0..height {
            for col in 0..width {
                for ch in 0..channels {
                    data.push(f(row, col, ch));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.shape.width + col) * self.shape.channels + ch
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// Channel samples of the pixel with linear index `p`.
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        let c = self.shape.channels;
        &self.data[p * c..(p + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Image {
        Image {
            shape: self.shape,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped images.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64 + Sync) -> Result<Image> {
        self.expect_shape("image", other.shape)?;
        Ok(Image {
            shape: self.shape,
            data: self
                .data
                .par_iter()
                .zip(other.data.par_iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with a shape mismatch naming `what` unless the shape is `expected`.
    pub fn expect_shape(&self, what: &str, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(what, expected, self.shape));
        }
        Ok(())
    }

    /// Copies a rectangular window.
    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Image {
        Image::from_fn(height, width, self.channels(), |r, c, ch| {
            self.at(row0 + r, col0 + c, ch)
        })
    }
}

/// An `H×W` grid of 3-vectors. Used for normals, view directions and their
/// gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    height: usize,
    width: usize,
    data: Vec<[f64; 3]>,
}

/// Per-pixel surface normals in camera coordinates (x right, y up, z toward
/// the camera).
pub type NormalMap = VectorField;

impl VectorField {
    pub fn filled(height: usize, width: usize, value: [f64; 3]) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::BadBuffer {
                len: data.len(),
                shape: Shape::new(height, width, 3),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Interprets a three-channel image as a vector field.
    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels() != 3 {
            return Err(Error::shape(
                "vector field image",
                img.shape().with_channels(3),
                img.shape(),
            ));
        }
        let data = img
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(Self {
            height: img.height(),
            width: img.width(),
            data,
        })
    }

    pub fn to_image(&self) -> Image {
        let data = self.data.iter().flat_map(|v| v.iter().copied()).collect();
        Image::from_vec(self.height, self.width, 3, data).expect("length is H*W*3")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, 3)
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: [f64; 3]) {
        let w = self.width;
        self.data[row * w + col] = v;
    }

    /// Per-pixel unit vectors; zero vectors are mapped to `(0, 0, 1)`.
    pub fn normalized(&self) -> VectorField {
        VectorField {
            height: self.height,
            width: self.width,
            data: self.data.par_iter().map(|&v| normalize_or_z(v)).collect(),
        }
    }

    pub(crate) fn expect_dims(&self, what: &str, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::shape(
                what,
                Shape::new(height, width, 3),
                self.shape(),
            ));
        }
        Ok(())
    }

    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> VectorField {
        VectorField::from_fn(height, width, |r, c| self.at(row0 + r, col0 + c))
    }
}

/// An `H×W` boolean grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::BadBuffer {
                len: data.len(),
                shape: Shape::new(height, width, 1),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.expect_dims("mask", other.height, other.width)?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub(crate) fn expect_dims(&self, what: &str, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::shape(
                what,
                Shape::new(height, width, 1),
                Shape::new(self.height, self.width, 1),
            ));
        }
        Ok(())
    }

    /// 1-channel image holding 1.0 for set pixels and 0.0 elsewhere.
    pub fn to_image(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        Image::from_vec(self.height, self.width, 1, data).expect("length is H*W")
    }

    /// Pixels with a first-channel value above one half are set.
    pub fn from_image(img: &Image) -> Mask {
        let c = img.channels();
        Mask {
            height: img.height(),
            width: img.width(),
            data: img.data().chunks_exact(c).map(|px| px[0] > 0.5).collect(),
        }
    }
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn normalize_or_z(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    if n > 0.0 && n.is_finite() {
        [v[0] / n, v[1] / n, v[2] / n]
    } else {
        [0.0, 0.0, 1.0]
    }
}

/// Vector-Jacobian product of `u ↦ u / ‖u‖` at `u`.
#[inline]
pub fn normalize_vjp(u: [f64; 3], cot: [f64; 3]) -> [f64; 3] {
    let len = norm(u);
    if len == 0.0 || !len.is_finite() {
        return [0.0; 3];
    }
    let n = [u[0] / len, u[1] / len, u[2] / len];
    let proj = dot(n, cot);
    [
        (cot[0] - n[0] * proj) / len,
        (cot[1] - n[1] * proj) / len,
        (cot[2] - n[2] * proj) / len,
    ]
}

/// Jacobian-vector product of `u ↦ u / ‖u‖`; the map's Jacobian is symmetric,
/// so this coincides with [`normalize_vjp`].
#[inline]
pub fn normalize_jvp(u: [f64; 3], tangent: [f64; 3]) -> [f64; 3] {
    normalize_vjp(u, tangent)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_channel_last() {
        let img = Image::from_fn(2, 3, 2, |r, c, ch| (r * 100 + c * 10 + ch) as f64);
        assert_eq!(img.data()[img.index(1, 2, 1)], 121.0);
        assert_eq!(img.pixel(4), &[110.0, 111.0]);
    }

    #[test]
    fn bad_buffer_is_rejected() {
        assert!(matches!(
            Image::from_vec(2, 2, 3, vec![0.0; 11]),
            Err(Error::BadBuffer { len: 11, .. })
        ));
    }

    #[test]
    fn normalize_vjp_matches_finite_differences() {
        let u = [0.3, -1.2, 0.7];
        let cot = [0.5, 0.25, -1.0];
        let g = normalize_vjp(u, cot);
        let h = 1e-6;
        for k in 0..3 {
            let mut up = u;
            let mut dn = u;
            up[k] += h;
            dn[k] -= h;
            let f = |v: [f64; 3]| dot(normalize_or_z(v), cot);
            let fd = (f(up) - f(dn)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn mask_image_round_trip() {
        let m = Mask::from_fn(3, 4, |r, c| (r + c) % 2 == 0);
        assert_eq!(Mask::from_image(&m.to_image()), m);
        assert_eq!(m.count(), 6);
    }
}
