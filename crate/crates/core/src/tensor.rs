//! Dense 4-D arrays in NCHW layout.
//!
//! Every feature map, image, mask and scalar in the crate is a [`Tensor`] of
//! shape `(batch, channels, height, width)`. Scalars are `1×1×1×1`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_spatial(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.n, self.c, self.h, self.w)
    }
}

/// A feature map: row-major NCHW storage of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::Shape(format!(
                "{} elements cannot fill a {shape} tensor",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// The `h×w` plane of one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn expect_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!("{what}: expected {shape}, got {}", self.shape)));
        }
        Ok(())
    }

    /// One batch element as a `1×C×H×W` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenates along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.shape.c, first.shape.h, first.shape.w) {
                return Err(Error::Shape(format!("stack: {} vs {}", first.shape, t.shape)));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape { n, ..first.shape },
            data,
        })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let s0 = first.shape;
        let mut c = 0;
        for t in items {
            if (t.shape.n, t.shape.h, t.shape.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::Shape(format!("concat: {s0} vs {}", t.shape)));
            }
            c += t.shape.c;
        }
        let plane = s0.plane();
        let mut data = Vec::with_capacity(s0.n * c * plane);
        for n in 0..s0.n {
            for t in items {
                let per = t.shape.c * plane;
                data.extend_from_slice(&t.data[n * per..(n + 1) * per]);
            }
        }
        Ok(Tensor {
            shape: s0.with_channels(c),
            data,
        })
    }

    /// Channels `start..start+len`.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if start + len > s.c {
            return Err(Error::Shape(format!("narrow {start}+{len} exceeds {} channels", s.c)));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Tensor {
            shape: s.with_channels(len),
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Tensor {
        let s = self.shape;
        let mut out = self.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..s.h {
                    for x in 0..s.w {
                        dst[y * s.w + x] = src[y * s.w + (s.w - 1 - x)];
                    }
                }
            }
        }
        out
    }

    /// Bilinear resampling with half-pixel centers (no corner alignment).
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Tensor {
        let s = self.shape;
        let ry = Interp::new(s.h, h);
        let rx = Interp::new(s.w, w);
        let mut out = Tensor::zeros(s.with_spatial(h, w));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for oy in 0..h {
                    let (y0, y1, fy) = ry.at(oy);
                    for ox in 0..w {
                        let (x0, x1, fx) = rx.at(ox);
                        let top = src[y0 * s.w + x0] * (1.0 - fx) + src[y0 * s.w + x1] * fx;
                        let bot = src[y1 * s.w + x0] * (1.0 - fx) + src[y1 * s.w + x1] * fx;
                        dst[oy * w + ox] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
        out
    }

    /// Nearest-neighbour resampling; keeps binary maps binary.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Tensor {
        let s = self.shape;
        let src_index = |o: usize, inn: usize, out: usize| -> usize {
            (((o as f64 + 0.5) * inn as f64 / out as f64).floor() as usize).min(inn - 1)
        };
        let ys: Vec<usize> = (0..h).map(|o| src_index(o, s.h, h)).collect();
        let xs: Vec<usize> = (0..w).map(|o| src_index(o, s.w, w)).collect();
        let mut out = Tensor::zeros(s.with_spatial(h, w));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for (oy, &y) in ys.iter().enumerate() {
                    for (ox, &x) in xs.iter().enumerate() {
                        dst[oy * w + ox] = src[y * s.w + x];
                    }
                }
            }
        }
        out
    }
}

/// Per-axis bilinear sampling plan: for each output index, the two source
/// indices and the weight of the second one.
#[derive(Clone, Debug)]
pub(crate) struct Interp {
    taps: Vec<(usize, usize, f64)>,
}

impl Interp {
    pub(crate) fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
                (i0, i1, frac)
            })
            .collect();
        Self { taps }
    }

    #[inline]
    pub(crate) fn at(&self, o: usize) -> (usize, usize, f64) {
        self.taps[o]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_bilinear_is_identity() {
        let t = Tensor::from_fn(Shape::new(1, 2, 5, 7), |_, c, y, x| (c * 100 + y * 7 + x) as f64);
        assert_eq!(t.resize_bilinear(5, 7), t);
    }

    #[test]
    fn bilinear_2x_matches_half_pixel_convention() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let up = t.resize_bilinear(1, 4);
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn nearest_keeps_values_from_source() {
        let t = Tensor::from_fn(Shape::new(1, 1, 6, 8), |_, _, y, x| ((x + y) % 2) as f64);
        let r = t.resize_nearest(4, 5);
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let a = Tensor::from_fn(Shape::new(2, 2, 3, 3), |n, c, y, x| (n + c + y + x) as f64);
        let b = Tensor::from_fn(Shape::new(2, 1, 3, 3), |n, _, y, x| -((n * y + x) as f64));
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.narrow_channels(0, 2).unwrap(), a);
        assert_eq!(cat.narrow_channels(2, 1).unwrap(), b);
    }

    #[test]
    fn flip_is_an_involution() {
        let t = Tensor::from_fn(Shape::new(1, 3, 4, 5), |_, c, y, x| (c * 20 + y * 5 + x) as f64);
        assert_eq!(t.flip_horizontal().flip_horizontal(), t);
        assert_ne!(t.flip_horizontal(), t);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }
}
