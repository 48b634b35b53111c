//! Dense NCHW tensors of `f64`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// Panics when `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.len(),
            data.len(),
            "tensor data length does not match shape {shape}"
        );
        Tensor { shape, data }
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

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(n, c, y, x)]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// The `(n, c)` plane as a slice.
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let s = items[0].shape;
        let mut data = Vec::with_capacity(s.len() * items.len());
        for t in items {
            assert_eq!((t.shape.c, t.shape.h, t.shape.w), (s.c, s.h, s.w));
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.shape.n).sum();
        Tensor::from_vec(Shape::new(n, s.c, s.h, s.w), data)
    }

    /// Zero-pads on the bottom and right to `h x w`.
    pub fn pad_to(&self, h: usize, w: usize) -> Tensor {
        let s = self.shape;
        assert!(h >= s.h && w >= s.w, "pad_to cannot shrink {s} to {h}x{w}");
        if (h, w) == (s.h, s.w) {
            return self.clone();
        }
        let out_shape = Shape::new(s.n, s.c, h, w);
        let mut out = Tensor::zeros(out_shape);
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..s.h {
                    dst[y * w..y * w + s.w].copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
                }
            }
        }
        out
    }

    /// The top-left `h x w` window of every plane.
    pub fn crop_to(&self, h: usize, w: usize) -> Tensor {
        let s = self.shape;
        assert!(h <= s.h && w <= s.w, "crop_to cannot grow {s} to {h}x{w}");
        if (h, w) == (s.h, s.w) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(s.n * s.c * h * w);
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                for y in 0..h {
                    data.extend_from_slice(&src[y * s.w..y * s.w + w]);
                }
            }
        }
        Tensor::from_vec(Shape::new(s.n, s.c, h, w), data)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let s = items[0].shape;
        let c: usize = items.iter().map(|t| t.shape.c).sum();
        let out_shape = Shape::new(s.n, c, s.h, s.w);
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..s.n {
            for t in items {
                assert_eq!((t.shape.n, t.shape.h, t.shape.w), (s.n, s.h, s.w));
                let per = t.shape.c * t.shape.plane();
                data.extend_from_slice(&t.data[n * per..(n + 1) * per]);
            }
        }
        Tensor::from_vec(out_shape, data)
    }
}
