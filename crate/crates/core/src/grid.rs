//! Scalar fields on a regular pixel grid (spacing 1) and the discrete
//! calculus used by every energy and PDE in the crate.
//!
//! Neumann boundaries are realised with mirrored ghost cells: an off-grid
//! neighbour takes the value of the centre pixel. With that rule the
//! 5-point Laplacian is exactly the (negative) graph Laplacian of the grid,
//! i.e. the gradient of [`ScalarField::dirichlet_energy`] is
//! `-2 * laplacian_neumann`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> ScalarField<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "grid must be at least 1x1, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "{}x{} grid needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "grid must be at least 1x1");
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, T::zero())
    }

    /// Builds a field from `f(x, y)`, `x` the column and `y` the row.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "grid must be at least 1x1");
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let w = self.width;
        self.values[y * w + x] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination of two fields of the same shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_dims(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.to_f64().map(f64::is_finite).unwrap_or(false))
    }

    /// 5-point Laplacian with homogeneous Neumann boundaries.
    pub fn laplacian_neumann(&self) -> Self {
        let mut out = vec![T::zero(); self.values.len()];
        laplacian_into(&self.values, self.width, self.height, &mut out);
        Self {
            width: self.width,
            height: self.height,
            values: out,
        }
    }

    /// Sum of squared forward differences; differences that would leave the
    /// grid are omitted.
    pub fn dirichlet_energy(&self) -> T {
        let (w, h) = self.dims();
        let v = &self.values;
        let mut acc = T::zero();
        for y in 0..h {
            let row = y * w;
            for x in 0..w {
                let c = v[row + x];
                if x + 1 < w {
                    let d = v[row + x + 1] - c;
                    acc += d * d;
                }
                if y + 1 < h {
                    let d = v[row + w + x] - c;
                    acc += d * d;
                }
            }
        }
        acc
    }

    /// Discrete integral over the grid (pixel area 1).
    pub fn integrate(&self) -> T {
        self.values.iter().copied().sum()
    }

    /// Outward one-sided difference at every boundary pixel, in the
    /// [`BoundaryField`] traversal order. Corners average their two outward
    /// directions.
    pub fn normal_derivative_boundary(&self) -> Result<BoundaryField<T>> {
        let (w, h) = self.dims();
        if w < 2 || h < 2 {
            return Err(Error::invalid(format!(
                "normal derivative needs a grid of at least 2x2, got {w}x{h}"
            )));
        }
        let two = T::one() + T::one();
        let values = boundary_pixels(w, h)
            .map(|(x, y)| {
                let c = self.get(x, y);
                let horizontal = if x == 0 {
                    Some(c - self.get(1, y))
                } else if x == w - 1 {
                    Some(c - self.get(w - 2, y))
                } else {
                    None
                };
                let vertical = if y == 0 {
                    Some(c - self.get(x, 1))
                } else if y == h - 1 {
                    Some(c - self.get(x, h - 2))
                } else {
                    None
                };
                match (horizontal, vertical) {
                    (Some(a), Some(b)) => (a + b) / two,
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => unreachable!("boundary traversal yielded an interior pixel"),
                }
            })
            .collect();
        Ok(BoundaryField {
            width: w,
            height: h,
            values,
        })
    }
}

/// One value per boundary pixel. Order: top row left to right, right column
/// top to bottom, bottom row right to left, left column bottom to top; each
/// corner appears once.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryField<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> BoundaryField<T> {
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Pixel coordinates in traversal order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> {
        boundary_pixels(self.width, self.height)
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| v * factor).collect(),
        }
    }
}

/// Perimeter traversal for `w, h >= 2`.
pub fn boundary_pixels(w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let top = (0..w).map(|x| (x, 0));
    let right = (1..h).map(move |y| (w - 1, y));
    let bottom = (0..w - 1).rev().map(move |x| (x, h - 1));
    let left = (1..h - 1).rev().map(|y| (0, y));
    top.chain(right).chain(bottom).chain(left)
}

/// Mirrored-ghost 5-point Laplacian on a raw row-major buffer.
pub(crate) fn laplacian_into<T: Scalar>(f: &[T], w: usize, h: usize, out: &mut [T]) {
    debug_assert_eq!(f.len(), w * h);
    debug_assert_eq!(out.len(), w * h);
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            let i = row + x;
            let c = f[i];
            let mut acc = T::zero();
            if x > 0 {
                acc += f[i - 1] - c;
            }
            if x + 1 < w {
                acc += f[i + 1] - c;
            }
            if y > 0 {
                acc += f[i - w] - c;
            }
            if y + 1 < h {
                acc += f[i + w] - c;
            }
            out[i] = acc;
        }
    }
}
