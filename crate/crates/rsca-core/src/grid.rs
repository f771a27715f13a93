//! Dense rank-4 arrays in `(batch, channel, row, col)` order.

use crate::error::{Error, Result};
use crate::Real;
use rand::Rng;

/// Dense real-valued array indexed `(n, c, y, x)` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Grid<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Grid {
            shape: [n, c, h, w],
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, value: T) -> Self {
        Grid {
            shape: [n, c, h, w],
            data: vec![value; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "data length {} does not match {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            )));
        }
        Ok(Grid {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Uniform samples in `[lo, hi)` from the caller's RNG.
    pub fn random<R: Rng>(n: usize, c: usize, h: usize, w: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..n * c * h * w)
            .map(|_| crate::real::<T>(rng.gen_range(lo..hi)))
            .collect();
        Grid {
            shape: [n, c, h, w],
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.shape[0] && c < self.shape[1] && y < self.shape[2] && x < self.shape[3]);
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.index(n, c, y, x);
        &mut self.data[i]
    }

    /// Value at a possibly out-of-frame spatial location, zero outside.
    #[inline]
    pub fn at_padded(&self, n: usize, c: usize, y: isize, x: isize) -> T {
        if y < 0 || x < 0 || y as usize >= self.shape[2] || x as usize >= self.shape[3] {
            T::zero()
        } else {
            self.at(n, c, y as usize, x as usize)
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Grid<T> {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Grid<T>) -> bool {
        self.shape == other.shape
    }

    pub fn require_shape(&self, shape: [usize; 4], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "{what}: expected {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    /// Elementwise accumulate `other` into `self`.
    pub fn add_assign(&mut self, other: &Grid<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }
}

/// A value grid paired with its accumulated cotangent.
#[derive(Debug, Clone)]
pub struct DualGrid<T> {
    pub value: Grid<T>,
    pub grad: Grid<T>,
}

impl<T: Real> DualGrid<T> {
    pub fn new(value: Grid<T>) -> Self {
        let [n, c, h, w] = value.shape();
        DualGrid {
            value,
            grad: Grid::zeros(n, c, h, w),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Grid::<f64>::from_vec(1, 1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let g = Grid::from_vec(1, 2, 2, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        assert_eq!(g.at(0, 0, 0, 0), 0.0);
        assert_eq!(g.at(0, 0, 1, 2), 5.0);
        assert_eq!(g.at(0, 1, 0, 0), 6.0);
        assert_eq!(g.at(0, 1, 1, 2), 11.0);
    }

    #[test]
    fn padded_access_is_zero_outside() {
        let g = Grid::full(1, 1, 2, 2, 3.0f64);
        assert_eq!(g.at_padded(0, 0, -1, 0), 0.0);
        assert_eq!(g.at_padded(0, 0, 0, 2), 0.0);
        assert_eq!(g.at_padded(0, 0, 1, 1), 3.0);
    }

    #[test]
    fn dual_grid_grad_starts_zero() {
        let d = DualGrid::new(Grid::full(1, 1, 2, 2, 1.0f64));
        assert!(d.grad.data().iter().all(|&v| v == 0.0));
        assert!(d.value.same_shape(&d.grad));
    }
}
