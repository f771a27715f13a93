//! Computational core of a real-time segmentation-based scene text detector:
//! a local context-aware upsampling operator with hand-derived backward
//! passes, dynamic text-spine label geometry, probability-map post-processing
//! and a polygon detection evaluation harness.
//!
//! All numeric kernels are generic over the scalar type through the [`Real`]
//! trait; `f64` is the default used by the CLI and the gradient checks.

pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod labelgen;
pub mod lcau;
pub mod ops;
pub mod postproc;

pub use error::{Error, Result};
pub use grid::{DualGrid, Grid};

/// Scalar types the numeric kernels are generic over: `f32` or `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Lossy conversion from `f64` literals into the working scalar type.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 convertible to scalar")
}

pub type Grid32 = Grid<f32>;
pub type Grid64 = Grid<f64>;
pub type Polygon32 = geometry::Polygon<f32>;
pub type Polygon64 = geometry::Polygon<f64>;
