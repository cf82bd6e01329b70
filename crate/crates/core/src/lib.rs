//! Part-based 3D warping between frames of a moving human, the depth and
//! normal consistency losses built on it, reconstruction uncertainty, and a
//! scale-aligned evaluation protocol. A built-in analytic renderer supplies
//! exact depth, normals, IUV maps and per-part transforms for testing.

pub mod correspondence;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod refine;
pub mod synth;
pub mod uncertainty;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, MapGrid, Point3};
