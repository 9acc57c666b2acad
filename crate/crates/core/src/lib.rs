//! Semi-sparse two-view feature matching: keypoints in one image are matched
//! against the dense coarse grid of the other, with a learned view switcher
//! choosing which image plays the sparse role.

pub mod coarse;
pub mod error;
pub mod eval;
pub mod extract;
pub mod fine;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod params;
pub mod scene;
pub mod switcher;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
