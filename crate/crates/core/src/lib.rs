//! Learned smooth-plus-sparse patch model for linear inverse problems in
//! imaging.
//!
//! The library reconstructs images from linear measurements by minimizing a
//! variational objective with a learned patch prior: every circular patch is
//! split into a free (unpenalized, smooth) component spanned by an
//! orthonormal dictionary and a sparse component synthesized from a second
//! dictionary under a learned regularizer. An inertial proximal solver
//! (iPALM) handles reconstruction; a bilevel outer loop trains the
//! dictionaries and regularizer weights by implicit differentiation of the
//! solver's fixed point.

pub mod analysis;
pub mod backward;
pub mod code;
pub mod conv;
pub mod dict;
pub mod error;
pub mod fft;
pub mod fixed_point;
pub mod image;
pub mod linalg;
pub mod model;
pub mod operators;
pub mod patch;
pub mod reg;
pub mod solver;
pub mod train;

pub use code::CodeField;
pub use error::{CoreError, Result};
pub use image::Image;
