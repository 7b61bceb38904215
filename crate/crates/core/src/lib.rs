//! Absolute electrical impedance tomography on unstructured meshes with a
//! graph convolutional Newton-type method.
//!
//! The crate is organised bottom-up:
//!
//! * [`mesh`]: disk / chest / oval triangulations with electrode arcs, the
//!   element graph and its normalized propagation operator.
//! * [`fem`]: complete electrode model forward solver and adjoint Jacobian.
//! * [`recon`]: objective, best constant fit, Levenberg-Marquardt and
//!   smoothed-TV Gauss-Newton updates, line search and the iterate loop.
//! * [`gnn`]: graph convolutional layers and blocks with hand-written
//!   backward passes, MSE loss and Adam.
//! * [`gcnm`]: sequential block training, learned reconstruction and the
//!   graph residual network baseline.
//! * [`simulate`]: phantoms, noise, datasets, metrics and the test cases.
//! * [`render`]: PNG rendering of element-wise fields.

pub mod binio;
pub mod error;
pub mod fem;
pub mod gcnm;
pub mod gnn;
pub mod mesh;
pub mod recon;
pub mod render;
pub mod simulate;
pub mod sparse;

pub use error::{Error, Result};
