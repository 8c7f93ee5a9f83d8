//! Foreground-centric document rectification toolkit.
//!
//! The crate covers the numerical core of training-label synthesis and
//! evaluation for document dewarping: deformation fields and their inversion
//! ([`field`]), procedural documents with exact foreground labels
//! ([`synthdoc`]), ruling-line extraction ([`extract`]), the segmentation, map
//! and curvature-consistency objectives with analytic gradients
//! ([`objective`]), a forward-only mask-guided attention network
//! ([`network`]), evaluation metrics ([`metrics`]) and the forward/backward
//! round-trip bias harness ([`bias`]).

pub mod bias;
pub mod dataset;
pub mod enhance;
pub mod error;
pub mod extract;
pub mod field;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod network;
pub mod objective;
pub mod optimize;
pub mod raster;
pub mod synthdoc;

pub use error::{Error, Result};
pub use field::{DeformationField, Direction};
pub use geometry::{ControlPointSet, LineElement, LineKind, Point};
pub use raster::{PixelRect, Raster};
