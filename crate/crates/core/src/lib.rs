//! Point localization with the weighted Hausdorff distance.
//!
//! The crate covers the whole pipeline from synthetic crop-field imagery to
//! evaluated plant centers:
//!
//! - [`geom`]: points, grids, images and crops.
//! - [`whd`]: the weighted Hausdorff distance loss, its gradient, and the
//!   average Hausdorff distance between point sets.
//! - [`net`]: a small encoder-decoder localizer with a count head and
//!   hand-written backpropagation.
//! - [`train`]: Adam, the training loop with validation-based model
//!   selection, and encoder-transfer fine-tuning.
//! - [`postprocess`]: Otsu thresholding, connected components and weighted
//!   Gaussian-mixture EM turning a probability map into centers.
//! - [`metrics`]: point matching at a radius, precision/recall/F1, MAHD and
//!   count errors.
//! - [`synth`]: procedural crop fields, region splits and random crops.
//! - [`dataset`]: on-disk dataset directories.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is on and runs sequentially otherwise.

pub mod dataset;
pub mod error;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod net;
pub mod par;
pub mod postprocess;
pub mod synth;
pub mod train;
pub mod whd;

pub use error::{Error, Result};
pub use geom::{euclidean_distance, extract_crop, GridDomain, LabeledSample, Point, PointSet, ProbMap, Rect, RgbImage};
pub use par::Exec;
