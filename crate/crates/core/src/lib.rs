//! fuselab: geometry, losses and evaluation for LiDAR-camera fusion segmentation.
//!
//! The crate covers the full path from calibrated projection to a
//! weak-calibration robustness benchmark:
//!
//! - [`calib`]: intrinsics/extrinsics, point-to-pixel projection and the
//!   per-axis rotation disturbance model with its four noise levels.
//! - [`pointcloud`]: point containers, labels, the `FLPC` file format and
//!   training-time geometric augmentation.
//! - [`fusion`]: bilinear sampling of camera feature maps at projected points
//!   and concatenation with per-point LiDAR features.
//! - [`grids`]: bird's-eye-view and range-view index maps with scatter/gather.
//! - [`losses`]: weighted cross-entropy, Lovász-Softmax and the
//!   weak-calibration distillation loss, all with analytic gradients.
//! - [`eval`]: confusion matrices, mIoU and the multi-level benchmark harness.
//! - [`toytrain`]: synthetic scenes and a linear per-point classifier used to
//!   reproduce the qualitative robustness ordering at desk scale.

pub mod calib;
mod error;
pub mod eval;
pub mod fusion;
pub mod grids;
mod io_util;
pub mod losses;
pub mod pointcloud;
pub mod toytrain;

pub use error::{Error, Result};
