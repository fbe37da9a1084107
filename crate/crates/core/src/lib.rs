//! Hyperspectral unmixing toolkit: reflectance calibration, ground-truth
//! dataset construction, endmember extraction, classical and neural
//! unmixing, and evaluation metrics.

pub mod calibration;
pub mod classical;
pub mod cube;
pub mod endmember;
pub mod envi;
pub mod error;
pub mod groundtruth;
pub mod metrics;
pub mod mixer;
pub mod neural;
pub mod render;
pub mod unmixer;
pub mod vca;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use cube::{HyperCube, PadMode, PatchSet, Units};
pub use endmember::EndmemberSet;
pub use error::{Error, Result};
pub use groundtruth::{ClassMap, ClassStats};
pub use mixer::AbundanceMap;
