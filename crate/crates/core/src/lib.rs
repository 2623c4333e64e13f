//! Template-based human performance capture from a single RGB camera.
//!
//! Each frame is solved in two stages. Stage I fits the skeletal pose of a
//! rigged actor template to 2D/3D joint detections and the foreground
//! silhouette with a dense Gauss-Newton solver over a 36-dimensional
//! parameter vector. Stage II then registers every template vertex to the
//! image (photometric and silhouette data terms, material-aware spatial and
//! temporal regularizers) with a sparse Gauss-Newton/PCG solver, followed by
//! silhouette snapping.
//!
//! The crate is organized by concern:
//!
//! * [`template`]: actor mesh, skeleton, skinning weights, material classes
//! * [`camera`]: perspective projection and its Jacobian
//! * [`imageproc`]: masks, exact distance transforms, pyramids, sampling
//! * [`raster`]: the depth-buffered triangle rasterizer shared by all users
//! * [`skinning`]: forward kinematics, dual-quaternion skinning, warping
//! * [`pose_stage`]: Stage I
//! * [`nonrigid_stage`]: Stage II and vertex snapping
//! * [`solvers`]: dense QR and block-sparse PCG kernels
//! * [`gradcheck`]: finite-difference checks of both stages
//! * [`pipeline`]: configuration, sequence driver, metrics, synthetic data

pub mod camera;
pub mod error;
pub mod gradcheck;
pub mod humanoid;
pub mod imageproc;
pub mod nonrigid_stage;
pub mod pipeline;
pub mod pose_stage;
pub mod raster;
pub mod reduce;
pub mod report;
pub mod shapes;
pub mod skinning;
pub mod solvers;
pub mod template;

pub use error::{Error, Result};

/// Three-component vector in meters (world = camera space).
pub type Vec3 = nalgebra::Vector3<f64>;
/// Two-component pixel-space vector.
pub type Vec2 = nalgebra::Vector2<f64>;
