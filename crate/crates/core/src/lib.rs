//! Robust essential-matrix estimation from dense correspondences, implicit
//! differentiation of the estimation layer, unsupervised optical-flow loss
//! functions, and pose/flow evaluation metrics, with a built-in synthetic
//! two-view oracle.

pub mod fivepoint;
pub mod geometry;
pub mod implicit;
pub mod io;
pub mod losses;
pub mod odometry;
pub mod rng;
pub mod robust;
pub mod synth;
