//! Graph-convolutional point cloud denoising.
//!
//! A spatial graph network displaces noisy points inside local patches,
//! a normal-domain graph network refines PCA normals of the result, and a
//! normal-guided bilateral update fits the points to the refined normals.

pub mod autodiff;
pub mod cloud;
pub mod dataset;
pub mod emd;
pub mod error;
pub mod filter;
pub mod io;
pub mod knn;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod patch;
pub mod pca;
pub mod pipeline;
pub mod vn;

pub use cloud::{BoundingBox, Normal, Point3, PointCloud};
pub use error::{Error, Result};
