//! Evaluation metrics: Chamfer distance and one-directional mean squared error.

use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::knn::nearest_sq_distances;

fn require_points(p: &[Point3], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{what} cloud is empty")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `0.5 * (mean_p min_q |p - q|² + mean_q min_p |q - p|²)`.
pub fn chamfer_distance(p: &[Point3], q: &[Point3]) -> Result<f64> {
    require_points(p, "first")?;
    require_points(q, "second")?;
    Ok(0.5 * (mean(&nearest_sq_distances(p, q)) + mean(&nearest_sq_distances(q, p))))
}

/// Mean over `p` of the squared distance to the nearest point of `reference`.
pub fn mse_to_reference(p: &[Point3], reference: &[Point3]) -> Result<f64> {
    require_points(p, "evaluated")?;
    require_points(reference, "reference")?;
    Ok(mean(&nearest_sq_distances(p, reference)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cd: f64,
    pub mse: f64,
}

/// Both metrics after mapping the two clouds into a frame where their joint
/// bounding box has unit diagonal. The joint box keeps `cd` symmetric in its
/// arguments.
pub fn normalized_metrics(denoised: &PointCloud, clean: &PointCloud) -> Result<Metrics> {
    let bbox = denoised.bounding_box().union(&clean.bounding_box());
    let diag = bbox.diagonal();
    let scale = if diag > 0.0 { diag } else { 1.0 };
    let center = bbox.center();
    let map = |c: &PointCloud| -> Vec<Point3> {
        c.positions().iter().map(|p| (p - center) / scale).collect()
    };
    let (d, c) = (map(denoised), map(clean));
    Ok(Metrics {
        cd: chamfer_distance(&d, &c)?,
        mse: mse_to_reference(&d, &c)?,
    })
}
