//! Normal-guided bilateral position update.
//!
//! Each point moves towards its neighbors along the normal lines of itself and
//! of the neighbor:
//!
//! `p_i' = p_i + γ Σ_j (W(n_i, n_j) n_i n_iᵀ + λ n_j n_jᵀ)(p_j - p_i)`,
//! `γ = 1 / (3 |N_i|)`, `W(a, b) = exp(-|a - b|² / σ²)`.
//!
//! [`FilterMode::Scalar`] replaces both outer products by the scalars
//! `n_iᵀ n_i` and `n_jᵀ n_j`, which turns the update into a weighted Laplacian.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::knn::{build_knn_graph, KnnGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    #[default]
    Projector,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub lambda: f64,
    pub sigma: f64,
    pub iterations: usize,
    pub k_neighbors: usize,
    #[serde(default)]
    pub mode: FilterMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            sigma: 0.3,
            iterations: 10,
            k_neighbors: 16,
            mode: FilterMode::Projector,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "filter sigma {} must be positive",
                self.sigma
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "filter lambda {} must be non-negative",
                self.lambda
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("filter iterations must be at least 1"));
        }
        if self.k_neighbors == 0 {
            return Err(Error::invalid("filter k must be at least 1"));
        }
        Ok(())
    }
}

/// `exp(-|n_i - n_j|² / σ²)`.
pub fn bilateral_weight(n_i: &Point3, n_j: &Point3, sigma: f64) -> f64 {
    (-(n_i - n_j).norm_squared() / (sigma * sigma)).exp()
}

/// One Jacobi sweep of the update over all points.
///
/// Normals are unoriented, so each neighbor normal is flipped into the
/// hemisphere of `n_i` before the similarity weight is taken. The projector
/// terms do not depend on sign.
pub fn filter_step(
    positions: &[Point3],
    normals: &[Point3],
    graph: &KnnGraph,
    cfg: &FilterConfig,
) -> Result<Vec<Point3>> {
    cfg.validate()?;
    if normals.len() != positions.len() || graph.len() != positions.len() {
        return Err(Error::invalid(format!(
            "{} positions, {} normals and a graph over {} points",
            positions.len(),
            normals.len(),
            graph.len()
        )));
    }
    let gamma = 1.0 / (3.0 * graph.k() as f64);
    let out = positions
        .iter()
        .enumerate()
        .map(|(i, p_i)| {
            let n_i = normals[i];
            let proj_i = n_i * n_i.transpose();
            let mut delta = Point3::zeros();
            for &j in graph.neighbors(i) {
                let n_j = normals[j];
                let aligned = if n_i.dot(&n_j) < 0.0 { -n_j } else { n_j };
                let w = bilateral_weight(&n_i, &aligned, cfg.sigma);
                let d = positions[j] - p_i;
                delta += match cfg.mode {
                    FilterMode::Projector => {
                        let m: Matrix3<f64> = proj_i * w + n_j * n_j.transpose() * cfg.lambda;
                        m * d
                    }
                    FilterMode::Scalar => d * (w * n_i.dot(&n_i) + cfg.lambda * n_j.dot(&n_j)),
                };
            }
            p_i + delta * gamma
        })
        .collect();
    Ok(out)
}

/// Runs [`filter_step`] `cfg.iterations` times, rebuilding the kNN graph
/// before each sweep. Normals are kept fixed.
pub fn final_denoise(cloud: &PointCloud, cfg: &FilterConfig) -> Result<PointCloud> {
    cfg.validate()?;
    let normals = cloud.normals().ok_or_else(|| {
        Error::invalid(format!(
            "cloud {} has no normals to filter with",
            cloud.name()
        ))
    })?;
    let mut positions = cloud.positions().to_vec();
    for _ in 0..cfg.iterations {
        let graph = build_knn_graph(&positions, cfg.k_neighbors)?;
        positions = filter_step(&positions, normals, &graph, cfg)?;
    }
    cloud.with_positions(positions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, z: f64) -> Vec<Point3> {
        (0..n * n)
            .map(|i| Point3::new((i % n) as f64, (i / n) as f64, z))
            .collect()
    }

    #[test]
    fn weight_examples() {
        let a = Point3::z();
        assert_eq!(bilateral_weight(&a, &a, 0.3), 1.0);
        let b = Point3::new(0.0, 0.3, 0.0) + a;
        assert!((bilateral_weight(&a, &b, 0.3) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((bilateral_weight(&a, &-a, 1.0) - (-4.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn planar_input_is_fixed() {
        let p = grid(8, 2.5);
        let n = vec![Point3::z(); p.len()];
        let g = build_knn_graph(&p, 6).unwrap();
        let out = filter_step(&p, &n, &g, &FilterConfig::default()).unwrap();
        for (a, b) in out.iter().zip(&p) {
            assert!((a - b).norm() <= 1e-12);
        }
    }

    #[test]
    fn lifted_point_halves() {
        let h = 0.2;
        let mut p = vec![Point3::new(0.0, 0.0, h)];
        p.extend((0..6).map(|t| {
            let a = t as f64;
            Point3::new(a.cos(), a.sin(), 0.0)
        }));
        let n = vec![Point3::z(); p.len()];
        let g = build_knn_graph(&p, 6).unwrap();
        let out = filter_step(&p, &n, &g, &FilterConfig::default()).unwrap();
        assert!((out[0].z - h / 2.0).abs() < 1e-15);
        assert!(out[0].xy().norm() < 1e-15);
    }

    #[test]
    fn scalar_mode_moves_tangentially() {
        let p = vec![
            Point3::zeros(),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(3.0, 0.0, 0.0),
        ];
        let n = vec![Point3::z(); 3];
        let g = build_knn_graph(&p, 1).unwrap();
        let cfg = FilterConfig {
            mode: FilterMode::Scalar,
            ..FilterConfig::default()
        };
        let out = filter_step(&p, &n, &g, &cfg).unwrap();
        assert!((out[0].x - 0.5).abs() < 1e-15);
        let proj = filter_step(&p, &n, &g, &FilterConfig::default()).unwrap();
        assert_eq!(proj[0], p[0]);
    }

    #[test]
    fn config_validation() {
        let p = grid(3, 0.0);
        let cloud = PointCloud::with_normals("g", p.clone(), vec![Point3::z(); 9]).unwrap();
        let bad = FilterConfig {
            iterations: 0,
            ..FilterConfig::default()
        };
        assert!(matches!(
            final_denoise(&cloud, &bad),
            Err(Error::InvalidArgument(_))
        ));
        let g = build_knn_graph(&p, 2).unwrap();
        assert!(filter_step(&p, &[Point3::z()], &g, &FilterConfig::default()).is_err());
        let no_normals = PointCloud::new("g", p).unwrap();
        assert!(final_denoise(&no_normals, &FilterConfig::default()).is_err());
    }
}
