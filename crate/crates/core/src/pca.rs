//! Local plane fitting: the normal is the eigenvector of the neighborhood
//! covariance with the smallest eigenvalue.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::cloud::{Normal, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::knn::KnnGraph;

/// Flips `v` so that its largest-magnitude component is positive
/// (ties resolved toward the earliest axis).
pub fn canonical_sign(v: Point3) -> Point3 {
    let mut axis = 0;
    for a in 1..3 {
        if v[a].abs() > v[axis].abs() {
            axis = a;
        }
    }
    if v[axis] < 0.0 {
        -v
    } else {
        v
    }
}

/// Un-oriented PCA normal of a point set (at least 3 points, not all coincident).
pub fn pca_normal(points: &[Point3]) -> Result<Normal> {
    if points.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "PCA normal needs at least 3 points, got {}",
            points.len()
        )));
    }
    let centroid = points.iter().sum::<Point3>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;

    let magnitude = points
        .iter()
        .map(|p| p.amax())
        .fold(0.0, f64::max)
        .max(1e-300);
    if cov.trace() <= (1e-15 * magnitude).powi(2) {
        return Err(Error::DegenerateInput(
            "all points coincide; covariance has rank zero".into(),
        ));
    }

    let eig = SymmetricEigen::new(cov);
    let smallest = eig.eigenvalues.imin();
    let v = eig.eigenvectors.column(smallest).into_owned();
    let mut n = Normal::from_vector(v, false)?;
    n.direction = canonical_sign(n.direction);
    Ok(n)
}

/// Estimates a normal for every point from itself and its graph neighbors.
pub fn estimate_all_normals(cloud: &PointCloud, graph: &KnnGraph) -> Result<PointCloud> {
    let normals = estimate_normals(cloud.positions(), graph)?;
    cloud.clone().set_normals(normals)
}

/// Slice form of [`estimate_all_normals`].
pub fn estimate_normals(positions: &[Point3], graph: &KnnGraph) -> Result<Vec<Point3>> {
    if graph.len() != positions.len() {
        return Err(Error::invalid(format!(
            "graph over {} points used with {} positions",
            graph.len(),
            positions.len()
        )));
    }
    if graph.k() < 2 {
        return Err(Error::invalid(format!(
            "normal estimation needs k >= 2, got {}",
            graph.k()
        )));
    }
    let mut normals = Vec::with_capacity(positions.len());
    let mut failed = Vec::new();
    let mut hood = Vec::with_capacity(graph.k() + 1);
    for (i, p) in positions.iter().enumerate() {
        hood.clear();
        hood.push(*p);
        hood.extend(graph.neighbors(i).iter().map(|&j| positions[j]));
        match pca_normal(&hood) {
            Ok(n) => normals.push(n.direction),
            Err(_) => {
                failed.push(i);
                normals.push(Point3::z());
            }
        }
    }
    if failed.is_empty() {
        Ok(normals)
    } else {
        Err(Error::DegenerateNormals { indices: failed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::build_knn_graph;

    #[test]
    fn plane_z0() {
        let pts: Vec<Point3> = (0..25)
            .map(|i| Point3::new((i % 5) as f64 * 0.3, (i / 5) as f64 * 0.7 - 1.0, 0.0))
            .collect();
        let n = pca_normal(&pts).unwrap();
        assert_eq!(n.direction, Point3::z());
        assert!(!n.oriented);
    }

    #[test]
    fn tilted_plane() {
        // x + y + z = 0 spanned by (1,-1,0) and (1,1,-2)
        let a = Point3::new(1.0, -1.0, 0.0);
        let b = Point3::new(1.0, 1.0, -2.0);
        let pts: Vec<Point3> = (0..30)
            .map(|i| a * ((i % 6) as f64 - 2.5) * 0.4 + b * ((i / 6) as f64 - 2.0) * 0.3)
            .collect();
        let n = pca_normal(&pts).unwrap();
        let expected = Point3::new(1.0, 1.0, 1.0).normalize();
        assert!(n.direction.dot(&expected).abs() >= 1.0 - 1e-9);
    }

    #[test]
    fn three_points_give_triangle_normal() {
        let pts = [
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(2.0, 0.5, 0.0),
            Point3::new(-0.3, 1.5, 0.2),
        ];
        let cross = (pts[1] - pts[0]).cross(&(pts[2] - pts[0])).normalize();
        let n = pca_normal(&pts).unwrap();
        assert!(n.direction.dot(&cross).abs() > 1.0 - 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            pca_normal(&[Point3::zeros(), Point3::x()]),
            Err(Error::DegenerateInput(_))
        ));
        let same = vec![Point3::new(1.0, 2.0, 3.0); 5];
        assert!(matches!(pca_normal(&same), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn sign_convention() {
        assert_eq!(
            canonical_sign(Point3::new(0.1, -0.9, 0.2)),
            Point3::new(-0.1, 0.9, -0.2)
        );
        // tie on magnitude: earliest axis decides
        assert_eq!(
            canonical_sign(Point3::new(-0.5, 0.5, 0.0)),
            Point3::new(0.5, -0.5, 0.0)
        );
    }

    #[test]
    fn three_point_cloud_normals_agree() {
        let c = PointCloud::new(
            "tri",
            vec![
                Point3::zeros(),
                Point3::new(1.0, 0.2, 0.1),
                Point3::new(0.3, 1.0, -0.2),
            ],
        )
        .unwrap();
        let g = build_knn_graph(c.positions(), 2).unwrap();
        let out = estimate_all_normals(&c, &g).unwrap();
        let n = out.normals().unwrap();
        assert_eq!(n[0], n[1]);
        assert_eq!(n[1], n[2]);
    }

    #[test]
    fn reports_offending_indices() {
        let mut pts = vec![Point3::zeros(); 4];
        pts.extend((0..6).map(|i| Point3::new(10.0 + i as f64, (i * i) as f64, 1.0)));
        let c = PointCloud::new("d", pts).unwrap();
        let g = build_knn_graph(c.positions(), 3).unwrap();
        match estimate_all_normals(&c, &g) {
            Err(Error::DegenerateNormals { indices }) => assert_eq!(indices, vec![0, 1, 2, 3]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
