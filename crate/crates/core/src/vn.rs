//! Virtual normals: normals of well-shaped triangles spanned by random point
//! triples, compared between a prediction and its index-aligned clean cloud.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::DiffArray;
use crate::cloud::{Normal, Point3, PointCloud};
use crate::error::{Error, Result};

pub const MIN_ANGLE_DEG: f64 = 45.0;
pub const MAX_ANGLE_DEG: f64 = 90.0;
/// Slack on the closed angle interval so right isosceles triangles, whose
/// angles land within rounding of the bounds, are accepted.
pub const ANGLE_SLACK_DEG: f64 = 1e-9;
/// Safe-normalization floor for predicted triangle normals.
pub const NORMAL_EPS: f64 = 1e-12;

/// Three distinct point indices. The order fixes the normal's orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriangleSample {
    pub indices: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VnSampleSet {
    pub samples: Vec<TriangleSample>,
    pub edge_threshold: f64,
    pub rng_seed: u64,
}

fn angle_deg(u: Point3, v: Point3) -> f64 {
    let denom = u.norm() * v.norm();
    if denom == 0.0 {
        return 0.0;
    }
    (u.dot(&v) / denom).clamp(-1.0, 1.0).acos().to_degrees()
}

/// True when every edge is at least `edge_threshold` long and every interior
/// angle lies in [45°, 90°].
pub fn triangle_is_valid(a: &Point3, b: &Point3, c: &Point3, edge_threshold: f64) -> bool {
    let (ab, bc, ca) = (b - a, c - b, a - c);
    if ab.norm() < edge_threshold || bc.norm() < edge_threshold || ca.norm() < edge_threshold {
        return false;
    }
    let angles = [angle_deg(ab, -ca), angle_deg(bc, -ab), angle_deg(ca, -bc)];
    angles
        .iter()
        .all(|&t| (MIN_ANGLE_DEG - ANGLE_SLACK_DEG..=MAX_ANGLE_DEG + ANGLE_SLACK_DEG).contains(&t))
}

/// Rejection-samples `n` valid triangles from uniformly drawn index triples.
pub fn sample_vn_set(
    positions: &[Point3],
    n: usize,
    edge_threshold: f64,
    seed: u64,
    max_attempts: usize,
) -> Result<VnSampleSet> {
    let count = positions.len();
    if count < 3 {
        return Err(Error::invalid(format!(
            "triangle sampling needs at least 3 points, got {count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut attempts = 0;
    while samples.len() < n {
        if attempts >= max_attempts {
            return Err(Error::SamplingExhausted {
                attempts,
                accepted: samples.len(),
                requested: n,
                rate: samples.len() as f64 / attempts.max(1) as f64,
            });
        }
        attempts += 1;
        let i = rng.random_range(0..count);
        let mut j = rng.random_range(0..count - 1);
        if j >= i {
            j += 1;
        }
        let (lo, hi) = (i.min(j), i.max(j));
        let mut k = rng.random_range(0..count - 2);
        if k >= lo {
            k += 1;
        }
        if k >= hi {
            k += 1;
        }
        if triangle_is_valid(&positions[i], &positions[j], &positions[k], edge_threshold) {
            samples.push(TriangleSample { indices: [i, j, k] });
        }
    }
    Ok(VnSampleSet {
        samples,
        edge_threshold,
        rng_seed: seed,
    })
}

/// Cloud-level wrapper using the default attempt budget of `1000 * n`.
pub fn sample_cloud_vn_set(
    cloud: &PointCloud,
    n: usize,
    edge_threshold: f64,
    seed: u64,
) -> Result<VnSampleSet> {
    sample_vn_set(cloud.positions(), n, edge_threshold, seed, 1000 * n.max(1))
}

/// Default edge threshold: a tenth of the bounding-box diagonal.
pub fn default_edge_threshold(positions: &[Point3]) -> f64 {
    crate::cloud::BoundingBox::of(positions).map_or(0.0, |b| 0.1 * b.diagonal())
}

/// Unit normal of the sampled triangle, oriented by index order.
pub fn virtual_normal(positions: &[Point3], sample: &TriangleSample) -> Result<Normal> {
    let [i, j, k] = sample.indices;
    if i.max(j).max(k) >= positions.len() {
        return Err(Error::invalid(format!(
            "triangle {:?} out of range for {} points",
            sample.indices,
            positions.len()
        )));
    }
    let cross = (positions[j] - positions[i]).cross(&(positions[k] - positions[i]));
    Normal::from_vector(cross, true)
        .map_err(|_| Error::DegenerateInput(format!("triangle {:?} has zero area", sample.indices)))
}

fn check_indices(set: &VnSampleSet, n: usize) -> Result<()> {
    for s in &set.samples {
        if s.indices.iter().any(|&i| i >= n) {
            return Err(Error::invalid(format!(
                "triangle {:?} out of range for {n} points",
                s.indices
            )));
        }
    }
    Ok(())
}

/// Mean Euclidean distance between predicted and clean virtual normals.
/// Differentiable with respect to `pred` (`[n, 3]`).
pub fn vn_loss(pred: &DiffArray, clean: &[Point3], set: &VnSampleSet) -> Result<DiffArray> {
    if pred.cols() != 3 || pred.rows() != clean.len() {
        return Err(Error::invalid(format!(
            "prediction of shape {:?} is not index-aligned with {} clean points",
            pred.shape(),
            clean.len()
        )));
    }
    if set.samples.is_empty() {
        return Err(Error::invalid("empty triangle sample set"));
    }
    check_indices(set, clean.len())?;
    let column = |c: usize| -> Rc<[usize]> { set.samples.iter().map(|s| s.indices[c]).collect() };
    let (pi, pj, pk) = (
        pred.gather_rows(column(0)),
        pred.gather_rows(column(1)),
        pred.gather_rows(column(2)),
    );
    let pred_normals = pj
        .sub(&pi)
        .cross_rows(&pk.sub(&pi))
        .normalize_rows(NORMAL_EPS);
    let mut gt = Vec::with_capacity(set.samples.len());
    for s in &set.samples {
        gt.push(virtual_normal(clean, s)?.direction);
    }
    let gt = DiffArray::from_points(&gt, false);
    Ok(pred_normals.sub(&gt).row_norm().mean())
}

/// Value-only VN loss between two clouds.
pub fn vn_loss_value(pred: &PointCloud, clean: &PointCloud, set: &VnSampleSet) -> Result<f64> {
    let p = DiffArray::from_points(pred.positions(), false);
    Ok(vn_loss(&p, clean.positions(), set)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    fn equilateral(side: f64) -> [Point3; 3] {
        [
            p(0.0, 0.0, 0.0),
            p(side, 0.0, 0.0),
            p(side / 2.0, side * 3f64.sqrt() / 2.0, 0.0),
        ]
    }

    #[test]
    fn validity_rules() {
        let [a, b, c] = equilateral(1.0);
        assert!(triangle_is_valid(&a, &b, &c, 0.1));
        // right isosceles sits exactly on both bounds
        assert!(triangle_is_valid(
            &p(0., 0., 0.),
            &p(1., 0., 0.),
            &p(0., 1., 0.),
            0.1
        ));
        assert!(!triangle_is_valid(
            &p(0., 0., 0.),
            &p(1., 0., 0.),
            &p(2., 0., 0.),
            0.1
        ));
        let [a, b, c] = equilateral(0.05);
        assert!(!triangle_is_valid(&a, &b, &c, 0.1));
        // obtuse
        assert!(!triangle_is_valid(
            &p(0., 0., 0.),
            &p(2., 0., 0.),
            &p(1., 0.3, 0.),
            0.1
        ));
        // thin acute (one angle < 45°)
        assert!(!triangle_is_valid(
            &p(0., 0., 0.),
            &p(1., 0., 0.),
            &p(0.9, 3., 0.),
            0.1
        ));
    }

    #[test]
    fn single_triangle_cloud() {
        let tri = equilateral(1.0).to_vec();
        let set = sample_vn_set(&tri, 1, 0.5, 7, 1000).unwrap();
        let mut idx = set.samples[0].indices;
        idx.sort();
        assert_eq!(idx, [0, 1, 2]);
    }

    #[test]
    fn collinear_cloud_exhausts() {
        let pts = vec![p(0., 0., 0.), p(1., 0., 0.), p(2., 0., 0.)];
        match sample_vn_set(&pts, 1, 0.1, 1, 1000) {
            Err(Error::SamplingExhausted {
                attempts, accepted, ..
            }) => {
                assert_eq!(attempts, 1000);
                assert_eq!(accepted, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn virtual_normal_orientation() {
        let pts = vec![p(0., 0., 0.), p(1., 0., 0.), p(0., 1., 0.), p(1., 1., 1.)];
        let n = virtual_normal(&pts, &TriangleSample { indices: [0, 1, 2] }).unwrap();
        assert_eq!(n.direction, Point3::z());
        let n = virtual_normal(&pts, &TriangleSample { indices: [0, 2, 1] }).unwrap();
        assert_eq!(n.direction, -Point3::z());
        let n = virtual_normal(&pts, &TriangleSample { indices: [0, 1, 3] }).unwrap();
        let expected = p(0.0, -1.0, 1.0) / 2f64.sqrt();
        assert!((n.direction - expected).norm() < 1e-15);
        let line = vec![p(0., 0., 0.), p(1., 0., 0.), p(2., 0., 0.)];
        assert!(virtual_normal(&line, &TriangleSample { indices: [0, 1, 2] }).is_err());
    }

    #[test]
    fn loss_examples() {
        let grid: Vec<Point3> = (0..36)
            .map(|i| p((i % 6) as f64 * 0.2, (i / 6) as f64 * 0.2, 0.0))
            .collect();
        let clean = PointCloud::new("plane", grid.clone()).unwrap();
        let set = sample_cloud_vn_set(&clean, 20, 0.2, 3).unwrap();
        assert_eq!(vn_loss_value(&clean, &clean, &set).unwrap(), 0.0);

        // 180° about x: (x, y, z) -> (x, -y, -z) flips every triangle normal
        let flipped: Vec<Point3> = grid.iter().map(|q| p(q.x, -q.y, -q.z)).collect();
        let flipped = PointCloud::new("flip", flipped).unwrap();
        let loss = vn_loss_value(&flipped, &clean, &set).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);

        // orthogonal normals for a single triangle
        let tri = vec![p(0., 0., 0.), p(1., 0., 0.), p(0., 1., 0.)];
        let standing = vec![p(0., 0., 0.), p(1., 0., 0.), p(0., 0., 1.)];
        let set = VnSampleSet {
            samples: vec![TriangleSample { indices: [0, 1, 2] }],
            edge_threshold: 0.1,
            rng_seed: 0,
        };
        let a = PointCloud::new("a", standing).unwrap();
        let b = PointCloud::new("b", tri).unwrap();
        assert!((vn_loss_value(&a, &b, &set).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn loss_rejects_misaligned_inputs() {
        let pts = vec![p(0., 0., 0.), p(1., 0., 0.), p(0., 1., 0.)];
        let set = VnSampleSet {
            samples: vec![TriangleSample { indices: [0, 1, 3] }],
            edge_threshold: 0.1,
            rng_seed: 0,
        };
        let pred = DiffArray::from_points(&pts, true);
        assert!(matches!(
            vn_loss(&pred, &pts, &set),
            Err(Error::InvalidArgument(_))
        ));
        assert!(vn_loss(&pred, &pts[..2], &set).is_err());
    }

    #[test]
    fn degenerate_prediction_stays_finite() {
        let clean = vec![p(0., 0., 0.), p(1., 0., 0.), p(0., 1., 0.)];
        let pred = DiffArray::from_points(&[Point3::zeros(); 3], true);
        let set = VnSampleSet {
            samples: vec![TriangleSample { indices: [0, 1, 2] }],
            edge_threshold: 0.1,
            rng_seed: 0,
        };
        let loss = vn_loss(&pred, &clean, &set).unwrap();
        assert_eq!(loss.item(), 1.0);
        loss.backward().unwrap();
        assert!(pred.grad().unwrap().iter().all(|g| g.is_finite()));
    }
}
