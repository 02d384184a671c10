//! Local patches: a seed point and its nearest neighbors, mapped into the unit ball.

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::knn::KdTree;

/// A seed point plus its `k - 1` nearest neighbors.
///
/// Normalized coordinates are `(p - centroid_offset) / scale`, where the offset
/// is the seed position and the scale is the largest seed-to-member distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub seed_index: usize,
    /// Seed first, then neighbors by ascending distance.
    pub member_indices: Vec<usize>,
    pub centroid_offset: Point3,
    pub scale: f64,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }

    pub fn normalize_point(&self, p: &Point3) -> Point3 {
        (p - self.centroid_offset) / self.scale
    }

    pub fn denormalize_point(&self, p: &Point3) -> Point3 {
        p * self.scale + self.centroid_offset
    }

    /// Normalized positions of the members of `positions` (a full cloud).
    pub fn gather_normalized(&self, positions: &[Point3]) -> Vec<Point3> {
        self.member_indices
            .iter()
            .map(|&i| self.normalize_point(&positions[i]))
            .collect()
    }

    /// Values of a per-point attribute for the members, in member order.
    pub fn gather<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.member_indices.iter().map(|&i| values[i]).collect()
    }
}

/// Reusable patch extraction over one cloud.
pub struct PatchExtractor<'a> {
    positions: &'a [Point3],
    tree: KdTree<'a>,
}

impl<'a> PatchExtractor<'a> {
    pub fn new(positions: &'a [Point3]) -> Self {
        Self {
            positions,
            tree: KdTree::build(positions),
        }
    }

    pub fn extract(&self, seed_index: usize, k: usize) -> Result<Patch> {
        let n = self.positions.len();
        if k == 0 {
            return Err(Error::invalid("patch size must be at least 1"));
        }
        if n < k {
            return Err(Error::invalid(format!(
                "patch of {k} points requested from a cloud of {n}"
            )));
        }
        if seed_index >= n {
            return Err(Error::invalid(format!(
                "seed {seed_index} out of range for {n} points"
            )));
        }
        let seed = self.positions[seed_index];
        let mut member_indices = Vec::with_capacity(k);
        member_indices.push(seed_index);
        let mut max_d2 = 0.0_f64;
        for (j, d2) in self.tree.nearest(&seed, k - 1, Some(seed_index)) {
            member_indices.push(j);
            max_d2 = max_d2.max(d2);
        }
        let radius = max_d2.sqrt();
        Ok(Patch {
            seed_index,
            member_indices,
            centroid_offset: seed,
            scale: if radius > 0.0 { radius } else { 1.0 },
        })
    }

    /// Seeds chosen by farthest-point sampling over not-yet-covered points
    /// until every point belongs to at least one patch.
    pub fn cover(&self, k: usize, max_seeds: usize) -> Result<Vec<Patch>> {
        let n = self.positions.len();
        let mut covered = vec![false; n];
        let mut uncovered = n;
        let mut min_d2 = vec![f64::INFINITY; n];
        let mut patches = Vec::new();
        while uncovered > 0 {
            if patches.len() >= max_seeds {
                return Err(Error::Coverage {
                    uncovered,
                    seeds: patches.len(),
                });
            }
            let seed = (0..n)
                .filter(|&i| !covered[i])
                .fold(None::<usize>, |best, i| match best {
                    Some(b) if min_d2[b] >= min_d2[i] => Some(b),
                    _ => Some(i),
                })
                .expect("an uncovered point exists");
            let patch = self.extract(seed, k)?;
            for &m in &patch.member_indices {
                if !covered[m] {
                    covered[m] = true;
                    uncovered -= 1;
                }
            }
            let s = self.positions[seed];
            for (d, p) in min_d2.iter_mut().zip(self.positions) {
                *d = d.min((p - s).norm_squared());
            }
            patches.push(patch);
        }
        Ok(patches)
    }
}

/// One-off patch extraction around `seed_index`.
pub fn extract_patch(cloud: &PointCloud, seed_index: usize, k: usize) -> Result<Patch> {
    PatchExtractor::new(cloud.positions()).extract(seed_index, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new("t", pts.iter().map(|p| Point3::from(*p)).collect()).unwrap()
    }

    #[test]
    fn whole_cloud_patch_is_permutation() {
        let c = cloud(&[
            [0., 0., 0.],
            [1., 0., 0.],
            [0., 2., 0.],
            [0., 0., 3.],
            [1., 1., 1.],
        ]);
        let p = extract_patch(&c, 2, 5).unwrap();
        assert_eq!(p.member_indices[0], 2);
        let mut sorted = p.member_indices.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn scale_is_max_member_distance() {
        let c = cloud(&[
            [0., 0., 0.],
            [1., 0., 0.],
            [0., -2., 0.],
            [0., 0., 1.5],
            [9., 9., 9.],
        ]);
        let p = extract_patch(&c, 0, 4).unwrap();
        assert_eq!(p.scale, 2.0);
        assert_eq!(p.centroid_offset, Point3::zeros());
        let normalized = p.gather_normalized(c.positions());
        let max_r = normalized.iter().map(|q| q.norm()).fold(0.0, f64::max);
        assert!((max_r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_point_patch() {
        let c = cloud(&[[3., 1., 0.], [1., 0., 0.]]);
        let p = extract_patch(&c, 0, 1).unwrap();
        assert_eq!(p.member_indices, vec![0]);
        assert_eq!(p.scale, 1.0);
    }

    #[test]
    fn coincident_members_keep_unit_scale() {
        let c = cloud(&[[1., 1., 1.]; 4]);
        let p = extract_patch(&c, 0, 3).unwrap();
        assert_eq!(p.scale, 1.0);
    }

    #[test]
    fn patch_larger_than_cloud_is_rejected() {
        let c = cloud(&[[0., 0., 0.], [1., 0., 0.]]);
        assert!(matches!(
            extract_patch(&c, 0, 3),
            Err(Error::InvalidArgument(_))
        ));
        assert!(extract_patch(&c, 5, 1).is_err());
    }

    #[test]
    fn cover_reaches_every_point() {
        let pts: Vec<Point3> = (0..200)
            .map(|i| Point3::new((i % 20) as f64, (i / 20) as f64, 0.0))
            .collect();
        let ex = PatchExtractor::new(&pts);
        let patches = ex.cover(16, 1000).unwrap();
        let mut hit = vec![false; pts.len()];
        for p in &patches {
            for &m in &p.member_indices {
                hit[m] = true;
            }
        }
        assert!(hit.iter().all(|&h| h));
        assert!(matches!(ex.cover(16, 2), Err(Error::Coverage { .. })));
    }
}
