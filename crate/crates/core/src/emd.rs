//! Exact earth mover's distance between equal-size point sets.
//!
//! With equal cardinalities and unit masses the optimal transport plan is a
//! permutation, found here with the Hungarian algorithm (shortest augmenting
//! paths with row/column potentials, O(n³)).

use crate::cloud::Point3;
use crate::error::{Error, Result};

/// Largest set size accepted by [`emd_assignment`].
pub const DEFAULT_MAX_EXACT: usize = 512;

/// Optimal matching from predicted points to target points.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `permutation[i]` is the target index matched to predicted point `i`.
    pub permutation: Vec<usize>,
    /// Sum of matched Euclidean distances.
    pub total_cost: f64,
}

/// Minimum-cost perfect matching for a dense square cost matrix (row-major).
/// Returns the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be {n}x{n}");
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    // 1-based potentials; column 0 is a virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    col_of
}

/// Minimum total Euclidean distance matching between `p` and `q`.
pub fn emd_assignment(p: &[Point3], q: &[Point3]) -> Result<Assignment> {
    emd_assignment_with_limit(p, q, DEFAULT_MAX_EXACT)
}

pub fn emd_assignment_with_limit(
    p: &[Point3],
    q: &[Point3],
    max_exact: usize,
) -> Result<Assignment> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "EMD needs equal-size sets, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::invalid("EMD of empty point sets"));
    }
    if p.len() > max_exact {
        return Err(Error::invalid(format!(
            "exact EMD limited to {max_exact} points, got {}; use a smaller patch size",
            p.len()
        )));
    }
    let n = p.len();
    let mut cost = Vec::with_capacity(n * n);
    for a in p {
        cost.extend(q.iter().map(|b| (a - b).norm()));
    }
    let permutation = hungarian(&cost, n);
    let total_cost = permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok(Assignment {
        permutation,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_cost_zero() {
        let p = vec![
            Point3::new(0.0, 1.0, 2.0),
            Point3::new(-1.0, 0.5, 0.0),
            Point3::x(),
        ];
        let a = emd_assignment(&p, &p).unwrap();
        assert_eq!(a.total_cost, 0.0);
        assert_eq!(a.permutation, vec![0, 1, 2]);
    }

    #[test]
    fn swapped_sets_match_crosswise() {
        let a = Point3::new(1.0, 2.0, 3.0);
        let b = Point3::new(-4.0, 0.0, 1.0);
        let m = emd_assignment(&[a, b], &[b, a]).unwrap();
        assert_eq!(m.permutation, vec![1, 0]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn in_order_matching_is_cheaper() {
        let p = [Point3::zeros(), Point3::new(2.0, 0.0, 0.0)];
        let q = [Point3::new(1.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)];
        let m = emd_assignment(&p, &q).unwrap();
        assert_eq!(m.total_cost, 2.0);
    }

    #[test]
    fn size_errors() {
        let p = [Point3::zeros()];
        assert!(matches!(
            emd_assignment(&p, &[]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(emd_assignment(&[], &[]).is_err());
        let big = vec![Point3::zeros(); 6];
        assert!(emd_assignment_with_limit(&big, &big, 5).is_err());
    }

    #[test]
    fn hungarian_small_matrix() {
        // classic 3x3 example, optimum 5 (0->1, 1->0, 2->2)
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let cols = hungarian(&cost, 3);
        let total: f64 = cols.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
    }
}
