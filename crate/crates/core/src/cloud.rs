//! Point cloud and normal types.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// A point or direction in model units.
pub type Point3 = Vector3<f64>;

/// Maximum deviation from unit length tolerated for stored normals.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Positions of sampled surface points with optional index-aligned unit normals.
///
/// A noisy cloud and its clean counterpart share index order, so point `i` of
/// one corresponds to point `i` of the other.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    name: String,
    positions: Vec<Point3>,
    normals: Option<Vec<Point3>>,
}

impl PointCloud {
    /// Builds a cloud without normals. Positions must be non-empty and finite.
    pub fn new(name: impl Into<String>, positions: Vec<Point3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Validation("point cloud has no points".into()));
        }
        if let Some(i) = positions.iter().position(|p| !is_finite(p)) {
            return Err(Error::Validation(format!(
                "non-finite coordinate at point {i}: {:?}",
                positions[i].as_slice()
            )));
        }
        Ok(Self {
            name: name.into(),
            positions,
            normals: None,
        })
    }

    pub fn with_normals(
        name: impl Into<String>,
        positions: Vec<Point3>,
        normals: Vec<Point3>,
    ) -> Result<Self> {
        Self::new(name, positions)?.set_normals(normals)
    }

    /// Attaches normals, checking count and unit length.
    pub fn set_normals(mut self, normals: Vec<Point3>) -> Result<Self> {
        if normals.len() != self.positions.len() {
            return Err(Error::Validation(format!(
                "{} normals for {} points",
                normals.len(),
                self.positions.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            if !is_finite(n) || (n.norm() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Validation(format!(
                    "normal {i} is not unit length: {:?}",
                    n.as_slice()
                )));
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    /// Same normals, new positions. The count must not change.
    pub fn with_positions(&self, positions: Vec<Point3>) -> Result<Self> {
        if positions.len() != self.positions.len() {
            return Err(Error::invalid(format!(
                "replacement has {} points, cloud has {}",
                positions.len(),
                self.positions.len()
            )));
        }
        let cloud = Self::new(self.name.clone(), positions)?;
        match &self.normals {
            Some(n) => cloud.set_normals(n.clone()),
            None => Ok(cloud),
        }
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn normals(&self) -> Option<&[Point3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::of(&self.positions).expect("cloud is non-empty")
    }
}

fn is_finite(p: &Point3) -> bool {
    p.iter().all(|c| c.is_finite())
}

/// A surface normal. `oriented` is false for raw PCA estimates, whose sign is
/// only fixed by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal {
    pub direction: Point3,
    pub oriented: bool,
}

impl Normal {
    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn from_vector(v: Point3, oriented: bool) -> Result<Self> {
        let norm = v.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::DegenerateInput(format!(
                "cannot normalize vector {:?}",
                v.as_slice()
            )));
        }
        Ok(Self {
            direction: v / norm,
            oriented,
        })
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Point3,
    pub max: Point3,
}

impl BoundingBox {
    pub fn of(points: &[Point3]) -> Option<Self> {
        let first = points.first()?;
        let (min, max) = points.iter().fold((*first, *first), |(lo, hi), p| {
            (lo.zip_map(p, f64::min), hi.zip_map(p, f64::max))
        });
        Some(Self { min, max })
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            min: self.min.zip_map(&other.min, f64::min),
            max: self.max.zip_map(&other.max, f64::max),
        }
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn center(&self) -> Point3 {
        (self.min + self.max) * 0.5
    }
}
