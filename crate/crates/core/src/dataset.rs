//! Synthetic paired datasets: analytic shapes with exact normals, Gaussian
//! corruption that keeps index alignment, and JSON manifests.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::io::{read_cloud, write_cloud};

pub const MIN_POINTS: usize = 100;
pub const MAX_NOISE_SCALE: f64 = 0.05;
/// Noise levels of the standard benchmark, as fractions of the bounding-box diagonal.
pub const DEFAULT_SCALES: [f64; 4] = [0.0025, 0.005, 0.01, 0.015];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Sphere,
    Torus,
    Cylinder,
    Cube,
    PlaneWithRidge,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
        ShapeKind::Cube,
        ShapeKind::PlaneWithRidge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cube => "cube",
            ShapeKind::PlaneWithRidge => "plane-with-ridge",
        }
    }

    /// Sharp-edged shapes form the CAD group; smooth ones the non-CAD group.
    pub fn is_cad(&self) -> bool {
        matches!(
            self,
            ShapeKind::Cylinder | ShapeKind::Cube | ShapeKind::PlaneWithRidge
        )
    }

    /// Parameter names, in the order expected by [`ShapeSpec::params`].
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            ShapeKind::Sphere => &["radius"],
            ShapeKind::Torus => &["major_radius", "minor_radius"],
            ShapeKind::Cylinder => &["radius", "height"],
            ShapeKind::Cube => &["edge"],
            ShapeKind::PlaneWithRidge => &["size", "ridge_height", "ridge_half_width"],
        }
    }

    pub fn default_params(&self) -> Vec<f64> {
        match self {
            ShapeKind::Sphere => vec![1.0],
            ShapeKind::Torus => vec![1.0, 0.3],
            ShapeKind::Cylinder => vec![0.6, 1.6],
            ShapeKind::Cube => vec![2.0],
            ShapeKind::PlaneWithRidge => vec![2.0, 0.5, 0.5],
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = ShapeKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::invalid(format!(
                    "unknown shape kind {s:?}; expected one of {}",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub name: String,
    pub kind: ShapeKind,
    pub n_points: usize,
    pub rng_seed: u64,
    pub params: Vec<f64>,
}

impl ShapeSpec {
    pub fn new(
        name: impl Into<String>,
        kind: ShapeKind,
        n_points: usize,
        rng_seed: u64,
        params: Vec<f64>,
    ) -> Self {
        Self {
            name: name.into(),
            kind,
            n_points,
            rng_seed,
            params,
        }
    }

    pub fn with_defaults(kind: ShapeKind, n_points: usize, rng_seed: u64) -> Self {
        Self::new(
            kind.as_str(),
            kind,
            n_points,
            rng_seed,
            kind.default_params(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < MIN_POINTS {
            return Err(Error::invalid(format!(
                "{}: {} points requested, at least {MIN_POINTS} required",
                self.name, self.n_points
            )));
        }
        let names = self.kind.param_names();
        if self.params.len() != names.len() {
            return Err(Error::invalid(format!(
                "{}: {} expects parameters ({}), got {:?}",
                self.name,
                self.kind,
                names.join(", "),
                self.params
            )));
        }
        if let Some(p) = self.params.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::invalid(format!(
                "{}: parameter {p} must be positive",
                self.name
            )));
        }
        if self.kind == ShapeKind::Torus && self.params[1] >= self.params[0] {
            return Err(Error::invalid(format!(
                "{}: torus minor radius must be below the major radius",
                self.name
            )));
        }
        if self.kind == ShapeKind::PlaneWithRidge && 2.0 * self.params[2] >= self.params[0] {
            return Err(Error::invalid(format!(
                "{}: ridge must be narrower than the plane",
                self.name
            )));
        }
        Ok(())
    }
}

/// Chooses an index with probability proportional to `weights`.
fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn sample_sphere(rng: &mut ChaCha8Rng, r: f64) -> (Point3, Point3) {
    loop {
        let v = Point3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let len = v.norm();
        if len > 1e-12 {
            let n = v / len;
            return (n * r, n);
        }
    }
}

fn sample_torus(rng: &mut ChaCha8Rng, big: f64, small: f64) -> (Point3, Point3) {
    // The area element is proportional to (R + r cos θ).
    let theta = loop {
        let theta = rng.random_range(0.0..2.0 * PI);
        if rng.random_range(0.0..big + small) <= big + small * theta.cos() {
            break theta;
        }
    };
    let phi = rng.random_range(0.0..2.0 * PI);
    let ring = big + small * theta.cos();
    let p = Point3::new(ring * phi.cos(), ring * phi.sin(), small * theta.sin());
    let n = Point3::new(
        theta.cos() * phi.cos(),
        theta.cos() * phi.sin(),
        theta.sin(),
    );
    (p, n)
}

fn sample_disk(rng: &mut ChaCha8Rng, r: f64) -> (f64, f64) {
    let rad = r * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    (rad * a.cos(), rad * a.sin())
}

fn sample_cylinder(rng: &mut ChaCha8Rng, r: f64, h: f64) -> (Point3, Point3) {
    let side = 2.0 * PI * r * h;
    let cap = PI * r * r;
    match pick(rng, &[side, cap, cap]) {
        0 => {
            let a = rng.random_range(0.0..2.0 * PI);
            let z = rng.random_range(-h / 2.0..h / 2.0);
            (
                Point3::new(r * a.cos(), r * a.sin(), z),
                Point3::new(a.cos(), a.sin(), 0.0),
            )
        }
        face => {
            let (x, y) = sample_disk(rng, r);
            let s = if face == 1 { 1.0 } else { -1.0 };
            (Point3::new(x, y, s * h / 2.0), Point3::new(0.0, 0.0, s))
        }
    }
}

fn sample_cube(rng: &mut ChaCha8Rng, edge: f64) -> (Point3, Point3) {
    let half = edge / 2.0;
    let face = rng.random_range(0..6);
    let axis = face / 2;
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    let mut p = Point3::zeros();
    for c in 0..3 {
        p[c] = if c == axis {
            sign * half
        } else {
            rng.random_range(-half..half)
        };
    }
    let mut n = Point3::zeros();
    n[axis] = sign;
    (p, n)
}

/// Square height field on `[-size/2, size/2]²`: flat at `z = 0` with a roof
/// ridge `z = h (1 - |x| / w)` for `|x| < w`.
fn sample_ridge(rng: &mut ChaCha8Rng, size: f64, h: f64, w: f64) -> (Point3, Point3) {
    let half = size / 2.0;
    let slant = (w * w + h * h).sqrt();
    let flat = (size - 2.0 * w) * size / 2.0;
    let roof = slant * size;
    let y = rng.random_range(-half..half);
    match pick(rng, &[flat, flat, roof, roof]) {
        face @ (0 | 1) => {
            let x = rng.random_range(w..half);
            let x = if face == 0 { -x } else { x };
            (Point3::new(x, y, 0.0), Point3::z())
        }
        face => {
            let s = if face == 2 { -1.0 } else { 1.0 };
            let t: f64 = rng.random();
            let x = s * w * t;
            let n = Point3::new(s * h, 0.0, w) / slant;
            (Point3::new(x, y, h * (1.0 - t)), n)
        }
    }
}

/// Area-uniform random surface sample with analytic unit normals.
pub fn generate_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let p = &spec.params;
    let (positions, normals): (Vec<Point3>, Vec<Point3>) = (0..spec.n_points)
        .map(|_| match spec.kind {
            ShapeKind::Sphere => sample_sphere(&mut rng, p[0]),
            ShapeKind::Torus => sample_torus(&mut rng, p[0], p[1]),
            ShapeKind::Cylinder => sample_cylinder(&mut rng, p[0], p[1]),
            ShapeKind::Cube => sample_cube(&mut rng, p[0]),
            ShapeKind::PlaneWithRidge => sample_ridge(&mut rng, p[0], p[1], p[2]),
        })
        .unzip();
    PointCloud::with_normals(spec.name.clone(), positions, normals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub clean: PointCloud,
    pub noisy: PointCloud,
    pub noise_scale: f64,
    pub rng_seed: u64,
}

/// Adds i.i.d. Gaussian noise with per-axis standard deviation
/// `noise_scale * diagonal(clean)`. The noisy cloud has no normals.
pub fn corrupt(clean: &PointCloud, noise_scale: f64, seed: u64) -> Result<NoisySample> {
    if !(noise_scale > 0.0 && noise_scale <= MAX_NOISE_SCALE) {
        return Err(Error::invalid(format!(
            "noise scale {noise_scale} outside (0, {MAX_NOISE_SCALE}]"
        )));
    }
    let std = noise_scale * clean.bounding_box().diagonal();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = clean
        .positions()
        .iter()
        .map(|p| {
            let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            p + Point3::from(e) * std
        })
        .collect();
    Ok(NoisySample {
        clean: clean.clone(),
        noisy: PointCloud::new(clean.name(), noisy)?,
        noise_scale,
        rng_seed: seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// One noisy/clean pair. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean: String,
    pub noisy: String,
    pub scale: f64,
    pub seed: u64,
    pub kind: ShapeKind,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidManifest(format!("{}: {e}", path.display())))?;
        if entries.is_empty() {
            return Err(Error::InvalidManifest(format!(
                "{} lists no entries",
                path.display()
            )));
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries, base_dir })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.entries).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Reads both clouds of an entry; the clean one must carry normals.
    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<(PointCloud, PointCloud)> {
        let clean = read_cloud(self.resolve(&entry.clean))?;
        let noisy = read_cloud(self.resolve(&entry.noisy))?;
        if clean.normals().is_none() {
            return Err(Error::InvalidManifest(format!(
                "clean cloud {} has no normals",
                entry.clean
            )));
        }
        if clean.len() != noisy.len() {
            return Err(Error::InvalidManifest(format!(
                "{} and {} differ in point count ({} vs {})",
                entry.clean,
                entry.noisy,
                clean.len(),
                noisy.len()
            )));
        }
        Ok((clean, noisy))
    }
}

/// Noise seed for the `scale_index`-th noise level of a shape.
pub fn noise_seed(shape_seed: u64, scale_index: usize) -> u64 {
    shape_seed
        .wrapping_mul(1_000_003)
        .wrapping_add(scale_index as u64 + 1)
}

fn scale_tag(scale: f64) -> String {
    format!("{:.4}", scale * 100.0)
        .trim_end_matches('0')
        .trim_end_matches('.')
        .replace('.', "p")
}

fn write_split(
    shapes: &[ShapeSpec],
    scales: &[f64],
    split: Split,
    out_dir: &Path,
    entries: &mut Vec<ManifestEntry>,
) -> Result<()> {
    for spec in shapes {
        let clean = generate_shape(spec)?;
        let clean_name = format!("{}_clean.xyz", spec.name);
        write_cloud(&clean, out_dir.join(&clean_name))?;
        for (si, &scale) in scales.iter().enumerate() {
            let seed = noise_seed(spec.rng_seed, si);
            let sample = corrupt(&clean, scale, seed)?;
            let noisy_name = format!("{}_noise{}pct.xyz", spec.name, scale_tag(scale));
            write_cloud(&sample.noisy, out_dir.join(&noisy_name))?;
            entries.push(ManifestEntry {
                clean: clean_name.clone(),
                noisy: noisy_name,
                scale,
                seed,
                kind: spec.kind,
                split,
                name: spec.name.clone(),
            });
        }
    }
    Ok(())
}

fn check_inputs(shapes: &[ShapeSpec], scales: &[f64]) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::invalid("no shapes given"));
    }
    if scales.is_empty() {
        return Err(Error::invalid("no noise scales given"));
    }
    let mut names: Vec<&str> = shapes.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate shape name {:?}", w[0])));
    }
    for s in shapes {
        s.validate()?;
    }
    Ok(())
}

/// Writes one clean file per shape, one noisy file per (shape, scale) and
/// `manifest.json` into `out_dir`. All entries belong to the training split.
pub fn build_manifest(
    shapes: &[ShapeSpec],
    scales: &[f64],
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    build_split_manifest(shapes, scales, &[], &[], out_dir)
}

/// Like [`build_manifest`], with an additional held-out test split.
pub fn build_split_manifest(
    train: &[ShapeSpec],
    train_scales: &[f64],
    test: &[ShapeSpec],
    test_scales: &[f64],
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    check_inputs(train, train_scales)?;
    let all: Vec<ShapeSpec> = train.iter().chain(test).cloned().collect();
    check_inputs(&all, train_scales)?;
    if !test.is_empty() && test_scales.is_empty() {
        return Err(Error::invalid(
            "test shapes given without test noise scales",
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    write_split(train, train_scales, Split::Train, out_dir, &mut entries)?;
    write_split(test, test_scales, Split::Test, out_dir, &mut entries)?;
    let manifest = Manifest {
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Four sharp-edged and four smooth training shapes.
pub fn desk_train_shapes(n_points: usize, seed: u64) -> Vec<ShapeSpec> {
    use ShapeKind::*;
    let specs: [(&str, ShapeKind, &[f64]); 8] = [
        ("cube", Cube, &[2.0]),
        ("cylinder", Cylinder, &[0.6, 1.6]),
        ("ridge", PlaneWithRidge, &[2.0, 0.5, 0.5]),
        ("ridge-flat", PlaneWithRidge, &[2.0, 0.3, 0.7]),
        ("sphere", Sphere, &[1.0]),
        ("torus", Torus, &[1.0, 0.3]),
        ("torus-thin", Torus, &[1.0, 0.2]),
        ("torus-fat", Torus, &[1.0, 0.5]),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, (name, kind, params))| {
            ShapeSpec::new(
                *name,
                *kind,
                n_points,
                seed.wrapping_mul(101).wrapping_add(i as u64),
                params.to_vec(),
            )
        })
        .collect()
}

/// Held-out shapes of the same kinds with different dimensions and seeds.
pub fn desk_test_shapes(n_points: usize, seed: u64) -> Vec<ShapeSpec> {
    use ShapeKind::*;
    let specs: [(&str, ShapeKind, &[f64]); 8] = [
        ("test-cube", Cube, &[1.5]),
        ("test-cylinder", Cylinder, &[0.8, 1.2]),
        ("test-ridge", PlaneWithRidge, &[2.0, 0.4, 0.6]),
        ("test-cylinder-tall", Cylinder, &[0.4, 1.8]),
        ("test-sphere", Sphere, &[0.8]),
        ("test-torus", Torus, &[1.0, 0.35]),
        ("test-torus-thin", Torus, &[1.2, 0.25]),
        ("test-torus-fat", Torus, &[0.9, 0.4]),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, (name, kind, params))| {
            ShapeSpec::new(
                *name,
                *kind,
                n_points,
                seed.wrapping_mul(101).wrapping_add(1_000 + i as u64),
                params.to_vec(),
            )
        })
        .collect()
}
