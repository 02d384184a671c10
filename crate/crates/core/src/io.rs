//! XYZ and ASCII PLY point cloud files.
//!
//! XYZ holds one point per line with 3 (`x y z`) or 6 (`x y z nx ny nz`)
//! whitespace-separated fields. PLY support covers the ASCII encoding with a
//! `vertex` element carrying `x y z` and optionally `nx ny nz`. The format is
//! chosen by file extension. Values are written with 9 significant digits.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("xyz") => Ok(CloudFormat::Xyz),
            Some("ply") => Ok(CloudFormat::Ply),
            _ => Err(Error::invalid(format!(
                "{}: unsupported extension (expected .xyz or .ply)",
                path.display()
            ))),
        }
    }
}

/// Formats `v` with 9 significant digits, `%g` style.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    // log10 can land one off near powers of ten; re-derive from the rendering.
    let sci = format!("{v:.8e}");
    let (mantissa, e) = sci.split_once('e').expect("scientific format");
    let e: i32 = e.parse().unwrap_or(exp);
    if (-5..9).contains(&e) {
        let decimals = (8 - e).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{e}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn cloud_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cloud")
        .to_string()
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_field(path: &Path, line: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid number {tok:?}")))?;
    if !v.is_finite() {
        return Err(Error::Validation(format!(
            "{}:{line}: non-finite coordinate {tok:?}",
            path.display()
        )));
    }
    Ok(v)
}

/// Stored normals are renormalized; a zero-length normal is rejected.
fn unit_normal(path: &Path, line: usize, n: Point3) -> Result<Point3> {
    let len = n.norm();
    if len == 0.0 {
        return Err(Error::Validation(format!(
            "{}:{line}: zero-length normal",
            path.display()
        )));
    }
    Ok(n / len)
}

fn assemble(
    path: &Path,
    positions: Vec<Point3>,
    normals: Option<Vec<Point3>>,
) -> Result<PointCloud> {
    let cloud = PointCloud::new(cloud_name(path), positions).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })?;
    match normals {
        Some(n) => cloud.set_normals(n),
        None => Ok(cloud),
    }
}

fn read_xyz(path: &Path, text: &str) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut columns = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 6 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 3 or 6 fields, found {}", fields.len()),
            ));
        }
        match columns {
            None => columns = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!(
                        "expected {c} fields like the preceding lines, found {}",
                        fields.len()
                    ),
                ))
            }
            _ => {}
        }
        let mut v = [0.0; 6];
        for (slot, tok) in v.iter_mut().zip(&fields) {
            *slot = parse_field(path, line_no, tok)?;
        }
        positions.push(Point3::new(v[0], v[1], v[2]));
        if fields.len() == 6 {
            normals.push(unit_normal(path, line_no, Point3::new(v[3], v[4], v[5]))?);
        }
    }
    if positions.is_empty() {
        return Err(parse_err(path, 1, "no points"));
    }
    let normals = (columns == Some(6)).then_some(normals);
    assemble(path, positions, normals)
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

fn read_ply(path: &Path, text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing 'ply' magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut header_done = false;
    for (no, line) in lines.by_ref() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => saw_format = true,
            ["format", other, ..] => {
                return Err(parse_err(
                    path,
                    no,
                    format!("unsupported PLY format '{other}'"),
                ))
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(path, no, format!("bad element count {count:?}")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, no, "property before element"))?;
                if el.name == "vertex" {
                    return Err(parse_err(
                        path,
                        no,
                        "list properties on vertices are unsupported",
                    ));
                }
                el.properties.push(tokens.last().unwrap_or(&"").to_string());
            }
            ["property", _ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, no, "property before element"))?;
                el.properties.push(name.to_string());
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => {
                return Err(parse_err(
                    path,
                    no,
                    format!("unrecognized header line {line:?}"),
                ))
            }
        }
    }
    if !header_done {
        return Err(parse_err(path, 1, "header has no end_header"));
    }
    if !saw_format {
        return Err(parse_err(path, 1, "header has no format line"));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(path, 1, "no vertex element"))?;
    // Lines of elements declared before the vertices are skipped.
    let skip: usize = elements[..vertex_pos].iter().map(|e| e.count).sum();
    let vertex = &elements[vertex_pos];
    let find = |name: &str| vertex.properties.iter().position(|p| p == name);
    let (x, y, z) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(path, 1, "vertex element lacks x/y/z")),
    };
    let normal_cols = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };

    let mut body = lines.filter(|(_, l)| !l.is_empty()).skip(skip);
    let mut positions = Vec::with_capacity(vertex.count);
    let mut normals = Vec::new();
    for _ in 0..vertex.count {
        let (no, line) = body
            .next()
            .ok_or_else(|| parse_err(path, text.lines().count(), "fewer vertices than declared"))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != vertex.properties.len() {
            return Err(parse_err(
                path,
                no,
                format!(
                    "expected {} values, found {}",
                    vertex.properties.len(),
                    tokens.len()
                ),
            ));
        }
        let get = |c: usize| parse_field(path, no, tokens[c]);
        positions.push(Point3::new(get(x)?, get(y)?, get(z)?));
        if let Some((a, b, c)) = normal_cols {
            normals.push(unit_normal(
                path,
                no,
                Point3::new(get(a)?, get(b)?, get(c)?),
            )?);
        }
    }
    if positions.is_empty() {
        return Err(parse_err(path, 1, "no vertices"));
    }
    assemble(path, positions, normal_cols.map(|_| normals))
}

/// Reads an `.xyz` or ASCII `.ply` file.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let format = CloudFormat::from_path(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Xyz => read_xyz(path, &text),
        CloudFormat::Ply => read_ply(path, &text),
    }
}

fn write_row(out: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    let row: Vec<String> = values.iter().map(|&v| format_sig9(v)).collect();
    writeln!(out, "{}", row.join(" "))
}

/// Writes a cloud (with normals when present) in the format implied by the extension.
pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = CloudFormat::from_path(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let wrap = |e| Error::io(PathBuf::from(path), e);
    if format == CloudFormat::Ply {
        let mut header = format!(
            "ply\nformat ascii 1.0\ncomment {}\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
            cloud.name(),
            cloud.len()
        );
        if cloud.normals().is_some() {
            header.push_str("property double nx\nproperty double ny\nproperty double nz\n");
        }
        header.push_str("end_header\n");
        out.write_all(header.as_bytes()).map_err(wrap)?;
    }
    for (i, p) in cloud.positions().iter().enumerate() {
        match cloud.normals() {
            Some(n) => write_row(&mut out, &[p.x, p.y, p.z, n[i].x, n[i].y, n[i].z]),
            None => write_row(&mut out, &[p.x, p.y, p.z]),
        }
        .map_err(wrap)?;
    }
    out.flush().map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_xyz() {
        let dir = tempfile::tempdir().unwrap();
        let c = read_cloud(write_tmp(&dir, "a.xyz", "0 0 0\n1 0 0\n")).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.normals().is_none());
        assert_eq!(c.positions()[1], Point3::x());
        assert_eq!(c.name(), "a");
    }

    #[test]
    fn xyz_with_normals() {
        let dir = tempfile::tempdir().unwrap();
        let c = read_cloud(write_tmp(&dir, "n.xyz", "0 0 0 0 0 1\n1 0 0 0 1 0\n")).unwrap();
        assert_eq!(c.normals().unwrap(), &[Point3::z(), Point3::y()]);
    }

    #[test]
    fn minimal_ply() {
        let dir = tempfile::tempdir().unwrap();
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n";
        let c = read_cloud(write_tmp(&dir, "m.ply", text)).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.positions()[2], Point3::y());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_cloud(write_tmp(&dir, "b.xyz", "0 0 0\n1 zero 0\n")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = read_cloud(write_tmp(&dir, "c.xyz", "0 0 0\n1 0\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn nan_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_cloud(write_tmp(&dir, "n.xyz", "0 0 0\nNaN 0 0\n")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = read_cloud(write_tmp(&dir, "i.xyz", "inf 0 0\n")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn binary_ply_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n";
        let err = read_cloud(write_tmp(&dir, "b.ply", text)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn unknown_extension() {
        assert!(matches!(
            read_cloud("cloud.obj"),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn sig9_format() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(-0.5), "-0.5");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456.789012), "123456.789");
        assert_eq!(format_sig9(1.5e-7), "1.5e-7");
        assert_eq!(format_sig9(9.999999999), "10");
        assert_eq!(format_sig9(2.0e12), "2e12");
    }
}
