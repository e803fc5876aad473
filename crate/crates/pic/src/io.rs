//! Point and label file formats.
//!
//! * `.xyz`: text, one `x y z` triple per line, whitespace separated. Written
//!   with shortest round-trip float formatting, so reloading is exact.
//! * `.f32`: raw little-endian `f32` triples, no header.
//! * `.labels`: text, one non-negative integer per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pic_core::{Point, PointCloud};

pub fn read_points(path: &Path) -> Result<PointCloud> {
    let points = match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => parse_f32(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)?,
        _ => parse_xyz(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?,
    };
    PointCloud::new(points).with_context(|| format!("invalid cloud in {}", path.display()))
}

pub fn parse_xyz(text: &str) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if fields.len() < 3 {
            bail!("line {}: expected 3 coordinates, found {}", n + 1, fields.len());
        }
        let mut p = [0.0; 3];
        for (k, f) in fields[..3].iter().enumerate() {
            p[k] = f.parse().with_context(|| format!("line {}: bad number {f:?}", n + 1))?;
        }
        points.push(p);
    }
    Ok(points)
}

pub fn parse_f32(bytes: &[u8]) -> Result<Vec<Point>> {
    if bytes.len() % 12 != 0 {
        bail!("binary cloud length {} is not a multiple of 12 bytes", bytes.len());
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|c| core::array::from_fn(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()) as f64))
        .collect())
}

pub fn format_xyz(points: &[Point]) -> String {
    let mut s = String::with_capacity(points.len() * 64);
    for p in points {
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    s
}

pub fn write_points(path: &Path, points: &[Point]) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => points.iter().flat_map(|p| p.iter().flat_map(|&c| (c as f32).to_le_bytes())).collect(),
        _ => format_xyz(points).into_bytes(),
    };
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(n, l)| l.parse().with_context(|| format!("{} line {}: bad label {l:?}", path.display(), n + 1)))
        .collect()
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        writeln!(s, "{l}").unwrap();
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_round_trip_is_exact() {
        let pts = vec![[0.1, -1.0 / 3.0, 1e-17], [f64::MAX, -0.0, 2.5]];
        assert_eq!(parse_xyz(&format_xyz(&pts)).unwrap(), pts);
    }

    #[test]
    fn xyz_tolerates_comments_and_extra_columns() {
        let pts = parse_xyz("# header\n1 2 3 9\n\n4,5,6\n").unwrap();
        assert_eq!(pts, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert!(parse_xyz("1 2\n").is_err());
        assert!(parse_xyz("1 2 x\n").is_err());
    }

    #[test]
    fn f32_layout() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend(v.to_le_bytes());
        }
        assert_eq!(parse_f32(&bytes).unwrap(), vec![[1.0, 2.0, 3.0]]);
        assert!(parse_f32(&bytes[..11]).is_err());
    }
}
