//! Procedural part-labelled shapes for tests and demos.
//!
//! Every category is built from a few surface primitives with randomized
//! proportions, and each primitive group carries a part label. The shapes
//! are deliberately not symmetric under the 180° flip about x, so the
//! registration target differs from the clean cloud.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use anyhow::Result;
use pic_core::rng::{self, Rng};
use pic_core::{Point, PointCloud};
use rand::Rng as _;

use crate::{dataset, io};

pub const CATEGORIES: [&str; 5] = ["airplane", "chair", "lamp", "mug", "table"];

#[derive(Debug, Clone, Copy)]
enum Prim {
    /// Surface of an axis-aligned box: center, half extents.
    Box([f64; 3], [f64; 3]),
    /// Open tube along an axis (0 = x, 1 = y, 2 = z): center, radius, half length.
    Tube([f64; 3], f64, f64, usize),
    /// Disk normal to y.
    Disk([f64; 3], f64),
    /// Lateral surface of a y-axis frustum: base center, bottom radius, top radius, height.
    Frustum([f64; 3], f64, f64, f64),
    /// Half torus in the xy plane on the +x side: center, major radius, minor radius.
    Handle([f64; 3], f64, f64),
}

impl Prim {
    fn area(&self) -> f64 {
        match *self {
            Prim::Box(_, h) => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Prim::Tube(_, r, l, _) => TAU * r * 2.0 * l,
            Prim::Disk(_, r) => PI * r * r,
            Prim::Frustum(_, r0, r1, h) => PI * (r0 + r1) * ((r0 - r1).powi(2) + h * h).sqrt(),
            Prim::Handle(_, big, small) => PI * big * TAU * small,
        }
    }

    fn sample(&self, r: &mut Rng) -> Point {
        let u = |r: &mut Rng| r.random_range(-1.0..1.0);
        match *self {
            Prim::Box(c, h) => {
                let faces = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let pick = r.random_range(0.0..faces.iter().sum::<f64>());
                let axis = if pick < faces[0] { 0 } else if pick < faces[0] + faces[1] { 1 } else { 2 };
                let mut p = [u(r) * h[0], u(r) * h[1], u(r) * h[2]];
                p[axis] = if r.random_bool(0.5) { h[axis] } else { -h[axis] };
                [c[0] + p[0], c[1] + p[1], c[2] + p[2]]
            }
            Prim::Tube(c, rad, l, axis) => {
                let t = r.random_range(0.0..TAU);
                let (a, b) = (rad * t.cos(), rad * t.sin());
                let s = u(r) * l;
                let local = match axis {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                };
                [c[0] + local[0], c[1] + local[1], c[2] + local[2]]
            }
            Prim::Disk(c, rad) => {
                let (t, s) = (r.random_range(0.0..TAU), rad * r.random_range(0.0f64..1.0).sqrt());
                [c[0] + s * t.cos(), c[1], c[2] + s * t.sin()]
            }
            Prim::Frustum(c, r0, r1, h) => {
                // area-uniform along the slant
                let v = r.random_range(0.0f64..1.0);
                let f = if (r1 - r0).abs() < 1e-9 { v } else { ((r0 * r0 + v * (r1 * r1 - r0 * r0)).sqrt() - r0) / (r1 - r0) };
                let rad = r0 + f * (r1 - r0);
                let t = r.random_range(0.0..TAU);
                [c[0] + rad * t.cos(), c[1] + f * h, c[2] + rad * t.sin()]
            }
            Prim::Handle(c, big, small) => {
                let (a, b) = (r.random_range(-PI / 2.0..PI / 2.0), r.random_range(0.0..TAU));
                let ring = big + small * b.cos();
                [c[0] + ring * a.cos(), c[1] + ring * a.sin(), c[2] + small * b.sin()]
            }
        }
    }
}

fn parts(category: &str, r: &mut Rng) -> Vec<Vec<Prim>> {
    let mut g = |lo: f64, hi: f64| r.random_range(lo..hi);
    match category {
        "table" => {
            let (w, d, h) = (g(0.6, 1.0), g(0.4, 0.8), g(0.5, 0.9));
            let t = g(0.03, 0.08);
            let leg = g(0.03, 0.06);
            let inset = g(0.05, 0.15);
            let legs = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
                .map(|(sx, sz)| Prim::Box([sx * (w - inset), 0.0, sz * (d - inset)], [leg, h / 2.0, leg]))
                .to_vec();
            vec![vec![Prim::Box([0.0, h / 2.0 + t, 0.0], [w, t, d])], legs]
        }
        "chair" => {
            let (w, d, h) = (g(0.35, 0.5), g(0.35, 0.5), g(0.35, 0.5));
            let back = g(0.5, 0.9);
            let leg = g(0.025, 0.05);
            let legs = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
                .map(|(sx, sz)| Prim::Box([sx * (w - leg), -h / 2.0, sz * (d - leg)], [leg, h / 2.0, leg]))
                .to_vec();
            vec![
                vec![Prim::Box([0.0, 0.0, 0.0], [w, 0.04, d])],
                vec![Prim::Box([0.0, back / 2.0, -d], [w, back / 2.0, 0.04])],
                legs,
            ]
        }
        "lamp" => {
            let base = g(0.25, 0.4);
            let pole = g(0.8, 1.3);
            let reach = g(0.1, 0.4);
            let (r0, r1, sh) = (g(0.25, 0.4), g(0.08, 0.15), g(0.2, 0.35));
            vec![
                vec![Prim::Disk([0.0, 0.0, 0.0], base), Prim::Tube([0.0, 0.03, 0.0], base, 0.03, 1)],
                vec![Prim::Tube([0.0, pole / 2.0, 0.0], 0.03, pole / 2.0, 1), Prim::Tube([0.0, pole, reach / 2.0], 0.03, reach / 2.0, 2)],
                vec![Prim::Frustum([0.0, pole - sh * 0.8, reach], r0, r1, sh)],
            ]
        }
        "mug" => {
            let (rad, h) = (g(0.3, 0.45), g(0.6, 1.0));
            let big = g(0.15, 0.25);
            vec![
                vec![Prim::Tube([0.0, h / 2.0, 0.0], rad, h / 2.0, 1)],
                vec![Prim::Disk([0.0, 0.0, 0.0], rad)],
                vec![Prim::Handle([rad, h * g(0.5, 0.65), 0.0], big, 0.04)],
            ]
        }
        _ => {
            // airplane, nose towards +z
            let (len, rad) = (g(0.9, 1.2), g(0.08, 0.14));
            let (span, chord) = (g(0.8, 1.2), g(0.15, 0.3));
            let (fin, fin_chord) = (g(0.2, 0.35), g(0.12, 0.2));
            let wing_z = g(-0.1, 0.2);
            vec![
                vec![Prim::Tube([0.0, 0.0, 0.0], rad, len, 2)],
                vec![Prim::Box([0.0, -rad * 0.5, wing_z], [span, 0.02, chord])],
                vec![
                    Prim::Box([0.0, rad + fin / 2.0, -len + fin_chord], [0.02, fin / 2.0, fin_chord]),
                    Prim::Box([0.0, rad * 0.5, -len + fin_chord], [span * 0.3, 0.02, fin_chord * 0.8]),
                ],
            ]
        }
    }
}

/// Samples `n` surface points of a random instance of `category`, with a
/// per-point part label counted within the category.
pub fn shape(category: &str, n: usize, seed: u64) -> (Vec<Point>, Vec<u32>) {
    let mut r = rng::seeded(seed);
    let groups = parts(category, &mut r);
    let prims: Vec<(Prim, u32)> =
        groups.iter().enumerate().flat_map(|(l, g)| g.iter().map(move |p| (*p, l as u32))).collect();
    let total: f64 = prims.iter().map(|(p, _)| p.area()).sum();
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = r.random_range(0.0..total);
        let mut chosen = prims[prims.len() - 1];
        for pr in &prims {
            if pick < pr.0.area() {
                chosen = *pr;
                break;
            }
            pick -= pr.0.area();
        }
        points.push(chosen.0.sample(&mut r));
        labels.push(chosen.1);
    }
    (points, labels)
}

/// A ready-to-use clean cloud: `2 * n` surface samples reduced to `n` by
/// FPS and normalized, with per-point part labels.
pub fn clean_cloud(category: &str, n: usize, seed: u64) -> (PointCloud, Vec<u32>) {
    let (pts, labels) = shape(category, 2 * n, seed);
    let pc = PointCloud::new(pts).expect("finite samples");
    let (pc, labels) = dataset::prepare(&pc, Some(&labels), n).expect("enough points");
    (pc, labels.expect("labels kept"))
}

/// Writes `per_class` shapes of every category as `<out>/<class>/<class>_NNN.xyz`
/// with a matching `.labels` file.
pub fn write_corpus(out: &Path, per_class: usize, points: usize, seed: u64) -> Result<usize> {
    let mut written = 0;
    for (c, cat) in CATEGORIES.iter().enumerate() {
        let dir = out.join(cat);
        fs::create_dir_all(&dir)?;
        for k in 0..per_class {
            let (pts, labels) = shape(cat, points, rng::derive(rng::derive(seed, c as u64), k as u64));
            io::write_points(&dir.join(format!("{cat}_{k:03}.xyz")), &pts)?;
            io::write_labels(&dir.join(format!("{cat}_{k:03}.labels")), &labels)?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pic_core::geometry::{self, ChamferNorm};
    use pic_core::taskgen::FLIP;

    #[test]
    fn shapes_are_labelled_and_flip_asymmetric() {
        for (i, cat) in CATEGORIES.iter().enumerate() {
            let (pts, labels) = shape(cat, 1024, i as u64);
            assert_eq!(pts.len(), 1024);
            let parts = labels.iter().copied().max().unwrap() + 1;
            assert!((2..=6).contains(&parts), "{cat}: {parts} parts");
            assert!((0..parts).all(|l| labels.contains(&l)));
            let pc = geometry::normalize(&PointCloud::new(pts).unwrap()).unwrap();
            let flipped = geometry::transform(&pc, &FLIP);
            let cd = geometry::chamfer(pc.points(), flipped.points(), ChamferNorm::L2).unwrap();
            assert!(cd > 0.01, "{cat} is nearly flip-symmetric: {cd}");
        }
    }

    #[test]
    fn shapes_are_seeded() {
        assert_eq!(shape("mug", 64, 3), shape("mug", 64, 3));
        assert_ne!(shape("mug", 64, 3).0, shape("mug", 64, 4).0);
    }
}
