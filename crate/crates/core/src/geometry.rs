//! Point-set primitives: normalization, center sampling, KNN grouping,
//! Chamfer distances and rigid rotations.

use alloc::vec::Vec;
use core::cmp::Ordering;
use core::ops::Index;

#[allow(unused_imports)]
use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};

use crate::rng;
use crate::{Error, Result};

pub type Point = [f64; 3];

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// An ordered point set. Slot order is meaningful: tasks pair slot `i` of an
/// input with slot `i` of its target.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    /// Builds a cloud, rejecting empty input and non-finite coordinates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        [c[0] / n, c[1] / n, c[2] / n]
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| norm(*p)).fold(0.0, f64::max)
    }

    /// Picks the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(*self.points.get(i).ok_or(Error::IndexOutOfRange { index: i, len: self.len() })?);
        }
        Self::new(out)
    }

    pub(crate) fn from_points_unchecked(points: Vec<Point>) -> Self {
        Self { points }
    }
}

impl Index<usize> for PointCloud {
    type Output = Point;

    fn index(&self, i: usize) -> &Point {
        &self.points[i]
    }
}

/// Centers the cloud on its centroid and scales it into the unit ball.
pub fn normalize(pc: &PointCloud) -> Result<PointCloud> {
    let c = pc.centroid();
    let centered: Vec<Point> = pc.iter().map(|p| sub(*p, c)).collect();
    let scale = centered.iter().map(|p| norm(*p)).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(Error::DegenerateCloud);
    }
    Ok(PointCloud::from_points_unchecked(
        centered.into_iter().map(|p| [p[0] / scale, p[1] / scale, p[2] / scale]).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Sampling {
    /// Greedy farthest-first traversal starting at index 0.
    #[default]
    Fps,
    /// Seeded uniform draw without replacement.
    Rs,
}

/// Chooses `k` distinct center indices.
pub fn sample_centers(pc: &PointCloud, k: usize, strategy: Sampling, seed: u64) -> Result<Vec<usize>> {
    let n = pc.len();
    if k == 0 || k > n {
        return Err(Error::TooMany { requested: k, available: n });
    }
    match strategy {
        Sampling::Fps => Ok(farthest_point_sampling(pc.points(), k)),
        Sampling::Rs => {
            let mut r = rng::seeded(seed);
            Ok(rand::seq::index::sample(&mut r, n, k).into_vec())
        }
    }
}

fn farthest_point_sampling(points: &[Point], k: usize) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(k);
    let mut nearest = alloc::vec![f64::INFINITY; points.len()];
    let mut taken = alloc::vec![false; points.len()];
    let mut current = 0;
    for _ in 0..k {
        chosen.push(current);
        taken[current] = true;
        let c = points[current];
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            // duplicates of chosen points sit at distance 0 like the chosen
            // points themselves, so skip those explicitly; strict comparison
            // keeps the lowest index on ties
            if !taken[i] && nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        current = best;
    }
    chosen
}

/// Indices of the `m` nearest points to each center, ascending by distance
/// with ties broken by ascending index. The center itself is included.
pub fn knn_indices(pc: &PointCloud, centers: &[usize], m: usize) -> Result<Vec<Vec<usize>>> {
    let n = pc.len();
    if m == 0 || m > n {
        return Err(Error::TooMany { requested: m, available: n });
    }
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    centers
        .iter()
        .map(|&c| {
            if c >= n {
                return Err(Error::IndexOutOfRange { index: c, len: n });
            }
            let center = pc[c];
            order.clear();
            order.extend(pc.iter().enumerate().map(|(i, p)| (dist2(*p, center), i)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
            if m < n {
                order.select_nth_unstable_by(m - 1, cmp);
            }
            order[..m].sort_unstable_by(cmp);
            Ok(order[..m].iter().map(|&(_, i)| i).collect())
        })
        .collect()
}

/// Groups the `m` nearest neighbours of each center into a patch of
/// absolute coordinates.
pub fn knn_group(pc: &PointCloud, centers: &[usize], m: usize) -> Result<Vec<Vec<Point>>> {
    Ok(knn_indices(pc, centers, m)?
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| pc[i]).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ChamferNorm {
    L1,
    #[default]
    L2,
}

/// Symmetric Chamfer distance, reduced by `|P| + |G|`.
///
/// `L2` sums squared nearest-neighbour distances in both directions; `L1`
/// sums plain Euclidean distances.
pub fn chamfer(p: &[Point], g: &[Point], norm: ChamferNorm) -> Result<f64> {
    if p.is_empty() || g.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut to_g = alloc::vec![f64::INFINITY; p.len()];
    let mut to_p = alloc::vec![f64::INFINITY; g.len()];
    for (i, a) in p.iter().enumerate() {
        for (j, b) in g.iter().enumerate() {
            let d = dist2(*a, *b);
            if d < to_g[i] {
                to_g[i] = d;
            }
            if d < to_p[j] {
                to_p[j] = d;
            }
        }
    }
    // summing each direction separately keeps the result exactly symmetric
    let side = |d: &[f64]| -> f64 {
        match norm {
            ChamferNorm::L2 => d.iter().sum(),
            ChamferNorm::L1 => d.iter().map(|d| d.sqrt()).sum(),
        }
    };
    Ok((side(&to_g) + side(&to_p)) / (p.len() + g.len()) as f64)
}

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &Mat3, v: Point) -> Point {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// A rotation about a unit axis by an angle in `[0, π]`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rotation {
    axis: Point,
    angle: f64,
}

impl Rotation {
    /// Normalizes `axis`; rejects zero or non-finite axes and angles outside
    /// `[0, π]`.
    pub fn new(axis: Point, angle: f64) -> Result<Self> {
        let n = norm(axis);
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidArgument("rotation axis must be non-zero and finite".into()));
        }
        if !(0.0..=core::f64::consts::PI).contains(&angle) {
            return Err(Error::InvalidArgument("rotation angle outside [0, pi]".into()));
        }
        Ok(Self { axis: [axis[0] / n, axis[1] / n, axis[2] / n], angle })
    }

    pub fn identity() -> Self {
        Self { axis: [0.0, 0.0, 1.0], angle: 0.0 }
    }

    /// Uniformly random axis on the sphere, angle uniform in `[0, max_angle]`.
    pub fn random(r: &mut rng::Rng, max_angle: f64) -> Self {
        use rand::Rng as _;
        let axis = loop {
            let v: Point = [
                StandardNormal.sample(r),
                StandardNormal.sample(r),
                StandardNormal.sample(r),
            ];
            if norm(v) > 1e-12 {
                break v;
            }
        };
        let angle = r.random::<f64>() * max_angle.min(core::f64::consts::PI);
        Self::new(axis, angle).expect("axis is non-zero and angle in range")
    }

    pub fn axis(&self) -> Point {
        self.axis
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn inverse(&self) -> Self {
        Self { axis: [-self.axis[0], -self.axis[1], -self.axis[2]], angle: self.angle }
    }

    /// Rodrigues' formula.
    pub fn matrix(&self) -> Mat3 {
        let [x, y, z] = self.axis;
        let (s, c) = self.angle.sin_cos();
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }
}

pub fn transform(pc: &PointCloud, m: &Mat3) -> PointCloud {
    PointCloud::from_points_unchecked(pc.iter().map(|p| mat_vec(m, *p)).collect())
}

pub fn rotate(pc: &PointCloud, r: &Rotation) -> PointCloud {
    transform(pc, &r.matrix())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut r = rng::seeded(seed);
        cloud(&(0..n).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect::<Vec<_>>())
    }

    #[test]
    fn normalize_two_points() {
        let n = normalize(&cloud(&[[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(n.points(), &[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let once = normalize(&random_cloud(1, 50)).unwrap();
        let c = once.centroid();
        assert!(norm(c) < 1e-12);
        assert_abs_diff_eq!(once.max_norm(), 1.0, epsilon = 1e-12);
        let twice = normalize(&once).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            for k in 0..3 {
                assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn normalize_rejects_degenerate() {
        assert_eq!(normalize(&cloud(&[[5.0; 3], [5.0; 3]])), Err(Error::DegenerateCloud));
    }

    #[test]
    fn new_rejects_empty_and_nan() {
        assert_eq!(PointCloud::new(vec![]), Err(Error::EmptyCloud));
        assert_eq!(PointCloud::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]), Err(Error::NonFinite(1)));
    }

    #[test]
    fn fps_three_points() {
        let pc = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [0.4, 0.0, 0.0]]);
        assert_eq!(sample_centers(&pc, 2, Sampling::Fps, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fps_exhaustive_is_permutation() {
        let pc = random_cloud(3, 17);
        let mut idx = sample_centers(&pc, 17, Sampling::Fps, 0).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fps_with_duplicates_stays_distinct() {
        let pc = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(sample_centers(&pc, 4, Sampling::Fps, 0).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn rs_is_seeded() {
        let pc = random_cloud(4, 100);
        let a = sample_centers(&pc, 10, Sampling::Rs, 42).unwrap();
        let b = sample_centers(&pc, 10, Sampling::Rs, 42).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
    }

    #[test]
    fn sample_rejects_k_above_n() {
        let pc = random_cloud(5, 4);
        assert!(sample_centers(&pc, 5, Sampling::Fps, 0).is_err());
        assert!(sample_centers(&pc, 5, Sampling::Rs, 0).is_err());
    }

    #[test]
    fn knn_edge_cases() {
        let pc = random_cloud(6, 12);
        let centers = [0, 5, 11];
        let ones = knn_group(&pc, &centers, 1).unwrap();
        for (patch, &c) in ones.iter().zip(&centers) {
            assert_eq!(patch, &vec![pc[c]]);
        }
        let all = knn_indices(&pc, &centers, 12).unwrap();
        for patch in all {
            let mut s = patch.clone();
            s.sort_unstable();
            assert_eq!(s, (0..12).collect::<Vec<_>>());
        }
        assert!(knn_indices(&pc, &[12], 2).is_err());
    }

    #[test]
    fn knn_four_points_matches_sort() {
        let pc = cloud(&[[0.0; 3], [0.3, 0.0, 0.0], [0.0, 0.2, 0.0], [1.0, 1.0, 1.0]]);
        let got = knn_indices(&pc, &[0, 1, 2, 3], 2).unwrap();
        // exhaustive sort by (distance, index)
        for (c, patch) in got.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = (0..4).map(|i| (dist2(pc[i], pc[c]), i)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(patch, &all[..2].iter().map(|x| x.1).collect::<Vec<_>>());
        }
        assert_eq!(got[0], vec![0, 2]);
        assert_eq!(got[3], vec![3, 1]);
    }

    #[test]
    fn knn_ties_break_by_index() {
        let pc = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(knn_indices(&pc, &[0], 3).unwrap()[0], vec![0, 1, 2]);
    }

    #[test]
    fn chamfer_examples() {
        let x = random_cloud(7, 10);
        assert_eq!(chamfer(x.points(), x.points(), ChamferNorm::L2).unwrap(), 0.0);
        assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]], ChamferNorm::L2).unwrap(), 1.0);
        assert_eq!(chamfer(&[[0.0; 3]], &[[2.0, 0.0, 0.0]], ChamferNorm::L1).unwrap(), 2.0);
        assert_eq!(chamfer(&[], x.points(), ChamferNorm::L2), Err(Error::EmptyCloud));
    }

    #[test]
    fn rotation_examples() {
        let pc = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(rotate(&pc, &Rotation::identity()), pc);
        let half = Rotation::new([0.0, 0.0, 1.0], core::f64::consts::PI).unwrap();
        let r = rotate(&pc, &half);
        assert_abs_diff_eq!(r[0][0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[0][1], 0.0, epsilon = 1e-12);
        assert!(Rotation::new([0.0; 3], 0.1).is_err());
        assert!(Rotation::new([1.0, 0.0, 0.0], 4.0).is_err());
    }

    #[test]
    fn rotation_composition_matches_matrix_product() {
        let mut r = rng::seeded(9);
        let pc = random_cloud(10, 20);
        for _ in 0..10 {
            let a = Rotation::random(&mut r, core::f64::consts::PI);
            let b = Rotation::random(&mut r, core::f64::consts::PI);
            let two_step = rotate(&rotate(&pc, &a), &b);
            let composed = transform(&pc, &mat_mul(&b.matrix(), &a.matrix()));
            for (p, q) in two_step.iter().zip(composed.iter()) {
                for k in 0..3 {
                    assert_abs_diff_eq!(p[k], q[k], epsilon = 1e-12);
                }
            }
        }
    }

    fn arb_points(max: usize) -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..max)
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_nonnegative(p in arb_points(20), g in arb_points(20)) {
            for norm in [ChamferNorm::L1, ChamferNorm::L2] {
                let a = chamfer(&p, &g, norm).unwrap();
                let b = chamfer(&g, &p, norm).unwrap();
                prop_assert!(a >= 0.0);
                prop_assert_eq!(a, b);
                prop_assert_eq!(chamfer(&p, &p, norm).unwrap(), 0.0);
            }
        }

        #[test]
        fn rotation_roundtrip_preserves_distances(pts in arb_points(16), seed in any::<u64>()) {
            let pc = PointCloud::new(pts).unwrap();
            let rot = Rotation::random(&mut rng::seeded(seed), core::f64::consts::PI);
            let moved = rotate(&pc, &rot);
            let back = rotate(&moved, &rot.inverse());
            for i in 0..pc.len() {
                prop_assert!((norm(moved[i]) - norm(pc[i])).abs() < 1e-6);
                for k in 0..3 {
                    prop_assert!((back[i][k] - pc[i][k]).abs() < 1e-6);
                }
                for j in 0..pc.len() {
                    prop_assert!((dist2(moved[i], moved[j]).sqrt() - dist2(pc[i], pc[j]).sqrt()).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn knn_is_stable(seed in any::<u64>(), m in 1usize..10) {
            let pc = random_cloud(seed, 10);
            let centers = sample_centers(&pc, 3, Sampling::Fps, 0).unwrap();
            prop_assert_eq!(knn_indices(&pc, &centers, m).unwrap(), knn_indices(&pc, &centers, m).unwrap());
        }
    }
}
