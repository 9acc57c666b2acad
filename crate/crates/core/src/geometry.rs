//! Two-view geometry: homographies, pinhole cameras with depth, normalized
//! DLT, RANSAC and the corner-error metric.
//!
//! Pixel coordinates are continuous with the center of pixel `(col, row)` at
//! `(col, row)`; an image of width `w` spans `[-0.5, w - 0.5)` horizontally.

use nalgebra::{DMatrix, Matrix3, Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Pt2 = Point2<f64>;

const DEGENERATE_W: f64 = 1e-12;
const SINGULAR_DET: f64 = 1e-12;

/// True when `p` falls inside a `width` x `height` pixel grid.
pub fn in_bounds(p: &Pt2, width: usize, height: usize) -> bool {
    p.x >= -0.5 && p.y >= -0.5 && p.x < width as f64 - 0.5 && p.y < height as f64 - 0.5
}

// ── Homography ───────────────────────────────────────────────────────────

/// Projective map between pixel coordinates of two images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    h: Matrix3<f64>,
}

impl Homography {
    pub fn new(h: Matrix3<f64>) -> Result<Self> {
        let det = h.determinant();
        if !det.is_finite() || det.abs() <= SINGULAR_DET {
            return Err(Error::SingularHomography(det));
        }
        Ok(Self { h })
    }

    pub fn identity() -> Self {
        Self { h: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { h: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0) }
    }

    pub fn scaling(s: f64) -> Self {
        Self { h: Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0) }
    }

    /// Row-major 9 values, the serialized form used in metric files.
    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = self.h[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    /// Scales the matrix so that `h[2][2] == 1` (left unchanged if that entry vanishes).
    pub fn normalized(&self) -> Self {
        let s = self.h[(2, 2)];
        if s.abs() < 1e-15 {
            *self
        } else {
            Self { h: self.h / s }
        }
    }

    pub fn inverse(&self) -> Self {
        // non-singular by construction
        Self { h: self.h.try_inverse().expect("non-singular homography") }.normalized()
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Self {
        Self { h: self.h * other.h }
    }

    pub fn apply(&self, p: &Pt2) -> Result<Pt2> {
        apply_homography(self, p)
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        Homography::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

/// Maps `p` through `h` with perspective division.
pub fn apply_homography(h: &Homography, p: &Pt2) -> Result<Pt2> {
    let q = h.h * Vector3::new(p.x, p.y, 1.0);
    if q.z.abs() < DEGENERATE_W {
        return Err(Error::DegeneratePoint(q.z));
    }
    Ok(Pt2::new(q.x / q.z, q.y / q.z))
}

// ── Cameras and depth ────────────────────────────────────────────────────

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Format("rotation is not a proper orthonormal matrix".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }
}

/// Pinhole intrinsics together with the image size they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Format(format!("focal lengths must be positive ({fx}, {fy})")));
        }
        if !in_bounds(&Pt2::new(cx, cy), width, height) {
            return Err(Error::Format(format!("principal point ({cx}, {cy}) outside image")));
        }
        Ok(k)
    }

    /// Camera-frame point at z-depth `depth` seen at pixel `p`.
    pub fn backproject(&self, p: &Pt2, depth: f64) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx * depth, (p.y - self.cy) / self.fy * depth, depth)
    }

    pub fn project(&self, x: &Vector3<f64>) -> Pt2 {
        Pt2::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Per-pixel z-depth in meters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::Shape(format!(
                "depth map {width}x{height} with {} values and {} mask entries",
                values.len(),
                valid.len()
            )));
        }
        if values.iter().zip(&valid).any(|(&d, &v)| v && !(d > 0.0)) {
            return Err(Error::Format("valid depths must be positive".into()));
        }
        Ok(Self { width, height, values, valid })
    }

    /// Depth map where positive entries are valid and everything else is masked.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|&d| d > 0.0 && d.is_finite()).collect();
        Self::new(width, height, values, valid)
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self { width, height, values: vec![depth; width * height], valid: vec![true; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn set_invalid(&mut self, col: usize, row: usize) {
        self.valid[row * self.width + col] = false;
    }

    /// Bilinear depth at `p`; `None` unless all four neighbors are valid.
    pub fn sample(&self, p: &Pt2) -> Option<f64> {
        if !in_bounds(p, self.width, self.height) {
            return None;
        }
        let x = p.x.clamp(0.0, (self.width - 1) as f64);
        let y = p.y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let idx = |c: usize, r: usize| r * self.width + c;
        let taps = [
            (idx(x0, y0), (1.0 - fx) * (1.0 - fy)),
            (idx(x1, y0), fx * (1.0 - fy)),
            (idx(x0, y1), (1.0 - fx) * fy),
            (idx(x1, y1), fx * fy),
        ];
        if taps.iter().any(|&(i, _)| !self.valid[i]) {
            return None;
        }
        Some(taps.iter().map(|&(i, w)| w * self.values[i]).sum())
    }
}

/// Transfers pixel `p` of image A into image B through A's depth and the
/// relative pose. The flag is false on masked depth, points behind camera B,
/// or projections outside image B.
pub fn warp_point_rigid(
    k_a: &Intrinsics,
    k_b: &Intrinsics,
    pose_ab: &CameraPose,
    depth_a: &DepthMap,
    p: &Pt2,
) -> (Pt2, bool) {
    let Some(z) = depth_a.sample(p) else {
        return (*p, false);
    };
    let xb = pose_ab.transform(&k_a.backproject(p, z));
    if xb.z <= 0.0 {
        return (*p, false);
    }
    let q = k_b.project(&xb);
    let valid = in_bounds(&q, k_b.width, k_b.height);
    (q, valid)
}

// ── Estimation ───────────────────────────────────────────────────────────

/// Similarity that moves the centroid to the origin and the mean distance to √2.
fn hartley_normalizer(pts: &[Pt2]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 1e-15 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform_pt(t: &Matrix3<f64>, p: &Pt2) -> Pt2 {
    Pt2::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

/// Normalized DLT over `(source, target)` pairs; the result maps source to target.
pub fn estimate_homography_dlt(pairs: &[(Pt2, Pt2)]) -> Result<Homography> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::TooFewCorrespondences { needed: 4, got: n });
    }
    let src: Vec<Pt2> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Pt2> = pairs.iter().map(|p| p.1).collect();
    let t_src = hartley_normalizer(&src);
    let t_dst = hartley_normalizer(&dst);

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let s = transform_pt(&t_src, s);
        let d = transform_pt(&t_dst, d);
        let r = 2 * i;
        a[(r, 3)] = -s.x;
        a[(r, 4)] = -s.y;
        a[(r, 5)] = -1.0;
        a[(r, 6)] = d.y * s.x;
        a[(r, 7)] = d.y * s.y;
        a[(r, 8)] = d.y;
        a[(r + 1, 0)] = s.x;
        a[(r + 1, 1)] = s.y;
        a[(r + 1, 2)] = 1.0;
        a[(r + 1, 6)] = -d.x * s.x;
        a[(r + 1, 7)] = -d.x * s.y;
        a[(r + 1, 8)] = -d.x;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Shape("svd produced no right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let largest = sv[0].max(1e-300);
    let null_dim = sv.iter().filter(|&&s| s <= 1e-9 * largest).count();
    if null_dim > 1 {
        return Err(Error::RankDeficient(null_dim));
    }
    let h_row = v_t.row(order[8]);
    let h_norm = Matrix3::from_row_slice(&h_row.iter().copied().collect::<Vec<_>>());
    let t_dst_inv = t_dst.try_inverse().ok_or(Error::RankDeficient(2))?;
    Homography::new(t_dst_inv * h_norm * t_src).map(|h| h.normalized())
}

/// RANSAC parameters; the defaults are the conventional vanilla settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 1000, inlier_threshold: 3.0, seed: 0 }
    }
}

fn inlier_mask(h: &Homography, pairs: &[(Pt2, Pt2)], thresh: f64) -> Vec<bool> {
    pairs
        .iter()
        .map(|(a, b)| match apply_homography(h, a) {
            Ok(q) => (q - b).norm() <= thresh,
            Err(_) => false,
        })
        .collect()
}

/// Hypothesize-and-verify homography fit with a final DLT refit on inliers.
pub fn ransac_homography(pairs: &[(Pt2, Pt2)], cfg: &RansacConfig) -> Result<(Homography, Vec<bool>)> {
    if pairs.len() < 4 {
        return Err(Error::TooFewCorrespondences { needed: 4, got: pairs.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..cfg.iterations {
        let idx = rand::seq::index::sample(&mut rng, pairs.len(), 4);
        let sample: Vec<(Pt2, Pt2)> = idx.iter().map(|i| pairs[i]).collect();
        let Ok(h) = estimate_homography_dlt(&sample) else { continue };
        let mask = inlier_mask(&h, pairs, cfg.inlier_threshold);
        let count = mask.iter().filter(|&&m| m).count();
        if count >= 4 && best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, mask));
        }
    }
    let (_, mask) = best.ok_or(Error::NoModel(4))?;
    let inliers: Vec<(Pt2, Pt2)> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let h = estimate_homography_dlt(&inliers)?;
    let refit_mask = inlier_mask(&h, pairs, cfg.inlier_threshold);
    if refit_mask.iter().filter(|&&m| m).count() >= 4 {
        Ok((h, refit_mask))
    } else {
        Ok((h, mask))
    }
}

/// Mean distance between the four image corners mapped by `h_est` and `h_gt`.
/// Infinite when either homography sends a corner to infinity.
pub fn mean_corner_error(h_est: &Homography, h_gt: &Homography, width: usize, height: usize) -> f64 {
    let (w, h) = ((width as f64) - 1.0, (height as f64) - 1.0);
    let corners = [Pt2::new(0.0, 0.0), Pt2::new(w, 0.0), Pt2::new(0.0, h), Pt2::new(w, h)];
    let mut total = 0.0;
    for c in &corners {
        match (apply_homography(h_est, c), apply_homography(h_gt, c)) {
            (Ok(a), Ok(b)) => total += (a - b).norm(),
            _ => return f64::INFINITY,
        }
    }
    total / 4.0
}

/// Uniform continuous position inside a `w x h` pixel grid.
pub fn uniform_point<R: Rng>(rng: &mut R, w: f64, h: f64) -> Pt2 {
    Pt2::new(rng.random_range(-0.5..w - 0.5), rng.random_range(-0.5..h - 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn planted() -> Homography {
        Homography::new(Matrix3::new(0.9, 0.1, 5.0, -0.05, 1.1, -3.0, 1e-4, -2e-4, 1.0)).unwrap()
    }

    #[test]
    fn apply_identity_translation_scale() {
        let p = apply_homography(&Homography::identity(), &Pt2::new(10.0, 20.0)).unwrap();
        assert_eq!(p, Pt2::new(10.0, 20.0));
        let p = apply_homography(&Homography::translation(3.0, -2.0), &Pt2::new(0.0, 0.0)).unwrap();
        assert_eq!(p, Pt2::new(3.0, -2.0));
        let p = apply_homography(&Homography::scaling(2.0), &Pt2::new(5.0, 5.0)).unwrap();
        assert_eq!(p, Pt2::new(10.0, 10.0));
    }

    #[test]
    fn apply_rejects_points_at_infinity() {
        let h = Homography::new(Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0)).unwrap();
        assert!(matches!(apply_homography(&h, &Pt2::new(0.0, 3.0)), Err(Error::DegeneratePoint(_))));
    }

    #[test]
    fn singular_matrix_rejected() {
        assert!(Homography::new(Matrix3::zeros()).is_err());
    }

    #[test]
    fn rigid_identity_is_identity() {
        let k = Intrinsics::new(100.0, 100.0, 63.5, 63.5, 128, 128).unwrap();
        let d = DepthMap::constant(128, 128, 3.0);
        let p = Pt2::new(17.25, 90.5);
        let (q, valid) = warp_point_rigid(&k, &k, &CameraPose::identity(), &d, &p);
        assert!(valid);
        assert_abs_diff_eq!(q.x, p.x, epsilon = 1e-12);
        assert_abs_diff_eq!(q.y, p.y, epsilon = 1e-12);
    }

    #[test]
    fn rigid_masked_depth_is_invalid() {
        let k = Intrinsics::new(100.0, 100.0, 63.5, 63.5, 128, 128).unwrap();
        let mut d = DepthMap::constant(128, 128, 3.0);
        d.set_invalid(40, 40);
        let (_, valid) = warp_point_rigid(&k, &k, &CameraPose::identity(), &d, &Pt2::new(40.0, 40.0));
        assert!(!valid);
        // a neighbor that interpolates from the masked pixel is also rejected
        let (_, valid) = warp_point_rigid(&k, &k, &CameraPose::identity(), &d, &Pt2::new(39.5, 40.0));
        assert!(!valid);
    }

    #[test]
    fn rigid_translation_closed_form() {
        // plane at 2 m, camera B sits 0.1 m to the right: x_b = fx * (X - 0.1) / Z, a -5 px shift
        let k = Intrinsics::new(100.0, 100.0, 63.5, 63.5, 128, 128).unwrap();
        let d = DepthMap::constant(128, 128, 2.0);
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(-0.1, 0.0, 0.0)).unwrap();
        let p = Pt2::new(50.0, 60.0);
        let (q, valid) = warp_point_rigid(&k, &k, &pose, &d, &p);
        assert!(valid);
        assert_abs_diff_eq!(q.x, 45.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.y, 60.0, epsilon = 1e-12);
    }

    #[test]
    fn rigid_behind_camera_or_outside_is_invalid() {
        let k = Intrinsics::new(100.0, 100.0, 63.5, 63.5, 128, 128).unwrap();
        let d = DepthMap::constant(128, 128, 2.0);
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -3.0)).unwrap();
        assert!(!warp_point_rigid(&k, &k, &pose, &d, &Pt2::new(10.0, 10.0)).1);
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(5.0, 0.0, 0.0)).unwrap();
        assert!(!warp_point_rigid(&k, &k, &pose, &d, &Pt2::new(10.0, 10.0)).1);
    }

    #[test]
    fn dlt_recovers_planted_from_four_points() {
        let h = planted();
        let pairs: Vec<(Pt2, Pt2)> = [(3.0, 4.0), (120.0, 10.0), (15.0, 110.0), (100.0, 125.0)]
            .iter()
            .map(|&(x, y)| {
                let p = Pt2::new(x, y);
                (p, apply_homography(&h, &p).unwrap())
            })
            .collect();
        let est = estimate_homography_dlt(&pairs).unwrap();
        let err = (est.matrix() - h.normalized().matrix()).abs().max();
        assert!(err < 1e-8, "max entry error {err}");
    }

    #[test]
    fn dlt_identity() {
        let pairs: Vec<(Pt2, Pt2)> =
            [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (7.0, 9.0), (3.0, 1.0)].iter().map(|&(x, y)| (Pt2::new(x, y), Pt2::new(x, y))).collect();
        let est = estimate_homography_dlt(&pairs).unwrap();
        assert!((est.matrix() - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn dlt_collinear_is_rank_deficient() {
        let pairs: Vec<(Pt2, Pt2)> = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (5.0, 1.0)]
            .iter()
            .map(|&(x, y)| (Pt2::new(x, y), Pt2::new(2.0 * x + 1.0, y - 3.0)))
            .collect();
        assert!(matches!(estimate_homography_dlt(&pairs), Err(Error::RankDeficient(_))));
    }

    fn planted_matches(inlier_fraction: f64, seed: u64) -> (Vec<(Pt2, Pt2)>, Vec<bool>) {
        let h = planted();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = (100.0 * inlier_fraction).round() as usize;
        let mut pairs = Vec::new();
        let mut truth = Vec::new();
        for i in 0..100 {
            let a = uniform_point(&mut rng, 128.0, 128.0);
            if i < n_in {
                pairs.push((a, apply_homography(&h, &a).unwrap()));
                truth.push(true);
            } else {
                pairs.push((a, uniform_point(&mut rng, 128.0, 128.0)));
                truth.push(false);
            }
        }
        (pairs, truth)
    }

    #[test]
    fn ransac_all_inliers() {
        let (pairs, _) = planted_matches(1.0, 3);
        let (h, mask) = ransac_homography(&pairs, &RansacConfig::default()).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert!(mean_corner_error(&h, &planted(), 128, 128) < 1e-6);
    }

    #[test]
    fn ransac_half_outliers() {
        for seed in 0..5 {
            let (pairs, truth) = planted_matches(0.5, seed);
            let cfg = RansacConfig { iterations: 1000, inlier_threshold: 3.0, seed };
            let (h, mask) = ransac_homography(&pairs, &cfg).unwrap();
            assert!(truth.iter().zip(&mask).all(|(&t, &m)| !t || m));
            assert!(mean_corner_error(&h, &planted(), 128, 128) < 1.0);
        }
    }

    #[test]
    fn ransac_is_deterministic_and_needs_four() {
        let (pairs, _) = planted_matches(0.5, 9);
        let cfg = RansacConfig { seed: 42, ..Default::default() };
        let a = ransac_homography(&pairs, &cfg).unwrap();
        let b = ransac_homography(&pairs, &cfg).unwrap();
        assert_eq!(a.0.to_row_major(), b.0.to_row_major());
        assert_eq!(a.1, b.1);
        assert!(matches!(ransac_homography(&pairs[..3], &cfg), Err(Error::TooFewCorrespondences { .. })));
    }

    #[test]
    fn corner_error_cases() {
        let h = planted();
        assert_eq!(mean_corner_error(&h, &h, 128, 128), 0.0);
        let shifted = Homography::translation(1.0, 0.0).compose(&h);
        assert_abs_diff_eq!(mean_corner_error(&shifted, &h, 128, 128), 1.0, epsilon = 1e-9);

        // hand computation for a pure scale against identity on a 10x20 image
        let s = Homography::scaling(2.0);
        let corners = [(0.0f64, 0.0f64), (9.0, 0.0), (0.0, 19.0), (9.0, 19.0)];
        let expected = corners.iter().map(|&(x, y)| (x * x + y * y).sqrt()).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean_corner_error(&s, &Homography::identity(), 10, 20), expected, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn inverse_round_trip(
            a in 0.5f64..2.0, b in -0.3f64..0.3, c in -20.0f64..20.0,
            d in -0.3f64..0.3, e in 0.5f64..2.0, f in -20.0f64..20.0,
            g in -1e-3f64..1e-3, h in -1e-3f64..1e-3,
            x in 0.0f64..128.0, y in 0.0f64..128.0,
        ) {
            let hm = Homography::new(Matrix3::new(a, b, c, d, e, f, g, h, 1.0)).unwrap();
            let p = Pt2::new(x, y);
            if let Ok(q) = apply_homography(&hm.inverse(), &p) {
                let back = apply_homography(&hm, &q).unwrap();
                prop_assert!((back - p).norm() < 1e-9);
            }
        }

        #[test]
        fn dlt_reproduces_random_planted(
            a in 0.5f64..2.0, b in -0.3f64..0.3, c in -20.0f64..20.0,
            d in -0.3f64..0.3, e in 0.5f64..2.0, f in -20.0f64..20.0,
            g in -1e-3f64..1e-3, h in -1e-3f64..1e-3, seed in 0u64..1000,
        ) {
            let hm = Homography::new(Matrix3::new(a, b, c, d, e, f, g, h, 1.0)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<(Pt2, Pt2)> = (0..6).map(|_| {
                let p = uniform_point(&mut rng, 128.0, 128.0);
                (p, apply_homography(&hm, &p).unwrap())
            }).collect();
            let est = estimate_homography_dlt(&pairs).unwrap();
            prop_assert!((est.matrix() - hm.matrix()).abs().max() < 1e-8);
        }
    }
}
