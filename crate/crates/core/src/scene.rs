//! Seeded synthetic two-view scenes with exact ground truth.
//!
//! Planar scenes warp one procedural texture by a homography; rigid scenes
//! look at a textured fronto-parallel plane from two pinhole cameras. Either
//! way, every pixel of A that lands inside B has a known correspondence.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_homography, in_bounds, warp_point_rigid, CameraPose, DepthMap, Homography, Intrinsics, Pt2,
};

/// Grayscale image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!("image {width}x{height} with {} values", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Bilinear intensity at `p`, or `None` outside the pixel grid.
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
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    pub fn std_dev(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        (self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// Mixes a master seed with an index so batch items get independent streams.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ── Texture ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureSpec {
    pub octaves: usize,
    pub blob_count: usize,
    pub edge_count: usize,
    pub contrast: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self { octaves: 4, blob_count: 24, edge_count: 16, contrast: 1.0 }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise with lattice period `period` pixels.
fn value_noise_octave(rng: &mut ChaCha8Rng, width: usize, height: usize, period: f64, out: &mut [f64], amp: f64) {
    let gw = (width as f64 / period).ceil() as usize + 2;
    let gh = (height as f64 / period).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    for y in 0..height {
        let fy = y as f64 / period;
        let y0 = fy.floor() as usize;
        let ty = smoothstep(fy - y0 as f64);
        for x in 0..width {
            let fx = x as f64 / period;
            let x0 = fx.floor() as usize;
            let tx = smoothstep(fx - x0 as f64);
            let l = |c: usize, r: usize| lattice[r * gw + c];
            let top = l(x0, y0) * (1.0 - tx) + l(x0 + 1, y0) * tx;
            let bottom = l(x0, y0 + 1) * (1.0 - tx) + l(x0 + 1, y0 + 1) * tx;
            out[y * width + x] += amp * (top * (1.0 - ty) + bottom * ty);
        }
    }
}

fn shade<R: Rng>(rng: &mut R) -> f64 {
    if rng.random_bool(0.5) {
        rng.random_range(0.08..0.3)
    } else {
        rng.random_range(0.7..0.92)
    }
}

/// Multi-octave value noise overlaid with hard-edged ellipses and line
/// segments, then contrast-scaled about 0.5 and clamped to `[0, 1]`.
pub fn gen_texture(spec: &TextureSpec, width: usize, height: usize, seed: u64) -> Result<Image> {
    if width < 64 || height < 64 {
        return Err(Error::Shape(format!("texture must be at least 64x64, got {width}x{height}")));
    }
    if spec.octaves == 0 || !(spec.contrast > 0.0 && spec.contrast <= 1.0) {
        return Err(Error::Format("texture needs octaves >= 1 and contrast in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; width * height];
    let mut amp_total = 0.0;
    for o in 0..spec.octaves {
        let period = (32.0 / (1u32 << o) as f64).max(2.0);
        let amp = 0.5f64.powi(o as i32);
        value_noise_octave(&mut rng, width, height, period, &mut data, amp);
        amp_total += amp;
    }
    for v in &mut data {
        // stretch the bell-shaped noise histogram toward the full range
        *v = 0.5 + 1.5 * (*v / amp_total - 0.5);
    }

    for _ in 0..spec.blob_count {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let ra: f64 = rng.random_range(3.0..12.0);
        let rb = rng.random_range(3.0..12.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let value = shade(&mut rng);
        let (s, c) = theta.sin_cos();
        let reach = ra.max(rb).ceil() as isize + 1;
        for y in (cy as isize - reach).max(0)..(cy as isize + reach).min(height as isize) {
            for x in (cx as isize - reach).max(0)..(cx as isize + reach).min(width as isize) {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                if (u / ra).powi(2) + (v / rb).powi(2) <= 1.0 {
                    data[y as usize * width + x as usize] = value;
                }
            }
        }
    }

    for _ in 0..spec.edge_count {
        let x0 = rng.random_range(0.0..width as f64);
        let y0 = rng.random_range(0.0..height as f64);
        let len: f64 = rng.random_range(10.0..40.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let half: f64 = rng.random_range(0.6..1.6);
        let value = shade(&mut rng);
        let (x1, y1) = (x0 + len * theta.cos(), y0 + len * theta.sin());
        let (dx, dy) = (x1 - x0, y1 - y0);
        let lo_x = (x0.min(x1) - 2.0).max(0.0) as usize;
        let hi_x = ((x0.max(x1) + 3.0) as usize).min(width);
        let lo_y = (y0.min(y1) - 2.0).max(0.0) as usize;
        let hi_y = ((y0.max(y1) + 3.0) as usize).min(height);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let t = (((x as f64 - x0) * dx + (y as f64 - y0) * dy) / (len * len)).clamp(0.0, 1.0);
                let d = ((x as f64 - x0 - t * dx).powi(2) + (y as f64 - y0 - t * dy).powi(2)).sqrt();
                if d <= half {
                    data[y * width + x] = value;
                }
            }
        }
    }

    for v in &mut data {
        *v = (0.5 + spec.contrast * (*v - 0.5)).clamp(0.0, 1.0);
    }
    Image::new(width, height, data)
}

// ── Geometry sampling and rendering ──────────────────────────────────────

/// Draws a homography from A to B that zooms out by a factor `s` in
/// `scale_range` about the image center, so A shows the shared content at
/// `s` times the scale of B. Rotation is uniform in `±rot_range` radians and
/// the two perspective terms are uniform in `±persp_range` relative to the
/// half image size. Returns the homography and `s`.
pub fn sample_homography(
    seed: u64,
    scale_range: [f64; 2],
    rot_range: f64,
    persp_range: f64,
    width: usize,
    height: usize,
) -> Result<(Homography, f64)> {
    let [lo, hi] = scale_range;
    if !(lo >= 1.0 && hi >= lo) {
        return Err(Error::Format(format!("scale range [{lo}, {hi}] must satisfy 1 <= lo <= hi")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let theta = if rot_range > 0.0 { rng.random_range(-rot_range..=rot_range) } else { 0.0 };
    let (p1, p2) = if persp_range > 0.0 {
        (rng.random_range(-persp_range..=persp_range), rng.random_range(-persp_range..=persp_range))
    } else {
        (0.0, 0.0)
    };
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let to_center = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    let from_center = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
    let (sn, cs) = theta.sin_cos();
    let rot = Matrix3::new(cs, -sn, 0.0, sn, cs, 0.0, 0.0, 0.0, 1.0);
    let shrink = Matrix3::new(1.0 / s, 0.0, 0.0, 0.0, 1.0 / s, 0.0, 0.0, 0.0, 1.0);
    let persp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, p1 / (cx + 0.5), p2 / (cy + 0.5), 1.0);
    let h = Homography::new(from_center * shrink * rot * persp * to_center)?.normalized();
    Ok((h, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Planar,
    Rigid,
}

/// Exact geometry relating the two views.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    /// Maps pixels of A to pixels of B.
    Planar(Homography),
    Rigid {
        k_a: Intrinsics,
        k_b: Intrinsics,
        /// Camera-A frame to camera-B frame.
        pose_ab: CameraPose,
        depth_a: DepthMap,
        depth_b: DepthMap,
    },
}

impl GroundTruth {
    pub fn kind(&self) -> SceneKind {
        match self {
            GroundTruth::Planar(_) => SceneKind::Planar,
            GroundTruth::Rigid { .. } => SceneKind::Rigid,
        }
    }

    /// Correspondence in B of pixel `p` of A, if it exists inside B.
    pub fn warp_a_to_b(&self, p: &Pt2, width_b: usize, height_b: usize) -> Option<Pt2> {
        match self {
            GroundTruth::Planar(h) => {
                let q = apply_homography(h, p).ok()?;
                in_bounds(&q, width_b, height_b).then_some(q)
            }
            GroundTruth::Rigid { k_a, k_b, pose_ab, depth_a, .. } => {
                let (q, valid) = warp_point_rigid(k_a, k_b, pose_ab, depth_a, p);
                valid.then_some(q)
            }
        }
    }

    /// The same geometry with the roles of A and B exchanged.
    pub fn swapped(&self) -> Self {
        match self {
            GroundTruth::Planar(h) => GroundTruth::Planar(h.inverse()),
            GroundTruth::Rigid { k_a, k_b, pose_ab, depth_a, depth_b } => GroundTruth::Rigid {
                k_a: *k_b,
                k_b: *k_a,
                pose_ab: pose_ab.inverse(),
                depth_a: depth_b.clone(),
                depth_b: depth_a.clone(),
            },
        }
    }
}

/// Two views and their exact relation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image_a: Image,
    pub image_b: Image,
    pub truth: GroundTruth,
    /// Scale ratio of the overlap, always ≥ 1.
    pub scale_ratio: f64,
    /// True when A shows the shared content at the larger scale.
    pub a_larger: bool,
    pub seed: u64,
}

impl SceneSample {
    pub fn width(&self) -> usize {
        self.image_a.width
    }

    pub fn height(&self) -> usize {
        self.image_a.height
    }

    pub fn warp_a_to_b(&self, p: &Pt2) -> Option<Pt2> {
        self.truth.warp_a_to_b(p, self.image_b.width, self.image_b.height)
    }

    /// Exchanges the views; the direction flag flips unless the ratio is an exact tie.
    pub fn swapped(&self) -> Self {
        Self {
            image_a: self.image_b.clone(),
            image_b: self.image_a.clone(),
            truth: self.truth.swapped(),
            scale_ratio: self.scale_ratio,
            a_larger: if self.scale_ratio == 1.0 { true } else { !self.a_larger },
            seed: self.seed,
        }
    }
}

/// Renders B by inverse-warping the texture through `h` (A to B), black
/// outside the texture, then applies brightness jitter and Gaussian noise.
pub fn render_pair_planar(
    texture: &Image,
    h: &Homography,
    photometric_jitter: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<SceneSample> {
    let (w, hgt) = (texture.width, texture.height);
    let h_inv = h.inverse();
    let mut data = Vec::with_capacity(w * hgt);
    for y in 0..hgt {
        for x in 0..w {
            let v = apply_homography(&h_inv, &Pt2::new(x as f64, y as f64))
                .ok()
                .and_then(|p| texture.sample(&p))
                .unwrap_or(0.0);
            data.push(v);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_photometric(&mut data, photometric_jitter, noise_sigma, &mut rng)?;
    finish_sample(texture.clone(), Image::new(w, hgt, data)?, GroundTruth::Planar(*h), seed)
}

fn apply_photometric(data: &mut [f64], jitter: f64, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let gain = if jitter > 0.0 { rng.random_range(1.0 - jitter..=1.0 + jitter) } else { 1.0 };
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Format(e.to_string()))?;
        for v in data.iter_mut() {
            *v = (*v * gain + normal.sample(rng)).clamp(0.0, 1.0);
        }
    } else if gain != 1.0 {
        for v in data.iter_mut() {
            *v = (*v * gain).clamp(0.0, 1.0);
        }
    }
    Ok(())
}

fn finish_sample(image_a: Image, image_b: Image, truth: GroundTruth, seed: u64) -> Result<SceneSample> {
    let mut sample = SceneSample { image_a, image_b, truth, scale_ratio: 1.0, a_larger: true, seed };
    let (ratio, a_larger) = true_scale_ratio(&sample, 500, seed)?;
    sample.scale_ratio = ratio;
    sample.a_larger = a_larger;
    Ok(sample)
}

/// Two cameras facing a textured fronto-parallel plane at `plane_depth`.
/// Camera A sees exactly the texture; camera B sits `baseline` meters to the
/// right with focal length divided by `focal_ratio`.
pub fn render_pair_rigid(
    texture: &Image,
    plane_depth: f64,
    baseline: f64,
    focal_ratio: f64,
    seed: u64,
) -> Result<SceneSample> {
    if !(plane_depth > 0.0) || !(focal_ratio > 0.0) {
        return Err(Error::Format("plane depth and focal ratio must be positive".into()));
    }
    let (w, h) = (texture.width, texture.height);
    let f = w as f64;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let k_a = Intrinsics::new(f, f, cx, cy, w, h)?;
    let k_b = Intrinsics::new(f / focal_ratio, f / focal_ratio, cx, cy, w, h)?;
    let pose_ab = CameraPose::new(Matrix3::identity(), Vector3::new(-baseline, 0.0, 0.0))?;
    let pose_ba = pose_ab.inverse();

    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let x_b = k_b.backproject(&Pt2::new(x as f64, y as f64), plane_depth);
            let p = k_a.project(&pose_ba.transform(&x_b));
            data.push(texture.sample(&p).unwrap_or(0.0));
        }
    }
    let truth = GroundTruth::Rigid {
        k_a,
        k_b,
        pose_ab,
        depth_a: DepthMap::constant(w, h, plane_depth),
        depth_b: DepthMap::constant(w, h, plane_depth),
    };
    finish_sample(texture.clone(), Image::new(w, h, data)?, truth, seed)
}

// ── Scale ratio ──────────────────────────────────────────────────────────

fn mean_pairwise_distance(pts: &[Pt2]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            total += (pts[i] - pts[j]).norm();
            count += 1;
        }
    }
    total / count as f64
}

/// Scale ratio from correspondences: mean pairwise distance of `n` sampled
/// pairs within each image, larger over smaller. The flag is true when A has
/// the larger spread (ties count as A).
pub fn scale_ratio_from_pairs(pairs: &[(Pt2, Pt2)], n: usize, seed: u64) -> Result<(f64, bool)> {
    if pairs.len() < 8 {
        return Err(Error::InsufficientOverlap(pairs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = if pairs.len() > n {
        rand::seq::index::sample(&mut rng, pairs.len(), n).into_vec()
    } else {
        (0..pairs.len()).collect()
    };
    let a: Vec<Pt2> = picked.iter().map(|&i| pairs[i].0).collect();
    let b: Vec<Pt2> = picked.iter().map(|&i| pairs[i].1).collect();
    let (da, db) = (mean_pairwise_distance(&a), mean_pairwise_distance(&b));
    if da >= db {
        Ok((da / db, true))
    } else {
        Ok((db / da, false))
    }
}

/// All integer pixels of A with a valid correspondence in B.
pub fn gt_pixel_pairs(sample: &SceneSample) -> Vec<(Pt2, Pt2)> {
    let mut pairs = Vec::new();
    for y in 0..sample.height() {
        for x in 0..sample.width() {
            let p = Pt2::new(x as f64, y as f64);
            if let Some(q) = sample.warp_a_to_b(&p) {
                pairs.push((p, q));
            }
        }
    }
    pairs
}

pub fn true_scale_ratio(sample: &SceneSample, n: usize, seed: u64) -> Result<(f64, bool)> {
    scale_ratio_from_pairs(&gt_pixel_pairs(sample), n, seed)
}

// ── Configured generation ────────────────────────────────────────────────

/// Parameters of a scene stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    pub texture: TextureSpec,
    pub scale_range: [f64; 2],
    /// Maximum absolute rotation in radians (planar scenes).
    pub rotation: f64,
    pub perspective: f64,
    pub photometric_jitter: f64,
    pub noise_sigma: f64,
    /// Probability of exchanging A and B after rendering.
    pub swap_probability: f64,
    pub plane_depth: f64,
    pub baseline: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Planar,
            width: 128,
            height: 128,
            texture: TextureSpec::default(),
            scale_range: [1.0, 2.0],
            rotation: 15f64.to_radians(),
            perspective: 0.05,
            photometric_jitter: 0.1,
            noise_sigma: 0.01,
            swap_probability: 0.0,
            plane_depth: 2.0,
            baseline: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % 8 != 0 || self.height % 8 != 0 || self.width < 64 || self.height < 64 {
            return Err(Error::Shape(format!(
                "scene size {}x{} must be at least 64x64 and divisible by 8",
                self.width, self.height
            )));
        }
        if !(self.scale_range[0] >= 1.0 && self.scale_range[1] >= self.scale_range[0]) {
            return Err(Error::Format("scale_range must satisfy 1 <= lo <= hi".into()));
        }
        if !(0.0..=1.0).contains(&self.swap_probability) {
            return Err(Error::Format("swap_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scene number `index` of the stream seeded by `master_seed`. Geometry that
/// leaves too little overlap is redrawn from the next derived seed.
pub fn generate_scene(cfg: &SceneConfig, master_seed: u64, index: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut last_err = None;
    for attempt in 0..16u64 {
        let seed = derive_seed(derive_seed(master_seed, index), attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texture = gen_texture(&cfg.texture, cfg.width, cfg.height, rng.random())?;
        let rendered = match cfg.kind {
            SceneKind::Planar => {
                let (h, _) = sample_homography(
                    rng.random(),
                    cfg.scale_range,
                    cfg.rotation,
                    cfg.perspective,
                    cfg.width,
                    cfg.height,
                )?;
                render_pair_planar(&texture, &h, cfg.photometric_jitter, cfg.noise_sigma, rng.random())
            }
            SceneKind::Rigid => {
                let [lo, hi] = cfg.scale_range;
                let focal_ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let baseline = cfg.baseline * rng.random_range(-1.0..=1.0);
                render_pair_rigid(&texture, cfg.plane_depth, baseline, focal_ratio, rng.random()).and_then(|mut s| {
                    apply_photometric(&mut s.image_b.data, cfg.photometric_jitter, cfg.noise_sigma, &mut rng)?;
                    Ok(s)
                })
            }
        };
        match rendered {
            Ok(mut sample) => {
                sample.seed = seed;
                if rng.random::<f64>() < cfg.swap_probability {
                    sample = sample.swapped();
                }
                return Ok(sample);
            }
            Err(e @ Error::InsufficientOverlap(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(Error::InsufficientOverlap(0)))
}
