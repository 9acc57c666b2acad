//! Compact multi-resolution extractor: a four-level convolutional encoder
//! (strides 1, 2, 4, 8), a decoder that merges levels back up to stride 2,
//! a coarse head at stride 8, a fine head at stride 2, and a detector head.
//!
//! The encoder/decoder trunk is frozen; the two linear heads can be trained.
//! Heads are recorded on a [`Tape`] so their gradients are available.

pub mod detect;
pub mod planted;

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Pt2;
use crate::params::{randn, ParamStore};
use crate::scene::Image;
use crate::tape::{MapGeom, RowMix, Tape, Var};

pub use detect::{detect_keypoints, keypoints_at, DetectConfig, KeypointSet};
pub use planted::{cell_index, planted_descriptors};

pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 2;
const E1: usize = 16;
const E2: usize = 32;
const E3: usize = 64;
const D4: usize = 64;

/// Channel widths the extractor is built with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractorDims {
    pub c1: usize,
    pub c2: usize,
    /// Fixed scale applied to unit-normalized fine descriptors.
    pub fine_gain: f64,
}

/// Parameter names of the extractor, all under `extract.`.
pub fn init_extractor<R: Rng>(store: &mut ParamStore, dims: &ExtractorDims, rng: &mut R) {
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let conv = |store: &mut ParamStore, name: &str, cin: usize, cout: usize, trainable: bool, rng: &mut R| {
        store.add(&format!("extract.{name}.w"), randn(9 * cin, cout, he(9 * cin), rng), trainable);
        store.add(&format!("extract.{name}.b"), Array2::zeros((1, cout)), trainable);
    };
    conv(store, "e1", 1, E1, false, rng);
    conv(store, "e2", E1, E2, false, rng);
    conv(store, "e3", E2, E3, false, rng);
    conv(store, "e4", E3, dims.c1, false, rng);
    conv(store, "det", E1, 1, false, rng);
    let mut linear = |store: &mut ParamStore, name: &str, cin: usize, cout: usize, std: f64, trainable: bool| {
        store.add(&format!("extract.{name}.w"), randn(cin, cout, std, rng), trainable);
        store.add(&format!("extract.{name}.b"), Array2::zeros((1, cout)), trainable);
    };
    linear(store, "d4", dims.c1 + E3, D4, he(dims.c1 + E3), false);
    linear(store, "d2", D4 + E2, dims.c2, he(D4 + E2), false);
    linear(store, "fine", dims.c2, dims.c2, (1.0 / dims.c2 as f64).sqrt(), true);
    let merged = dims.c2 + D4 + dims.c1;
    linear(store, "coarse", merged, dims.c1, (1.0 / merged as f64).sqrt(), true);
}

/// Bilinear taps at continuous grid coordinate `(u, v)` on an `h x w` grid,
/// clamped to the border. Returns `(row_index, weight)` pairs.
pub fn bilinear_taps(u: f64, v: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// Continuous grid coordinate of image position `x` on a map of the given stride.
pub fn grid_coord(x: f64, stride: usize) -> f64 {
    (x - (stride as f64 - 1.0) / 2.0) / stride as f64
}

/// Image position of grid coordinate `u` on a map of the given stride.
pub fn image_coord(u: f64, stride: usize) -> f64 {
    u * stride as f64 + (stride as f64 - 1.0) / 2.0
}

/// Bilinear resampling of an `h_in x w_in` map at stride `s_in` onto the
/// pixel centers of an `h_out x w_out` map at stride `s_out`.
pub fn resample_mix(h_in: usize, w_in: usize, s_in: usize, h_out: usize, w_out: usize, s_out: usize) -> RowMix {
    let mut m = RowMix::new(h_out * w_out, h_in * w_in);
    for y in 0..h_out {
        let v = grid_coord(image_coord(y as f64, s_out), s_in);
        for x in 0..w_out {
            let u = grid_coord(image_coord(x as f64, s_out), s_in);
            for (i, wgt) in bilinear_taps(u, v, h_in, w_in) {
                if wgt != 0.0 {
                    m.push(y * w_out + x, i, wgt);
                }
            }
        }
    }
    m
}

/// Bilinear sampling of a stride-`stride` map at image positions.
pub fn point_sample_mix(points: &[Pt2], h: usize, w: usize, stride: usize) -> RowMix {
    let mut m = RowMix::new(points.len(), h * w);
    for (r, p) in points.iter().enumerate() {
        for (i, wgt) in bilinear_taps(grid_coord(p.x, stride), grid_coord(p.y, stride), h, w) {
            if wgt != 0.0 {
                m.push(r, i, wgt);
            }
        }
    }
    m
}

/// Coarse descriptors at keypoint positions: bilinear on the stride-8 grid.
pub fn sample_sparse(coarse: &Array2<f64>, hc: usize, wc: usize, kps: &KeypointSet) -> Array2<f64> {
    point_sample_mix(&kps.positions, hc, wc, COARSE_STRIDE).apply(coarse)
}

/// Frozen trunk outputs for one image, enough to evaluate the heads.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub width: usize,
    pub height: usize,
    /// Stride-8 concatenation of resampled stride-2, stride-4 and stride-8 features.
    pub coarse_in: Array2<f64>,
    /// Stride-2 decoder features.
    pub d2: Array2<f64>,
    /// Detector probabilities, row-major `height x width`.
    pub score_map: Vec<f64>,
}

fn check_dims(image: &Image) -> Result<()> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 || w % COARSE_STRIDE != 0 || h % COARSE_STRIDE != 0 {
        return Err(Error::Shape(format!("image {w}x{h} is not divisible by {COARSE_STRIDE}")));
    }
    Ok(())
}

fn conv_layer(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, geom: MapGeom) -> Var {
    let w = tape.param(store, store.id(&format!("extract.{name}.w")));
    let b = tape.param(store, store.id(&format!("extract.{name}.b")));
    let c = tape.conv3x3(x, w, geom);
    tape.add_row(c, b)
}

fn linear_layer(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = tape.param(store, store.id(&format!("extract.{name}.w")));
    let b = tape.param(store, store.id(&format!("extract.{name}.b")));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Runs encoder, decoder and detector on one image.
pub fn run_trunk(store: &ParamStore, image: &Image) -> Result<Trunk> {
    check_dims(image)?;
    let (w, h) = (image.width(), image.height());
    let geom = |s: usize| MapGeom { batch: 1, height: h / s, width: w / s };
    let mut t = Tape::new();
    let x = t.constant(Array2::from_shape_vec((w * h, 1), image.data().to_vec()).expect("image shape"));

    let e1 = conv_layer(&mut t, store, "e1", x, geom(1));
    let e1 = t.relu(e1);
    let det = conv_layer(&mut t, store, "det", e1, geom(1));
    let det = t.sigmoid(det);
    let p1 = t.max_pool2(e1, geom(1));
    let e2 = conv_layer(&mut t, store, "e2", p1, geom(2));
    let e2 = t.relu(e2);
    let p2 = t.max_pool2(e2, geom(2));
    let e3 = conv_layer(&mut t, store, "e3", p2, geom(4));
    let e3 = t.relu(e3);
    let p3 = t.max_pool2(e3, geom(4));
    let e4 = conv_layer(&mut t, store, "e4", p3, geom(8));
    let e4 = t.relu(e4);

    let up = |s_in: usize, s_out: usize| {
        Rc::new(resample_mix(h / s_in, w / s_in, s_in, h / s_out, w / s_out, s_out))
    };
    let e4_up = t.mix(e4, up(8, 4));
    let cat4 = t.concat_cols(&[e4_up, e3]);
    let d4 = linear_layer(&mut t, store, "d4", cat4);
    let d4 = t.relu(d4);
    let d4_up = t.mix(d4, up(4, 2));
    let cat2 = t.concat_cols(&[d4_up, e2]);
    let d2 = linear_layer(&mut t, store, "d2", cat2);
    let d2 = t.relu(d2);

    let d2_s8 = t.mix(d2, up(2, 8));
    let d4_s8 = t.mix(d4, up(4, 8));
    let coarse_in = t.concat_cols(&[d2_s8, d4_s8, e4]);

    Ok(Trunk {
        width: w,
        height: h,
        coarse_in: t.value(coarse_in).clone(),
        d2: t.value(d2).clone(),
        score_map: t.value(det).iter().copied().collect(),
    })
}

/// Learned linear merge of the multi-resolution stride-8 features, unit-normalized per cell.
pub fn coarse_head(tape: &mut Tape, store: &ParamStore, coarse_in: Var) -> Var {
    let y = linear_layer(tape, store, "coarse", coarse_in);
    tape.normalize_rows(y)
}

/// Linear projection of stride-2 decoder features, unit-normalized and scaled.
pub fn fine_head(tape: &mut Tape, store: &ParamStore, dims: &ExtractorDims, d2: Var) -> Var {
    let y = linear_layer(tape, store, "fine", d2);
    let n = tape.normalize_rows(y);
    tape.scale(n, dims.fine_gain)
}

/// Dense outputs for one image: coarse map `(H/8*W/8) x C1`, fine map
/// `(H/2*W/2) x C2`, and the detector score map.
pub fn extract_features(
    store: &ParamStore,
    dims: &ExtractorDims,
    image: &Image,
) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)> {
    let trunk = run_trunk(store, image)?;
    let (coarse, fine) = heads(store, dims, &trunk);
    Ok((coarse, fine, trunk.score_map))
}

/// Evaluates both heads on a trunk without recording gradients.
pub fn heads(store: &ParamStore, dims: &ExtractorDims, trunk: &Trunk) -> (Array2<f64>, Array2<f64>) {
    let mut t = Tape::new();
    let ci = t.constant(trunk.coarse_in.clone());
    let d2 = t.constant(trunk.d2.clone());
    let c = coarse_head(&mut t, store, ci);
    let f = fine_head(&mut t, store, dims, d2);
    (t.value(c).clone(), t.value(f).clone())
}

/// Per-keypoint descriptors that replace sampling from the dense maps (oracle mode).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOverride {
    pub coarse: Array2<f64>,
    pub fine: Array2<f64>,
}

/// Everything the matcher needs from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub width: usize,
    pub height: usize,
    pub coarse: Array2<f64>,
    pub fine: Array2<f64>,
    pub keypoints: KeypointSet,
    pub sparse: Option<SparseOverride>,
}

impl FeatureBundle {
    pub fn coarse_dims(&self) -> (usize, usize) {
        (self.height / COARSE_STRIDE, self.width / COARSE_STRIDE)
    }

    pub fn fine_dims(&self) -> (usize, usize) {
        (self.height / FINE_STRIDE, self.width / FINE_STRIDE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_texture, TextureSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(c1: usize, c2: usize) -> (ParamStore, ExtractorDims) {
        let dims = ExtractorDims { c1, c2, fine_gain: 4.0 };
        let mut s = ParamStore::new();
        init_extractor(&mut s, &dims, &mut ChaCha8Rng::seed_from_u64(1));
        (s, dims)
    }

    #[test]
    fn zero_image_gives_zero_features_and_half_scores() {
        let (s, dims) = store(16, 8);
        let (c, f, score) = extract_features(&s, &dims, &Image::zeros(64, 64)).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        assert!(f.iter().all(|&v| v == 0.0));
        assert!(score.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn output_shapes() {
        let (s, dims) = store(64, 32);
        let img = gen_texture(&TextureSpec::default(), 128, 128, 0).unwrap();
        let (c, f, score) = extract_features(&s, &dims, &img).unwrap();
        assert_eq!(c.dim(), (256, 64));
        assert_eq!(f.dim(), (64 * 64, 32));
        assert_eq!(score.len(), 128 * 128);
        for row in c.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
        let again = extract_features(&s, &dims, &img).unwrap();
        assert_eq!(again.0, c);
        assert_eq!(again.1, f);
    }

    #[test]
    fn non_divisible_dims_rejected() {
        let (s, dims) = store(16, 8);
        assert!(matches!(extract_features(&s, &dims, &Image::zeros(68, 64)), Err(Error::Shape(_))));
    }

    #[test]
    fn coarse_map_is_translation_covariant() {
        let (s, dims) = store(16, 8);
        let big = gen_texture(&TextureSpec::default(), 136, 128, 4).unwrap();
        let crop = |x0: usize| {
            let mut data = Vec::with_capacity(128 * 128);
            for y in 0..128 {
                for x in 0..128 {
                    data.push(big.get(x + x0, y));
                }
            }
            Image::new(128, 128, data).unwrap()
        };
        // content of `shifted` sits 8 px (one cell) to the right of `base`
        let (base, _, _) = extract_features(&s, &dims, &crop(8)).unwrap();
        let (shifted, _, _) = extract_features(&s, &dims, &crop(0)).unwrap();
        for row in 4..12 {
            for col in 4..11 {
                let a = base.row(row * 16 + col);
                let b = shifted.row(row * 16 + col + 1);
                let diff = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(diff < 1e-6, "cell ({row},{col}) differs by {diff}");
            }
        }
    }

    #[test]
    fn sparse_sampling_cases() {
        let coarse = Array2::from_shape_fn((16, 3), |(r, c)| (r * 3 + c) as f64);
        let kps = keypoints_at(vec![Pt2::new(8.0 * 2.0 + 3.5, 8.0 * 1.0 + 3.5), Pt2::new(8.0 * 1.0 + 7.5, 3.5)]);
        let s = sample_sparse(&coarse, 4, 4, &kps);
        assert_eq!(s.row(0), coarse.row(6));
        let mean = (&coarse.row(1) + &coarse.row(2)) / 2.0;
        assert_eq!(s.row(1), mean);
        let constant = Array2::from_elem((16, 3), 0.25);
        let kps = keypoints_at(vec![Pt2::new(0.3, 30.9), Pt2::new(17.2, 5.5)]);
        assert!(sample_sparse(&constant, 4, 4, &kps).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
