//! Oracle features: descriptors constructed from ground truth so the matching
//! stages can be tested in isolation from any learned extractor.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{grid_coord, keypoints_at, FeatureBundle, KeypointSet, SparseOverride, COARSE_STRIDE, FINE_STRIDE};
use crate::error::{Error, Result};
use crate::geometry::{uniform_point, Pt2};
use crate::scene::SceneSample;

/// Width (in fine-map pixels) of the Gaussian the planted fine correlation peaks with.
pub const PLANTED_FINE_SIGMA: f64 = 0.5;

fn unit_vector(c: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let v: Array1<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.dot(&v).sqrt();
    v / n
}

/// Coarse cell (row-major index) containing image position `p`.
pub fn cell_index(p: &Pt2, wc: usize, hc: usize) -> usize {
    let col = (((p.x + 0.5) / COARSE_STRIDE as f64).floor() as usize).min(wc - 1);
    let row = (((p.y + 0.5) / COARSE_STRIDE as f64).floor() as usize).min(hc - 1);
    row * wc + col
}

/// Places `n` keypoints at random positions of A that have a ground-truth
/// correspondence in B. Every B coarse cell gets a random unit vector
/// (perturbed by `noise_sigma` per component, then renormalized); each
/// keypoint's sparse descriptor is the clean vector of the cell its
/// correspondence falls in. Fine descriptors are quadratic codes whose inner
/// product is `-|q - g|^2 / (2 s^2)` for fine pixel `q` and true fine
/// position `g`, so the window softmax is a discrete Gaussian at the truth.
pub fn planted_descriptors(
    sample: &SceneSample,
    n_keypoints: usize,
    noise_sigma: f64,
    c1: usize,
    c2: usize,
    seed: u64,
) -> Result<(FeatureBundle, FeatureBundle)> {
    if c2 < 4 {
        return Err(Error::Shape(format!("planted fine codes need C2 >= 4, got {c2}")));
    }
    let (w, h) = (sample.width(), sample.height());
    let (wc, hc) = (w / COARSE_STRIDE, h / COARSE_STRIDE);
    let (wf, hf) = (w / FINE_STRIDE, h / FINE_STRIDE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut positions = Vec::with_capacity(n_keypoints);
    let mut targets = Vec::with_capacity(n_keypoints);
    for _ in 0..100 * n_keypoints.max(1) {
        if positions.len() == n_keypoints {
            break;
        }
        let p = uniform_point(&mut rng, w as f64, h as f64);
        if let Some(q) = sample.warp_a_to_b(&p) {
            positions.push(p);
            targets.push(q);
        }
    }
    if positions.len() < 8.min(n_keypoints).max(1) {
        return Err(Error::InsufficientOverlap(positions.len()));
    }

    let clean: Vec<Array1<f64>> = (0..hc * wc).map(|_| unit_vector(c1, &mut rng)).collect();
    let mut coarse_b = Array2::zeros((hc * wc, c1));
    for (j, u) in clean.iter().enumerate() {
        let noise: Array1<f64> = (0..c1)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                noise_sigma * z
            })
            .collect();
        let noisy = u + &noise;
        let n = noisy.dot(&noisy).sqrt();
        coarse_b.row_mut(j).assign(&(noisy / n));
    }
    let mut coarse_a = Array2::zeros((hc * wc, c1));
    for j in 0..hc * wc {
        coarse_a.row_mut(j).assign(&unit_vector(c1, &mut rng));
    }

    let s2 = PLANTED_FINE_SIGMA * PLANTED_FINE_SIGMA;
    let mut sparse_coarse = Array2::zeros((positions.len(), c1));
    let mut sparse_fine = Array2::zeros((positions.len(), c2));
    for (i, q) in targets.iter().enumerate() {
        sparse_coarse.row_mut(i).assign(&clean[cell_index(q, wc, hc)]);
        let (gx, gy) = (grid_coord(q.x, FINE_STRIDE), grid_coord(q.y, FINE_STRIDE));
        sparse_fine[(i, 0)] = -(gx * gx + gy * gy) / (2.0 * s2);
        sparse_fine[(i, 1)] = gx / s2;
        sparse_fine[(i, 2)] = gy / s2;
        sparse_fine[(i, 3)] = -1.0 / (2.0 * s2);
    }
    let mut fine_b = Array2::zeros((hf * wf, c2));
    for y in 0..hf {
        for x in 0..wf {
            let (fx, fy) = (x as f64, y as f64);
            let r = y * wf + x;
            fine_b[(r, 0)] = 1.0;
            fine_b[(r, 1)] = fx;
            fine_b[(r, 2)] = fy;
            fine_b[(r, 3)] = fx * fx + fy * fy;
        }
    }

    let n = positions.len();
    let bundle_a = FeatureBundle {
        width: w,
        height: h,
        coarse: coarse_a,
        fine: Array2::zeros((hf * wf, c2)),
        keypoints: keypoints_at(positions),
        sparse: Some(SparseOverride { coarse: sparse_coarse, fine: sparse_fine }),
    };
    let bundle_b = FeatureBundle {
        width: w,
        height: h,
        coarse: coarse_b,
        fine: fine_b,
        keypoints: KeypointSet {
            positions: (0..n).map(|_| uniform_point(&mut rng, w as f64, h as f64)).collect(),
            scores: vec![0.0; n],
            padded: vec![true; n],
        },
        sparse: None,
    };
    Ok((bundle_a, bundle_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Homography;
    use crate::scene::{gen_texture, render_pair_planar, sample_homography, TextureSpec};

    fn sample(scale: f64, seed: u64) -> SceneSample {
        let t = gen_texture(&TextureSpec::default(), 128, 128, seed).unwrap();
        let (h, _) = sample_homography(seed, [scale, scale], 0.2, 0.0, 128, 128).unwrap();
        render_pair_planar(&t, &h, 0.0, 0.0, seed).unwrap()
    }

    #[test]
    fn noiseless_planted_pairs_have_unit_cosine() {
        let s = sample(1.5, 2);
        let (a, b) = planted_descriptors(&s, 64, 0.0, 32, 8, 1).unwrap();
        let sp = a.sparse.as_ref().unwrap();
        for (i, p) in a.keypoints.positions.iter().enumerate() {
            let q = s.warp_a_to_b(p).unwrap();
            let j = cell_index(&q, 16, 16);
            let cos = sp.coarse.row(i).dot(&b.coarse.row(j));
            assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_cell_gives_shared_argmax() {
        let s = sample(3.0, 5);
        let (a, b) = planted_descriptors(&s, 128, 0.0, 32, 8, 2).unwrap();
        let sp = a.sparse.as_ref().unwrap();
        let scores = sp.coarse.dot(&b.coarse.t());
        let argmax = |i: usize| {
            let row = scores.row(i);
            (0..row.len()).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap()
        };
        let cells: Vec<usize> = a
            .keypoints
            .positions
            .iter()
            .map(|p| cell_index(&s.warp_a_to_b(p).unwrap(), 16, 16))
            .collect();
        let (i, j) = (0..cells.len())
            .flat_map(|i| (i + 1..cells.len()).map(move |j| (i, j)))
            .find(|&(i, j)| cells[i] == cells[j])
            .expect("scale 3 forces shared cells");
        assert_eq!(argmax(i), argmax(j));
        assert_eq!(argmax(i), cells[i]);
    }

    #[test]
    fn fine_codes_encode_negative_squared_distance() {
        let s = render_pair_planar(
            &gen_texture(&TextureSpec::default(), 64, 64, 0).unwrap(),
            &Homography::identity(),
            0.0,
            0.0,
            0,
        )
        .unwrap();
        let (a, b) = planted_descriptors(&s, 10, 0.0, 16, 4, 3).unwrap();
        let sp = a.sparse.as_ref().unwrap();
        let p = a.keypoints.positions[0];
        let g = Pt2::new(grid_coord(p.x, 2), grid_coord(p.y, 2));
        for (x, y) in [(3usize, 4usize), (10, 11), (0, 0)] {
            let c = sp.fine.row(0).dot(&b.fine.row(y * 32 + x));
            let expected = -((x as f64 - g.x).powi(2) + (y as f64 - g.y).powi(2)) / (2.0 * 0.25);
            assert!((c - expected).abs() < 1e-9);
        }
    }
}
