//! Keypoint detection on a dense score map: non-maximum suppression,
//! thresholding, and padding to a fixed budget with random positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Pt2;

/// Fixed-size keypoint list; entries past the detected ones are random padding.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub positions: Vec<Pt2>,
    pub scores: Vec<f64>,
    pub padded: Vec<bool>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_detected(&self) -> usize {
        self.padded.iter().filter(|&&p| !p).count()
    }

    /// CSV with header `x,y,score,padded`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,score,padded\n");
        for i in 0..self.len() {
            let p = self.positions[i];
            out.push_str(&format!("{},{},{},{}\n", p.x, p.y, self.scores[i], self.padded[i] as u8));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub nms_radius: usize,
    pub threshold: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { nms_radius: 4, threshold: 0.005 }
    }
}

impl DetectConfig {
    /// Denser setting used for indoor-style imagery.
    pub fn indoor() -> Self {
        Self { nms_radius: 1, threshold: 0.001 }
    }
}

/// Strict local maxima of `scores` (a `width x height` row-major grid) over
/// the `(2r+1)^2` window, at or above `threshold`, strongest first, truncated
/// to `budget` and padded with uniform random positions (score 0).
///
/// Equal scores inside a window resolve to the row-major-first pixel, and a
/// pixel with an equal 4-neighbor is treated as part of a plateau and never
/// selected, so flat regions yield no keypoints.
pub fn detect_keypoints(
    scores: &[f64],
    width: usize,
    height: usize,
    cfg: &DetectConfig,
    budget: usize,
    seed: u64,
) -> KeypointSet {
    assert_eq!(scores.len(), width * height, "score map size");
    assert!(budget >= 1, "keypoint budget must be positive");
    let r = cfg.nms_radius as isize;
    let (w, h) = (width as isize, height as isize);
    let at = |x: isize, y: isize| scores[(y * w + x) as usize];
    let mut found: Vec<(f64, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let s = at(x, y);
            if !(s >= cfg.threshold) {
                continue;
            }
            let plateau = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dx, dy)| (0..w).contains(&(x + dx)) && (0..h).contains(&(y + dy)) && at(x + dx, y + dy) == s);
            if plateau {
                continue;
            }
            let mut is_max = true;
            'win: for qy in (y - r).max(0)..=(y + r).min(h - 1) {
                for qx in (x - r).max(0)..=(x + r).min(w - 1) {
                    if qx == x && qy == y {
                        continue;
                    }
                    let q = at(qx, qy);
                    let before = (qy, qx) < (y, x);
                    if q > s || (q == s && before) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                found.push((s, (y * w + x) as usize));
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    found.truncate(budget);

    let mut set = KeypointSet { positions: Vec::with_capacity(budget), scores: Vec::new(), padded: Vec::new() };
    for &(s, idx) in &found {
        set.positions.push(Pt2::new((idx % width) as f64, (idx / width) as f64));
        set.scores.push(s);
        set.padded.push(false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while set.positions.len() < budget {
        set.positions.push(crate::geometry::uniform_point(&mut rng, width as f64, height as f64));
        set.scores.push(0.0);
        set.padded.push(true);
    }
    set
}

/// Keypoints at arbitrary positions, all marked as detected with score 1.
pub fn keypoints_at(positions: Vec<Pt2>) -> KeypointSet {
    let n = positions.len();
    KeypointSet { positions, scores: vec![1.0; n], padded: vec![false; n] }
}
