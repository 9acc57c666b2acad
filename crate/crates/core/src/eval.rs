//! Evaluation: match correctness by ground-truth reprojection, precision,
//! MMA curves, homography accuracy, ground-truth match ceilings and the
//! assignment/switcher ablation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coarse::{gt_coarse, Assignment};
use crate::error::Result;
use crate::extract::{keypoints_at, planted_descriptors, COARSE_STRIDE};
use crate::geometry::{mean_corner_error, ransac_homography, uniform_point, Pt2, RansacConfig};
use crate::model::{match_bundles, MatchOptions, Model, PointMatch, SwitchMode};
use crate::scene::{derive_seed, GroundTruth, SceneSample};
use crate::switcher::gt_switch_label;

/// Reprojection thresholds of the MMA curve, in pixels.
pub const MMA_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
/// Threshold at which a match counts as correct for precision.
pub const PRECISION_THRESHOLD: f64 = 3.0;
/// Corner-error thresholds of the homography accuracy.
pub const HOMOGRAPHY_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

/// Distance between each match's B point and the ground-truth reprojection of
/// its A point; infinite when A has no correspondence.
pub fn reprojection_errors(sample: &SceneSample, matches: &[PointMatch]) -> Vec<f64> {
    matches
        .iter()
        .map(|m| match &sample.truth {
            // planar truth extends beyond image B, so measure against the raw map
            GroundTruth::Planar(h) => h.apply(&m.a).map_or(f64::INFINITY, |q| (q - m.b).norm()),
            t => t.warp_a_to_b(&m.a, sample.width(), sample.height()).map_or(f64::INFINITY, |q| (q - m.b).norm()),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchLog {
    pub pair_id: usize,
    pub p_switch: f64,
    pub switched: bool,
    pub gt_label: bool,
}

/// Per-scene raw results.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMetrics {
    pub num_matches: usize,
    /// Matches within each MMA threshold.
    pub correct: [usize; 10],
    /// Mean corner error of the RANSAC homography (planar scenes only; infinite on failure).
    pub corner_error: Option<f64>,
    pub switch: SwitchLog,
}

pub fn scene_metrics(sample: &SceneSample, matches: &[PointMatch], switch: SwitchLog, seed: u64) -> SceneMetrics {
    let errs = reprojection_errors(sample, matches);
    let mut correct = [0; 10];
    for (k, &t) in MMA_THRESHOLDS.iter().enumerate() {
        correct[k] = errs.iter().filter(|&&e| e <= t).count();
    }
    let corner_error = match &sample.truth {
        GroundTruth::Planar(h) => {
            let pairs: Vec<_> = matches.iter().map(|m| (m.a, m.b)).collect();
            let rc = RansacConfig { seed, ..RansacConfig::default() };
            Some(match ransac_homography(&pairs, &rc) {
                Ok((est, _)) => mean_corner_error(&est, h, sample.width(), sample.height()),
                Err(_) => f64::INFINITY,
            })
        }
        GroundTruth::Rigid { .. } => None,
    };
    SceneMetrics { num_matches: matches.len(), correct, corner_error, switch }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub value: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("threshold,value\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.threshold, p.value));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_scenes: usize,
    pub num_matches: usize,
    pub mean_matches: f64,
    /// Fraction of all emitted matches within `precision_threshold` (0 with no matches).
    pub precision: f64,
    pub precision_threshold: f64,
    /// Mean over scenes of the per-scene correct fraction (0 for scenes without matches).
    pub mma: Vec<CurvePoint>,
    /// Fraction of planar scenes whose corner error is below each threshold.
    pub homography_accuracy: Vec<CurvePoint>,
    pub homography_scenes: usize,
    pub switch_accuracy: f64,
    pub switch_log: Vec<SwitchLog>,
}

pub fn aggregate(scenes: &[SceneMetrics]) -> MetricsReport {
    let n = scenes.len();
    let total: usize = scenes.iter().map(|s| s.num_matches).sum();
    let k3 = MMA_THRESHOLDS.iter().position(|&t| t == PRECISION_THRESHOLD).expect("3 px threshold");
    let correct3: usize = scenes.iter().map(|s| s.correct[k3]).sum();
    let frac = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mma = MMA_THRESHOLDS
        .iter()
        .enumerate()
        .map(|(k, &t)| CurvePoint {
            threshold: t,
            value: frac(1, n) * scenes.iter().map(|s| frac(s.correct[k], s.num_matches)).sum::<f64>(),
        })
        .collect();
    let corners: Vec<f64> = scenes.iter().filter_map(|s| s.corner_error).collect();
    let homography_accuracy = HOMOGRAPHY_THRESHOLDS
        .iter()
        .map(|&t| CurvePoint { threshold: t, value: frac(corners.iter().filter(|&&e| e < t).count(), corners.len()) })
        .collect();
    let switch_log: Vec<SwitchLog> = scenes.iter().map(|s| s.switch).collect();
    let right = switch_log.iter().filter(|l| l.switched == l.gt_label).count();
    MetricsReport {
        num_scenes: n,
        num_matches: total,
        mean_matches: frac(total, n),
        precision: frac(correct3, total),
        precision_threshold: PRECISION_THRESHOLD,
        mma,
        homography_accuracy,
        homography_scenes: corners.len(),
        switch_accuracy: frac(right, n),
        switch_log,
    }
}

/// Where the matcher's descriptors come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureSource {
    /// The model's extractor and detector.
    Learned,
    /// Descriptors planted from ground truth, with per-component noise.
    Planted { noise: f64, keypoints: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub matching: MatchOptions,
    pub features: FeatureSource,
    pub seed: u64,
    /// Worker threads over scenes; results are reduced in scene order.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { matching: MatchOptions::default(), features: FeatureSource::Learned, seed: 0, threads: 1 }
    }
}

/// Matches one scene and returns its final (A, B) matches and switch record.
pub fn run_scene(model: &Model, sample: &SceneSample, pair_id: usize, opts: &EvalOptions) -> Result<(Vec<PointMatch>, SwitchLog)> {
    let seed = derive_seed(opts.seed, pair_id as u64);
    let (a, b) = match opts.features {
        FeatureSource::Learned => (model.bundle(&sample.image_a, seed)?, model.bundle(&sample.image_b, seed ^ 1)?),
        FeatureSource::Planted { noise, keypoints } => {
            planted_descriptors(sample, keypoints, noise, model.cfg.c1, model.cfg.c2, seed)?
        }
    };
    let out = match_bundles(model, &a, &b, &opts.matching)?;
    let gt_label = gt_switch_label(sample, seed)?;
    let log = SwitchLog { pair_id, p_switch: out.decision.p_switch, switched: out.decision.switched, gt_label };
    Ok((out.matches, log))
}

fn eval_scene(model: &Model, scenes: &[SceneSample], i: usize, opts: &EvalOptions) -> Result<SceneMetrics> {
    let (matches, log) = run_scene(model, &scenes[i], i, opts)?;
    Ok(scene_metrics(&scenes[i], &matches, log, derive_seed(opts.seed ^ 0x5eed, i as u64)))
}

pub fn eval_matching(model: &Model, scenes: &[SceneSample], opts: &EvalOptions) -> Result<MetricsReport> {
    let threads = opts.threads.clamp(1, scenes.len().max(1));
    let per: Vec<SceneMetrics> = if threads == 1 {
        (0..scenes.len()).map(|i| eval_scene(model, scenes, i, opts)).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<SceneMetrics>>> = (0..scenes.len()).map(|_| None).collect();
        std::thread::scope(|sc| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    sc.spawn(move || {
                        (t..scenes.len()).step_by(threads).map(|i| (i, eval_scene(model, scenes, i, opts))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every scene evaluated")).collect::<Result<_>>()?
    };
    Ok(aggregate(&per))
}

// ── Ground-truth match ceilings ──

/// Maximum bipartite matching size by augmenting paths (Kuhn's algorithm).
/// `adj[l]` lists the right vertices adjacent to left vertex `l`.
pub fn max_bipartite_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn augment(l: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &r in &adj[l] {
            if seen[r] {
                continue;
            }
            seen[r] = true;
            if owner[r].is_none_or(|o| augment(o, adj, seen, owner)) {
                owner[r] = Some(l);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    let mut size = 0;
    for l in 0..adj.len() {
        let mut seen = vec![false; n_right];
        if augment(l, adj, &mut seen, &mut owner) {
            size += 1;
        }
    }
    size
}

/// Ground-truth coarse match counts of one scene under the four configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtCounts {
    pub o2o_off: usize,
    pub m2o_off: usize,
    pub m2o_on: usize,
    pub m2o_flipped: usize,
}

/// `n` keypoints spread like a detector with suppression: each lies uniformly
/// inside a distinct coarse cell (cells drawn without replacement, reused
/// only once all are taken).
pub fn spread_keypoints(w: usize, h: usize, n: usize, seed: u64) -> Vec<Pt2> {
    let s = COARSE_STRIDE;
    let cells = (w / s) * (h / s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        if order.is_empty() {
            order = (0..cells).collect();
            order.shuffle(&mut rng);
        }
        let c = order.pop().expect("refilled");
        let off = uniform_point(&mut rng, s as f64, s as f64);
        out.push(Pt2::new(((c % (w / s)) * s) as f64 + off.x, ((c / (w / s)) * s) as f64 + off.y));
    }
    out
}

fn orientation_counts(truth: &GroundTruth, w: usize, h: usize, n: usize, seed: u64) -> (usize, usize) {
    let kps = keypoints_at(spread_keypoints(w, h, n, seed));
    let gt = gt_coarse(truth, &kps, w, h);
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in &gt.m_gt {
        adj[i].push(j);
    }
    let cells = (w / COARSE_STRIDE) * (h / COARSE_STRIDE);
    (max_bipartite_matching(&adj, cells), gt.m_gt.len())
}

/// Counts achievable coarse matches for `n` spread source keypoints.
/// "off" keeps A as the source, "on" makes the larger-scale view the source
/// (ideal switcher) and "flipped" does the opposite.
pub fn count_gt_matches(sample: &SceneSample, n: usize, seed: u64) -> Result<GtCounts> {
    let (w, h) = (sample.width(), sample.height());
    let label = gt_switch_label(sample, seed)?;
    let forward = sample.truth.clone();
    let reversed = sample.truth.swapped();
    let (o2o_a, m2o_a) = orientation_counts(&forward, w, h, n, derive_seed(seed, 0));
    let (_, m2o_b) = orientation_counts(&reversed, w, h, n, derive_seed(seed, 1));
    let (on, flipped) = if label { (m2o_b, m2o_a) } else { (m2o_a, m2o_b) };
    Ok(GtCounts { o2o_off: o2o_a, m2o_off: m2o_a, m2o_on: on, m2o_flipped: flipped })
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

// ── Ablation ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub num_matches: usize,
    pub mean_matches: f64,
    pub precision: f64,
}

/// Evaluates the one-to-one baseline, many-to-one, and many-to-one with the switcher.
pub fn ablate(model: &Model, scenes: &[SceneSample], base: &EvalOptions) -> Result<Vec<AblationRow>> {
    if scenes.is_empty() {
        return Ok(Vec::new());
    }
    let configs = [
        ("o2o", Assignment::O2o, SwitchMode::Off),
        ("m2o", Assignment::M2o, SwitchMode::Off),
        ("m2o+switcher", Assignment::M2o, SwitchMode::Auto),
    ];
    configs
        .iter()
        .map(|&(name, assignment, switch)| {
            let opts = EvalOptions { matching: MatchOptions { assignment, switch, ..base.matching }, ..*base };
            let r = eval_matching(model, scenes, &opts)?;
            Ok(AblationRow {
                config: name.to_string(),
                num_matches: r.num_matches,
                mean_matches: r.mean_matches,
                precision: r.precision,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,num_matches,mean_matches,precision\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.config, r.num_matches, r.mean_matches, r.precision));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Homography;
    use crate::scene::{generate_scene, SceneConfig};
    use proptest::prelude::*;

    fn log() -> SwitchLog {
        SwitchLog { pair_id: 0, p_switch: 0.0, switched: false, gt_label: false }
    }

    fn planar(scale: [f64; 2], seed: u64) -> SceneSample {
        generate_scene(&SceneConfig { scale_range: scale, ..SceneConfig::default() }, seed, 0).unwrap()
    }

    fn perfect_matches(s: &SceneSample, n: usize) -> Vec<PointMatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut out = Vec::new();
        while out.len() < n {
            let a = uniform_point(&mut rng, 128.0, 128.0);
            if let Some(b) = s.warp_a_to_b(&a) {
                out.push(PointMatch { a, b, confidence: 1.0 });
            }
        }
        out
    }

    #[test]
    fn perfect_matches_score_full_marks() {
        let s = planar([1.0, 2.0], 3);
        let m = scene_metrics(&s, &perfect_matches(&s, 50), log(), 0);
        assert!(m.corner_error.unwrap() < 1e-6);
        let r = aggregate(&[m]);
        assert_eq!(r.precision, 1.0);
        assert!(r.homography_accuracy.iter().all(|p| p.value == 1.0));
        assert!(r.mma.iter().all(|p| p.value == 1.0));
    }

    #[test]
    fn empty_matches_fail_everything() {
        let s = planar([1.0, 2.0], 3);
        let r = aggregate(&[scene_metrics(&s, &[], log(), 0)]);
        assert_eq!(r.precision, 0.0);
        assert!(r.homography_accuracy.iter().all(|p| p.value == 0.0));
    }

    #[test]
    fn errors_measured_against_truth() {
        let s = SceneSample { truth: GroundTruth::Planar(Homography::translation(2.0, 0.0)), ..planar([1.0, 1.0], 0) };
        let m = [PointMatch { a: Pt2::new(10.0, 10.0), b: Pt2::new(12.0, 13.0), confidence: 1.0 }];
        assert!((reprojection_errors(&s, &m)[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn spread_keypoints_use_distinct_cells() {
        let pts = spread_keypoints(64, 64, 64, 3);
        let mut cells: Vec<usize> = pts.iter().map(|p| crate::extract::cell_index(p, 8, 8)).collect();
        cells.sort();
        cells.dedup();
        assert_eq!(cells.len(), 64);
        assert!(pts.iter().all(|p| crate::geometry::in_bounds(p, 64, 64)));
    }

    #[test]
    fn kuhn_matches_known_graphs() {
        assert_eq!(max_bipartite_matching(&[vec![0, 1], vec![0], vec![1]], 2), 2);
        // requires re-routing: greedy would take (0,0) and strand 1
        assert_eq!(max_bipartite_matching(&[vec![0, 1], vec![0]], 2), 2);
        assert_eq!(max_bipartite_matching(&[], 4), 0);
    }

    #[test]
    fn identity_scale_counts_are_close() {
        let cfg = SceneConfig { scale_range: [1.0, 1.0], rotation: 0.0, perspective: 0.0, ..SceneConfig::default() };
        let s = generate_scene(&cfg, 2, 0).unwrap();
        let c = count_gt_matches(&s, 128, 0).unwrap();
        let ratio = c.m2o_off as f64 / c.o2o_off as f64;
        assert!((1.0..=1.1).contains(&ratio), "{c:?}");
    }

    #[test]
    fn scale_two_ceiling_favours_switching() {
        let s = planar([2.5, 2.5], 5);
        let c = count_gt_matches(&s, 256, 1).unwrap();
        assert!(c.m2o_on as f64 >= 2.0 * c.o2o_off as f64, "{c:?}");
        assert!(c.m2o_flipped < c.m2o_on, "{c:?}");
    }

    #[test]
    fn threaded_eval_matches_sequential() {
        let model = Model::new(crate::model::ModelConfig { c1: 8, c2: 4, l1: 1, keypoints: 16, ..Default::default() }, 0).unwrap();
        let scenes: Vec<_> = (0..3).map(|i| planar([1.0, 1.5], i)).collect();
        let one = eval_matching(&model, &scenes, &EvalOptions::default()).unwrap();
        let three = eval_matching(&model, &scenes, &EvalOptions { threads: 3, ..EvalOptions::default() }).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn ablation_of_nothing_is_empty() {
        let model = Model::new(crate::model::ModelConfig { c1: 8, c2: 4, l1: 1, ..Default::default() }, 0).unwrap();
        assert!(ablate(&model, &[], &EvalOptions::default()).unwrap().is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn m2o_bounds_o2o_and_kuhn_equals_distinct_cells(seed in 0u64..5000) {
            let s = planar([1.0, 3.0], seed);
            let c = count_gt_matches(&s, 128, seed).unwrap();
            prop_assert!(c.m2o_off >= c.o2o_off);
            // oracle: with one cell per keypoint, a maximum matching covers each distinct cell once
            let kps = keypoints_at(spread_keypoints(128, 128, 128, derive_seed(seed, 0)));
            let gt = gt_coarse(&s.truth, &kps, 128, 128);
            let mut cells: Vec<usize> = gt.m_gt.iter().map(|e| e.1).collect();
            cells.sort();
            cells.dedup();
            prop_assert_eq!(c.o2o_off, cells.len());
        }

        #[test]
        fn curves_are_monotone(seed in 0u64..1000, noise in 0.0f64..6.0) {
            let s = planar([1.0, 2.0], seed % 7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = perfect_matches(&s, 30);
            for p in &mut m {
                p.b += nalgebra::Vector2::new(noise * rand::Rng::random::<f64>(&mut rng), 0.0);
            }
            let r = aggregate(&[scene_metrics(&s, &m, log(), seed)]);
            prop_assert!(r.mma.windows(2).all(|w| w[0].value <= w[1].value));
            prop_assert!(r.homography_accuracy.windows(2).all(|w| w[0].value <= w[1].value));
        }
    }
}
