//! Acceptance suite. All criteria run sequentially inside one test so the
//! wall-clock budgets are measured without other tests competing for cores.
//! Each criterion prints one PASS/FAIL line; the test fails if any does.
//! Lines go straight to the stderr handle so they show without `--nocapture`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcm_cli::commands::{self, flipped_is_lowest};
use rcm_cli::CommonArgs;
use rcm_core::coarse::{
    dual_softmax_from, init_matcher, many_to_one_probs, score_with_dustbin, select_matches, Assignment, MatcherDims,
};
use rcm_core::eval::{count_gt_matches, eval_matching, median, EvalOptions, FeatureSource, MetricsReport};
use rcm_core::gradcheck::grad_check_all;
use rcm_core::model::{decide, MatchOptions, Model, SwitchMode};
use rcm_core::params::ParamStore;
use rcm_core::scene::{derive_seed, generate_scene, SceneConfig, SceneSample};
use rcm_core::switcher::gt_switch_label;
use rcm_core::tape::Tape;
use rcm_core::train::moving_average;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn report(id: usize, name: &'static str, passed: bool, detail: String) -> Outcome {
    say(&format!("[{}] {id}. {name}: {detail}", if passed { "PASS" } else { "FAIL" }));
    Outcome { id, name, passed, detail }
}

fn scenes(cfg: &SceneConfig, seed: u64, n: usize) -> Vec<SceneSample> {
    (0..n as u64).map(|i| generate_scene(cfg, seed, i).unwrap()).collect()
}

/// Monotone MMA and nested homography accuracies.
fn metrics_sane(r: &MetricsReport) -> bool {
    let mono = r.mma.windows(2).all(|w| w[0].value <= w[1].value && w[0].threshold < w[1].threshold);
    let nested = r.homography_accuracy.windows(2).all(|w| w[0].value <= w[1].value);
    let bounded = (0.0..=1.0).contains(&r.precision) && r.mma.iter().all(|p| (0.0..=1.0).contains(&p.value));
    mono && nested && bounded
}

// ── 1. Gradient suite ──

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let results = grad_check_all(11);
    let secs = t0.elapsed().as_secs_f64();
    for r in &results {
        say(&format!("       {:<18} max rel err {:.2e} over {} entries", r.scope.name(), r.max_rel_err, r.checked));
    }
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let ok = results.iter().all(|r| r.passed() && r.checked > 0) && secs < 30.0;
    report(1, "gradient suite", ok, format!("{} scopes, worst rel err {worst:.2e} (< 1e-4), {secs:.1}s (< 30s)", results.len()))
}

// ── 2. Conflict-freedom ──

/// Three keypoints whose descriptors all equal the descriptor of target cell 0.
fn conflict_freedom() -> Outcome {
    let c = 4;
    let mut store = ParamStore::new();
    init_matcher(&mut store, &MatcherDims { c1: c, layers: 0, pe_widths: [4, 4] }, 0.1, &mut ChaCha8Rng::seed_from_u64(0));
    let bin = store.id("coarse.bin");
    store.value_mut(bin).fill(0.0);
    let fd = Array2::from_shape_fn((c, c), |(i, j)| if i == j { 1.0 } else { 0.0 });
    let fs = Array2::from_shape_fn((3, c), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let (vs, vd) = (tape.constant(fs), tape.constant(fd));
    let scores = score_with_dustbin(&mut tape, &store, vs, vd);
    let p = many_to_one_probs(&mut tape, scores);
    let m2o = select_matches(tape.value(p), c, 0.2, Assignment::M2o);
    let o2o = select_matches(&dual_softmax_from(&tape, scores), c, 0.2, Assignment::O2o);
    let all_to_zero = m2o.entries.iter().all(|e| e.1 == 0);
    let ok = m2o.len() == 3 && all_to_zero && o2o.len() <= 1;
    report(2, "conflict-freedom", ok, format!("M2O emits {} (expect 3), dual-softmax MNN emits {} (expect <= 1)", m2o.len(), o2o.len()))
}

// ── 3. Ceiling experiment ──

/// Scenes keep the generator's orientation (A is the larger-scale view), so
/// "no switcher" already has the favourable source and the flipped
/// orientation differs from it on every scene.
fn ceiling() -> Outcome {
    let t0 = Instant::now();
    let cfg = SceneConfig { scale_range: [2.0, 4.0], swap_probability: 0.0, ..SceneConfig::default() };
    let counts: Vec<_> = (0..200u64)
        .map(|i| count_gt_matches(&generate_scene(&cfg, 3003, i).unwrap(), 128, derive_seed(3003, i)).unwrap())
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    let on = median(&mut counts.iter().map(|c| c.m2o_on as f64).collect::<Vec<_>>());
    let o2o = median(&mut counts.iter().map(|c| c.o2o_off as f64).collect::<Vec<_>>());
    let flipped_lowest = counts.iter().filter(|c| flipped_is_lowest(c)).count();
    let containment = counts.iter().all(|c| c.m2o_off >= c.o2o_off);
    let ok = on >= 2.0 * o2o && flipped_lowest == counts.len() && containment && secs < 120.0;
    report(
        3,
        "ground-truth ceiling",
        ok,
        format!(
            "median M2O+switcher {on} vs O2O {o2o} (ratio {:.2}, need >= 2), flipped lowest on {flipped_lowest}/200, {secs:.1}s",
            on / o2o
        ),
    )
}

// ── 4. Oracle end-to-end ──

fn oracle(model: &Model, reports: &mut Vec<MetricsReport>) -> Outcome {
    let t0 = Instant::now();
    let pairs = scenes(&SceneConfig::default(), 4004, 100);
    let opts = |noise| EvalOptions {
        matching: MatchOptions { bypass_attention: true, switch: SwitchMode::Off, ..MatchOptions::default() },
        features: FeatureSource::Planted { noise, keypoints: 128 },
        seed: 4,
        threads: 1,
    };
    let clean = eval_matching(model, &pairs, &opts(0.0)).unwrap();
    let noisy = eval_matching(model, &pairs, &opts(0.05)).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let under_1px = (clean.homography_accuracy[0].value * clean.homography_scenes as f64).round() as usize;
    let ok = clean.precision == 1.0 && under_1px >= 95 && noisy.precision >= 0.9 && secs < 120.0;
    let detail = format!(
        "sigma 0: precision {:.4}, corner error < 1px on {under_1px}/100; sigma 0.05: precision {:.4}; {secs:.1}s",
        clean.precision, noisy.precision
    );
    reports.push(clean);
    reports.push(noisy);
    report(4, "oracle end-to-end", ok, detail)
}

// ── 5. Toy training ──

const TOY_CONFIG: &str = r#"
seed = 5
[train]
steps = 2000
batch = 4
learning_rate = 1e-3
pool_size = 500
seed = 5
[train.scene]
width = 128
height = 128
swap_probability = 0.5
[train.model]
c1 = 64
l1 = 3
"#;

fn toy_training(dir: &Path, reports: &mut Vec<MetricsReport>) -> (Outcome, Option<Model>) {
    let cfg_path = dir.join("toy.toml");
    fs::write(&cfg_path, TOY_CONFIG).unwrap();
    let out = dir.join("toy");
    let t0 = Instant::now();
    let args = CommonArgs { config: Some(cfg_path), out: Some(out.clone()), seed: None };
    let trained = match commands::train(&args) {
        Ok(t) => t,
        Err(e) => return (report(5, "toy training", false, format!("training failed: {e}")), None),
    };
    let secs = t0.elapsed().as_secs_f64();
    // Read the curve back from the written loss file.
    let csv = fs::read_to_string(&trained.loss).unwrap();
    let coarse: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    let ma = moving_average(&coarse, 50);
    let (start, end) = (ma[49], *ma.last().unwrap());
    let drop = 1.0 - end / start;
    let model = commands::load_model(&trained.weights).unwrap();
    let easy = SceneConfig { scale_range: [1.0, 1.5], rotation: 15f64.to_radians(), ..SceneConfig::default() };
    let held_out = scenes(&easy, 5005, 50);
    let r = eval_matching(&model, &held_out, &EvalOptions { seed: 5, ..EvalOptions::default() }).unwrap();
    let acc5 = r.homography_accuracy[2].value;
    let ok = coarse.len() == 2000 && drop >= 0.5 && r.precision >= 0.8 && acc5 >= 0.8 && secs <= 900.0;
    let detail = format!(
        "coarse MA {start:.3} -> {end:.3} (drop {:.0}%, need >= 50%), precision {:.3} (>= 0.8), H-acc@5 {acc5:.2} (>= 0.8), {:.1} matches/pair, train {secs:.0}s (<= 900s)",
        100.0 * drop,
        r.precision,
        r.mean_matches
    );
    reports.push(r);
    (report(5, "toy training", ok, detail), Some(model))
}

// ── 6. Switcher ──

fn switcher(model: Option<&Model>) -> Outcome {
    let cfg = SceneConfig { scale_range: [1.5, 3.0], swap_probability: 0.0, ..SceneConfig::default() };
    let mut flips = 0;
    for i in 0..1000u64 {
        let s = generate_scene(&cfg, 6006, i).unwrap();
        let seed = derive_seed(6, i);
        if gt_switch_label(&s, seed).unwrap() != gt_switch_label(&s.swapped(), seed).unwrap() {
            flips += 1;
        }
    }
    let Some(model) = model else {
        return report(6, "view switcher", false, format!("no trained model; label flips {flips}/1000"));
    };
    let held_out = scenes(&SceneConfig { swap_probability: 0.5, ..cfg.clone() }, 6007, 100);
    let mut right = 0;
    let mut small_first = 0;
    let mut small_first_total = 0;
    for (i, s) in held_out.iter().enumerate() {
        let seed = derive_seed(7, i as u64);
        let (a, b) = (model.bundle(&s.image_a, seed).unwrap(), model.bundle(&s.image_b, seed + 1).unwrap());
        let d = decide(model, &a, &b, SwitchMode::Auto).unwrap();
        let label = gt_switch_label(s, seed).unwrap();
        right += usize::from(d.switched == label);
        if label {
            small_first_total += 1;
            small_first += usize::from(d.p_switch > 0.5);
        }
    }
    let acc = right as f64 / held_out.len() as f64;
    let ok = acc >= 0.9 && flips == 1000;
    report(
        6,
        "view switcher",
        ok,
        format!(
            "held-out accuracy {acc:.2} on scale >= 1.5 pairs (>= 0.9), p > 1/2 on {small_first}/{small_first_total} small-scale-first pairs, label flips {flips}/1000"
        ),
    )
}

// ── 7. Determinism ──

fn rcm(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_rcm"))
        .args(args)
        .env_remove("RCM_OUT")
        .env("RCM_THREADS", "1")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (PathBuf::from(p.file_name().unwrap()), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism(dir: &Path, weights: Option<&Path>) -> (Outcome, Vec<MetricsReport>) {
    let Some(weights) = weights else {
        return (report(7, "determinism", false, "no trained weights".into()), Vec::new());
    };
    let w = weights.to_str().unwrap();
    let cfg = dir.join("det.toml");
    fs::write(&cfg, "seed = 9\ncount = 4\n[scene]\nscale_range = [1.0, 2.5]\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let scenes_dir = dir.join("det_scenes");
    let manifest = scenes_dir.join("manifest.json");
    let m = manifest.to_str().unwrap();
    let mut ok = rcm(&["scene-gen", "--config", cfg, "--out", scenes_dir.to_str().unwrap()]);
    let mut runs = Vec::new();
    for run in 0..2 {
        let mo = dir.join(format!("det_match_{run}"));
        let eo = dir.join(format!("det_eval_{run}"));
        ok &= rcm(&["match", "--config", cfg, "--weights", w, "--manifest", m, "--out", mo.to_str().unwrap()]);
        ok &= rcm(&["eval", "--config", cfg, "--weights", w, "--manifest", m, "--out", eo.to_str().unwrap()]);
        runs.push((mo, eo));
    }
    if !ok {
        return (report(7, "determinism", false, "a CLI run failed".into()), Vec::new());
    }
    let match_same = dir_bytes(&runs[0].0) == dir_bytes(&runs[1].0);
    let eval_same = dir_bytes(&runs[0].1) == dir_bytes(&runs[1].1);
    let n_files = dir_bytes(&runs[0].0).len() + dir_bytes(&runs[0].1).len();
    let metrics: MetricsReport =
        serde_json::from_str(&fs::read_to_string(runs[0].1.join("metrics.json")).unwrap()).unwrap();
    let outcome = report(
        7,
        "determinism",
        match_same && eval_same,
        format!("match outputs identical: {match_same}, eval outputs identical: {eval_same} ({n_files} files per run)"),
    );
    (outcome, vec![metrics])
}

// ── 8. Metric sanity ──

fn metric_sanity(reports: &[MetricsReport]) -> Outcome {
    let sane = reports.iter().filter(|r| metrics_sane(r)).count();
    report(
        8,
        "metric sanity",
        !reports.is_empty() && sane == reports.len(),
        format!("{sane}/{} reports have monotone MMA and acc@1 <= acc@3 <= acc@5", reports.len()),
    )
}

#[test]
fn acceptance_suite() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    let mut outcomes = vec![gradient_suite(), conflict_freedom(), ceiling()];
    let fresh = Model::new(rcm_core::model::ModelConfig::default(), 4).unwrap();
    outcomes.push(oracle(&fresh, &mut reports));
    let (toy, model) = toy_training(dir.path(), &mut reports);
    outcomes.push(toy);
    outcomes.push(switcher(model.as_ref()));
    let weights = model.as_ref().map(|_| dir.path().join("toy/weights.bin"));
    let (det, det_reports) = determinism(dir.path(), weights.as_deref());
    outcomes.push(det);
    reports.extend(det_reports);
    outcomes.push(metric_sanity(&reports));

    say("\nacceptance summary:");
    for o in &outcomes {
        say(&format!("  {} {:>2} {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.name));
    }
    let failed: Vec<String> =
        outcomes.iter().filter(|o| !o.passed).map(|o| format!("{} {}: {}", o.id, o.name, o.detail)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
