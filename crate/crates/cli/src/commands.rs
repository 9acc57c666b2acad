//! Command implementations. Each returns what it wrote so tests can drive
//! them without spawning the binary.

use std::path::{Path, PathBuf};

use rcm_core::eval::{
    ablate as run_ablation, ablation_csv, count_gt_matches, curve_csv, eval_matching, median, AblationRow, GtCounts,
    MetricsReport,
};
use rcm_core::gradcheck::{grad_check as check_scope, GradCheckResult, Scope};
use rcm_core::io::{load_scenes, read_image_grid, read_manifest, read_pgm, write_scenes, Manifest};
use rcm_core::model::{decide, match_bundles, MatchOutput, Model, SwitchMode};
use rcm_core::scene::{derive_seed, generate_scene, Image, SceneSample};
use rcm_core::train::{loss_csv, train as run_training, LossRecord};
use serde::Serialize;

use crate::config::{EvalSection, RunConfig};
use crate::error::{CliError, CliResult};
use crate::prov::{hash_file, Stamp};
use crate::{CommonArgs, EvalArgs, GradCheckArgs, GtCountArgs, MatchArgs, MatchFlags};

pub const MATCH_FORMAT: &str = "rcm-matches/1";

/// Loads the config, then applies the environment, then explicit flags.
pub fn resolve(common: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    cfg.apply_env()?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_flags(section: &mut EvalSection, flags: &MatchFlags) {
    if let Some(s) = flags.force_switch {
        section.switch = s.into();
    }
    if let Some(a) = flags.assignment {
        section.assignment = a.into();
    }
    section.bypass_attention |= flags.bypass_attention;
}

pub fn sidecar_for(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn load_model(weights: &Path) -> CliResult<Model> {
    let sidecar = sidecar_for(weights);
    for p in [weights, sidecar.as_path()] {
        std::fs::metadata(p).map_err(|e| CliError::io(p, e))?;
    }
    Ok(Model::load(weights, &sidecar)?)
}

pub fn read_image(path: &Path) -> CliResult<Image> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    Ok(if is_pgm { read_pgm(path)? } else { read_image_grid(path)? })
}

pub fn load_manifest(path: &Path) -> CliResult<(Manifest, Vec<SceneSample>)> {
    let manifest = read_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let scenes = load_scenes(dir, &manifest)?;
    Ok((manifest, scenes))
}

// ── scene-gen ──

pub fn scene_gen(args: &CommonArgs) -> CliResult<Manifest> {
    let cfg = resolve(args)?;
    let scenes = (0..cfg.count as u64)
        .map(|i| generate_scene(&cfg.scene, cfg.seed, i))
        .collect::<rcm_core::Result<Vec<_>>>()?;
    let manifest = write_scenes(&cfg.out, cfg.seed, &scenes)?;
    let stamp = Stamp::new("scene-gen", cfg.seed, &(cfg.seed, cfg.count, &cfg.scene));
    for e in &manifest.scenes {
        for f in [&e.image_a, &e.image_b] {
            stamp.attach(&cfg.out.join(f), "f32-grid")?;
        }
        for f in [&e.preview_a, &e.preview_b] {
            stamp.attach(&cfg.out.join(f), "pgm")?;
        }
        if let Some(r) = &e.rigid {
            for f in [&r.depth_a, &r.depth_b] {
                stamp.attach(&cfg.out.join(f), "f32-grid")?;
            }
        }
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    stamp.write(&cfg.out.join("manifest.json"), "manifest-json", json.as_bytes())?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), cfg.out.display());
    Ok(manifest)
}

// ── train ──

pub struct TrainOutputs {
    pub weights: PathBuf,
    pub loss: PathBuf,
    pub curve: Vec<LossRecord>,
}

pub fn train(args: &CommonArgs) -> CliResult<TrainOutputs> {
    let mut cfg = resolve(args)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let tc = &cfg.train;
    let stamp = Stamp::new("train", tc.seed, tc);
    let mut model = Model::new(tc.model.clone(), tc.seed)?;
    let mut seen = Vec::new();
    let every = (tc.steps / 20).max(1);
    let result = run_training(&mut model, tc, |r| {
        if r.step % every == 0 || r.step + 1 == tc.steps {
            eprintln!("step {:>5}  total {:.4}  coarse {:.4}", r.step, r.total, r.coarse);
        }
        seen.push(*r);
    });
    let loss = cfg.out.join("loss.csv");
    match result {
        Ok(curve) => {
            stamp.write(&loss, "loss-csv", loss_csv(&curve).as_bytes())?;
            let weights = cfg.out.join("weights.bin");
            let sidecar = sidecar_for(&weights);
            std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
            model.save(&weights, &sidecar)?;
            stamp.attach(&weights, "rcm-weights-blob")?;
            stamp.attach(&sidecar, "rcm-weights-sidecar")?;
            println!("trained {} steps; weights at {}", curve.len(), weights.display());
            Ok(TrainOutputs { weights, loss, curve })
        }
        Err(e) => {
            stamp.write(&loss, "loss-csv", loss_csv(&seen).as_bytes())?;
            Err(e.into())
        }
    }
}

// ── match ──

#[derive(Debug, Serialize)]
struct MatchHeader {
    format: &'static str,
    /// Switcher probability, computed even when the decision is forced.
    p_switch: f64,
    switched: bool,
    orientation: rcm_core::switcher::Orientation,
    num_keypoints: usize,
    num_detected: usize,
    num_matches: usize,
}

/// Header line plus one `x1 y1 x2 y2 conf` line per match, in (A, B) order.
pub fn match_file(out: &MatchOutput, p_switch: f64) -> String {
    let header = MatchHeader {
        format: MATCH_FORMAT,
        p_switch,
        switched: out.decision.switched,
        orientation: out.orientation,
        num_keypoints: out.num_keypoints,
        num_detected: out.num_detected,
        num_matches: out.matches.len(),
    };
    let mut s = serde_json::to_string(&header).expect("header serializes");
    s.push('\n');
    for m in &out.matches {
        s.push_str(&format!("{} {} {} {} {}\n", m.a.x, m.a.y, m.b.x, m.b.y, m.confidence));
    }
    s
}

/// Matches one pair and renders the match file. Keypoint padding seeds
/// follow [`rcm_core::model::match_images`].
pub fn match_pair(model: &Model, a: &Image, b: &Image, section: &EvalSection, seed: u64) -> CliResult<String> {
    let ba = model.bundle(a, seed)?;
    let bb = model.bundle(b, seed.wrapping_add(1))?;
    let score = decide(model, &ba, &bb, SwitchMode::Auto)?;
    let out = match_bundles(model, &ba, &bb, &section.match_options())?;
    Ok(match_file(&out, score.p_switch))
}

pub fn match_cmd(args: &MatchArgs) -> CliResult<()> {
    let mut cfg = resolve(&args.common)?;
    apply_flags(&mut cfg.eval, &args.flags);
    let model = load_model(&args.weights)?;
    let weights_hash = hash_file(&args.weights)?;
    match (&args.a, &args.b, &args.manifest) {
        (Some(pa), Some(pb), _) => {
            let params = (&cfg.eval, cfg.seed, &weights_hash, hash_file(pa)?, hash_file(pb)?);
            let stamp = Stamp::new("match", cfg.seed, &params);
            let text = match_pair(&model, &read_image(pa)?, &read_image(pb)?, &cfg.eval, cfg.seed)?;
            let out = if cfg.out.extension().is_some() { cfg.out.clone() } else { cfg.out.join("matches.txt") };
            stamp.write(&out, MATCH_FORMAT, text.as_bytes())?;
            println!("wrote {}", out.display());
        }
        (_, _, Some(m)) => {
            let (_, scenes) = load_manifest(m)?;
            let stamp = Stamp::new("match", cfg.seed, &(&cfg.eval, cfg.seed, &weights_hash, hash_file(m)?));
            for (i, s) in scenes.iter().enumerate() {
                let text = match_pair(&model, &s.image_a, &s.image_b, &cfg.eval, derive_seed(cfg.seed, i as u64))?;
                stamp.write(&cfg.out.join(format!("scene_{i:05}.matches")), MATCH_FORMAT, text.as_bytes())?;
            }
            println!("matched {} scenes into {}", scenes.len(), cfg.out.display());
        }
        _ => return Err(CliError::Config("match needs --a and --b, or --manifest".into())),
    }
    Ok(())
}

// ── eval / ablate ──

struct EvalSetup {
    cfg: RunConfig,
    model: Model,
    scenes: Vec<SceneSample>,
    stamp_params: (EvalSection, u64, String, String),
}

fn eval_setup(args: &EvalArgs) -> CliResult<EvalSetup> {
    let mut cfg = resolve(&args.common)?;
    apply_flags(&mut cfg.eval, &args.flags);
    let (model, weights_hash) = match &args.weights {
        Some(w) => (load_model(w)?, hash_file(w)?),
        None => (Model::new(cfg.train.model.clone(), cfg.seed)?, "fresh".to_string()),
    };
    let (_, scenes) = load_manifest(&args.manifest)?;
    let stamp_params = (cfg.eval.clone(), cfg.seed, weights_hash, hash_file(&args.manifest)?);
    Ok(EvalSetup { cfg, model, scenes, stamp_params })
}

pub fn eval(args: &EvalArgs) -> CliResult<MetricsReport> {
    let EvalSetup { cfg, model, scenes, stamp_params } = eval_setup(args)?;
    let report = eval_matching(&model, &scenes, &cfg.eval.eval_options(cfg.seed, cfg.threads))?;
    let stamp = Stamp::new("eval", cfg.seed, &stamp_params);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    stamp.write(&cfg.out.join("metrics.json"), "metrics-json", json.as_bytes())?;
    stamp.write(&cfg.out.join("mma.csv"), "curve-csv", curve_csv(&report.mma).as_bytes())?;
    stamp.write(&cfg.out.join("homography.csv"), "curve-csv", curve_csv(&report.homography_accuracy).as_bytes())?;
    println!(
        "{} scenes, {} matches, precision@{}px {:.4}",
        report.num_scenes, report.num_matches, report.precision_threshold, report.precision
    );
    Ok(report)
}

pub fn ablate(args: &EvalArgs) -> CliResult<Vec<AblationRow>> {
    let EvalSetup { cfg, model, scenes, stamp_params } = eval_setup(args)?;
    let rows = run_ablation(&model, &scenes, &cfg.eval.eval_options(cfg.seed, cfg.threads))?;
    let stamp = Stamp::new("ablate", cfg.seed, &stamp_params);
    stamp.write(&cfg.out.join("ablation.csv"), "ablation-csv", ablation_csv(&rows).as_bytes())?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    stamp.write(&cfg.out.join("ablation.json"), "ablation-json", json.as_bytes())?;
    print!("{}", ablation_csv(&rows));
    Ok(rows)
}

// ── gt-count ──

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianCounts {
    pub o2o_off: f64,
    pub m2o_off: f64,
    pub m2o_on: f64,
    pub m2o_flipped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GtCountReport {
    pub keypoints: usize,
    pub num_scenes: usize,
    pub scenes: Vec<GtCounts>,
    pub median: MedianCounts,
    /// Median over scenes of m2o_on / o2o_off.
    pub median_ratio_on_vs_o2o: f64,
    /// Scenes whose flipped count is strictly below every other configuration.
    pub flipped_lowest: usize,
}

pub fn flipped_is_lowest(c: &GtCounts) -> bool {
    c.m2o_flipped < c.o2o_off.min(c.m2o_off).min(c.m2o_on)
}

pub fn summarize_counts(keypoints: usize, scenes: Vec<GtCounts>) -> GtCountReport {
    let col = |f: fn(&GtCounts) -> usize| median(&mut scenes.iter().map(|c| f(c) as f64).collect::<Vec<_>>());
    let mut ratios: Vec<f64> =
        scenes.iter().map(|c| if c.o2o_off == 0 { f64::INFINITY } else { c.m2o_on as f64 / c.o2o_off as f64 }).collect();
    GtCountReport {
        keypoints,
        num_scenes: scenes.len(),
        median: MedianCounts {
            o2o_off: col(|c| c.o2o_off),
            m2o_off: col(|c| c.m2o_off),
            m2o_on: col(|c| c.m2o_on),
            m2o_flipped: col(|c| c.m2o_flipped),
        },
        median_ratio_on_vs_o2o: median(&mut ratios),
        flipped_lowest: scenes.iter().filter(|c| flipped_is_lowest(c)).count(),
        scenes,
    }
}

pub fn gt_count(args: &GtCountArgs) -> CliResult<GtCountReport> {
    let cfg = resolve(&args.common)?;
    let n = args.keypoints.unwrap_or(cfg.eval.gt_keypoints);
    let (_, scenes) = load_manifest(&args.manifest)?;
    let counts = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| count_gt_matches(s, n, derive_seed(cfg.seed, i as u64)))
        .collect::<rcm_core::Result<Vec<_>>>()?;
    let report = summarize_counts(n, counts);
    let stamp = Stamp::new("gt-count", cfg.seed, &(n, cfg.seed, hash_file(&args.manifest)?));
    let out = if cfg.out.extension().is_some() { cfg.out.clone() } else { cfg.out.join("gt_counts.json") };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    stamp.write(&out, "gt-count-json", json.as_bytes())?;
    println!(
        "median counts: o2o/off {} m2o/off {} m2o/on {} m2o/flipped {}",
        report.median.o2o_off, report.median.m2o_off, report.median.m2o_on, report.median.m2o_flipped
    );
    Ok(report)
}

// ── grad-check ──

pub fn grad_check(args: &GradCheckArgs) -> CliResult<Vec<GradCheckResult>> {
    let scopes: Vec<Scope> = if args.scope == "all" {
        Scope::ALL.to_vec()
    } else {
        let s = Scope::parse(&args.scope).ok_or_else(|| {
            let names: Vec<_> = Scope::ALL.iter().map(|s| s.name()).collect();
            CliError::Config(format!("unknown scope {:?}; expected all or one of {}", args.scope, names.join(", ")))
        })?;
        vec![s]
    };
    let results: Vec<GradCheckResult> = scopes.iter().map(|&s| check_scope(s, args.seed)).collect();
    for r in &results {
        println!(
            "{:<18} max_rel_err {:.3e}  entries {:>5}  {}",
            r.scope.name(),
            r.max_rel_err,
            r.checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&results).expect("results serialize");
        Stamp::new("grad-check", args.seed, &(&args.scope, args.seed)).write(out, "grad-check-json", json.as_bytes())?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.scope.name()).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}
