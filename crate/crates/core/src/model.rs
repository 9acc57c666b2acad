//! The full matcher: configuration, parameter initialization and the
//! extract → switch → coarse → fine pipeline, shared by inference and training.

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coarse::{
    dual_softmax_from, init_matcher, run_coarse, select_matches, sparse_mix, Assignment, CoarseInputs, CoarseMatchSet,
    CoarseOutput, MatcherDims,
};
use crate::error::{Error, Result};
use crate::extract::{
    detect_keypoints, extract_features, init_extractor, DetectConfig, ExtractorDims, FeatureBundle, KeypointSet,
    COARSE_STRIDE, FINE_STRIDE,
};
use crate::fine::{crop_windows, fine_attention, init_fine, refine_expectation, source_mix, to_matches, FineWindowBatch};
use crate::geometry::Pt2;
use crate::params::ParamStore;
use crate::scene::Image;
use crate::switcher::{apply_switch, init_switcher, switch_score, Orientation, SwitchDecision, SwitcherDims};
use crate::tape::{RowMix, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Coarse descriptor width.
    pub c1: usize,
    /// Fine descriptor width.
    pub c2: usize,
    /// Coarse attention blocks.
    pub l1: usize,
    /// Fine attention rounds.
    pub l2: usize,
    /// Fine window side (odd).
    pub window: usize,
    /// Keypoint budget per source image.
    pub keypoints: usize,
    pub detect: DetectConfig,
    /// Coarse match probability threshold.
    pub theta_c: f64,
    /// Initial softmax temperature of the coarse scores.
    pub tau_init: f64,
    pub fine_gain: f64,
    pub switch_pool: usize,
    pub switch_channels: usize,
    pub pe_widths: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c1: 64,
            c2: 32,
            l1: 3,
            l2: 1,
            window: 5,
            keypoints: 128,
            detect: DetectConfig::default(),
            theta_c: 0.2,
            tau_init: 0.1,
            fine_gain: 4.0,
            switch_pool: 20,
            switch_channels: 16,
            pe_widths: [32, 64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Format(format!("invalid model config: {m}")));
        if self.c1 == 0 || self.c2 == 0 || self.pe_widths.contains(&0) {
            return bad("descriptor and encoder widths must be positive");
        }
        if self.window < 3 || self.window % 2 == 0 {
            return bad("window must be odd and at least 3");
        }
        if self.keypoints == 0 {
            return bad("keypoint budget must be positive");
        }
        if !(0.0..=1.0).contains(&self.theta_c) {
            return bad("theta_c must lie in [0, 1]");
        }
        if !(self.tau_init > 0.0 && self.fine_gain > 0.0) {
            return bad("tau_init and fine_gain must be positive");
        }
        if self.switch_pool < 4 || self.switch_pool % 4 != 0 || self.switch_channels == 0 {
            return bad("switch_pool must be a positive multiple of 4 and switch_channels positive");
        }
        Ok(())
    }

    pub fn extractor_dims(&self) -> ExtractorDims {
        ExtractorDims { c1: self.c1, c2: self.c2, fine_gain: self.fine_gain }
    }

    pub fn matcher_dims(&self) -> MatcherDims {
        MatcherDims { c1: self.c1, layers: self.l1, pe_widths: self.pe_widths }
    }

    pub fn switcher_dims(&self) -> SwitcherDims {
        SwitcherDims { pool: self.switch_pool, channels: self.switch_channels }
    }
}

/// Configuration plus every parameter tensor.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    /// Fresh weights. The extractor trunk is frozen; its heads, the matcher,
    /// the refiner and the switcher are trainable.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_extractor(&mut store, &cfg.extractor_dims(), &mut rng);
        init_matcher(&mut store, &cfg.matcher_dims(), cfg.tau_init, &mut rng);
        init_fine(&mut store, cfg.c2, cfg.l2, &mut rng);
        init_switcher(&mut store, &cfg.switcher_dims(), &mut rng);
        Ok(Self { cfg, store })
    }

    /// Replaces all values with those of `weights` (names and shapes must agree).
    pub fn load_weights(&mut self, weights: &ParamStore) -> Result<()> {
        self.store.load_values_from(weights)
    }

    /// Writes the weight blob and a sidecar that also records the configuration.
    pub fn save(&self, blob: &Path, sidecar: &Path) -> Result<()> {
        self.store.save(blob, sidecar, Some(serde_json::to_value(&self.cfg)?))
    }

    /// Rebuilds a model from files written by [`Model::save`].
    pub fn load(blob: &Path, sidecar: &Path) -> Result<Self> {
        let (store, meta) = ParamStore::load(blob, sidecar)?;
        let meta = meta.ok_or_else(|| Error::Format("weight sidecar lacks the model configuration".into()))?;
        let cfg: ModelConfig = serde_json::from_value(meta)?;
        let mut model = Model::new(cfg, 0)?;
        model.load_weights(&store)?;
        Ok(model)
    }

    /// Dense features and detected keypoints of one image.
    pub fn bundle(&self, image: &Image, seed: u64) -> Result<FeatureBundle> {
        let (coarse, fine, score) = extract_features(&self.store, &self.cfg.extractor_dims(), image)?;
        let (w, h) = (image.width(), image.height());
        let keypoints = detect_keypoints(&score, w, h, &self.cfg.detect, self.cfg.keypoints, seed);
        Ok(FeatureBundle { width: w, height: h, coarse, fine, keypoints, sparse: None })
    }
}

// ── Shared forward pieces ──

/// Dense maps of one side of an oriented pair, as tape values.
#[derive(Debug, Clone, Copy)]
pub struct SideVars {
    pub coarse: Var,
    pub fine: Var,
    pub width: usize,
    pub height: usize,
}

impl SideVars {
    pub fn constant(tape: &mut Tape, b: &FeatureBundle) -> Self {
        Self {
            coarse: tape.constant(b.coarse.clone()),
            fine: tape.constant(b.fine.clone()),
            width: b.width,
            height: b.height,
        }
    }

    fn fine_dims(&self) -> (usize, usize) {
        (self.height / FINE_STRIDE, self.width / FINE_STRIDE)
    }
}

/// Coarse stage for one oriented pair. Sparse descriptors come from
/// `override_coarse` when given, else from bilinear sampling of the source map.
#[allow(clippy::too_many_arguments)]
pub fn coarse_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    src: &SideVars,
    tgt: &SideVars,
    kps: &KeypointSet,
    override_coarse: Option<&Array2<f64>>,
    bypass: bool,
) -> CoarseOutput {
    let sparse = match override_coarse {
        Some(c) => tape.constant(c.clone()),
        None => tape.mix(src.coarse, sparse_mix(kps, src.width, src.height)),
    };
    let inputs = CoarseInputs { sparse, dense: tgt.coarse, keypoints: kps, width: tgt.width, height: tgt.height };
    run_coarse(tape, store, cfg.l1, &inputs, bypass)
}

/// Fine stage outputs for a list of `(keypoint, target cell)` pairs.
pub struct FineForward {
    pub batch: FineWindowBatch,
    pub probs: Var,
    pub expect: Var,
}

/// Crops windows at the given cells and refines each keypoint inside its window.
#[allow(clippy::too_many_arguments)]
pub fn fine_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    src: &SideVars,
    tgt: &SideVars,
    kps: &KeypointSet,
    pairs: &[(usize, usize)],
    override_fine: Option<&Array2<f64>>,
    bypass: bool,
) -> FineForward {
    let (hf, wf) = tgt.fine_dims();
    let cells: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let batch = crop_windows(&cells, tgt.width / COARSE_STRIDE, hf, wf, cfg.window);
    let source = match override_fine {
        Some(f) => {
            let mut pick = RowMix::new(pairs.len(), f.nrows());
            for (r, &(i, _)) in pairs.iter().enumerate() {
                pick.push(r, i, 1.0);
            }
            let all = tape.constant(f.clone());
            tape.mix(all, Rc::new(pick))
        }
        None => {
            let pts: Vec<Pt2> = pairs.iter().map(|&(i, _)| kps.positions[i]).collect();
            let (hs, ws) = src.fine_dims();
            tape.mix(src.fine, source_mix(&pts, hs, ws))
        }
    };
    let windows = tape.mix(tgt.fine, batch.gather.clone());
    let (source, windows) = if bypass {
        (source, windows)
    } else {
        fine_attention(tape, store, cfg.l2, cfg.window, source, windows)
    };
    let (probs, expect) = refine_expectation(tape, &batch, source, windows);
    FineForward { batch, probs, expect }
}

// ── Inference ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchMode {
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchOptions {
    pub switch: SwitchMode,
    pub assignment: Assignment,
    /// Score raw descriptors directly, skipping position encoding and attention.
    pub bypass_attention: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self { switch: SwitchMode::Auto, assignment: Assignment::M2o, bypass_attention: false }
    }
}

/// A final correspondence in original pair order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMatch {
    pub a: Pt2,
    pub b: Pt2,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub decision: SwitchDecision,
    pub orientation: Orientation,
    /// Coarse matches in source/target indexing.
    pub coarse: CoarseMatchSet,
    pub matches: Vec<PointMatch>,
    pub num_keypoints: usize,
    pub num_detected: usize,
}

pub fn decide(model: &Model, a: &FeatureBundle, b: &FeatureBundle, mode: SwitchMode) -> Result<SwitchDecision> {
    match mode {
        SwitchMode::On => Ok(SwitchDecision::forced(true)),
        SwitchMode::Off => Ok(SwitchDecision::forced(false)),
        SwitchMode::Auto => {
            let (ha, wa) = a.coarse_dims();
            let (hb, wb) = b.coarse_dims();
            switch_score(&model.store, &model.cfg.switcher_dims(), (&a.coarse, ha, wa), (&b.coarse, hb, wb))
        }
    }
}

/// Matches two prepared bundles; every output match is in (A, B) order.
pub fn match_bundles(model: &Model, a: &FeatureBundle, b: &FeatureBundle, opts: &MatchOptions) -> Result<MatchOutput> {
    let decision = decide(model, a, b, opts.switch)?;
    let (src, tgt, orientation) = apply_switch(a, b, &decision);
    let cfg = &model.cfg;
    let kps = &src.keypoints;
    let mut tape = Tape::new();
    let sv = SideVars::constant(&mut tape, src);
    let tv = SideVars::constant(&mut tape, tgt);
    let over = src.sparse.as_ref();
    let out = coarse_forward(&mut tape, &model.store, cfg, &sv, &tv, kps, over.map(|o| &o.coarse), opts.bypass_attention);
    let (hc, wc) = tgt.coarse_dims();
    let coarse = match opts.assignment {
        Assignment::M2o => select_matches(tape.value(out.probs()), hc * wc, cfg.theta_c, Assignment::M2o),
        Assignment::O2o => select_matches(&dual_softmax_from(&tape, out.scores), hc * wc, cfg.theta_c, Assignment::O2o),
    };
    let pairs: Vec<(usize, usize)> = coarse.entries.iter().map(|e| (e.0, e.1)).collect();
    let mut matches = Vec::with_capacity(pairs.len());
    if !pairs.is_empty() {
        let ff = fine_forward(
            &mut tape,
            &model.store,
            cfg,
            &sv,
            &tv,
            kps,
            &pairs,
            over.map(|o| &o.fine),
            opts.bypass_attention,
        );
        let sources: Vec<Pt2> = pairs.iter().map(|&(i, _)| kps.positions[i]).collect();
        for m in to_matches(&ff.batch, &sources, tape.value(ff.probs), tape.value(ff.expect)) {
            let (pa, pb) = orientation.restore(m.source, m.target);
            matches.push(PointMatch { a: pa, b: pb, confidence: m.confidence });
        }
    }
    Ok(MatchOutput {
        decision,
        orientation,
        coarse,
        matches,
        num_keypoints: kps.len(),
        num_detected: kps.num_detected(),
    })
}

/// Extracts both images and matches them. Keypoint padding draws from `seed`.
pub fn match_images(model: &Model, a: &Image, b: &Image, opts: &MatchOptions, seed: u64) -> Result<MatchOutput> {
    let ba = model.bundle(a, seed)?;
    let bb = model.bundle(b, seed.wrapping_add(1))?;
    match_bundles(model, &ba, &bb, opts)
}
