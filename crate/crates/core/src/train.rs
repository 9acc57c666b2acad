//! Toy training over a seeded stream of synthetic scenes.
//!
//! The extractor trunk is frozen, so its outputs and the detected keypoints
//! are computed once per image; each step records the trainable heads, the
//! switcher, the coarse matcher and the refiner on a fresh tape.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::coarse::{coarse_loss, dustbin_loss, gt_coarse};
use crate::error::{Error, Result};
use crate::extract::{coarse_head, detect_keypoints, fine_head, run_trunk, KeypointSet, Trunk, COARSE_STRIDE};
use crate::fine::fine_loss;
use crate::model::{coarse_forward, fine_forward, Model, ModelConfig, SideVars};
use crate::params::ParamId;
use crate::scene::{derive_seed, generate_scene, SceneConfig, SceneSample};
use crate::switcher::{gt_switch_label, switch_forward, switch_loss, update_running_stats, CoarseMapRef, NormMode};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub coarse: f64,
    pub dustbin: f64,
    pub fine: f64,
    pub switch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { coarse: 1.0, dustbin: 0.5, fine: 1.0, switch: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Fraction of steps spent on the linear warm-up.
    pub warmup_fraction: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Fraction of steps on which ground-truth switch labels orient the pairs.
    pub teacher_forcing: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Number of distinct training scenes cycled through; 0 draws a fresh scene every time.
    pub pool_size: usize,
    pub scene: SceneConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            learning_rate: 2e-4,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
            teacher_forcing: 0.2,
            loss_weights: LossWeights::default(),
            seed: 0,
            pool_size: 0,
            scene: SceneConfig { swap_probability: 0.5, ..SceneConfig::default() },
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.loss_weights;
        let ok = self.batch > 0
            && self.learning_rate >= 0.0
            && (0.0..=1.0).contains(&self.warmup_fraction)
            && (0.0..=1.0).contains(&self.teacher_forcing)
            && self.clip_norm > 0.0
            && [w.coarse, w.dustbin, w.fine, w.switch].iter().all(|&v| v >= 0.0);
        if !ok {
            return Err(Error::Format(
                "invalid train config: batch, clip_norm must be positive, rates and weights non-negative, fractions in [0, 1]"
                    .into(),
            ));
        }
        self.scene.validate()?;
        self.model.validate()
    }

    /// Learning rate at `step`: linear warm-up, then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = (self.warmup_fraction * self.steps as f64).ceil() as usize;
        if step < warm {
            return self.learning_rate * (step + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let t = (step - warm) as f64 / span;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// One row of the loss curve (unweighted terms, batch means).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub coarse: f64,
    pub dustbin: f64,
    pub fine: f64,
    pub switch: f64,
}

pub fn loss_csv(curve: &[LossRecord]) -> String {
    let mut out = String::from("step,total,coarse,dustbin,fine,switch\n");
    for r in curve {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.step, r.total, r.coarse, r.dustbin, r.fine, r.switch));
    }
    out
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

// ── Optimizer ──

/// Adam with decays 0.9 / 0.999 and epsilon 1e-8.
#[derive(Debug, Default)]
pub struct Adam {
    state: HashMap<ParamId, (Array2<f64>, Array2<f64>)>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn step(&mut self, store: &mut crate::params::ParamStore, grads: &[(ParamId, Array2<f64>)], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (id, g) in grads {
            let (m, v) = self
                .state
                .entry(*id)
                .or_insert_with(|| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim())));
            m.zip_mut_with(g, |m, &g| *m = Self::B1 * *m + (1.0 - Self::B1) * g);
            v.zip_mut_with(g, |v, &g| *v = Self::B2 * *v + (1.0 - Self::B2) * g * g);
            let w = store.value_mut(*id);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= lr * (m / c1) / ((v / c2).sqrt() + Self::EPS);
            });
        }
    }
}

/// Scales all gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Array2<f64>)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

// ── Prepared scenes ──

/// A training pair with frozen trunk outputs, keypoints and switch label.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sample: SceneSample,
    pub trunks: [Trunk; 2],
    pub keypoints: [KeypointSet; 2],
    pub label: bool,
}

pub fn prepare(model: &Model, sample: SceneSample, seed: u64) -> Result<Prepared> {
    let cfg = &model.cfg;
    let ta = run_trunk(&model.store, &sample.image_a)?;
    let tb = run_trunk(&model.store, &sample.image_b)?;
    let (w, h) = (sample.width(), sample.height());
    let ka = detect_keypoints(&ta.score_map, w, h, &cfg.detect, cfg.keypoints, derive_seed(seed, 0));
    let kb = detect_keypoints(&tb.score_map, w, h, &cfg.detect, cfg.keypoints, derive_seed(seed, 1));
    let label = gt_switch_label(&sample, seed)?;
    Ok(Prepared { sample, trunks: [ta, tb], keypoints: [ka, kb], label })
}

struct Source<'a> {
    cfg: &'a TrainConfig,
    pool: Vec<Prepared>,
}

impl Source<'_> {
    fn get(&mut self, model: &Model, index: u64) -> Result<Prepared> {
        let seed = derive_seed(self.cfg.seed, 1_000_003);
        if self.cfg.pool_size == 0 {
            let s = generate_scene(&self.cfg.scene, seed, index)?;
            return prepare(model, s, derive_seed(seed, index));
        }
        let slot = (index % self.cfg.pool_size as u64) as usize;
        while self.pool.len() <= slot {
            let i = self.pool.len() as u64;
            let s = generate_scene(&self.cfg.scene, seed, i)?;
            self.pool.push(prepare(model, s, derive_seed(seed, i))?);
        }
        Ok(self.pool[slot].clone())
    }
}

// ── Loss for one batch ──

/// Weighted total and the unweighted batch-mean terms.
pub struct BatchLoss {
    pub total: Var,
    pub coarse: f64,
    pub dustbin: f64,
    pub fine: f64,
    pub switch: f64,
    /// Index of the first switcher normalization statistic on the tape, if the switcher ran.
    pub switch_stats: Option<usize>,
}

/// Records the supervised forward pass of a batch. `teacher` orients pairs
/// by their labels, otherwise by the switcher's batch-mode prediction.
pub fn batch_loss(tape: &mut Tape, model: &Model, weights: &LossWeights, items: &[Prepared], teacher: bool) -> Result<BatchLoss> {
    let store = &model.store;
    let cfg = &model.cfg;
    let dims = cfg.extractor_dims();
    let mut sides = Vec::with_capacity(items.len());
    for it in items {
        let mut pair = Vec::with_capacity(2);
        for t in &it.trunks {
            let ci = tape.constant(t.coarse_in.clone());
            let d2 = tape.constant(t.d2.clone());
            let coarse = coarse_head(tape, store, ci);
            let fine = fine_head(tape, store, &dims, d2);
            pair.push(SideVars { coarse, fine, width: t.width, height: t.height });
        }
        sides.push([pair[0], pair[1]]);
    }

    let need_switch = weights.switch > 0.0 || !teacher;
    let mut switch_stats = None;
    let mut switch_term = None;
    let mut predicted = vec![false; items.len()];
    if need_switch {
        // the switcher sees detached coarse maps: its loss does not shape the descriptors
        let mut map = |s: &SideVars| CoarseMapRef {
            var: tape.constant(tape.value(s.coarse).clone()),
            height: s.height / COARSE_STRIDE,
            width: s.width / COARSE_STRIDE,
        };
        let pairs: Vec<_> = sides.iter().map(|[a, b]| (map(a), map(b))).collect();
        switch_stats = Some(tape.batch_stats().len());
        let p = switch_forward(tape, store, &cfg.switcher_dims(), &pairs, NormMode::Batch)?;
        for (k, v) in tape.value(p).iter().enumerate() {
            predicted[k] = *v > 0.5;
        }
        let labels: Vec<bool> = items.iter().map(|i| i.label).collect();
        switch_term = Some(switch_loss(tape, p, &labels));
    }

    let matching = weights.coarse > 0.0 || weights.dustbin > 0.0 || weights.fine > 0.0;
    let (mut lc, mut ld, mut lf) = (Vec::new(), Vec::new(), Vec::new());
    for (k, it) in items.iter().enumerate().filter(|_| matching) {
        let switched = if teacher { it.label } else { predicted[k] };
        let (src, tgt, kps, truth) = if switched {
            (sides[k][1], sides[k][0], &it.keypoints[1], it.sample.truth.swapped())
        } else {
            (sides[k][0], sides[k][1], &it.keypoints[0], it.sample.truth.clone())
        };
        let gt = gt_coarse(&truth, kps, tgt.width, tgt.height);
        if gt.m_gt.is_empty() {
            continue;
        }
        let out = coarse_forward(tape, store, cfg, &src, &tgt, kps, None, false);
        lc.push(coarse_loss(tape, &out.layer_probs, &gt)?);
        ld.push(dustbin_loss(tape, out.probs(), &gt));
        if weights.fine > 0.0 {
            let ff = fine_forward(tape, store, cfg, &src, &tgt, kps, &gt.m_gt, None, false);
            let targets: Vec<_> =
                gt.m_gt.iter().map(|&(i, _)| truth.warp_a_to_b(&kps.positions[i], tgt.width, tgt.height)).collect();
            let (l, n) = fine_loss(tape, &ff.batch, ff.expect, &targets);
            if n > 0 {
                lf.push(l);
            }
        }
    }

    let mut mean = |terms: &[Var]| -> Option<Var> {
        (!terms.is_empty()).then(|| {
            let w = 1.0 / terms.len() as f64;
            tape.weighted_sum(&terms.iter().map(|&t| (t, w)).collect::<Vec<_>>())
        })
    };
    let (mc, md, mf) = (mean(&lc), mean(&ld), mean(&lf));
    let parts: Vec<(Var, f64)> = [
        (mc, weights.coarse),
        (md, weights.dustbin),
        (mf, weights.fine),
        (switch_term, weights.switch),
    ]
    .into_iter()
    .filter_map(|(v, w)| v.map(|v| (v, w)))
    .collect();
    let total = tape.weighted_sum(&parts);
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    Ok(BatchLoss {
        total,
        coarse: val(mc),
        dustbin: val(md),
        fine: val(mf),
        switch: val(switch_term),
        switch_stats,
    })
}

/// Trains `model` in place and returns the loss curve. `progress` is called
/// after every step.
pub fn train(model: &mut Model, cfg: &TrainConfig, mut progress: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let mut source = Source { cfg, pool: Vec::new() };
    let mut adam = Adam::default();
    let mut curve = Vec::with_capacity(cfg.steps);
    let teacher_steps = (cfg.teacher_forcing * cfg.steps as f64).round() as usize;
    for step in 0..cfg.steps {
        let items = (0..cfg.batch)
            .map(|b| source.get(model, (step * cfg.batch + b) as u64))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, model, &cfg.loss_weights, &items, step < teacher_steps)?;
        let total = tape.scalar(loss.total);
        if !total.is_finite() {
            return Err(Error::Divergence { step, last_finite: step.checked_sub(1) });
        }
        let grads = tape.backward(loss.total);
        let mut grads: Vec<(ParamId, Array2<f64>)> = grads.params().into_iter().map(|(id, g)| (id, g.clone())).collect();
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam.step(&mut model.store, &grads, cfg.lr_at(step));
        if let Some(first) = loss.switch_stats {
            update_running_stats(&mut model.store, &tape, first);
        }
        let rec = LossRecord {
            step,
            total,
            coarse: loss.coarse,
            dustbin: loss.dustbin,
            fine: loss.fine,
            switch: loss.switch,
        };
        progress(&rec);
        curve.push(rec);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            steps: 4,
            batch: 2,
            learning_rate: 1e-3,
            pool_size: 3,
            scene: SceneConfig { width: 64, height: 64, swap_probability: 0.5, ..SceneConfig::default() },
            model: ModelConfig {
                c1: 16,
                c2: 8,
                l1: 1,
                keypoints: 32,
                pe_widths: [8, 16],
                switch_pool: 8,
                switch_channels: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig { steps: 100, warmup_fraction: 0.1, learning_rate: 1.0, ..TrainConfig::default() };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(99) < 0.01);
        assert!((1..100).all(|s| s < 10 || cfg.lr_at(s) <= cfg.lr_at(s - 1)));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let id = crate::params::ParamStore::new().add("x", Array2::zeros((1, 2)), true);
        let mut g = vec![(id, ndarray::array![[3.0, 4.0]])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1[(0, 0)] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn moving_average_values() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let cfg = TrainConfig { learning_rate: 0.0, ..tiny() };
        let mut model = Model::new(cfg.model.clone(), 1).unwrap();
        let before = model.store.clone();
        let curve = train(&mut model, &cfg, |_| {}).unwrap();
        assert_eq!(curve.len(), 4);
        for id in before.ids().filter(|&id| before.is_trainable(id)) {
            assert_eq!(before.value(id), model.store.value(id));
        }
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let cfg = tiny();
        let run = || {
            let mut model = Model::new(cfg.model.clone(), 3).unwrap();
            let curve = train(&mut model, &cfg, |_| {}).unwrap();
            (curve, model.store)
        };
        let (c1, s1) = run();
        let (c2, s2) = run();
        assert_eq!(c1, c2);
        assert_eq!(s1, s2);
        assert!(c1.iter().all(|r| r.total.is_finite() && r.coarse > 0.0));
        assert!(loss_csv(&c1).starts_with("step,total,coarse,dustbin,fine,switch\n"));
    }
}
