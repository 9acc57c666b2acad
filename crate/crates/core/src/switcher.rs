//! View switcher: decides which image of a pair should be the sparse source.
//!
//! Both coarse maps are adaptively average-pooled to a fixed grid, their cell
//! correlation volume is read as a `P x P` image with `P^2` channels, and a
//! small conv-norm-relu-pool classifier produces the switch probability.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{randn, ParamStore};
use crate::scene::{true_scale_ratio, SceneSample};
use crate::tape::{MapGeom, RowMix, Tape, Var};

/// Probability clamp used by the switch loss.
pub const SWITCH_FLOOR: f64 = 1e-7;
/// Running-average momentum of the normalization statistics.
pub const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-5;
/// Correspondences sampled by the scale-ratio labeler.
pub const LABEL_SAMPLES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitcherDims {
    /// Side of the pooled grid (20 by default).
    pub pool: usize,
    /// Channels of both conv blocks.
    pub channels: usize,
}

impl Default for SwitcherDims {
    fn default() -> Self {
        Self { pool: 20, channels: 16 }
    }
}

pub fn init_switcher<R: Rng>(store: &mut ParamStore, dims: &SwitcherDims, rng: &mut R) {
    let c = dims.channels;
    let cin = [dims.pool * dims.pool, c];
    for (i, &ci) in cin.iter().enumerate() {
        let n = i + 1;
        store.add(&format!("switch.conv{n}.w"), randn(9 * ci, c, (2.0 / (9 * ci) as f64).sqrt(), rng), true);
        store.add(&format!("switch.bn{n}.gamma"), Array2::ones((1, c)), true);
        store.add(&format!("switch.bn{n}.beta"), Array2::zeros((1, c)), true);
        store.add(&format!("switch.bn{n}.mean"), Array2::zeros((1, c)), false);
        store.add(&format!("switch.bn{n}.var"), Array2::ones((1, c)), false);
    }
    store.add("switch.fc.w", randn(c, 2, (1.0 / c as f64).sqrt(), rng), true);
    store.add("switch.fc.b", Array2::zeros((1, 2)), true);
}

/// Outcome for one pair: `switched` iff `p_switch > 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchDecision {
    pub p_switch: f64,
    pub switched: bool,
}

impl SwitchDecision {
    pub fn from_probability(p_switch: f64) -> Self {
        Self { p_switch, switched: p_switch > 0.5 }
    }

    /// Decision imposed from outside (forced or teacher-forced).
    pub fn forced(switched: bool) -> Self {
        Self { p_switch: if switched { 1.0 } else { 0.0 }, switched }
    }
}

/// Adaptive average pooling of a `h x w` map (rows in `(y, x)` order) to `out x out`.
/// Output bin `i` averages inputs `floor(i*n/out) .. ceil((i+1)*n/out)`.
pub fn adaptive_pool_mix(h: usize, w: usize, out: usize) -> RowMix {
    let bins = |n: usize| -> Vec<(usize, usize)> {
        (0..out).map(|i| (i * n / out, ((i + 1) * n).div_ceil(out))).collect()
    };
    let (by, bx) = (bins(h), bins(w));
    let mut mix = RowMix::new(out * out, h * w);
    for (oy, &(y0, y1)) in by.iter().enumerate() {
        for (ox, &(x0, x1)) in bx.iter().enumerate() {
            let wgt = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    mix.push(oy * out + ox, y * w + x, wgt);
                }
            }
        }
    }
    mix
}

/// One coarse map: rows are cells in `(y, x)` order, columns channels.
#[derive(Debug, Clone, Copy)]
pub struct CoarseMapRef {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

/// How the normalization layers obtain their statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics (training); recorded on the tape.
    Batch,
    /// Frozen running averages from the store.
    Running,
}

fn normalize(tape: &mut Tape, store: &ParamStore, n: usize, x: Var, mode: NormMode) -> Var {
    let xn = match mode {
        NormMode::Batch => tape.standardize(x),
        NormMode::Running => {
            let mean = store.value(store.id(&format!("switch.bn{n}.mean")));
            let var = store.value(store.id(&format!("switch.bn{n}.var")));
            let inv = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let shift = -(mean * &inv);
            let inv = tape.constant(inv);
            let shift = tape.constant(shift);
            let y = tape.mul_row(x, inv);
            tape.add_row(y, shift)
        }
    };
    let g = tape.param(store, store.id(&format!("switch.bn{n}.gamma")));
    let b = tape.param(store, store.id(&format!("switch.bn{n}.beta")));
    let y = tape.mul_row(xn, g);
    tape.add_row(y, b)
}

/// Correlation volume of one pair as a `P^2 x P^2` matrix: row = pooled A
/// cell, column = pooled B cell.
pub fn correlation(tape: &mut Tape, a: CoarseMapRef, b: CoarseMapRef, pool: usize) -> Result<Var> {
    let (ca, cb) = (tape.value(a.var).ncols(), tape.value(b.var).ncols());
    if ca != cb {
        return Err(Error::ChannelMismatch(ca, cb));
    }
    let pa = tape.mix(a.var, Rc::new(adaptive_pool_mix(a.height, a.width, pool)));
    let pb = tape.mix(b.var, Rc::new(adaptive_pool_mix(b.height, b.width, pool)));
    Ok(tape.matmul_t(pa, pb))
}

/// Switch probabilities (`B x 1`) for a batch of pairs.
pub fn switch_forward(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &SwitcherDims,
    pairs: &[(CoarseMapRef, CoarseMapRef)],
    mode: NormMode,
) -> Result<Var> {
    let p = dims.pool;
    let vols = pairs.iter().map(|&(a, b)| correlation(tape, a, b, p)).collect::<Result<Vec<_>>>()?;
    let mut x = tape.concat_rows(&vols);
    let mut geom = MapGeom { batch: pairs.len(), height: p, width: p };
    for n in 1..=2 {
        let w = tape.param(store, store.id(&format!("switch.conv{n}.w")));
        let y = tape.conv3x3(x, w, geom);
        let y = normalize(tape, store, n, y, mode);
        let y = tape.relu(y);
        x = tape.max_pool2(y, geom);
        geom = MapGeom { batch: geom.batch, height: geom.height / 2, width: geom.width / 2 };
    }
    let per = geom.height * geom.width;
    let mut gap = RowMix::new(geom.batch, geom.rows());
    for r in 0..geom.rows() {
        gap.push(r / per, r, 1.0 / per as f64);
    }
    let pooled = tape.mix(x, Rc::new(gap));
    let w = tape.param(store, store.id("switch.fc.w"));
    let b = tape.param(store, store.id("switch.fc.b"));
    let logits = tape.matmul(pooled, w);
    let logits = tape.add_row(logits, b);
    let probs = tape.softmax_rows(logits);
    Ok(tape.slice_cols(probs, 1, 1))
}

/// Inference decision for one pair using running statistics.
pub fn switch_score(
    store: &ParamStore,
    dims: &SwitcherDims,
    a: (&Array2<f64>, usize, usize),
    b: (&Array2<f64>, usize, usize),
) -> Result<SwitchDecision> {
    let mut tape = Tape::new();
    let va = tape.constant(a.0.clone());
    let vb = tape.constant(b.0.clone());
    let pair = (CoarseMapRef { var: va, height: a.1, width: a.2 }, CoarseMapRef { var: vb, height: b.1, width: b.2 });
    let p = switch_forward(&mut tape, store, dims, &[pair], NormMode::Running)?;
    Ok(SwitchDecision::from_probability(tape.scalar(p)))
}

/// Folds the batch statistics of the two normalization layers (recorded on
/// `tape` starting at index `first`) into the running averages.
pub fn update_running_stats(store: &mut ParamStore, tape: &Tape, first: usize) {
    for n in 1..=2 {
        let (mean, var) = &tape.batch_stats()[first + n - 1];
        for (name, stat) in [("mean", mean), ("var", var)] {
            let id = store.id(&format!("switch.bn{n}.{name}"));
            let v = store.value_mut(id);
            for (r, s) in v.iter_mut().zip(stat) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * s;
            }
        }
    }
}

/// True iff image A is the smaller-scale view, i.e. the pair must be switched.
/// A scale ratio of exactly 1 labels "no switch".
pub fn gt_switch_label(sample: &SceneSample, seed: u64) -> Result<bool> {
    let (_, a_larger) = true_scale_ratio(sample, LABEL_SAMPLES, seed)?;
    Ok(!a_larger)
}

/// Mean binary cross-entropy of switch probabilities against labels.
pub fn switch_loss(tape: &mut Tape, p: Var, labels: &[bool]) -> Var {
    tape.bce(p, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect(), SWITCH_FLOOR)
}

/// Records the original pair order so outputs can be re-expressed as (A, B).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Forward,
    Reversed,
}

impl Orientation {
    /// Maps a `(source, target)` pair back to `(in A, in B)`.
    pub fn restore<T>(self, source: T, target: T) -> (T, T) {
        match self {
            Orientation::Forward => (source, target),
            Orientation::Reversed => (target, source),
        }
    }
}

/// Orders `(a, b)` as `(source, target)` according to the decision.
pub fn apply_switch<T>(a: T, b: T, d: &SwitchDecision) -> (T, T, Orientation) {
    if d.switched {
        (b, a, Orientation::Reversed)
    } else {
        (a, b, Orientation::Forward)
    }
}
