//! Finite-difference verification of the analytic gradients of every
//! differentiable stage, on small random instances.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coarse::{
    attention_block, coarse_loss, dustbin_loss, encode_position, gt_coarse, init_matcher, many_to_one_probs,
    run_coarse, score_with_dustbin, sparse_pos_input, CoarseInputs, MatcherDims,
};
use crate::extract::{coarse_head, fine_head, init_extractor, keypoints_at, ExtractorDims};
use crate::fine::{crop_windows, fine_attention, fine_loss, init_fine, refine_expectation};
use crate::geometry::{Homography, Pt2};
use crate::params::{randn, ParamStore};
use crate::scene::GroundTruth;
use crate::switcher::{init_switcher, switch_forward, switch_loss, CoarseMapRef, NormMode, SwitcherDims};
use crate::tape::{Tape, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PositionEncoder,
    AttentionBlock,
    ScoreHead,
    CoarseLoss,
    DustbinLoss,
    SwitchLoss,
    FinePipeline,
    ExtractorHeads,
}

impl Scope {
    pub const ALL: [Scope; 8] = [
        Scope::PositionEncoder,
        Scope::AttentionBlock,
        Scope::ScoreHead,
        Scope::CoarseLoss,
        Scope::DustbinLoss,
        Scope::SwitchLoss,
        Scope::FinePipeline,
        Scope::ExtractorHeads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scope::PositionEncoder => "position_encoder",
            Scope::AttentionBlock => "attention_block",
            Scope::ScoreHead => "score_head",
            Scope::CoarseLoss => "coarse_loss",
            Scope::DustbinLoss => "dustbin_loss",
            Scope::SwitchLoss => "switch_loss",
            Scope::FinePipeline => "fine_pipeline",
            Scope::ExtractorHeads => "extractor_heads",
        }
    }

    pub fn parse(name: &str) -> Option<Scope> {
        Scope::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub scope: Scope,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `loss` with central differences for every
/// trainable entry of `store` that the loss reaches.
pub fn check_store(store: &ParamStore, loss: impl Fn(&mut Tape, &ParamStore) -> Var) -> (f64, usize) {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    let grads = tape.backward(l);
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let l = loss(&mut t, s);
        t.scalar(l)
    };
    let mut probe = store.clone();
    let (mut worst, mut n) = (0.0f64, 0);
    for (id, g) in grads.params() {
        for k in 0..g.len() {
            let idx = (k / g.ncols(), k % g.ncols());
            let orig = store.value(id)[idx];
            probe.value_mut(id)[idx] = orig + STEP;
            let up = eval(&probe);
            probe.value_mut(id)[idx] = orig - STEP;
            let down = eval(&probe);
            probe.value_mut(id)[idx] = orig;
            worst = worst.max(relative_error(g[idx], (up - down) / (2.0 * STEP)));
            n += 1;
        }
    }
    (worst, n)
}

/// Random linear readout so every output entry carries gradient.
fn readout(tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> Var {
    let (r, c) = tape.value(x).dim();
    let w = tape.constant(randn(r, c, 1.0, rng));
    let prod = tape.mul(x, w);
    let ones_r = tape.constant(Array2::ones((1, r)));
    let ones_c = tape.constant(Array2::ones((c, 1)));
    let s = tape.matmul(ones_r, prod);
    tape.matmul(s, ones_c)
}

fn unit_rows(rows: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = randn(rows, c, 1.0, rng);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

/// Runs one scope on an instance drawn from `seed`.
pub fn grad_check(scope: Scope, seed: u64) -> GradCheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 8;
    let (n, grid) = (6, 4);
    let img = grid * 8;
    let mut store = ParamStore::new();
    let dims = MatcherDims { c1: c, layers: 1, pe_widths: [6, 8] };
    init_matcher(&mut store, &dims, 0.5, &mut rng);
    let kps = keypoints_at((0..n).map(|_| Pt2::new(rng.random_range(0.0..img as f64), rng.random_range(0.0..img as f64))).collect());
    let fs = unit_rows(n, c, &mut rng);
    let fd = unit_rows(grid * grid, c, &mut rng);
    let r_seed: u64 = rng.random();
    // ground truth: a shift that leaves some keypoints outside the target
    let truth = GroundTruth::Planar(Homography::translation(9.0, -3.0));
    let gt = gt_coarse(&truth, &kps, img, img);
    let coarse_inputs = |t: &mut Tape| CoarseInputs {
        sparse: t.constant(fs.clone()),
        dense: t.constant(fd.clone()),
        keypoints: &kps,
        width: img,
        height: img,
    };

    let (max_rel_err, checked) = match scope {
        Scope::PositionEncoder => check_store(&store, |t, s| {
            let f = t.constant(fs.clone());
            let e = encode_position(t, s, f, sparse_pos_input(&kps, img, img));
            readout(t, e, &mut ChaCha8Rng::seed_from_u64(r_seed))
        }),
        Scope::AttentionBlock => check_store(&store, |t, s| {
            let a = t.constant(fs.clone());
            let b = t.constant(fd.clone());
            let (a, b) = attention_block(t, s, 0, a, b);
            let mut rr = ChaCha8Rng::seed_from_u64(r_seed);
            let la = readout(t, a, &mut rr);
            let lb = readout(t, b, &mut rr);
            t.add(la, lb)
        }),
        Scope::ScoreHead => {
            // a non-zero dustbin vector so its gradient is generic
            let id = store.id("coarse.bin");
            *store.value_mut(id) = randn(1, c, 0.3, &mut rng);
            check_store(&store, |t, s| {
                let a = t.constant(fs.clone());
                let b = t.constant(fd.clone());
                let sc = score_with_dustbin(t, s, a, b);
                let p = many_to_one_probs(t, sc);
                readout(t, p, &mut ChaCha8Rng::seed_from_u64(r_seed))
            })
        }
        Scope::CoarseLoss => check_store(&store, |t, s| {
            let inp = coarse_inputs(t);
            let out = run_coarse(t, s, 1, &inp, false);
            coarse_loss(t, &out.layer_probs, &gt).expect("instance has matchable keypoints")
        }),
        Scope::DustbinLoss => check_store(&store, |t, s| {
            let inp = coarse_inputs(t);
            let out = run_coarse(t, s, 1, &inp, false);
            dustbin_loss(t, out.probs(), &gt)
        }),
        Scope::SwitchLoss => {
            let mut st = ParamStore::new();
            let sd = SwitcherDims { pool: 8, channels: 4 };
            init_switcher(&mut st, &sd, &mut rng);
            let maps: Vec<Array2<f64>> = (0..4).map(|_| unit_rows(36, c, &mut rng)).collect();
            check_store(&st, |t, s| {
                let v: Vec<Var> = maps.iter().map(|m| t.constant(m.clone())).collect();
                let r = |var| CoarseMapRef { var, height: 6, width: 6 };
                let pairs = [(r(v[0]), r(v[1])), (r(v[2]), r(v[3])), (r(v[1]), r(v[0]))];
                let p = switch_forward(t, s, &sd, &pairs, NormMode::Batch).expect("matching channels");
                switch_loss(t, p, &[true, false, false])
            })
        }
        Scope::FinePipeline => {
            let mut st = ParamStore::new();
            let c2 = 4;
            init_fine(&mut st, c2, 1, &mut rng);
            // larger refinement kernels than the residual-friendly init
            let id = st.id("refine.0.conv.w");
            *st.value_mut(id) = randn(9 * 2 * c2, c2, 0.2, &mut rng);
            let (hf, wf) = (16, 16);
            let fine_d = randn(hf * wf, c2, 1.0, &mut rng);
            let src = randn(3, c2, 1.0, &mut rng);
            let batch = crop_windows(&[5, 10, 0], 4, hf, wf, 5);
            let truth: Vec<Option<Pt2>> = batch
                .centers
                .iter()
                .map(|&(x, y)| Some(Pt2::new(2.0 * x as f64 + 1.3, 2.0 * y as f64 - 0.4)))
                .collect();
            check_store(&st, |t, s| {
                let d = t.constant(fine_d.clone());
                let win = t.mix(d, batch.gather.clone());
                let sv = t.constant(src.clone());
                let (sv, win) = fine_attention(t, s, 1, 5, sv, win);
                let (_, e) = refine_expectation(t, &batch, sv, win);
                fine_loss(t, &batch, e, &truth).0
            })
        }
        Scope::ExtractorHeads => {
            let mut st = ParamStore::new();
            let ed = ExtractorDims { c1: 4, c2: 4, fine_gain: 2.0 };
            init_extractor(&mut st, &ed, &mut rng);
            let merged = ed.c2 + 64 + ed.c1;
            let ci = randn(5, merged, 1.0, &mut rng);
            let d2 = randn(7, ed.c2, 1.0, &mut rng);
            check_store(&st, |t, s| {
                let a = t.constant(ci.clone());
                let b = t.constant(d2.clone());
                let ch = coarse_head(t, s, a);
                let fh = fine_head(t, s, &ed, b);
                let mut rr = ChaCha8Rng::seed_from_u64(r_seed);
                let la = readout(t, ch, &mut rr);
                let lb = readout(t, fh, &mut rr);
                t.add(la, lb)
            })
        }
    };
    GradCheckResult { scope, max_rel_err, checked }
}

pub fn grad_check_all(seed: u64) -> Vec<GradCheckResult> {
    Scope::ALL.iter().map(|&s| grad_check(s, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
        assert_eq!(relative_error(1e-10, 0.0), 1e-2);
    }

    #[test]
    fn every_scope_passes() {
        for r in grad_check_all(7) {
            assert!(r.checked > 0, "{:?} checked nothing", r.scope);
            assert!(r.passed(), "{:?}: {:e}", r.scope, r.max_rel_err);
        }
    }

    #[test]
    fn scope_names_round_trip() {
        for s in Scope::ALL {
            assert_eq!(Scope::parse(s.name()), Some(s));
        }
    }
}
