//! Coarse matching: position encoding, self/cross attention between the
//! sparse keypoint features and the dense cell features, dustbin-augmented
//! scores, many-to-one assignment, the dual-softmax baseline, selection,
//! ground-truth construction and the two coarse losses.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{cell_index, KeypointSet, COARSE_STRIDE};
use crate::params::{randn, ParamStore};
use crate::scene::GroundTruth;
use crate::tape::{softmax_rows, RowMix, Tape, Var};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherDims {
    pub c1: usize,
    pub layers: usize,
    pub pe_widths: [usize; 2],
}

fn add_linear<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, std: f64, bias: bool, rng: &mut R) {
    store.add(&format!("{name}.w"), randn(cin, cout, std, rng), true);
    if bias {
        store.add(&format!("{name}.b"), Array2::zeros((1, cout)), true);
    }
}

/// Registers the matcher weights under `coarse.`.
pub fn init_matcher<R: Rng>(store: &mut ParamStore, dims: &MatcherDims, tau_init: f64, rng: &mut R) {
    let c = dims.c1;
    let [w0, w1] = dims.pe_widths;
    add_linear(store, "coarse.pe.0", 3, w0, (2.0 / 3.0f64).sqrt(), true, rng);
    add_linear(store, "coarse.pe.1", w0, w1, (2.0 / w0 as f64).sqrt(), true, rng);
    add_linear(store, "coarse.pe.2", w1, c, 0.1 / (w1 as f64).sqrt(), true, rng);
    let proj = 1.0 / (c as f64).sqrt();
    for l in 0..dims.layers {
        for kind in ["self", "cross"] {
            let p = format!("coarse.{l}.{kind}");
            for m in ["q", "k", "v", "o"] {
                add_linear(store, &format!("{p}.{m}"), c, c, proj, false, rng);
            }
            add_linear(store, &format!("{p}.mlp.0"), 2 * c, c, (2.0 / (2 * c) as f64).sqrt(), true, rng);
            add_linear(store, &format!("{p}.mlp.1"), c, c, 0.1 * proj, true, rng);
        }
    }
    store.add("coarse.bin", Array2::zeros((1, c)), true);
    store.add("coarse.log_tau", Array2::from_elem((1, 1), tau_init.ln()), true);
}

pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = tape.param(store, store.id(&format!("{name}.w")));
    let y = tape.matmul(x, w);
    match store.get(&format!("{name}.b")) {
        Some(b) => {
            let b = tape.param(store, b);
            tape.add_row(y, b)
        }
        None => y,
    }
}

/// Positional input `(x / W, y / H, score)` for keypoints.
pub fn sparse_pos_input(kps: &KeypointSet, width: usize, height: usize) -> Array2<f64> {
    Array2::from_shape_fn((kps.len(), 3), |(i, k)| match k {
        0 => kps.positions[i].x / width as f64,
        1 => kps.positions[i].y / height as f64,
        _ => kps.scores[i],
    })
}

/// Positional input for dense cells: normalized cell centers with score 1.
pub fn dense_pos_input(width: usize, height: usize) -> Array2<f64> {
    let (wc, hc) = (width / COARSE_STRIDE, height / COARSE_STRIDE);
    let center = |i: usize| (i * COARSE_STRIDE) as f64 + (COARSE_STRIDE as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((hc * wc, 3), |(j, k)| match k {
        0 => center(j % wc) / width as f64,
        1 => center(j / wc) / height as f64,
        _ => 1.0,
    })
}

/// Adds the position MLP (3 → widths → C1, ReLU between layers) to `feats`.
pub fn encode_position(tape: &mut Tape, store: &ParamStore, feats: Var, pos: Array2<f64>) -> Var {
    let x = tape.constant(pos);
    let h = linear(tape, store, "coarse.pe.0", x);
    let h = tape.relu(h);
    let h = linear(tape, store, "coarse.pe.1", h);
    let h = tape.relu(h);
    let e = linear(tape, store, "coarse.pe.2", h);
    tape.add(feats, e)
}

/// `x ← x + MLP([x ‖ M])` with `M = softmax(Q Kᵀ / √C) V` projected by `Wo`;
/// queries from `x`, keys and values from `src`.
pub fn attend(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, src: Var) -> Var {
    let c = tape.value(x).ncols() as f64;
    let q = linear(tape, store, &format!("{prefix}.q"), x);
    let k = linear(tape, store, &format!("{prefix}.k"), src);
    let v = linear(tape, store, &format!("{prefix}.v"), src);
    let logits = tape.matmul_t(q, k);
    let logits = tape.scale(logits, 1.0 / c.sqrt());
    let att = tape.softmax_rows(logits);
    let m = tape.matmul(att, v);
    let m = linear(tape, store, &format!("{prefix}.o"), m);
    let cat = tape.concat_cols(&[x, m]);
    let h = linear(tape, store, &format!("{prefix}.mlp.0"), cat);
    let h = tape.relu(h);
    let d = linear(tape, store, &format!("{prefix}.mlp.1"), h);
    tape.add(x, d)
}

/// One block: self on sparse, self on dense, cross sparse←dense, cross dense←sparse.
/// Self and cross weights are each shared between the two branches.
pub fn attention_block(tape: &mut Tape, store: &ParamStore, layer: usize, fs: Var, fd: Var) -> (Var, Var) {
    let sp = format!("coarse.{layer}.self");
    let cp = format!("coarse.{layer}.cross");
    let fs = attend(tape, store, &sp, fs, fs);
    let fd = attend(tape, store, &sp, fd, fd);
    let fs = attend(tape, store, &cp, fs, fd);
    let fd = attend(tape, store, &cp, fd, fs);
    (fs, fd)
}

/// `N x (M + 1)` scores `⟨fs_i, fd_j⟩ / τ`, last column against the dustbin vector.
pub fn score_with_dustbin(tape: &mut Tape, store: &ParamStore, fs: Var, fd: Var) -> Var {
    let bin = tape.param(store, store.id("coarse.bin"));
    let log_tau = tape.param(store, store.id("coarse.log_tau"));
    let aug = tape.concat_rows(&[fd, bin]);
    let s = tape.matmul_t(fs, aug);
    let neg = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg);
    tape.mul_scalar(s, inv_tau)
}

/// Row-wise softmax over cells and dustbin; columns are not normalized, so
/// several keypoints may concentrate on the same cell.
pub fn many_to_one_probs(tape: &mut Tape, scores: Var) -> Var {
    tape.softmax_rows(scores)
}

/// Product of row-softmax and column-softmax (the one-to-one baseline).
pub fn dual_softmax_probs(scores: &Array2<f64>) -> Array2<f64> {
    let rows = softmax_rows(scores);
    let cols = softmax_rows(&scores.t().to_owned());
    rows * &cols.t()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Many-to-one: each keypoint independently picks its best cell.
    M2o,
    /// One-to-one: mutual row/column argmax.
    O2o,
}

/// Selected coarse correspondences `(keypoint, cell, probability)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoarseMatchSet {
    pub entries: Vec<(usize, usize, f64)>,
}

impl CoarseMatchSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV with header `kp_index,cell_row,cell_col,prob`.
    pub fn to_csv(&self, wc: usize) -> String {
        let mut out = String::from("kp_index,cell_row,cell_col,prob\n");
        for &(i, j, p) in &self.entries {
            out.push_str(&format!("{i},{},{},{p}\n", j / wc, j % wc));
        }
        out
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Thresholded selection over a probability matrix with `n_cells` cell
/// columns, optionally followed by a dustbin column. Ties resolve to the
/// lowest index.
pub fn select_matches(p: &Array2<f64>, n_cells: usize, theta: f64, mode: Assignment) -> CoarseMatchSet {
    let has_bin = p.ncols() == n_cells + 1;
    assert!(has_bin || p.ncols() == n_cells, "probability matrix has {} columns for {n_cells} cells", p.ncols());
    let mut entries = Vec::new();
    for i in 0..p.nrows() {
        let row = p.row(i);
        let Some((j, pj)) = argmax(row.iter().take(n_cells).copied()) else { continue };
        if pj < theta || (has_bin && row[n_cells] > pj) {
            continue;
        }
        if mode == Assignment::O2o {
            let (best_i, _) = argmax(p.column(j).iter().copied()).expect("non-empty column");
            if best_i != i {
                continue;
            }
        }
        entries.push((i, j, pj));
    }
    CoarseMatchSet { entries }
}

/// Ground-truth assignment of source keypoints to target cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthCorrespondence {
    pub m_gt: Vec<(usize, usize)>,
    pub u_gt: Vec<usize>,
}

/// Warps every detected keypoint through `truth` (source → target); keypoints
/// with a valid in-bounds correspondence map to the cell containing it, all
/// others (and every padded keypoint) are unmatchable.
pub fn gt_coarse(truth: &GroundTruth, kps: &KeypointSet, width: usize, height: usize) -> GroundTruthCorrespondence {
    let (wc, hc) = (width / COARSE_STRIDE, height / COARSE_STRIDE);
    let mut gt = GroundTruthCorrespondence::default();
    for (i, p) in kps.positions.iter().enumerate() {
        match (!kps.padded[i]).then(|| truth.warp_a_to_b(p, width, height)).flatten() {
            Some(q) => gt.m_gt.push((i, cell_index(&q, wc, hc))),
            None => gt.u_gt.push(i),
        }
    }
    gt
}

/// Mean over layers of the mean negative log-probability of ground-truth cells.
pub fn coarse_loss(tape: &mut Tape, layer_probs: &[Var], gt: &GroundTruthCorrespondence) -> Result<Var> {
    if gt.m_gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let terms: Vec<(Var, f64)> = layer_probs
        .iter()
        .map(|&p| (tape.nll(p, gt.m_gt.clone(), PROB_FLOOR), 1.0 / layer_probs.len() as f64))
        .collect();
    Ok(tape.weighted_sum(&terms))
}

/// Mean negative log dustbin probability over unmatchable keypoints (0 if none).
pub fn dustbin_loss(tape: &mut Tape, probs: Var, gt: &GroundTruthCorrespondence) -> Var {
    if gt.u_gt.is_empty() {
        return tape.constant(Array2::zeros((1, 1)));
    }
    let bin = tape.value(probs).ncols() - 1;
    tape.nll(probs, gt.u_gt.iter().map(|&i| (i, bin)).collect(), PROB_FLOOR)
}

/// Inputs of the coarse stage for one oriented pair.
pub struct CoarseInputs<'a> {
    /// Sparse descriptors `N x C1` (sampled or planted).
    pub sparse: Var,
    /// Dense target cells `(Hc*Wc) x C1`.
    pub dense: Var,
    pub keypoints: &'a KeypointSet,
    pub width: usize,
    pub height: usize,
}

/// Output of the coarse stage: many-to-one probabilities after every block
/// (the last is the prediction) and the final dustbin-augmented scores.
pub struct CoarseOutput {
    pub layer_probs: Vec<Var>,
    pub scores: Var,
}

impl CoarseOutput {
    pub fn probs(&self) -> Var {
        *self.layer_probs.last().expect("at least one layer")
    }
}

/// Runs position encoding and all attention blocks. With `bypass` the raw
/// descriptors are scored directly, once.
pub fn run_coarse(tape: &mut Tape, store: &ParamStore, layers: usize, inp: &CoarseInputs, bypass: bool) -> CoarseOutput {
    if bypass || layers == 0 {
        let s = score_with_dustbin(tape, store, inp.sparse, inp.dense);
        return CoarseOutput { layer_probs: vec![many_to_one_probs(tape, s)], scores: s };
    }
    let mut fs = encode_position(tape, store, inp.sparse, sparse_pos_input(inp.keypoints, inp.width, inp.height));
    let mut fd = encode_position(tape, store, inp.dense, dense_pos_input(inp.width, inp.height));
    let mut layer_probs = Vec::with_capacity(layers);
    let mut scores = None;
    for l in 0..layers {
        (fs, fd) = attention_block(tape, store, l, fs, fd);
        let s = score_with_dustbin(tape, store, fs, fd);
        layer_probs.push(many_to_one_probs(tape, s));
        scores = Some(s);
    }
    CoarseOutput { layer_probs, scores: scores.expect("layers > 0") }
}

/// One-to-one baseline probabilities from the final scores (dustbin column dropped).
pub fn dual_softmax_from(tape: &Tape, scores: Var) -> Array2<f64> {
    let s = tape.value(scores);
    dual_softmax_probs(&s.slice(ndarray::s![.., ..s.ncols() - 1]).to_owned())
}

/// Sampling map for sparse coarse descriptors at keypoint positions.
pub fn sparse_mix(kps: &KeypointSet, width: usize, height: usize) -> Rc<RowMix> {
    Rc::new(crate::extract::point_sample_mix(
        &kps.positions,
        height / COARSE_STRIDE,
        width / COARSE_STRIDE,
        COARSE_STRIDE,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::keypoints_at;
    use crate::geometry::{Homography, Pt2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(c: usize, layers: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let dims = MatcherDims { c1: c, layers, pe_widths: [4, 6] };
        init_matcher(&mut s, &dims, 0.1, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    fn zero_prefix(s: &mut ParamStore, prefix: &str) {
        let ids: Vec<_> = s.ids().filter(|&id| s.name(id).starts_with(prefix)).collect();
        for id in ids {
            s.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn zero_position_mlp_is_identity() {
        let mut s = store(8, 1, 0);
        zero_prefix(&mut s, "coarse.pe");
        let mut t = Tape::new();
        let f = t.constant(randn(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let kps = keypoints_at((0..5).map(|i| Pt2::new(i as f64 * 3.0, 7.0)).collect());
        let e = encode_position(&mut t, &s, f, sparse_pos_input(&kps, 32, 32));
        assert_eq!(t.value(e), t.value(f));
    }

    #[test]
    fn identical_keypoints_encode_identically() {
        let s = store(8, 1, 0);
        let mut t = Tape::new();
        let row = randn(1, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let f = t.constant(ndarray::concatenate![ndarray::Axis(0), row, row]);
        let kps = keypoints_at(vec![Pt2::new(3.0, 4.0), Pt2::new(3.0, 4.0)]);
        let e = encode_position(&mut t, &s, f, sparse_pos_input(&kps, 32, 32));
        assert_eq!(t.value(e).row(0), t.value(e).row(1));
    }

    #[test]
    fn zero_value_and_mlp_block_is_identity() {
        let mut s = store(8, 1, 0);
        for kind in ["self", "cross"] {
            zero_prefix(&mut s, &format!("coarse.0.{kind}.v"));
            zero_prefix(&mut s, &format!("coarse.0.{kind}.mlp"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let fs = t.constant(randn(5, 8, 1.0, &mut rng));
        let fd = t.constant(randn(16, 8, 1.0, &mut rng));
        let (a, b) = attention_block(&mut t, &s, 0, fs, fd);
        assert_eq!(t.value(a), t.value(fs));
        assert_eq!(t.value(b), t.value(fd));
    }

    #[test]
    fn sparse_permutation_is_equivariant() {
        let s = store(8, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fs = randn(6, 8, 1.0, &mut rng);
        let fd = randn(16, 8, 1.0, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let fs_p = Array2::from_shape_fn((6, 8), |(i, k)| fs[(perm[i], k)]);
        let run = |x: Array2<f64>| {
            let mut t = Tape::new();
            let a = t.constant(x);
            let b = t.constant(fd.clone());
            let (a, b) = attention_block(&mut t, &s, 0, a, b);
            let (a, b) = attention_block(&mut t, &s, 1, a, b);
            (t.value(a).clone(), t.value(b).clone())
        };
        let (a0, b0) = run(fs);
        let (a1, b1) = run(fs_p);
        for i in 0..6 {
            for k in 0..8 {
                assert!((a1[(i, k)] - a0[(perm[i], k)]).abs() < 1e-12);
            }
        }
        assert!((&b1 - &b0).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = softmax_rows(&randn(7, 12, 5.0, &mut rng));
        assert!(p.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-6));
    }

    #[test]
    fn score_matrix_cases() {
        let mut s = store(4, 1, 0);
        let mut t = Tape::new();
        let fs = t.constant(ndarray::array![[1.0, 0.0, 0.0, 0.0]]);
        let fd = t.constant(ndarray::array![[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);
        let sc = score_with_dustbin(&mut t, &s, fs, fd);
        assert!(t.value(sc).iter().all(|&v| v == 0.0));
        assert_eq!(t.value(sc).dim(), (1, 3));

        let fd2 = t.constant(ndarray::array![[0.5, 1.0, 0.0, 0.0], [-0.2, 0.0, 1.0, 0.0]]);
        let a = score_with_dustbin(&mut t, &s, fs, fd2);
        let before = t.value(a).clone();
        let id = s.id("coarse.log_tau");
        s.value_mut(id)[(0, 0)] = (0.05f64).ln();
        let mut t2 = Tape::new();
        let fs = t2.constant(ndarray::array![[1.0, 0.0, 0.0, 0.0]]);
        let fd2 = t2.constant(ndarray::array![[0.5, 1.0, 0.0, 0.0], [-0.2, 0.0, 1.0, 0.0]]);
        let b = score_with_dustbin(&mut t2, &s, fs, fd2);
        for (x, y) in before.iter().zip(t2.value(b).iter()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn many_to_one_cases() {
        let p = softmax_rows(&Array2::zeros((2, 5)));
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let mut s = Array2::zeros((3, 11));
        for i in 0..3 {
            s[(i, 7)] = 10.0;
        }
        let p = softmax_rows(&s);
        for i in 0..3 {
            assert!(p[(i, 7)] > 0.99);
        }
    }

    #[test]
    fn dual_softmax_cases() {
        assert_eq!(dual_softmax_probs(&ndarray::array![[3.0]]), ndarray::array![[1.0]]);
        let mut s = Array2::zeros((3, 10));
        for i in 0..3 {
            s[(i, 7)] = 10.0;
        }
        let p = dual_softmax_probs(&s);
        assert!(select_matches(&p, 10, 0.2, Assignment::O2o).len() <= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = dual_softmax_probs(&randn(6, 9, 3.0, &mut rng));
        assert!(p.rows().into_iter().all(|r| r.sum() <= 1.0 + 1e-9));
        assert!(p.columns().into_iter().all(|c| c.sum() <= 1.0 + 1e-9));
    }

    #[test]
    fn selection_cases() {
        let p = ndarray::array![[0.05, 0.05, 0.9], [0.7, 0.2, 0.1], [0.1, 0.1, 0.8]];
        let m = select_matches(&p, 2, 0.2, Assignment::M2o);
        assert_eq!(m.entries, vec![(1, 0, 0.7)]);
        let conflict = ndarray::array![[0.97, 0.01, 0.02], [0.97, 0.01, 0.02], [0.97, 0.02, 0.01]];
        assert_eq!(select_matches(&conflict, 2, 0.2, Assignment::M2o).len(), 3);
        assert!(select_matches(&conflict, 2, 0.2, Assignment::O2o).len() <= 1);
        let low = Array2::from_elem((4, 6), 1.0 / 6.0);
        assert!(select_matches(&low, 5, 0.2, Assignment::M2o).is_empty());
        // ties go to the lowest column
        let tie = ndarray::array![[0.45, 0.45, 0.1]];
        assert_eq!(select_matches(&tie, 2, 0.2, Assignment::M2o).entries, vec![(0, 0, 0.45)]);
    }

    #[test]
    fn gt_coarse_cases() {
        let truth = GroundTruth::Planar(Homography::identity());
        let kps = keypoints_at(vec![Pt2::new(12.0, 20.0), Pt2::new(200.0, 3.0)]);
        let gt = gt_coarse(&truth, &kps, 128, 128);
        assert_eq!(gt.m_gt, vec![(0, 33)]);
        assert_eq!(gt.u_gt, vec![1]);
        let mut padded = keypoints_at(vec![Pt2::new(12.0, 20.0)]);
        padded.padded[0] = true;
        assert_eq!(gt_coarse(&truth, &padded, 128, 128).u_gt, vec![0]);
    }

    #[test]
    fn loss_values() {
        let mut t = Tape::new();
        let perfect = t.constant(ndarray::array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let gt = GroundTruthCorrespondence { m_gt: vec![(0, 0)], u_gt: vec![1] };
        let l = coarse_loss(&mut t, &[perfect, perfect], &gt).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let d = dustbin_loss(&mut t, perfect, &gt);
        assert_eq!(t.scalar(d), 0.0);

        let k = 6;
        let uniform = t.constant(Array2::from_elem((2, k + 1), 1.0 / (k + 1) as f64));
        let l = coarse_loss(&mut t, &[uniform], &gt).unwrap();
        assert!((t.scalar(l) - ((k + 1) as f64).ln()).abs() < 1e-12);
        let d = dustbin_loss(&mut t, uniform, &gt);
        assert!((t.scalar(d) - ((k + 1) as f64).ln()).abs() < 1e-12);

        let empty = GroundTruthCorrespondence { m_gt: vec![(0, 0)], u_gt: vec![] };
        let d = dustbin_loss(&mut t, uniform, &empty);
        assert_eq!(t.scalar(d), 0.0);
        let none = GroundTruthCorrespondence::default();
        assert!(matches!(coarse_loss(&mut t, &[uniform], &none), Err(Error::EmptyGroundTruth)));
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = softmax_rows(&randn(5, 17, scale, &mut rng));
            for r in p.rows() {
                prop_assert!((r.sum() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn shared_argmax_rows_all_survive_many_to_one(seed in 0u64..500, m in 2usize..6, peak in 5.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = randn(m + 2, 13, 0.5, &mut rng);
            let col = (seed % 12) as usize;
            for i in 0..m {
                s[(i, col)] = peak;
            }
            let p = softmax_rows(&s);
            let sel = select_matches(&p, 12, 0.2, Assignment::M2o);
            let hits = sel.entries.iter().filter(|e| e.1 == col && e.0 < m).count();
            prop_assert_eq!(hits, m);
            let cells = s.slice(ndarray::s![.., ..12]).to_owned();
            let dual = dual_softmax_probs(&cells);
            let o2o = select_matches(&dual, 12, 0.2, Assignment::O2o);
            prop_assert!(o2o.entries.iter().filter(|e| e.1 == col).count() <= 1);
        }

        #[test]
        fn argmax_invariant_to_positive_scaling(seed in 0u64..500, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = randn(6, 9, 2.0, &mut rng);
            let a = select_matches(&softmax_rows(&s), 8, 0.0, Assignment::M2o);
            let b = select_matches(&softmax_rows(&(&s * c)), 8, 0.0, Assignment::M2o);
            let cols = |m: &CoarseMatchSet| m.entries.iter().map(|e| (e.0, e.1)).collect::<Vec<_>>();
            prop_assert_eq!(cols(&a), cols(&b));
        }
    }
}
