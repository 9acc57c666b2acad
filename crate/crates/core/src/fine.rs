//! Fine matching: for each coarse match, a single source feature sampled at
//! the keypoint attends to a `w x w` window of the target fine map cropped at
//! the matched cell; the refined position is the expectation of the window
//! correlation softmax.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::extract::{grid_coord, image_coord, point_sample_mix, COARSE_STRIDE, FINE_STRIDE};
use crate::geometry::Pt2;
use crate::params::{randn, ParamStore};
use crate::tape::{MapGeom, RowMix, Tape, Var};

pub fn init_fine<R: Rng>(store: &mut ParamStore, c2: usize, layers: usize, rng: &mut R) {
    let proj = 1.0 / (c2 as f64).sqrt();
    for l in 0..layers {
        for m in ["q", "k", "v", "o"] {
            store.add(&format!("refine.{l}.{m}.w"), randn(c2, c2, proj, rng), true);
        }
        let fan_in = 9 * 2 * c2;
        store.add(&format!("refine.{l}.conv.w"), randn(fan_in, c2, 0.1 / (fan_in as f64).sqrt(), rng), true);
    }
}

/// Integer fine-map pixel a window of side `w` is centered on for coarse
/// cell `(row, col)`: the cell center `(c + 0.5) * 4 - 0.5` floored, then
/// clamped so the whole window lies inside the map.
pub fn window_center(row: usize, col: usize, hf: usize, wf: usize, w: usize) -> (usize, usize) {
    let ratio = (COARSE_STRIDE / FINE_STRIDE) as f64;
    let r = w / 2;
    let place = |c: usize, n: usize| (((c as f64 + 0.5) * ratio - 0.5).floor() as usize).clamp(r, n - 1 - r);
    (place(col, wf), place(row, hf))
}

/// Source features and target windows for a list of coarse matches.
#[derive(Debug, Clone)]
pub struct FineWindowBatch {
    pub window: usize,
    /// Window center pixels `(x, y)` on the target fine map.
    pub centers: Vec<(usize, usize)>,
    /// Gathers the `K * w^2` window cells (row-major within a window) from the target fine map.
    pub gather: Rc<RowMix>,
}

impl FineWindowBatch {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Window offsets `(dx, dy)` relative to the center, in cell order.
    pub fn offsets(&self) -> Array2<f64> {
        let w = self.window;
        let r = (w / 2) as f64;
        Array2::from_shape_fn((w * w, 2), |(g, k)| if k == 0 { (g % w) as f64 - r } else { (g / w) as f64 - r })
    }
}

/// Windows at target cells (row-major indices on a `wc`-wide coarse grid).
pub fn crop_windows(cells: &[usize], wc: usize, hf: usize, wf: usize, w: usize) -> FineWindowBatch {
    assert!(w % 2 == 1, "window side must be odd");
    let r = w / 2;
    let centers: Vec<_> = cells.iter().map(|&c| window_center(c / wc, c % wc, hf, wf, w)).collect();
    let mut gather = RowMix::new(centers.len() * w * w, hf * wf);
    for (k, &(cx, cy)) in centers.iter().enumerate() {
        for dy in 0..w {
            for dx in 0..w {
                gather.push(k * w * w + dy * w + dx, (cy + dy - r) * wf + (cx + dx - r), 1.0);
            }
        }
    }
    FineWindowBatch { window: w, centers, gather: Rc::new(gather) }
}

/// Bilinear samples of a fine map at image positions.
pub fn source_mix(points: &[Pt2], hf: usize, wf: usize) -> Rc<RowMix> {
    Rc::new(point_sample_mix(points, hf, wf, FINE_STRIDE))
}

fn proj(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = tape.param(store, store.id(name));
    tape.matmul(x, w)
}

/// `layers` rounds of bidirectional cross-attention between each source
/// feature (`K x C`) and its window (`K*w^2 x C`), each side updated by
/// `F + Conv3([F | M])`. The source side is a 1x1 map, so only the center
/// tap of the kernel reaches it.
pub fn fine_attention(
    tape: &mut Tape,
    store: &ParamStore,
    layers: usize,
    w: usize,
    mut src: Var,
    mut win: Var,
) -> (Var, Var) {
    let k = tape.value(src).nrows();
    if k == 0 {
        return (src, win);
    }
    let groups = w * w;
    let c = tape.value(src).ncols() as f64;
    let mut bcast = RowMix::new(k * groups, k);
    for r in 0..k * groups {
        bcast.push(r, r / groups, 1.0);
    }
    let bcast = Rc::new(bcast);
    let win_geom = MapGeom { batch: k, height: w, width: w };
    let src_geom = MapGeom { batch: k, height: 1, width: 1 };
    for l in 0..layers {
        let p = |m: &str| format!("refine.{l}.{m}.w");
        let conv = tape.param(store, store.id(&p("conv")));

        // source <- window
        let q = proj(tape, store, &p("q"), src);
        let kk = proj(tape, store, &p("k"), win);
        let v = proj(tape, store, &p("v"), win);
        let logits = tape.group_dot(q, kk, groups);
        let logits = tape.scale(logits, 1.0 / c.sqrt());
        let att = tape.softmax_rows(logits);
        let m = tape.group_sum(att, v, groups);
        let m_src = proj(tape, store, &p("o"), m);

        // window <- source: a single key, so every cell receives V(source)
        let v = proj(tape, store, &p("v"), src);
        let m = proj(tape, store, &p("o"), v);
        let m_win = tape.mix(m, bcast.clone());

        let cat = tape.concat_cols(&[src, m_src]);
        let d = tape.conv3x3(cat, conv, src_geom);
        src = tape.add(src, d);
        let cat = tape.concat_cols(&[win, m_win]);
        let d = tape.conv3x3(cat, conv, win_geom);
        win = tape.add(win, d);
    }
    (src, win)
}

/// Window softmax (`K x w^2`) and expected offset from the window center (`K x 2`).
pub fn refine_expectation(tape: &mut Tape, batch: &FineWindowBatch, src: Var, win: Var) -> (Var, Var) {
    let groups = batch.window * batch.window;
    let corr = tape.group_dot(src, win, groups);
    let probs = tape.softmax_rows(corr);
    let offsets = tape.constant(batch.offsets());
    let expect = tape.matmul(probs, offsets);
    (probs, expect)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineMatch {
    /// Keypoint in the source image.
    pub source: Pt2,
    /// Refined position in the target image.
    pub target: Pt2,
    pub confidence: f64,
}

/// Image-space targets and confidences from refinement outputs.
pub fn to_matches(
    batch: &FineWindowBatch,
    sources: &[Pt2],
    probs: &Array2<f64>,
    expect: &Array2<f64>,
) -> Vec<FineMatch> {
    (0..batch.len())
        .map(|k| {
            let (cx, cy) = batch.centers[k];
            let fx = cx as f64 + expect[(k, 0)];
            let fy = cy as f64 + expect[(k, 1)];
            FineMatch {
                source: sources[k],
                target: Pt2::new(image_coord(fx, FINE_STRIDE), image_coord(fy, FINE_STRIDE)),
                confidence: probs.row(k).fold(0.0, |a: f64, &b| a.max(b)),
            }
        })
        .collect()
}

/// Mean squared distance (fine-map pixels) between refined and true target
/// positions over matches whose truth lies inside the window footprint.
/// Returns the loss and the number of supervised matches; with none the
/// loss is a constant 0.
pub fn fine_loss(tape: &mut Tape, batch: &FineWindowBatch, expect: Var, truth: &[Option<Pt2>]) -> (Var, usize) {
    let reach = (batch.window / 2) as f64 + 0.5;
    let mut target = Array2::zeros((batch.len(), 2));
    let mut rows = Vec::new();
    for (k, t) in truth.iter().enumerate() {
        let Some(t) = t else { continue };
        let (cx, cy) = batch.centers[k];
        let dx = grid_coord(t.x, FINE_STRIDE) - cx as f64;
        let dy = grid_coord(t.y, FINE_STRIDE) - cy as f64;
        if dx.abs() <= reach && dy.abs() <= reach {
            target[(k, 0)] = dx;
            target[(k, 1)] = dy;
            rows.push(k);
        }
    }
    if rows.is_empty() {
        return (tape.constant(Array2::zeros((1, 1))), 0);
    }
    let n = rows.len();
    (tape.mse_rows(expect, target, rows), n)
}
