//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! Every value is a `rows x cols` matrix. Spatial maps are stored as
//! `(batch * height * width) x channels` with rows in `(b, y, x)` order, and
//! the spatial ops take their geometry explicitly. Nodes whose inputs are all
//! constants are not differentiated.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Fixed sparse linear map over rows: `out[r] += w * in[i]` for each tap.
/// Covers bilinear sampling, gathers, resampling and average pooling.
#[derive(Debug, Clone, Default)]
pub struct RowMix {
    pub rows_out: usize,
    pub rows_in: usize,
    pub taps: Vec<(u32, u32, f64)>,
}

impl RowMix {
    pub fn new(rows_out: usize, rows_in: usize) -> Self {
        Self { rows_out, rows_in, taps: Vec::new() }
    }

    pub fn push(&mut self, out_row: usize, in_row: usize, weight: f64) {
        debug_assert!(out_row < self.rows_out && in_row < self.rows_in);
        self.taps.push((out_row as u32, in_row as u32, weight));
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.rows_in, "row mix input rows");
        let c = x.ncols();
        let mut out = Array2::zeros((self.rows_out, c));
        let xs = x.as_slice().expect("standard layout");
        let os = out.as_slice_mut().unwrap();
        for &(r, i, w) in &self.taps {
            let (r, i) = (r as usize * c, i as usize * c);
            for k in 0..c {
                os[r + k] += w * xs[i + k];
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Array2<f64>) -> Array2<f64> {
        let c = g.ncols();
        let mut out = Array2::zeros((self.rows_in, c));
        let gs = g.as_slice().expect("standard layout");
        let os = out.as_slice_mut().unwrap();
        for &(r, i, w) in &self.taps {
            let (r, i) = (r as usize * c, i as usize * c);
            for k in 0..c {
                os[i + k] += w * gs[r + k];
            }
        }
        out
    }
}

/// Geometry of a batch of equally sized spatial maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl MapGeom {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    Conv3x3 { x: Var, w: Var, geom: MapGeom },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Mix(Var, Rc<RowMix>),
    GroupDot(Var, Var, usize),
    GroupSum(Var, Var, usize),
    Standardize { x: Var, inv_std: Vec<f64> },
    Nll { p: Var, entries: Vec<(usize, usize)>, floor: f64 },
    Bce { p: Var, labels: Vec<f64>, floor: f64 },
    Mse { x: Var, target: Array2<f64>, rows: Vec<usize> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    /// Batch statistics produced by `standardize`, in call order.
    batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every trainable parameter that reached the output.
    pub fn params(&self) -> Vec<(ParamId, &Array2<f64>)> {
        self.params.iter().filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g))).collect()
    }
}

fn im2col(x: &Array2<f64>, geom: MapGeom) -> Array2<f64> {
    let c = x.ncols();
    let (h, w) = (geom.height as isize, geom.width as isize);
    let mut cols = Array2::zeros((geom.rows(), 9 * c));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().unwrap();
    let row_len = 9 * c;
    for b in 0..geom.batch as isize {
        for y in 0..h {
            for xx in 0..w {
                let r = ((b * h + y) * w + xx) as usize;
                for t in 0..9isize {
                    let (sy, sx) = (y + t / 3 - 1, xx + t % 3 - 1);
                    if sy < 0 || sy >= h || sx < 0 || sx >= w {
                        continue;
                    }
                    let src = ((b * h + sy) * w + sx) as usize * c;
                    let dst = r * row_len + t as usize * c;
                    cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, geom: MapGeom, c: usize) -> Array2<f64> {
    let (h, w) = (geom.height as isize, geom.width as isize);
    let mut x = Array2::zeros((geom.rows(), c));
    let cs = cols.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().unwrap();
    let row_len = 9 * c;
    for b in 0..geom.batch as isize {
        for y in 0..h {
            for xx in 0..w {
                let r = ((b * h + y) * w + xx) as usize;
                for t in 0..9isize {
                    let (sy, sx) = (y + t / 3 - 1, xx + t % 3 - 1);
                    if sy < 0 || sy >= h || sx < 0 || sx >= w {
                        continue;
                    }
                    let dst = ((b * h + sy) * w + sx) as usize * c;
                    let src = r * row_len + t as usize * c;
                    for k in 0..c {
                        xs[dst + k] += cs[src + k];
                    }
                }
            }
        }
    }
    x
}

/// 3x3 convolution, stride 1, zero padding. `weight` is `(9 * c_in) x c_out`
/// with taps in row-major `(dy, dx)` order.
pub fn conv3x3(x: &Array2<f64>, weight: &Array2<f64>, geom: MapGeom) -> Array2<f64> {
    assert_eq!(x.nrows(), geom.rows(), "conv input rows");
    assert_eq!(weight.nrows(), 9 * x.ncols(), "conv weight rows");
    im2col(x, geom).dot(weight)
}

/// 2x2 max pooling; returns the pooled map and the flat argmax index of each output.
pub fn max_pool2(x: &Array2<f64>, geom: MapGeom) -> (Array2<f64>, Vec<u32>) {
    let c = x.ncols();
    let (h2, w2) = (geom.height / 2, geom.width / 2);
    let mut out = Array2::zeros((geom.batch * h2 * w2, c));
    let mut arg = vec![0u32; geom.batch * h2 * w2 * c];
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().unwrap();
    for b in 0..geom.batch {
        for y in 0..h2 {
            for xx in 0..w2 {
                let o = (b * h2 + y) * w2 + xx;
                for k in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * geom.height + 2 * y + dy) * geom.width + 2 * xx + dx) * c + k;
                        if xs[i] > best {
                            best = xs[i];
                            best_i = i;
                        }
                    }
                    os[o * c + k] = best;
                    arg[o * c + k] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

fn add_into(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

const NORM_EPS: f64 = 1e-12;
const BN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().into_owned() };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that gradients flow into (for checks against non-parameter inputs).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let r = self.req(&[a, b]);
        self.push(v, Op::MatMul(a, b), r)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let r = self.req(&[a, b]);
        self.push(v, Op::MatMulT(a, b), r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let r = self.req(&[a, b]);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let r = self.req(&[a, b]);
        self.push(v, Op::Sub(a, b), r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let r = self.req(&[a, b]);
        self.push(v, Op::Mul(a, b), r)
    }

    /// Adds the `1 x C` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(b);
        let r = self.req(&[a, b]);
        self.push(v, Op::AddRow(a, b), r)
    }

    /// Multiplies every row of `a` elementwise by the `1 x C` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "mul_row expects a single row");
        let v = self.value(a) * self.value(b);
        let r = self.req(&[a, b]);
        self.push(v, Op::MulRow(a, b), r)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let r = self.req(&[a]);
        self.push(v, Op::Scale(a, c), r)
    }

    /// Multiplies `a` by the value of the 1x1 node `k`.
    pub fn mul_scalar(&mut self, a: Var, k: Var) -> Var {
        let v = self.value(a) * self.scalar(k);
        let r = self.req(&[a, k]);
        self.push(v, Op::MulScalar(a, k), r)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let r = self.req(&[a]);
        self.push(v, Op::Exp(a), r)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let r = self.req(&[a]);
        self.push(v, Op::Relu(a), r)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let r = self.req(&[a]);
        self.push(v, Op::Sigmoid(a), r)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let r = self.req(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), r)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        let r = self.req(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), r)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let r = self.req(&[a]);
        self.push(v, Op::SliceRows(a, start), r)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let r = self.req(&[a]);
        self.push(v, Op::SliceCols(a, start), r)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let r = self.req(&[a]);
        self.push(v, Op::SoftmaxRows(a), r)
    }

    /// Rows divided by `sqrt(|row|^2 + 1e-12)`; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = (row.dot(&row) + NORM_EPS).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        let r = self.req(&[a]);
        self.push(v, Op::NormalizeRows(a), r)
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, geom: MapGeom) -> Var {
        let v = conv3x3(self.value(x), self.value(w), geom);
        let r = self.req(&[x, w]);
        self.push(v, Op::Conv3x3 { x, w, geom }, r)
    }

    pub fn max_pool2(&mut self, x: Var, geom: MapGeom) -> Var {
        let (v, argmax) = max_pool2(self.value(x), geom);
        let r = self.req(&[x]);
        self.push(v, Op::MaxPool2 { x, argmax }, r)
    }

    pub fn mix(&mut self, x: Var, m: Rc<RowMix>) -> Var {
        let v = m.apply(self.value(x));
        let r = self.req(&[x]);
        self.push(v, Op::Mix(x, m), r)
    }

    /// `out[k, g] = <a_k, b_{k*groups + g}>` for `a: K x C`, `b: (K*groups) x C`.
    pub fn group_dot(&mut self, a: Var, b: Var, groups: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.nrows();
        assert_eq!(bv.nrows(), k * groups, "group_dot rows");
        let mut v = Array2::zeros((k, groups));
        for i in 0..k {
            let ai = av.row(i);
            for g in 0..groups {
                v[(i, g)] = ai.dot(&bv.row(i * groups + g));
            }
        }
        let r = self.req(&[a, b]);
        self.push(v, Op::GroupDot(a, b, groups), r)
    }

    /// `out_k = sum_g p[k, g] * v_{k*groups + g}`.
    pub fn group_sum(&mut self, p: Var, vals: Var, groups: usize) -> Var {
        let (pv, vv) = (self.value(p), self.value(vals));
        let k = pv.nrows();
        assert_eq!(pv.ncols(), groups, "group_sum weight cols");
        assert_eq!(vv.nrows(), k * groups, "group_sum rows");
        let mut out = Array2::zeros((k, vv.ncols()));
        for i in 0..k {
            let mut row = out.row_mut(i);
            for g in 0..groups {
                row.scaled_add(pv[(i, g)], &vv.row(i * groups + g));
            }
        }
        let r = self.req(&[p, vals]);
        self.push(out, Op::GroupSum(p, vals, groups), r)
    }

    /// Per-column standardization over all rows (batch statistics). The
    /// column means and biased variances are recorded for running averages.
    pub fn standardize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mean = xv.mean_axis(Axis(0)).expect("non-empty");
        let centered = xv - &mean;
        let var = centered.mapv(|d| d * d).sum_axis(Axis(0)) / n;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let scale = ndarray::Array1::from(inv_std.clone());
        let v = centered * &scale;
        self.batch_stats.push((mean.to_vec(), var.to_vec()));
        let r = self.req(&[x]);
        self.push(v, Op::Standardize { x, inv_std }, r)
    }

    pub fn batch_stats(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.batch_stats
    }

    /// `-(1/n) * sum log(max(p[r, c], floor))` over the listed entries.
    pub fn nll(&mut self, p: Var, entries: Vec<(usize, usize)>, floor: f64) -> Var {
        let pv = self.value(p);
        let n = entries.len().max(1) as f64;
        let total: f64 = entries.iter().map(|&(r, c)| pv[(r, c)].max(floor).ln()).sum();
        let r = self.req(&[p]);
        self.push(Array2::from_elem((1, 1), -total / n), Op::Nll { p, entries, floor }, r)
    }

    /// Mean binary cross-entropy of the column `p` against `labels`, with
    /// probabilities clamped to `[floor, 1 - floor]`.
    pub fn bce(&mut self, p: Var, labels: Vec<f64>, floor: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), labels.len(), "bce label count");
        let n = labels.len().max(1) as f64;
        let total: f64 = pv
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(floor, 1.0 - floor);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let r = self.req(&[p]);
        self.push(Array2::from_elem((1, 1), total / n), Op::Bce { p, labels, floor }, r)
    }

    /// Mean over `rows` of the squared Euclidean distance between rows of `x` and `target`.
    pub fn mse_rows(&mut self, x: Var, target: Array2<f64>, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let n = rows.len().max(1) as f64;
        let total: f64 = rows
            .iter()
            .map(|&r| xv.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        let r = self.req(&[x]);
        self.push(Array2::from_elem((1, 1), total / n), Op::Mse { x, target, rows }, r)
    }

    /// Sum of `weight * term` over 1x1 nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(t, w) in terms {
            let scaled = self.scale(t, w);
            acc = Some(match acc {
                Some(a) => self.add(a, scaled),
                None => scaled,
            });
        }
        acc.unwrap_or_else(|| self.constant(Array2::zeros((1, 1))))
    }

    /// Back-propagates from the 1x1 node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            // only leaves keep their gradient; intermediates are freed as we go
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let mut params = self.params.iter().map(|(&id, &v)| (id, v)).collect::<Vec<_>>();
        params.sort_by_key(|&(id, _)| id);
        Grads { grads, params }
    }

    fn backward_node(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g.dot(&val(*b).t()));
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g.dot(val(*b)));
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], -g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g * val(*b));
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], g * val(*a));
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g * val(*b));
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g * *c);
                }
            }
            Op::MulScalar(a, k) => {
                let kv = val(*k)[(0, 0)];
                if needs(*a) {
                    add_into(&mut grads[a.0], g * kv);
                }
                if needs(*k) {
                    add_into(&mut grads[k.0], Array2::from_elem((1, 1), (g * val(*a)).sum()));
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g * &node.value);
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    });
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g * &node.value.mapv(|y| y * (1.0 - y)));
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if needs(*p) {
                        add_into(&mut grads[p.0], g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    if needs(*p) {
                        add_into(&mut grads[p.0], g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                if needs(*a) {
                    let mut d = Array2::zeros(val(*a).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::SliceCols(a, start) => {
                if needs(*a) {
                    let mut d = Array2::zeros(val(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    add_into(&mut grads[a.0], y * &(g - &dot));
                }
            }
            Op::NormalizeRows(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let x = val(*a);
                    let mut d = Array2::zeros(x.raw_dim());
                    for ((mut dr, gr), (yr, xr)) in
                        d.rows_mut().into_iter().zip(g.rows()).zip(y.rows().into_iter().zip(x.rows()))
                    {
                        let n = (xr.dot(&xr) + NORM_EPS).sqrt();
                        let gy = gr.dot(&yr);
                        Zip::from(&mut dr).and(&gr).and(&yr).for_each(|d, &gv, &yv| *d = (gv - yv * gy) / n);
                    }
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::Conv3x3 { x, w, geom } => {
                if needs(*w) {
                    let cols = im2col(val(*x), *geom);
                    add_into(&mut grads[w.0], cols.t().dot(g));
                }
                if needs(*x) {
                    let dcols = g.dot(&val(*w).t());
                    add_into(&mut grads[x.0], col2im(&dcols, *geom, val(*x).ncols()));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if needs(*x) {
                    let mut d = Array2::<f64>::zeros(val(*x).raw_dim());
                    let ds = d.as_slice_mut().unwrap();
                    for (gv, &i) in g.iter().zip(argmax) {
                        ds[i as usize] += gv;
                    }
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::Mix(x, m) => {
                if needs(*x) {
                    add_into(&mut grads[x.0], m.apply_transpose(g));
                }
            }
            Op::GroupDot(a, b, groups) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let mut d = Array2::zeros(av.raw_dim());
                    for k in 0..av.nrows() {
                        let mut row = d.row_mut(k);
                        for gi in 0..*groups {
                            row.scaled_add(g[(k, gi)], &bv.row(k * groups + gi));
                        }
                    }
                    add_into(&mut grads[a.0], d);
                }
                if needs(*b) {
                    let mut d = Array2::zeros(bv.raw_dim());
                    for k in 0..av.nrows() {
                        for gi in 0..*groups {
                            d.row_mut(k * groups + gi).scaled_add(g[(k, gi)], &av.row(k));
                        }
                    }
                    add_into(&mut grads[b.0], d);
                }
            }
            Op::GroupSum(p, v, groups) => {
                let (pv, vv) = (val(*p), val(*v));
                if needs(*p) {
                    let mut d = Array2::zeros(pv.raw_dim());
                    for k in 0..pv.nrows() {
                        for gi in 0..*groups {
                            d[(k, gi)] = g.row(k).dot(&vv.row(k * groups + gi));
                        }
                    }
                    add_into(&mut grads[p.0], d);
                }
                if needs(*v) {
                    let mut d = Array2::zeros(vv.raw_dim());
                    for k in 0..pv.nrows() {
                        for gi in 0..*groups {
                            d.row_mut(k * groups + gi).scaled_add(pv[(k, gi)], &g.row(k));
                        }
                    }
                    add_into(&mut grads[v.0], d);
                }
            }
            Op::Standardize { x, inv_std } => {
                if needs(*x) {
                    let y = &node.value;
                    let n = y.nrows() as f64;
                    let g_mean = g.sum_axis(Axis(0)) / n;
                    let gy_mean = (g * y).sum_axis(Axis(0)) / n;
                    let scale = ndarray::Array1::from(inv_std.clone());
                    let d = (g - &g_mean - &(y * &gy_mean)) * &scale;
                    add_into(&mut grads[x.0], d);
                }
            }
            Op::Nll { p, entries, floor } => {
                if needs(*p) {
                    let pv = val(*p);
                    let n = entries.len().max(1) as f64;
                    let mut d = Array2::zeros(pv.raw_dim());
                    for &(r, c) in entries {
                        if pv[(r, c)] > *floor {
                            d[(r, c)] -= g[(0, 0)] / (n * pv[(r, c)]);
                        }
                    }
                    add_into(&mut grads[p.0], d);
                }
            }
            Op::Bce { p, labels, floor } => {
                if needs(*p) {
                    let pv = val(*p);
                    let n = labels.len().max(1) as f64;
                    let mut d = Array2::zeros(pv.raw_dim());
                    for ((dv, &p), &y) in d.iter_mut().zip(pv.iter()).zip(labels) {
                        if p > *floor && p < 1.0 - *floor {
                            *dv = g[(0, 0)] * (-y / p + (1.0 - y) / (1.0 - p)) / n;
                        }
                    }
                    add_into(&mut grads[p.0], d);
                }
            }
            Op::Mse { x, target, rows } => {
                if needs(*x) {
                    let xv = val(*x);
                    let n = rows.len().max(1) as f64;
                    let mut d = Array2::zeros(xv.raw_dim());
                    for &r in rows {
                        for c in 0..xv.ncols() {
                            d[(r, c)] = g[(0, 0)] * 2.0 * (xv[(r, c)] - target[(r, c)]) / n;
                        }
                    }
                    add_into(&mut grads[x.0], d);
                }
            }
        }
    }
}
