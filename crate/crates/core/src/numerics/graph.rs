//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass as a node.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar node with respect to every node that depends on a parameter.
//! Reductions run in a fixed row-major order, so repeated runs are bitwise
//! identical.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value is computed by the caller and whose
/// backward rule is supplied here.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Vec<Tensor>;
}

/// Deliberate backward-rule corruption used to prove the gradient checker
/// catches broken rules.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    LinearWeightGrad,
}

/// Bilinear taps for one sample point: four `(flat cell, weight)` pairs.
/// Out-of-bounds cells carry weight 0.
pub type Taps = [(usize, f64); 4];

/// Computes bilinear taps for a point in cell units on an `h × w` grid.
///
/// Integer coordinates are cell centers; the first coordinate runs along
/// rows.
pub fn bilinear_taps(p: (f64, f64), h: usize, w: usize) -> Result<Taps> {
    if !p.0.is_finite() || !p.1.is_finite() {
        return Err(Error::NonFinite(format!("sample point {p:?}")));
    }
    // far outside the map every tap is zero anyway
    let u = p.0.clamp(-2.0, h as f64 + 1.0);
    let v = p.1.clamp(-2.0, w as f64 + 1.0);
    let (i0, k0) = (u.floor(), v.floor());
    let (fu, fv) = (u - i0, v - k0);
    let (i0, k0) = (i0 as isize, k0 as isize);
    let mut taps = [(0usize, 0.0f64); 4];
    let corners = [
        (i0, k0, (1.0 - fu) * (1.0 - fv)),
        (i0, k0 + 1, (1.0 - fu) * fv),
        (i0 + 1, k0, fu * (1.0 - fv)),
        (i0 + 1, k0 + 1, fu * fv),
    ];
    for (slot, (i, k, wgt)) in taps.iter_mut().zip(corners) {
        if i >= 0 && k >= 0 && (i as usize) < h && (k as usize) < w {
            *slot = (i as usize * w + k as usize, wgt);
        }
    }
    Ok(taps)
}

/// Sample locations for a gather: `rows × slots` tap sets.
#[derive(Clone, Debug, PartialEq)]
pub struct GatherTable {
    rows: usize,
    slots: usize,
    taps: Vec<Taps>,
}

impl GatherTable {
    pub fn new(rows: usize, slots: usize, taps: Vec<Taps>) -> Result<Self> {
        if taps.len() != rows * slots {
            return Err(Error::shape("gather table", &[rows, slots], &[taps.len()]));
        }
        Ok(Self { rows, slots, taps })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn taps(&self, row: usize, slot: usize) -> &Taps {
        &self.taps[row * self.slots + slot]
    }
}

enum Op {
    Input,
    Param(String),
    Linear { x: Var, w: Var, b: Var },
    Conv3x3 { x: Var, k: Var, b: Var },
    Relu(Var),
    Softmax(Var),
    Gather { x: Var, table: Rc<GatherTable> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Custom { inputs: Vec<Var>, op: Rc<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A leaf bound to the learnable tensor `name` in `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    /// Affine map along the last dimension: `y = x Wᵀ + b` with
    /// `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 || bv.rank() != 1 || wv.shape()[0] != bv.shape()[0] {
            return Err(Error::shape("linear weights/bias", wv.shape(), bv.shape()));
        }
        let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
        if xv.rank() == 0 || xv.last_dim() != cin {
            return Err(Error::shape("linear input/weights", xv.shape(), wv.shape()));
        }
        let rows = xv.rows();
        let mut out = bv.data().repeat(rows);
        gemm([rows, cin, cout], (xv.data(), false), (wv.data(), true), &mut out, 1.0);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    /// `x: [H, W, Cin]`, `k: [Cout, 3, 3, Cin]`, `b: [Cout]`.
    pub fn conv3x3(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        if xv.rank() != 3 {
            return Err(Error::shape("conv3x3 input", xv.shape(), &[0, 0, 0]));
        }
        let (h, w, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if kv.rank() != 4 || kv.shape()[1..] != [3, 3, cin] {
            return Err(Error::shape("conv3x3 kernel", kv.shape(), xv.shape()));
        }
        let cout = kv.shape()[0];
        if bv.shape() != [cout] {
            return Err(Error::shape("conv3x3 bias", bv.shape(), kv.shape()));
        }
        let cols = im2col(xv.data(), h, w, cin);
        let mut out = bv.data().repeat(h * w);
        gemm([h * w, 9 * cin, cout], (&cols, false), (kv.data(), true), &mut out, 1.0);
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        Ok(self.push(Tensor::new(&[h, w, cout], out)?, Op::Conv3x3 { x, k, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// Softmax along the last dimension, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(xv.shape(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Bilinear gather: row `r` of the output concatenates, for every slot,
    /// the tap-weighted blend of rows of `x` viewed as `[cells, C]`.
    /// Output shape `[rows, slots * C]`.
    pub fn gather(&mut self, x: Var, table: Rc<GatherTable>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let cells = xv.rows();
        let width = table.slots * c;
        let mut out = vec![0.0; table.rows * width];
        for r in 0..table.rows {
            for s in 0..table.slots {
                let dst = &mut out[r * width + s * c..][..c];
                for &(cell, wgt) in table.taps(r, s) {
                    if wgt == 0.0 {
                        continue;
                    }
                    if cell >= cells {
                        return Err(Error::shape("gather tap", &[cell], &[cells]));
                    }
                    for (d, v) in dst.iter_mut().zip(xv.row(cell)) {
                        *d += wgt * v;
                    }
                }
            }
        }
        let value = Tensor::new(&[table.rows, width], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather { x, table }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Records a caller-computed `output` with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Rc<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward (scalar loss)", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, g, grads),
            Op::Conv3x3 { x, k, b } => self.conv_backward(*x, *k, *b, g, grads),
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                    .collect();
                let t = Tensor::new(g.shape(), data).expect("same shape");
                self.accumulate(grads, *x, t);
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim().max(1);
                let mut out = vec![0.0; g.len()];
                for ((o, gr), pr) in out
                    .chunks_mut(d)
                    .zip(g.data().chunks(d))
                    .zip(node.value.data().chunks(d))
                {
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        o[i] = pr[i] * (gr[i] - dot);
                    }
                }
                let t = Tensor::new(g.shape(), out).expect("same shape");
                self.accumulate(grads, *x, t);
            }
            Op::Gather { x, table } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let width = table.slots() * c;
                let mut out = Tensor::zeros(xv.shape());
                let od = out.data_mut();
                for r in 0..table.rows() {
                    for s in 0..table.slots() {
                        let src = &g.data()[r * width + s * c..][..c];
                        for &(cell, wgt) in table.taps(r, s) {
                            if wgt == 0.0 {
                                continue;
                            }
                            for (d, v) in od[cell * c..][..c].iter_mut().zip(src) {
                                *d += wgt * v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, bv, |x, y| x * y);
                let gb = zip_map(g, av, |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Sum(a) => {
                let t = Tensor::filled(self.value(*a).shape(), g.item());
                self.accumulate(grads, *a, t);
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(self.value(*a).shape()).expect("same length");
                self.accumulate(grads, *a, t);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = op.backward(&values, &node.value, g);
                debug_assert_eq!(input_grads.len(), inputs.len(), "{}", op.name());
                for (&v, t) in inputs.iter().zip(input_grads) {
                    self.accumulate(grads, v, t);
                }
            }
        }
    }

    fn linear_backward(&self, x: Var, w: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.rows();
        let gd = g.data();
        if self.rg(x) {
            let mut dx = vec![0.0; rows * cin];
            gemm([rows, cout, cin], (gd, false), (wv.data(), false), &mut dx, 0.0);
            self.accumulate(grads, x, Tensor::new(xv.shape(), dx).expect("same shape"));
        }
        if self.rg(w) {
            let mut dw = vec![0.0; cout * cin];
            gemm([cout, rows, cin], (gd, true), (xv.data(), false), &mut dw, 0.0);
            if self.fault == Some(Fault::LinearWeightGrad) {
                dw.iter_mut().for_each(|v| *v *= 1.05);
            }
            self.accumulate(grads, w, Tensor::new(wv.shape(), dw).expect("same shape"));
        }
        if self.rg(b) {
            self.accumulate(grads, b, Tensor::new(&[cout], column_sums(gd, cout)).expect("same shape"));
        }
    }

    fn conv_backward(&self, x: Var, k: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (xv, kv) = (self.value(x), self.value(k));
        let (h, w, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let cout = kv.shape()[0];
        let gd = g.data();
        if self.rg(x) {
            let mut dcols = vec![0.0; h * w * 9 * cin];
            gemm([h * w, cout, 9 * cin], (gd, false), (kv.data(), false), &mut dcols, 0.0);
            let dx = col2im(&dcols, h, w, cin);
            self.accumulate(grads, x, Tensor::new(xv.shape(), dx).expect("same shape"));
        }
        if self.rg(k) {
            let cols = im2col(xv.data(), h, w, cin);
            let mut dk = vec![0.0; cout * 9 * cin];
            gemm([cout, h * w, 9 * cin], (gd, true), (&cols, false), &mut dk, 0.0);
            self.accumulate(grads, k, Tensor::new(kv.shape(), dk).expect("same shape"));
        }
        self.accumulate(grads, b, Tensor::new(&[cout], column_sums(gd, cout)).expect("same shape"));
    }

    /// Gradients of every parameter leaf, keyed by parameter name. A
    /// parameter bound more than once has its gradients summed.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads.grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.get_mut(name) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }
}

/// `c = beta·c + op(a)·op(b)` for row-major operands, with `[m, k, n]` the
/// product's dimensions; a `true` flag reads that operand transposed.
fn gemm([m, k, n]: [usize; 3], (a, ta): (&[f64], bool), (b, tb): (&[f64], bool), c: &mut [f64], beta: f64) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n, "gemm operand sizes");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides address exactly the checked slice extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn column_sums(a: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in a.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// The 3×3 zero-padded neighborhood of every cell: `[H·W, 9·C]`, taps in
/// kernel order.
fn im2col(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut cols = vec![0.0; h * w * 9 * c];
    for_each_tap(h, w, |p, tap, src| {
        cols[(p * 9 + tap) * c..][..c].copy_from_slice(&x[src * c..][..c]);
    });
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut x = vec![0.0; h * w * c];
    for_each_tap(h, w, |p, tap, src| {
        for (d, v) in x[src * c..][..c].iter_mut().zip(&cols[(p * 9 + tap) * c..][..c]) {
            *d += v;
        }
    });
    x
}

/// Calls `f(cell, tap, source cell)` for every in-bounds tap.
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            for dy in 0..3 {
                let Some(yy) = (y + dy).checked_sub(1).filter(|&v| v < h) else { continue };
                for dx in 0..3 {
                    let Some(xx) = (x + dx).checked_sub(1).filter(|&v| v < w) else { continue };
                    f(y * w + x, dy * 3 + dx, yy * w + xx);
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Bilinear interpolation of `map: [H, W, C]` at a continuous cell
/// coordinate; cells outside the map contribute zero.
pub fn bilinear_sample(map: &Tensor, p: (f64, f64)) -> Result<Vec<f64>> {
    if map.rank() != 3 {
        return Err(Error::shape("bilinear_sample map", map.shape(), &[0, 0, 0]));
    }
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let taps = bilinear_taps(p, h, w)?;
    let mut out = vec![0.0; c];
    for (cell, wgt) in taps {
        if wgt == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(map.row(cell)) {
            *o += wgt * v;
        }
    }
    Ok(out)
}
