//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] records every op eagerly (values are computed on insertion);
//! [`Graph::backward`] walks the tape in reverse from one or more seeded
//! output gradients. Loss functions live outside the tape: callers evaluate
//! them on node values and seed the resulting output gradients directly.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param { tag: u64, id: ParamId },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    ReflectPad { x: usize, pads: [usize; 4] },
    Crop { x: usize, top: usize, left: usize },
    InstanceNorm { x: usize, inv_std: Vec<f32> },
    Relu { x: usize },
    LeakyRelu { x: usize, slope: f32 },
    Tanh { x: usize },
    Add { a: usize, b: usize },
    Concat { a: usize, b: usize },
    Upsample2x { x: usize },
    Gather { x: usize, sample: usize, locs: Vec<usize> },
    Linear { x: usize, w: usize, b: usize },
    L2Normalize { x: usize, norms: Vec<f32> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

const L2_EPS: f32 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<(u64, usize), Var>,
    frozen: HashSet<u64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters of `store` enter this graph as constants.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.insert(store.tag());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id.0);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let requires_grad = !self.frozen.contains(&store.tag());
        self.nodes.push(Node { value: store.shared(id), op: Op::Param { tag: store.tag(), id }, requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_cache.insert(key, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c_in, h, wd) = self.value(x).dims4();
        let (c_out, wc, kh, kw) = self.value(w).dims4();
        assert_eq!(c_in, wc, "conv2d channel mismatch");
        let geom = ConvGeom { c_in, h, w: wd, c_out, kh, kw, stride, pad };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let t = Tensor::new([n, c_out, geom.out_h(), geom.out_w()], out);
        self.push(t, Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), geom }, rg)
    }

    /// Reflection padding `[top, bottom, left, right]`.
    pub fn reflect_pad(&mut self, x: Var, pads: [usize; 4]) -> Var {
        if pads == [0; 4] {
            return x;
        }
        let (n, c, h, w) = self.value(x).dims4();
        assert!(pads[0] < h && pads[1] < h && pads[2] < w && pads[3] < w, "reflect pad exceeds extent");
        let out = kernels::reflect_pad_forward(self.value(x).data(), n * c, h, w, pads);
        let t = Tensor::new([n, c, h + pads[0] + pads[1], w + pads[2] + pads[3]], out);
        let rg = self.rg(x.0);
        self.push(t, Op::ReflectPad { x: x.0, pads }, rg)
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let (n, c, ih, iw) = self.value(x).dims4();
        if top == 0 && left == 0 && h == ih && w == iw {
            return x;
        }
        assert!(top + h <= ih && left + w <= iw, "crop window out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for pl in 0..n * c {
            for y in 0..h {
                let row = pl * ih * iw + (top + y) * iw + left;
                out.extend_from_slice(&src[row..row + w]);
            }
        }
        let rg = self.rg(x.0);
        self.push(Tensor::new([n, c, h, w], out), Op::Crop { x: x.0, top, left }, rg)
    }

    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (out, inv_std) = kernels::instance_norm_forward(self.value(x).data(), n * c, h * w, 1e-5);
        let rg = self.rg(x.0);
        self.push(Tensor::new([n, c, h, w], out), Op::InstanceNorm { x: x.0, inv_std }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x.0);
        self.push(t, Op::Relu { x: x.0 }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x.0);
        self.push(t, Op::LeakyRelu { x: x.0, slope }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f32::tanh);
        let rg = self.rg(x.0);
        self.push(t, Op::Tanh { x: x.0 }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(t, Op::Add { a: a.0, b: b.0 }, rg)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for s in 0..n {
            out.extend_from_slice(&da[s * ca * h * w..(s + 1) * ca * h * w]);
            out.extend_from_slice(&db[s * cb * h * w..(s + 1) * cb * h * w]);
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Tensor::new([n, ca + cb, h, w], out), Op::Concat { a: a.0, b: b.0 }, rg)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let out = kernels::upsample2x_forward(self.value(x).data(), n * c, h, w);
        let rg = self.rg(x.0);
        self.push(Tensor::new([n, c, 2 * h, 2 * w], out), Op::Upsample2x { x: x.0 }, rg)
    }

    /// Picks feature vectors of batch element `sample` at flat spatial
    /// locations `locs`, producing an `[S, C]` matrix.
    pub fn gather(&mut self, x: Var, sample: usize, locs: &[usize]) -> Var {
        let (_, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let src = &self.value(x).data()[sample * c * hw..(sample + 1) * c * hw];
        let mut out = Vec::with_capacity(locs.len() * c);
        for &l in locs {
            assert!(l < hw, "gather location {l} out of range");
            out.extend((0..c).map(|ch| src[ch * hw + l]));
        }
        let rg = self.rg(x.0);
        self.push(Tensor::new([locs.len(), c], out), Op::Gather { x: x.0, sample, locs: locs.to_vec() }, rg)
    }

    /// `x [rows, in] · wᵀ [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (rows, d_in) = self.value(x).dims2();
        let (d_out, wi) = self.value(w).dims2();
        assert_eq!(d_in, wi, "linear input width mismatch");
        let y = kernels::linear_forward(
            self.value(x).data(),
            rows,
            d_in,
            self.value(w).data(),
            d_out,
            self.value(b).data(),
        );
        let rg = self.rg(x.0) || self.rg(w.0) || self.rg(b.0);
        self.push(Tensor::new([rows, d_out], y), Op::Linear { x: x.0, w: w.0, b: b.0 }, rg)
    }

    /// Scales each row of a 2-D tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = vec![0.0f32; rows * cols];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let n = (row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32).max(L2_EPS);
            norms.push(n);
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v / n;
            }
        }
        let rg = self.rg(x.0);
        self.push(Tensor::new([rows, cols], out), Op::L2Normalize { x: x.0, norms }, rg)
    }

    /// Propagates the seeded output gradients back to every leaf and parameter.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape mismatch");
            if !self.rg(v.0) {
                continue;
            }
            top = top.max(v.0 + 1);
            accumulate(&mut grads, v.0, g);
        }
        let mut out = Gradients::default();
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param { tag, id } => {
                    out.params.insert((*tag, id.0), g);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let n = self.nodes[*x].value.shape()[0];
                    let r = kernels::conv2d_backward(
                        self.nodes[*x].value.data(),
                        n,
                        geom,
                        self.nodes[*w].value.data(),
                        g.data(),
                        self.rg(*x),
                        self.rg(*w),
                        b.is_some_and(|b| self.rg(b)),
                    );
                    if let Some(dx) = r.dx {
                        accumulate(&mut grads, *x, Tensor::new(self.nodes[*x].value.shape(), dx));
                    }
                    if let Some(dw) = r.dw {
                        accumulate(&mut grads, *w, Tensor::new(self.nodes[*w].value.shape(), dw));
                    }
                    if let (Some(b), Some(db)) = (b, r.db) {
                        accumulate(&mut grads, *b, Tensor::new(self.nodes[*b].value.shape(), db));
                    }
                }
                Op::ReflectPad { x, pads } => {
                    let (n, c, h, w) = self.nodes[*x].value.dims4();
                    let dx = kernels::reflect_pad_backward(g.data(), n * c, h, w, *pads);
                    accumulate(&mut grads, *x, Tensor::new([n, c, h, w], dx));
                }
                Op::Crop { x, top, left } => {
                    let (n, c, ih, iw) = self.nodes[*x].value.dims4();
                    let (_, _, h, w) = g.dims4();
                    let mut dx = vec![0.0f32; n * c * ih * iw];
                    for pl in 0..n * c {
                        for y in 0..h {
                            let dst = pl * ih * iw + (top + y) * iw + left;
                            let src = (pl * h + y) * w;
                            dx[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new([n, c, ih, iw], dx));
                }
                Op::InstanceNorm { x, inv_std } => {
                    let (_, _, h, w) = node.value.dims4();
                    let dx = kernels::instance_norm_backward(node.value.data(), inv_std, g.data(), h * w);
                    accumulate(&mut grads, *x, Tensor::new(node.value.shape(), dx));
                }
                Op::Relu { x } => {
                    let dx = elementwise(&g, &node.value, |g, y| if y > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *x, dx);
                }
                Op::LeakyRelu { x, slope } => {
                    let s = *slope;
                    let dx = elementwise(&g, &node.value, |g, y| if y > 0.0 { g } else { s * g });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh { x } => {
                    let dx = elementwise(&g, &node.value, |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Concat { a, b } => {
                    let (n, ca, h, w) = self.nodes[*a].value.dims4();
                    let cb = self.nodes[*b].value.shape()[1];
                    let (sa, sb) = (ca * h * w, cb * h * w);
                    let mut ga = Vec::with_capacity(n * sa);
                    let mut gb = Vec::with_capacity(n * sb);
                    for s in 0..n {
                        let base = s * (sa + sb);
                        ga.extend_from_slice(&g.data()[base..base + sa]);
                        gb.extend_from_slice(&g.data()[base + sa..base + sa + sb]);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, Tensor::new([n, ca, h, w], ga));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, Tensor::new([n, cb, h, w], gb));
                    }
                }
                Op::Upsample2x { x } => {
                    let (n, c, h, w) = self.nodes[*x].value.dims4();
                    let dx = kernels::upsample2x_backward(g.data(), n * c, h, w);
                    accumulate(&mut grads, *x, Tensor::new([n, c, h, w], dx));
                }
                Op::Gather { x, sample, locs } => {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let (c, hw) = (shape[1], shape[2] * shape[3]);
                    let mut dx = Tensor::zeros(shape);
                    let base = sample * c * hw;
                    let d = dx.data_mut();
                    for (row, &l) in locs.iter().enumerate() {
                        for ch in 0..c {
                            d[base + ch * hw + l] += g.data()[row * c + ch];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (rows, d_in) = self.nodes[*x].value.dims2();
                    let d_out = self.nodes[*w].value.shape()[0];
                    let r = kernels::linear_backward(
                        self.nodes[*x].value.data(),
                        rows,
                        d_in,
                        self.nodes[*w].value.data(),
                        d_out,
                        g.data(),
                        self.rg(*x),
                        self.rg(*w),
                        self.rg(*b),
                    );
                    if let Some(dx) = r.dx {
                        accumulate(&mut grads, *x, Tensor::new([rows, d_in], dx));
                    }
                    if let Some(dw) = r.dw {
                        accumulate(&mut grads, *w, Tensor::new([d_out, d_in], dw));
                    }
                    if let Some(db) = r.db {
                        accumulate(&mut grads, *b, Tensor::new([d_out], db));
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let (rows, cols) = node.value.dims2();
                    let y = node.value.data();
                    let mut dx = vec![0.0f32; rows * cols];
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let active = n > L2_EPS;
                        for ((d, &gv), &yv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
                            *d = if active { (gv - yv * dot) / n } else { gv / n };
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new([rows, cols], dx));
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(g: &Tensor, y: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::new(g.shape(), g.data().iter().zip(y.data()).map(|(&g, &y)| f(g, y)).collect())
}

/// Result of [`Graph::backward`].
#[derive(Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: HashMap<(u64, usize), Tensor>,
}

impl Gradients {
    /// Gradient with respect to an [`Graph::input`] leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.params.get(&(store.tag(), id.0))
    }

    /// Moves out the gradients that belong to `store`, in parameter order.
    pub fn take_store(&mut self, store: &ParamStore) -> Vec<Option<Tensor>> {
        store.ids().map(|id| self.params.remove(&(store.tag(), id.0))).collect()
    }
}
