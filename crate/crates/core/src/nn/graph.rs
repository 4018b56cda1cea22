//! Eager reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation computes its value immediately and records itself on the
//! tape; [`Graph::backward`] walks the tape in reverse. Activations are laid
//! out `[C, D, H, W]` (one sample per graph call).

use super::conv::{self, ConvGeom};
use super::gemm::{gemm_acc, gemm_nt, transpose};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel { x: Var, bias: Var },
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample { x: Var, factor: usize },
    Silu(Var),
    Concat(Vec<Var>),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    GatherRows { table: Var, rows: Vec<usize> },
    WeightedPool { x: Var, weights: Vec<f64> },
    L2Normalize(Var),
    ClampMax(Var, f64),
    Outer(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn acc(slot: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; n])
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let t = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v * s).collect());
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// Adds `bias[c]` to every element of channel `c` of `x`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let c = tx.shape[0];
        let tb = self.value(bias);
        assert_eq!(tb.numel(), c, "channel bias length");
        let per = tx.numel() / c;
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data[i / per])
            .collect();
        let t = Tensor::new(tx.shape.clone(), data);
        let ng = self.ng(&[x, bias]);
        self.push(t, Op::AddChannel { x, bias }, ng)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.shape.len(), 4, "conv3d input must be [C, D, H, W]");
        assert_eq!(tw.shape.len(), 5, "conv3d weight must be [Co, Ci, k, k, k]");
        assert_eq!(tx.shape[0], tw.shape[1], "conv3d channel mismatch");
        let geom = ConvGeom::new(
            tw.shape[1],
            tw.shape[0],
            tw.shape[2],
            stride,
            pad,
            [tx.shape[1], tx.shape[2], tx.shape[3]],
        )
        .expect("kernel larger than padded input");
        let out = conv::forward(&tx.data, &tw.data, &self.value(b).data, &geom);
        let [od, oh, ow] = geom.output;
        let t = Tensor::new(vec![geom.co, od, oh, ow], out);
        let ng = self.ng(&[x, w, b]);
        self.push(t, Op::Conv3d { x, w, b, geom }, ng)
    }

    /// Nearest-neighbour upsampling of the three spatial axes.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let tx = self.value(x);
        let [c, d, h, w] = <[usize; 4]>::try_from(tx.shape.as_slice()).expect("4-d input");
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let mut out = Vec::with_capacity(c * od * oh * ow);
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let row = ((ch * d + z / factor) * h + y / factor) * w;
                    out.extend((0..ow).map(|x| tx.data[row + x / factor]));
                }
            }
        }
        let t = Tensor::new(vec![c, od, oh, ow], out);
        let ng = self.ng(&[x]);
        self.push(t, Op::Upsample { x, factor }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape.clone(), tx.data.iter().map(|&v| v * sigmoid(v)).collect());
        let ng = self.ng(&[x]);
        self.push(t, Op::Silu(x), ng)
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rest = self.value(parts[0]).shape[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape[1..], rest[..], "concat trailing shape mismatch");
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![lead];
        shape.extend(rest);
        let ng = self.ng(parts);
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec()), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, &ta.data, &tb.data, m, n, k);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data[i * n + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![n, m], out), Op::Transpose(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.shape[1];
        let mut out = ta.data.clone();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(ta.shape.clone(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        let ng = self.ng(&[a]);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Selects rows of a `[K, C]` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let c = t.shape[1];
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&t.data[r * c..(r + 1) * c]);
        }
        let ng = self.ng(&[table]);
        self.push(
            Tensor::new(vec![rows.len(), c], out),
            Op::GatherRows { table, rows: rows.to_vec() },
            ng,
        )
    }

    /// `y[c] = sum_s w[s] x[c, s] / sum_s w[s]` for `x` of shape `[C, ...]`.
    pub fn weighted_pool(&mut self, x: Var, weights: &[f64]) -> Var {
        let t = self.value(x);
        let c = t.shape[0];
        let per = t.numel() / c;
        assert_eq!(weights.len(), per, "pool weights must cover the spatial extent");
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "pool weights sum to zero");
        let out = (0..c)
            .map(|ch| {
                t.data[ch * per..(ch + 1) * per]
                    .iter()
                    .zip(weights)
                    .map(|(v, w)| v * w)
                    .sum::<f64>()
                    / total
            })
            .collect();
        let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![c], out), Op::WeightedPool { x, weights: normalized }, ng)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let norm = t.data.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v / norm).collect());
        let ng = self.ng(&[x]);
        self.push(out, Op::L2Normalize(x), ng)
    }

    pub fn clamp_max(&mut self, x: Var, cap: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v.min(cap)).collect());
        let ng = self.ng(&[x]);
        self.push(out, Op::ClampMax(x, cap), ng)
    }

    /// `[S] x [T] -> [S, T]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (s, t) = (ta.numel(), tb.numel());
        let mut out = Vec::with_capacity(s * t);
        for &x in &ta.data {
            out.extend(tb.data.iter().map(|y| x * y));
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![s, t], out), Op::Outer(a, b), ng)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward from non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(v, sign) in &[(*a, 1.0), (*b, 1.0)] {
                    if needs(v) {
                        let t = acc(&mut grads[v.0], g.len());
                        t.iter_mut().zip(g).for_each(|(o, x)| *o += sign * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for &(v, sign) in &[(*a, 1.0), (*b, -1.0)] {
                    if needs(v) {
                        let t = acc(&mut grads[v.0], g.len());
                        t.iter_mut().zip(g).for_each(|(o, x)| *o += sign * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                if needs(*a) {
                    let t = acc(&mut grads[a.0], g.len());
                    for k in 0..g.len() {
                        t[k] += g[k] * vb[k];
                    }
                }
                if needs(*b) {
                    let t = acc(&mut grads[b.0], g.len());
                    for k in 0..g.len() {
                        t[k] += g[k] * va[k];
                    }
                }
            }
            Op::Scale(a, s) => {
                if needs(*a) {
                    let t = acc(&mut grads[a.0], g.len());
                    t.iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
                }
            }
            Op::AddChannel { x, bias } => {
                if needs(*x) {
                    let t = acc(&mut grads[x.0], g.len());
                    t.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if needs(*bias) {
                    let c = numel(*bias);
                    let per = g.len() / c;
                    let t = acc(&mut grads[bias.0], c);
                    for (ch, o) in t.iter_mut().enumerate() {
                        *o += g[ch * per..(ch + 1) * per].iter().sum::<f64>();
                    }
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let xv = &self.nodes[x.0].value.data;
                let wv = &self.nodes[w.0].value.data;
                let (nx, nw, nb) = (numel(*x), numel(*w), numel(*b));
                // Three disjoint slots; take them out to satisfy the borrow checker.
                let mut gx = needs(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; nx]));
                let mut gw = needs(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![0.0; nw]));
                let mut gb = needs(*b).then(|| grads[b.0].take().unwrap_or_else(|| vec![0.0; nb]));
                conv::backward(
                    xv,
                    wv,
                    g,
                    geom,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
                if let Some(v) = gb {
                    grads[b.0] = Some(v);
                }
            }
            Op::Upsample { x, factor } => {
                if needs(*x) {
                    let shape = &self.nodes[x.0].value.shape;
                    let [c, d, h, w] = [shape[0], shape[1], shape[2], shape[3]];
                    let f = *factor;
                    let (od, oh, ow) = (d * f, h * f, w * f);
                    let t = acc(&mut grads[x.0], c * d * h * w);
                    let mut k = 0;
                    for ch in 0..c {
                        for z in 0..od {
                            for y in 0..oh {
                                let row = ((ch * d + z / f) * h + y / f) * w;
                                for xx in 0..ow {
                                    t[row + xx / f] += g[k];
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
            Op::Silu(x) => {
                if needs(*x) {
                    let xv = &self.nodes[x.0].value.data;
                    let t = acc(&mut grads[x.0], g.len());
                    for k in 0..g.len() {
                        let s = sigmoid(xv[k]);
                        t[k] += g[k] * s * (1.0 + xv[k] * (1.0 - s));
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = numel(p);
                    if needs(p) {
                        let t = acc(&mut grads[p.0], n);
                        t.iter_mut().zip(&g[off..off + n]).for_each(|(o, v)| *o += v);
                    }
                    off += n;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if needs(*a) {
                    let t = acc(&mut grads[a.0], m * k);
                    gemm_nt(t, g, &tb.data, m, k, n);
                }
                if needs(*b) {
                    let at = transpose(&ta.data, m, k);
                    let t = acc(&mut grads[b.0], k * n);
                    gemm_acc(t, &at, g, k, n, m);
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let shape = &self.nodes[a.0].value.shape;
                    let (m, n) = (shape[0], shape[1]);
                    let t = acc(&mut grads[a.0], m * n);
                    for i in 0..m {
                        for j in 0..n {
                            t[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let n = y.shape[1];
                    let t = acc(&mut grads[a.0], y.numel());
                    for (r, (yr, gr)) in y.data.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            t[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    let t = acc(&mut grads[a.0], g.len());
                    t.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let n = numel(*a);
                    let t = acc(&mut grads[a.0], n);
                    t.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = numel(*a);
                    let t = acc(&mut grads[a.0], n);
                    t.iter_mut().for_each(|o| *o += g[0] / n as f64);
                }
            }
            Op::GatherRows { table, rows } => {
                if needs(*table) {
                    let c = self.nodes[table.0].value.shape[1];
                    let t = acc(&mut grads[table.0], numel(*table));
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            t[r * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::WeightedPool { x, weights } => {
                if needs(*x) {
                    let per = weights.len();
                    let t = acc(&mut grads[x.0], numel(*x));
                    for (ch, gv) in g.iter().enumerate() {
                        for (o, w) in t[ch * per..(ch + 1) * per].iter_mut().zip(weights) {
                            *o += gv * w;
                        }
                    }
                }
            }
            Op::L2Normalize(x) => {
                if needs(*x) {
                    let xv = &self.nodes[x.0].value.data;
                    let y = &node.value.data;
                    let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    let t = acc(&mut grads[x.0], xv.len());
                    for k in 0..xv.len() {
                        t[k] += (g[k] - y[k] * dot) / norm;
                    }
                }
            }
            Op::ClampMax(x, cap) => {
                if needs(*x) {
                    let xv = &self.nodes[x.0].value.data;
                    let t = acc(&mut grads[x.0], xv.len());
                    for k in 0..xv.len() {
                        if xv[k] < *cap {
                            t[k] += g[k];
                        }
                    }
                }
            }
            Op::Outer(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                let tn = vb.len();
                if needs(*a) {
                    let t = acc(&mut grads[a.0], va.len());
                    for (s, o) in t.iter_mut().enumerate() {
                        *o += g[s * tn..(s + 1) * tn].iter().zip(vb).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                if needs(*b) {
                    let t = acc(&mut grads[b.0], tn);
                    for (s, &av) in va.iter().enumerate() {
                        for j in 0..tn {
                            t[j] += g[s * tn + j] * av;
                        }
                    }
                }
            }
        }
    }
}
