//! Minimal reverse-mode autodiff over `f64` vectors.
//!
//! Everything trainable in this crate (the attentive teacher, the policy
//! decoder, the critic head) is small enough that a tape of vector-valued
//! nodes is both fast and easy to verify against finite differences. Ops are
//! recorded as an enum so the backward pass is a single reverse sweep with no
//! closures.

mod adam;
mod layers;

pub use adam::Adam;
pub use layers::{GruCell, Linear};

use serde::{Deserialize, Serialize};

/// Dense row-major matrix (vectors are `rows x 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Gaussian init via Box-Muller, scaled by `std`.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let u: f64 = rng.gen_range(1e-12..1.0);
            let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            data.push((-2.0 * u.ln()).sqrt() * v.cos() * std);
        }
        Tensor { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to one tensor inside a [`Params`] set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named collection of parameter tensors. Serializable as a whole, so model
/// checkpoints round-trip bit-exactly (serde_json emits shortest-round-trip
/// floats).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// All parameter values as one flat vector (tensor order, row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_values());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Inverse of [`Params::flatten`]. Panics on length mismatch.
    pub fn load_flat(&mut self, vals: &[f64]) {
        assert_eq!(vals.len(), self.n_values(), "flat parameter length mismatch");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&vals[off..off + n]);
            off += n;
        }
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers parallel to a [`Params`] set. Accumulated across tapes.
#[derive(Debug, Clone)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(params: &Params) -> Self {
        Grads { tensors: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn reset(&mut self) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|g| *g *= c);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.tensors {
            out.extend_from_slice(t);
        }
        out
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// Whole parameter tensor, viewed flat.
    Param(ParamId),
    /// One row of a parameter matrix (embedding lookup).
    ParamRow(ParamId, usize),
    /// Mean of several rows of a parameter matrix (embedding pooling).
    ParamRowMean(ParamId, Vec<usize>),
    /// Constant input; no gradient.
    Value,
    Add(NodeId, NodeId),
    AddMany(Vec<NodeId>),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Neg(NodeId),
    /// `W x` with `W` a parameter matrix.
    MatVec(ParamId, NodeId),
    Dot(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>),
    LogSoftmax(NodeId),
    Softmax(NodeId),
    Pick(NodeId, usize),
    /// `sum_i w[i] * v_i` with one weight per vector.
    WeightedSum(NodeId, Vec<NodeId>),
    /// Vector node scaled by a scalar node.
    ScaleByScalar(NodeId, NodeId),
    Min(NodeId, NodeId),
    Clamp(NodeId, f64, f64),
}

struct Node {
    val: Vec<f64>,
    op: Op,
}

/// Eager-evaluating gradient tape over a single parameter set.
pub struct Tape<'a> {
    params: &'a Params,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a Params) -> Self {
        Tape { params, nodes: Vec::new() }
    }

    fn push(&mut self, val: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { val, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].val
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].val.len(), 1);
        self.nodes[id.0].val[0]
    }

    pub fn len(&self, id: NodeId) -> usize {
        self.nodes[id.0].val.len()
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let val = self.params.get(id).data.clone();
        self.push(val, Op::Param(id))
    }

    pub fn param_row(&mut self, id: ParamId, row: usize) -> NodeId {
        let val = self.params.get(id).row(row).to_vec();
        self.push(val, Op::ParamRow(id, row))
    }

    pub fn param_row_mean(&mut self, id: ParamId, rows: &[usize]) -> NodeId {
        let t = self.params.get(id);
        let mut val = vec![0.0; t.cols];
        for &r in rows {
            for (v, x) in val.iter_mut().zip(t.row(r)) {
                *v += x;
            }
        }
        if !rows.is_empty() {
            let inv = 1.0 / rows.len() as f64;
            val.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(val, Op::ParamRowMean(id, rows.to_vec()))
    }

    pub fn value_node(&mut self, val: Vec<f64>) -> NodeId {
        self.push(val, Op::Value)
    }

    pub fn scalar_node(&mut self, v: f64) -> NodeId {
        self.push(vec![v], Op::Value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = zip_with(self.value(a), self.value(b), |x, y| x + y);
        self.push(val, Op::Add(a, b))
    }

    pub fn add_many(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let mut val = self.value(xs[0]).to_vec();
        for &x in &xs[1..] {
            for (v, y) in val.iter_mut().zip(self.value(x)) {
                *v += y;
            }
        }
        self.push(val, Op::AddMany(xs.to_vec()))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = zip_with(self.value(a), self.value(b), |x, y| x - y);
        self.push(val, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = zip_with(self.value(a), self.value(b), |x, y| x * y);
        self.push(val, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let val = self.value(a).iter().map(|x| x * c).collect();
        self.push(val, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let val = self.value(a).iter().map(|x| x + c).collect();
        self.push(val, Op::AddConst(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).iter().map(|x| -x).collect();
        self.push(val, Op::Neg(a))
    }

    pub fn matvec(&mut self, w: ParamId, x: NodeId) -> NodeId {
        let m = self.params.get(w);
        let xv = self.value(x);
        assert_eq!(m.cols, xv.len(), "matvec shape mismatch for {}", self.params.name(w));
        let mut val = vec![0.0; m.rows];
        for r in 0..m.rows {
            let row = m.row(r);
            let mut s = 0.0;
            for (a, b) in row.iter().zip(xv) {
                s += a * b;
            }
            val[r] = s;
        }
        self.push(val, Op::MatVec(w, x))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push(vec![s], Op::Dot(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(val, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).iter().map(|x| sigmoid(*x)).collect();
        self.push(val, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).iter().map(|x| softplus(*x)).collect();
        self.push(val, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).iter().map(|x| x.max(0.0)).collect();
        self.push(val, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let val = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(val, Op::Exp(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![s], Op::Mean(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut val = Vec::new();
        for &p in parts {
            val.extend_from_slice(self.value(p));
        }
        self.push(val, Op::Concat(parts.to_vec()))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let val = x.iter().map(|v| v - lse).collect();
        self.push(val, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let val = exps.iter().map(|e| e / z).collect();
        self.push(val, Op::Softmax(a))
    }

    pub fn pick(&mut self, a: NodeId, i: usize) -> NodeId {
        let v = self.value(a)[i];
        self.push(vec![v], Op::Pick(a, i))
    }

    pub fn weighted_sum(&mut self, weights: NodeId, vectors: &[NodeId]) -> NodeId {
        let w = self.value(weights).to_vec();
        assert_eq!(w.len(), vectors.len());
        let n = self.len(vectors[0]);
        let mut val = vec![0.0; n];
        for (wi, &v) in w.iter().zip(vectors) {
            for (o, x) in val.iter_mut().zip(self.value(v)) {
                *o += wi * x;
            }
        }
        self.push(val, Op::WeightedSum(weights, vectors.to_vec()))
    }

    pub fn scale_by_scalar(&mut self, v: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let val = self.value(v).iter().map(|x| x * sv).collect();
        self.push(val, Op::ScaleByScalar(v, s))
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = zip_with(self.value(a), self.value(b), |x, y| x.min(*y));
        self.push(val, Op::Min(a, b))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let val = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(val, Op::Clamp(a, lo, hi))
    }

    /// Reverse sweep from a scalar `loss` node, accumulating into `grads`.
    pub fn backward(&self, loss: NodeId, grads: &mut Grads) {
        assert_eq!(self.nodes[loss.0].val.len(), 1, "backward root must be scalar");
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(pid) => {
                    for (slot, gi) in grads.tensors[pid.0].iter_mut().zip(&g) {
                        *slot += gi;
                    }
                }
                Op::ParamRow(pid, row) => {
                    let cols = self.params.get(*pid).cols;
                    let dst = &mut grads.tensors[pid.0][row * cols..(row + 1) * cols];
                    for (slot, gi) in dst.iter_mut().zip(&g) {
                        *slot += gi;
                    }
                }
                Op::ParamRowMean(pid, rows) => {
                    if rows.is_empty() {
                        continue;
                    }
                    let cols = self.params.get(*pid).cols;
                    let inv = 1.0 / rows.len() as f64;
                    for &r in rows {
                        let dst = &mut grads.tensors[pid.0][r * cols..(r + 1) * cols];
                        for (slot, gi) in dst.iter_mut().zip(&g) {
                            *slot += gi * inv;
                        }
                    }
                }
                Op::Value => {}
                Op::Add(a, b) => {
                    acc(&mut adj, *a, &g);
                    acc(&mut adj, *b, &g);
                }
                Op::AddMany(xs) => {
                    for &x in xs {
                        acc(&mut adj, x, &g);
                    }
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(&mut adj, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga = zip_with(&g, &self.nodes[b.0].val, |x, y| x * y);
                    let gb = zip_with(&g, &self.nodes[a.0].val, |x, y| x * y);
                    acc(&mut adj, *a, &ga);
                    acc(&mut adj, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::AddConst(a) => acc(&mut adj, *a, &g),
                Op::Neg(a) => {
                    let ga: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::MatVec(w, x) => {
                    let m = self.params.get(*w);
                    let xv = &self.nodes[x.0].val;
                    let gm = &mut grads.tensors[w.0];
                    let mut gx = vec![0.0; m.cols];
                    for r in 0..m.rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = m.row(r);
                        let dst = &mut gm[r * m.cols..(r + 1) * m.cols];
                        for c in 0..m.cols {
                            dst[c] += gr * xv[c];
                            gx[c] += gr * row[c];
                        }
                    }
                    acc(&mut adj, *x, &gx);
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let ga: Vec<f64> = self.nodes[b.0].val.iter().map(|x| g0 * x).collect();
                    let gb: Vec<f64> = self.nodes[a.0].val.iter().map(|x| g0 * x).collect();
                    acc(&mut adj, *a, &ga);
                    acc(&mut adj, *b, &gb);
                }
                Op::Tanh(a) => {
                    let ga = zip_with(&g, &node.val, |gi, y| gi * (1.0 - y * y));
                    acc(&mut adj, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_with(&g, &node.val, |gi, y| gi * y * (1.0 - y));
                    acc(&mut adj, *a, &ga);
                }
                Op::Softplus(a) => {
                    let ga = zip_with(&g, &self.nodes[a.0].val, |gi, x| gi * sigmoid(*x));
                    acc(&mut adj, *a, &ga);
                }
                Op::Relu(a) => {
                    let ga = zip_with(&g, &self.nodes[a.0].val, |gi, x| if *x > 0.0 { *gi } else { 0.0 });
                    acc(&mut adj, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga = zip_with(&g, &node.val, |gi, y| gi * y);
                    acc(&mut adj, *a, &ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].val.len();
                    acc(&mut adj, *a, &vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].val.len();
                    acc(&mut adj, *a, &vec![g[0] / n as f64; n]);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].val.len();
                        acc(&mut adj, p, &g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::LogSoftmax(a) => {
                    let gsum: f64 = g.iter().sum();
                    let ga: Vec<f64> = node
                        .val
                        .iter()
                        .zip(&g)
                        .map(|(y, gi)| gi - y.exp() * gsum)
                        .collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::Softmax(a) => {
                    let p = &node.val;
                    let pdg: f64 = p.iter().zip(&g).map(|(pi, gi)| pi * gi).sum();
                    let ga: Vec<f64> = p.iter().zip(&g).map(|(pi, gi)| pi * (gi - pdg)).collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::Pick(a, i) => {
                    let mut ga = vec![0.0; self.nodes[a.0].val.len()];
                    ga[*i] = g[0];
                    acc(&mut adj, *a, &ga);
                }
                Op::WeightedSum(w, vs) => {
                    let wv = self.nodes[w.0].val.clone();
                    let mut gw = vec![0.0; wv.len()];
                    for (i, &v) in vs.iter().enumerate() {
                        let vv = &self.nodes[v.0].val;
                        gw[i] = g.iter().zip(vv).map(|(gi, xi)| gi * xi).sum();
                        let gv: Vec<f64> = g.iter().map(|gi| gi * wv[i]).collect();
                        acc(&mut adj, v, &gv);
                    }
                    acc(&mut adj, *w, &gw);
                }
                Op::ScaleByScalar(v, s) => {
                    let sv = self.nodes[s.0].val[0];
                    let gv: Vec<f64> = g.iter().map(|gi| gi * sv).collect();
                    let gs: f64 = g.iter().zip(&self.nodes[v.0].val).map(|(gi, xi)| gi * xi).sum();
                    acc(&mut adj, *v, &gv);
                    acc(&mut adj, *s, &[gs]);
                }
                Op::Min(a, b) => {
                    let av = &self.nodes[a.0].val;
                    let bv = &self.nodes[b.0].val;
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for i in 0..av.len() {
                        if av[i] <= bv[i] {
                            ga[i] = g[i];
                        } else {
                            gb[i] = g[i];
                        }
                    }
                    acc(&mut adj, *a, &ga);
                    acc(&mut adj, *b, &gb);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = zip_with(&g, &self.nodes[a.0].val, |gi, x| {
                        if *x > *lo && *x < *hi {
                            *gi
                        } else {
                            0.0
                        }
                    });
                    acc(&mut adj, *a, &ga);
                }
            }
        }
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (e, gi) in existing.iter_mut().zip(g) {
                *e += gi;
            }
        }
        slot => *slot = Some(g.to_vec()),
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(&f64, &f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f(x, y)).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow.
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Central finite differences of `f` at the current parameter values.
    fn fd_grad(params: &mut Params, mut f: impl FnMut(&Params) -> f64, h: f64) -> Vec<f64> {
        let base = params.flatten();
        let mut out = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut up = base.clone();
            up[i] += h;
            params.load_flat(&up);
            let fu = f(params);
            let mut dn = base.clone();
            dn[i] -= h;
            params.load_flat(&dn);
            let fd = f(params);
            out[i] = (fu - fd) / (2.0 * h);
        }
        params.load_flat(&base);
        out
    }

    fn mixed_loss(params: &Params) -> f64 {
        // Exercises most ops in one graph.
        let mut tape = Tape::new(params);
        let w_id = ParamId(0);
        let b_id = ParamId(1);
        let e_id = ParamId(2);
        let s_id = ParamId(3);

        let x = tape.value_node(vec![0.3, -0.7, 1.1]);
        let wx = tape.matvec(w_id, x);
        let b = tape.param(b_id);
        let pre = tape.add(wx, b);
        let h = tape.tanh(pre);

        let e0 = tape.param_row(e_id, 0);
        let e_pool = tape.param_row_mean(e_id, &[1, 2]);
        let mix = tape.sub(e0, e_pool);
        let cat = tape.concat(&[h, mix]);
        let sg = tape.sigmoid(cat);
        let sp = tape.softplus(sg);
        let lsm = tape.log_softmax(sp);
        let sm = tape.softmax(sp);
        let ent = tape.dot(sm, lsm);

        let p0 = tape.pick(lsm, 1);
        let sc = tape.param(s_id);
        let spc = tape.softplus(sc);
        let pen = tape.scale_by_scalar(mix, spc);
        let pen_sum = tape.sum(pen);

        let r = tape.relu(mix);
        let rm = tape.mean(r);
        let ex = tape.exp(p0);
        let cl = tape.clamp(ex, 0.8, 1.2);
        let mn = tape.min(cl, rm);
        let w1 = tape.value_node(vec![0.25, 0.75]);
        let ws = tape.weighted_sum(w1, &[h, h]);
        let wsum = tape.sum(ws);
        let sc2 = tape.scale(wsum, 0.5);
        let ac = tape.add_const(sc2, 0.1);
        let neg = tape.neg(ent);

        let total = tape.add_many(&[pen_sum, mn, ac, neg]);
        tape.scalar(total)
    }

    #[test]
    fn finite_difference_matches_backward() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut params = Params::new();
        params.add("w", Tensor::randn(4, 3, 0.5, &mut rng));
        params.add("b", Tensor::randn(4, 1, 0.5, &mut rng));
        params.add("e", Tensor::randn(3, 4, 0.5, &mut rng));
        params.add("s", Tensor::randn(1, 1, 0.5, &mut rng));

        let mut grads = Grads::zeros_like(&params);
        {
            let mut tape = Tape::new(&params);
            // Rebuild the same graph to get the loss node for backward.
            let w_id = ParamId(0);
            let b_id = ParamId(1);
            let e_id = ParamId(2);
            let s_id = ParamId(3);
            let x = tape.value_node(vec![0.3, -0.7, 1.1]);
            let wx = tape.matvec(w_id, x);
            let b = tape.param(b_id);
            let pre = tape.add(wx, b);
            let h = tape.tanh(pre);
            let e0 = tape.param_row(e_id, 0);
            let e_pool = tape.param_row_mean(e_id, &[1, 2]);
            let mix = tape.sub(e0, e_pool);
            let cat = tape.concat(&[h, mix]);
            let sg = tape.sigmoid(cat);
            let sp = tape.softplus(sg);
            let lsm = tape.log_softmax(sp);
            let sm = tape.softmax(sp);
            let ent = tape.dot(sm, lsm);
            let p0 = tape.pick(lsm, 1);
            let sc = tape.param(s_id);
            let spc = tape.softplus(sc);
            let pen = tape.scale_by_scalar(mix, spc);
            let pen_sum = tape.sum(pen);
            let r = tape.relu(mix);
            let rm = tape.mean(r);
            let ex = tape.exp(p0);
            let cl = tape.clamp(ex, 0.8, 1.2);
            let mn = tape.min(cl, rm);
            let w1 = tape.value_node(vec![0.25, 0.75]);
            let ws = tape.weighted_sum(w1, &[h, h]);
            let wsum = tape.sum(ws);
            let sc2 = tape.scale(wsum, 0.5);
            let ac = tape.add_const(sc2, 0.1);
            let neg = tape.neg(ent);
            let total = tape.add_many(&[pen_sum, mn, ac, neg]);
            tape.backward(total, &mut grads);
        }

        let analytic = grads.flatten();
        let numeric = fd_grad(&mut params, mixed_loss, 1e-5);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                ((a - n) / denom).abs() < 1e-6,
                "grad mismatch at {i}: analytic {a}, numeric {n}"
            );
        }
    }

    #[test]
    fn flatten_load_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut params = Params::new();
        params.add("a", Tensor::randn(2, 5, 1.0, &mut rng));
        params.add("b", Tensor::randn(3, 1, 1.0, &mut rng));
        let flat = params.flatten();
        let mut copy = params.clone();
        copy.load_flat(&flat);
        assert_eq!(params.flatten(), copy.flatten());
    }

    #[test]
    fn params_json_roundtrip_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut params = Params::new();
        params.add("w", Tensor::randn(7, 3, 0.123, &mut rng));
        let json = serde_json::to_string(&params).unwrap();
        let back: Params = serde_json::from_str(&json).unwrap();
        assert_eq!(params.flatten(), back.flatten());
    }
}
