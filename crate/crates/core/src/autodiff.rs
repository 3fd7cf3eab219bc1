//! Reverse-mode gradient engine over 2D f64 tensors.
//!
//! Training code builds a fresh graph per step: values are computed eagerly
//! at node creation, `backward` walks the recorded operations in reverse.
//! Kernels reduce each output element sequentially, so results are
//! bit-reproducible regardless of the worker-pool size.

use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(rows * cols, data.len());
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
        // Box-Muller; two uniforms per normal keeps the stream simple.
        let data = (0..rows * cols)
            .map(|_| {
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Tensor { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub type NodeId = usize;

/// Per-ray constants of the volumetric compositing op.
#[derive(Debug, Clone)]
pub struct RayMeta {
    pub n_rays: usize,
    pub samples: usize,
    /// Sample spacing per ray (box-intersection length / samples).
    pub delta: Vec<f64>,
    pub background: [f64; 3],
    pub radiance: [f64; 3],
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Rc<Vec<usize>>),
    /// Rows of the input land at `indices` in a fresh (n_rows, cols) output,
    /// accumulating on collision.
    ScatterAddRows(NodeId, Rc<Vec<usize>>, usize),
    SumAll(NodeId),
    RowDot(NodeId, NodeId),
    NormalizeRows(NodeId),
    QuatMulRows(NodeId, NodeId),
    /// sigma (R*S,1) and rgb (R*S,3) -> pixels (R,3).
    CompositeRays(NodeId, NodeId, Rc<RayMeta>),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded operation tape with eager forward values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const PAR_FLOPS: usize = 1 << 16;

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        for l in 0..k {
            let av = a.data[i * k + l];
            if av == 0.0 {
                continue;
            }
            let bro = &b.data[l * n..l * n + n];
            for (o, bv) in row.iter_mut().zip(bro) {
                *o += av * bv;
            }
        }
    };
    if m * k * n > PAR_FLOPS {
        out.par_chunks_exact_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            body(i, row);
        }
    }
    Tensor { rows: m, cols: n, data: out }
}

/// a * b^T where both have `k` columns.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols);
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        let ar = &a.data[i * k..i * k + k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b.data[j * k..j * k + k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += ar[l] * br[l];
            }
            *o = acc;
        }
    };
    if m * k * n > PAR_FLOPS {
        out.par_chunks_exact_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            body(i, row);
        }
    }
    Tensor { rows: m, cols: n, data: out }
}

/// a^T * b where both have `m` rows.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; k * n];
    let body = |l: usize, row: &mut [f64]| {
        for i in 0..m {
            let av = a.data[i * k + l];
            if av == 0.0 {
                continue;
            }
            let br = &b.data[i * n..i * n + n];
            for (o, bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    };
    if m * k * n > PAR_FLOPS {
        out.par_chunks_exact_mut(n).enumerate().for_each(|(l, row)| body(l, row));
    } else {
        for (l, row) in out.chunks_exact_mut(n).enumerate() {
            body(l, row);
        }
    }
    Tensor { rows: k, cols: n, data: out }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn composite_forward(sigma: &Tensor, rgb: &Tensor, meta: &RayMeta) -> Tensor {
    let (r_count, s) = (meta.n_rays, meta.samples);
    assert_eq!(sigma.rows, r_count * s);
    assert_eq!(rgb.rows, r_count * s);
    let mut out = Tensor::zeros(r_count, 3);
    for r in 0..r_count {
        let delta = meta.delta[r];
        let mut transmittance = 1.0;
        let mut acc = [0.0f64; 3];
        for i in 0..s {
            let row = r * s + i;
            let e = (-sigma.data[row] * delta).exp();
            let alpha = 1.0 - e;
            let w = transmittance * alpha;
            for c in 0..3 {
                acc[c] += w * rgb.data[row * 3 + c] * meta.radiance[c];
            }
            transmittance *= e;
        }
        for c in 0..3 {
            out.data[r * 3 + c] = acc[c] + transmittance * meta.background[c];
        }
    }
    out
}

fn composite_backward(
    sigma: &Tensor,
    rgb: &Tensor,
    meta: &RayMeta,
    g_out: &Tensor,
    g_sigma: &mut Tensor,
    g_rgb: &mut Tensor,
) {
    let (r_count, s) = (meta.n_rays, meta.samples);
    for r in 0..r_count {
        let delta = meta.delta[r];
        let g = &g_out.data[r * 3..r * 3 + 3];
        let mut trans = vec![0.0f64; s + 1];
        trans[0] = 1.0;
        for i in 0..s {
            let row = r * s + i;
            trans[i + 1] = trans[i] * (-sigma.data[row] * delta).exp();
        }
        // d pixel / d sigma_i = delta * (T_i e_i rho_i L - sum_{j>i} w_j
        // rho_j L - T_final bg), contracted with the incoming gradient.
        let t_final = trans[s];
        let bg_term: f64 = (0..3).map(|c| g[c] * t_final * meta.background[c]).sum();
        let mut suffix = 0.0f64;
        for i in (0..s).rev() {
            let row = r * s + i;
            let e = (-sigma.data[row] * delta).exp();
            let w = trans[i] * (1.0 - e);
            let mut own = 0.0;
            let mut contrib = 0.0;
            for c in 0..3 {
                let lr = meta.radiance[c] * rgb.data[row * 3 + c];
                g_rgb.data[row * 3 + c] += g[c] * w * meta.radiance[c];
                own += g[c] * trans[i] * e * lr;
                contrib += g[c] * w * lr;
            }
            g_sigma.data[row] += delta * (own - suffix - bg_term);
            suffix += contrib;
        }
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.data.len(), 1);
        t.data[0]
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Trainable input; `backward` produces its gradient.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[*i].needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(&self.nodes[a].value, &self.nodes[b].value);
        let ng = self.needs(&[a, b]);
        self.push(Op::MatMul(a, b), v, ng)
    }

    /// Broadcast-add a (1,n) bias row onto every row.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (x, b) = (&self.nodes[a].value, &self.nodes[bias].value);
        assert_eq!(b.rows, 1);
        assert_eq!(x.cols, b.cols);
        let mut v = x.clone();
        for row in v.data.chunks_exact_mut(v.cols) {
            for (o, bv) in row.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        let ng = self.needs(&[a, bias]);
        self.push(Op::AddRow(a, bias), v, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x + y);
        let ng = self.needs(&[a, b]);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x - y);
        let ng = self.needs(&[a, b]);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x * y);
        let ng = self.needs(&[a, b]);
        self.push(Op::Mul(a, b), v, ng)
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        zip_t(&self.nodes[a].value, &self.nodes[b].value, f)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = map_t(&self.nodes[a].value, |x| x * c);
        let ng = self.needs(&[a]);
        self.push(Op::Scale(a, c), v, ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = map_t(&self.nodes[a].value, |x| x + c);
        let ng = self.needs(&[a]);
        self.push(Op::AddScalar(a, c), v, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = map_t(&self.nodes[a].value, |x| x.max(0.0));
        let ng = self.needs(&[a]);
        self.push(Op::Relu(a), v, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = map_t(&self.nodes[a].value, f64::tanh);
        let ng = self.needs(&[a]);
        self.push(Op::Tanh(a), v, ng)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = map_t(&self.nodes[a].value, softplus);
        let ng = self.needs(&[a]);
        self.push(Op::Softplus(a), v, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = map_t(&self.nodes[a].value, sigmoid);
        let ng = self.needs(&[a]);
        self.push(Op::Sigmoid(a), v, ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = map_t(&self.nodes[a].value, f64::abs);
        let ng = self.needs(&[a]);
        self.push(Op::Abs(a), v, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.nodes[parts[0]].value.rows;
        let cols: usize = parts.iter().map(|p| self.nodes[*p].value.cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = &self.nodes[*p].value;
            assert_eq!(t.rows, rows);
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + t.cols]
                    .copy_from_slice(&t.data[r * t.cols..(r + 1) * t.cols]);
            }
            off += t.cols;
        }
        let ng = self.needs(parts);
        self.push(Op::ConcatCols(parts.to_vec()), v, ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.nodes[parts[0]].value.cols;
        let rows: usize = parts.iter().map(|p| self.nodes[*p].value.rows).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = &self.nodes[*p].value;
            assert_eq!(t.cols, cols);
            v.data[off..off + t.data.len()].copy_from_slice(&t.data);
            off += t.data.len();
        }
        let ng = self.needs(parts);
        self.push(Op::ConcatRows(parts.to_vec()), v, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let x = &self.nodes[a].value;
        assert!(start < end && end <= x.cols);
        let w = end - start;
        let mut v = Tensor::zeros(x.rows, w);
        for r in 0..x.rows {
            v.data[r * w..(r + 1) * w].copy_from_slice(&x.data[r * x.cols + start..r * x.cols + end]);
        }
        let ng = self.needs(&[a]);
        self.push(Op::SliceCols(a, start, end), v, ng)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = Tensor::zeros(idx.len(), x.cols);
        for (r, i) in idx.iter().enumerate() {
            v.data[r * x.cols..(r + 1) * x.cols]
                .copy_from_slice(&x.data[i * x.cols..(i + 1) * x.cols]);
        }
        let ng = self.needs(&[a]);
        self.push(Op::GatherRows(a, idx), v, ng)
    }

    pub fn scatter_add_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>, n_rows: usize) -> NodeId {
        let x = &self.nodes[a].value;
        assert_eq!(x.rows, idx.len());
        let mut v = Tensor::zeros(n_rows, x.cols);
        for (r, i) in idx.iter().enumerate() {
            for c in 0..x.cols {
                v.data[i * x.cols + c] += x.data[r * x.cols + c];
            }
        }
        let ng = self.needs(&[a]);
        self.push(Op::ScatterAddRows(a, idx, n_rows), v, ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        let ng = self.needs(&[a]);
        self.push(Op::SumAll(a), Tensor::scalar(s), ng)
    }

    /// Row-wise dot product of two (m,n) tensors -> (m,1).
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((x.rows, x.cols), (y.rows, y.cols));
        let mut v = Tensor::zeros(x.rows, 1);
        for r in 0..x.rows {
            v.data[r] = (0..x.cols).map(|c| x.data[r * x.cols + c] * y.data[r * x.cols + c]).sum();
        }
        let ng = self.needs(&[a, b]);
        self.push(Op::RowDot(a, b), v, ng)
    }

    /// Normalize each row to unit length.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for row in v.data.chunks_exact_mut(v.cols) {
            let n = row.iter().map(|q| q * q).sum::<f64>().sqrt().max(1e-12);
            for q in row.iter_mut() {
                *q /= n;
            }
        }
        let ng = self.needs(&[a]);
        self.push(Op::NormalizeRows(a), v, ng)
    }

    /// Hamilton product per row of two (m,4) quaternion tensors.
    pub fn quat_mul_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = quat_mul_t(&self.nodes[a].value, &self.nodes[b].value);
        let ng = self.needs(&[a, b]);
        self.push(Op::QuatMulRows(a, b), v, ng)
    }

    /// Volumetric compositing of per-sample density and transfer into pixel
    /// colors, with per-ray metadata held constant.
    pub fn composite_rays(&mut self, sigma: NodeId, rgb: NodeId, meta: Rc<RayMeta>) -> NodeId {
        let v = composite_forward(&self.nodes[sigma].value, &self.nodes[rgb].value, &meta);
        let ng = self.needs(&[sigma, rgb]);
        self.push(Op::CompositeRays(sigma, rgb, meta), v, ng)
    }

    /// Gradients of a scalar node with respect to every `needs_grad` node.
    /// Returns one entry per node id (None where no gradient was required).
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Tensor>> {
        assert_eq!(self.nodes[loss].value.data.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], matmul_nt(&g, &self.nodes[*b].value));
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], matmul_tn(&self.nodes[*a].value, &g));
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.nodes[*bias].needs_grad {
                        let mut db = Tensor::zeros(1, g.cols);
                        for row in g.data.chunks_exact(g.cols) {
                            for (o, v) in db.data.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads[*bias], db);
                    }
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], map_t(&g, |v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], zip_t(&g, &self.nodes[*b].value, |x, y| x * y));
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], zip_t(&g, &self.nodes[*a].value, |x, y| x * y));
                    }
                }
                Op::Scale(a, c) => {
                    if self.nodes[*a].needs_grad {
                        let c = *c;
                        accumulate(&mut grads[*a], map_t(&g, |v| v * c));
                    }
                }
                Op::AddScalar(a, _) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g);
                    }
                }
                Op::Relu(a) => {
                    self.unary_bw(*a, &node.value, &g, &mut grads, |x, _y, gv| {
                        if x > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    })
                }
                Op::Tanh(a) => {
                    self.unary_bw(*a, &node.value, &g, &mut grads, |_x, y, gv| gv * (1.0 - y * y))
                }
                Op::Softplus(a) => {
                    self.unary_bw(*a, &node.value, &g, &mut grads, |x, _y, gv| gv * sigmoid(x))
                }
                Op::Sigmoid(a) => {
                    self.unary_bw(*a, &node.value, &g, &mut grads, |_x, y, gv| gv * y * (1.0 - y))
                }
                Op::Abs(a) => {
                    self.unary_bw(*a, &node.value, &g, &mut grads, |x, _y, gv| {
                        if x >= 0.0 {
                            gv
                        } else {
                            -gv
                        }
                    })
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let t = &self.nodes[*p].value;
                        if self.nodes[*p].needs_grad {
                            let mut dp = Tensor::zeros(t.rows, t.cols);
                            for r in 0..t.rows {
                                dp.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(
                                    &g.data[r * g.cols + off..r * g.cols + off + t.cols],
                                );
                            }
                            accumulate(&mut grads[*p], dp);
                        }
                        off += t.cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let t = &self.nodes[*p].value;
                        if self.nodes[*p].needs_grad {
                            let mut dp = Tensor::zeros(t.rows, t.cols);
                            dp.data.copy_from_slice(&g.data[off..off + t.data.len()]);
                            accumulate(&mut grads[*p], dp);
                        }
                        off += t.data.len();
                    }
                }
                Op::SliceCols(a, start, end) => {
                    if self.nodes[*a].needs_grad {
                        let x = &self.nodes[*a].value;
                        let mut da = Tensor::zeros(x.rows, x.cols);
                        let w = end - start;
                        for r in 0..x.rows {
                            da.data[r * x.cols + start..r * x.cols + end]
                                .copy_from_slice(&g.data[r * w..(r + 1) * w]);
                        }
                        accumulate(&mut grads[*a], da);
                    }
                }
                Op::GatherRows(a, idx) => {
                    if self.nodes[*a].needs_grad {
                        let x = &self.nodes[*a].value;
                        let mut da = Tensor::zeros(x.rows, x.cols);
                        for (r, i) in idx.iter().enumerate() {
                            for c in 0..x.cols {
                                da.data[i * x.cols + c] += g.data[r * x.cols + c];
                            }
                        }
                        accumulate(&mut grads[*a], da);
                    }
                }
                Op::ScatterAddRows(a, idx, _) => {
                    if self.nodes[*a].needs_grad {
                        let x = &self.nodes[*a].value;
                        let mut da = Tensor::zeros(x.rows, x.cols);
                        for (r, i) in idx.iter().enumerate() {
                            da.data[r * x.cols..(r + 1) * x.cols]
                                .copy_from_slice(&g.data[i * x.cols..(i + 1) * x.cols]);
                        }
                        accumulate(&mut grads[*a], da);
                    }
                }
                Op::SumAll(a) => {
                    if self.nodes[*a].needs_grad {
                        let x = &self.nodes[*a].value;
                        let gv = g.data[0];
                        accumulate(
                            &mut grads[*a],
                            Tensor { rows: x.rows, cols: x.cols, data: vec![gv; x.data.len()] },
                        );
                    }
                }
                Op::RowDot(a, b) => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].needs_grad {
                        let mut da = Tensor::zeros(x.rows, x.cols);
                        for r in 0..x.rows {
                            for c in 0..x.cols {
                                da.data[r * x.cols + c] = g.data[r] * y.data[r * x.cols + c];
                            }
                        }
                        accumulate(&mut grads[*a], da);
                    }
                    if self.nodes[*b].needs_grad {
                        let mut db = Tensor::zeros(y.rows, y.cols);
                        for r in 0..y.rows {
                            for c in 0..y.cols {
                                db.data[r * y.cols + c] = g.data[r] * x.data[r * y.cols + c];
                            }
                        }
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::NormalizeRows(a) => {
                    if self.nodes[*a].needs_grad {
                        let x = &self.nodes[*a].value;
                        let y = &node.value;
                        let mut da = Tensor::zeros(x.rows, x.cols);
                        for r in 0..x.rows {
                            let xr = &x.data[r * x.cols..(r + 1) * x.cols];
                            let yr = &y.data[r * x.cols..(r + 1) * x.cols];
                            let gr = &g.data[r * x.cols..(r + 1) * x.cols];
                            let n = xr.iter().map(|q| q * q).sum::<f64>().sqrt().max(1e-12);
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for c in 0..x.cols {
                                da.data[r * x.cols + c] = (gr[c] - yr[c] * dot) / n;
                            }
                        }
                        accumulate(&mut grads[*a], da);
                    }
                }
                Op::QuatMulRows(a, b) => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut da = Tensor::zeros(x.rows, 4);
                    let mut db = Tensor::zeros(y.rows, 4);
                    for r in 0..x.rows {
                        let a4 = &x.data[r * 4..r * 4 + 4];
                        let b4 = &y.data[r * 4..r * 4 + 4];
                        let gr = &g.data[r * 4..r * 4 + 4];
                        let (aw, ax, ay, az) = (a4[0], a4[1], a4[2], a4[3]);
                        let (bw, bx, by, bz) = (b4[0], b4[1], b4[2], b4[3]);
                        da.data[r * 4] = gr[0] * bw + gr[1] * bx + gr[2] * by + gr[3] * bz;
                        da.data[r * 4 + 1] = -gr[0] * bx + gr[1] * bw - gr[2] * bz + gr[3] * by;
                        da.data[r * 4 + 2] = -gr[0] * by + gr[1] * bz + gr[2] * bw - gr[3] * bx;
                        da.data[r * 4 + 3] = -gr[0] * bz - gr[1] * by + gr[2] * bx + gr[3] * bw;
                        db.data[r * 4] = gr[0] * aw + gr[1] * ax + gr[2] * ay + gr[3] * az;
                        db.data[r * 4 + 1] = -gr[0] * ax + gr[1] * aw + gr[2] * az - gr[3] * ay;
                        db.data[r * 4 + 2] = -gr[0] * ay - gr[1] * az + gr[2] * aw + gr[3] * ax;
                        db.data[r * 4 + 3] = -gr[0] * az + gr[1] * ay - gr[2] * ax + gr[3] * aw;
                    }
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], da);
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::CompositeRays(sig, rgb, meta) => {
                    let sv = &self.nodes[*sig].value;
                    let rv = &self.nodes[*rgb].value;
                    let mut gs = Tensor::zeros(sv.rows, 1);
                    let mut gr = Tensor::zeros(rv.rows, 3);
                    composite_backward(sv, rv, meta, &g, &mut gs, &mut gr);
                    if self.nodes[*sig].needs_grad {
                        accumulate(&mut grads[*sig], gs);
                    }
                    if self.nodes[*rgb].needs_grad {
                        accumulate(&mut grads[*rgb], gr);
                    }
                }
            }
        }
        grads
    }

    fn unary_bw(
        &self,
        a: NodeId,
        y: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        if !self.nodes[a].needs_grad {
            return;
        }
        let x = &self.nodes[a].value;
        let da = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: (0..x.data.len()).map(|i| f(x.data[i], y.data[i], g.data[i])).collect(),
        };
        accumulate(&mut grads[a], da);
    }

    /// Recompute every node from the recorded operations and compare with
    /// the stored forward values bit-for-bit.
    pub fn replay_matches(&self) -> bool {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::MatMul(a, b) => matmul(&values[*a], &values[*b]),
                Op::AddRow(a, b) => {
                    let mut v = values[*a].clone();
                    let bias = &values[*b];
                    for row in v.data.chunks_exact_mut(v.cols) {
                        for (o, bv) in row.iter_mut().zip(&bias.data) {
                            *o += bv;
                        }
                    }
                    v
                }
                Op::Add(a, b) => zip_t(&values[*a], &values[*b], |x, y| x + y),
                Op::Sub(a, b) => zip_t(&values[*a], &values[*b], |x, y| x - y),
                Op::Mul(a, b) => zip_t(&values[*a], &values[*b], |x, y| x * y),
                Op::Scale(a, c) => map_t(&values[*a], |x| x * c),
                Op::AddScalar(a, c) => map_t(&values[*a], |x| x + c),
                Op::Relu(a) => map_t(&values[*a], |x| x.max(0.0)),
                Op::Tanh(a) => map_t(&values[*a], f64::tanh),
                Op::Softplus(a) => map_t(&values[*a], softplus),
                Op::Sigmoid(a) => map_t(&values[*a], sigmoid),
                Op::Abs(a) => map_t(&values[*a], f64::abs),
                Op::ConcatCols(parts) => {
                    let rows = values[parts[0]].rows;
                    let cols: usize = parts.iter().map(|p| values[*p].cols).sum();
                    let mut v = Tensor::zeros(rows, cols);
                    let mut off = 0;
                    for p in parts {
                        let t = &values[*p];
                        for r in 0..rows {
                            v.data[r * cols + off..r * cols + off + t.cols]
                                .copy_from_slice(&t.data[r * t.cols..(r + 1) * t.cols]);
                        }
                        off += t.cols;
                    }
                    v
                }
                Op::ConcatRows(parts) => {
                    let cols = values[parts[0]].cols;
                    let rows: usize = parts.iter().map(|p| values[*p].rows).sum();
                    let mut v = Tensor::zeros(rows, cols);
                    let mut off = 0;
                    for p in parts {
                        let t = &values[*p];
                        v.data[off..off + t.data.len()].copy_from_slice(&t.data);
                        off += t.data.len();
                    }
                    v
                }
                Op::SliceCols(a, start, end) => {
                    let x = &values[*a];
                    let w = end - start;
                    let mut v = Tensor::zeros(x.rows, w);
                    for r in 0..x.rows {
                        v.data[r * w..(r + 1) * w]
                            .copy_from_slice(&x.data[r * x.cols + start..r * x.cols + end]);
                    }
                    v
                }
                Op::GatherRows(a, idx) => {
                    let x = &values[*a];
                    let mut v = Tensor::zeros(idx.len(), x.cols);
                    for (r, i) in idx.iter().enumerate() {
                        v.data[r * x.cols..(r + 1) * x.cols]
                            .copy_from_slice(&x.data[i * x.cols..(i + 1) * x.cols]);
                    }
                    v
                }
                Op::ScatterAddRows(a, idx, n) => {
                    let x = &values[*a];
                    let mut v = Tensor::zeros(*n, x.cols);
                    for (r, i) in idx.iter().enumerate() {
                        for c in 0..x.cols {
                            v.data[i * x.cols + c] += x.data[r * x.cols + c];
                        }
                    }
                    v
                }
                Op::SumAll(a) => Tensor::scalar(values[*a].data.iter().sum()),
                Op::RowDot(a, b) => {
                    let (x, y) = (&values[*a], &values[*b]);
                    let mut v = Tensor::zeros(x.rows, 1);
                    for r in 0..x.rows {
                        v.data[r] = (0..x.cols)
                            .map(|c| x.data[r * x.cols + c] * y.data[r * x.cols + c])
                            .sum();
                    }
                    v
                }
                Op::NormalizeRows(a) => {
                    let mut v = values[*a].clone();
                    for row in v.data.chunks_exact_mut(v.cols) {
                        let n = row.iter().map(|q| q * q).sum::<f64>().sqrt().max(1e-12);
                        for q in row.iter_mut() {
                            *q /= n;
                        }
                    }
                    v
                }
                Op::QuatMulRows(a, b) => quat_mul_t(&values[*a], &values[*b]),
                Op::CompositeRays(s, r, meta) => composite_forward(&values[*s], &values[*r], meta),
            };
            if v != node.value {
                return false;
            }
            values.push(v);
        }
        true
    }
}

fn zip_t(x: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!((x.rows, x.cols), (y.rows, y.cols));
    Tensor {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect(),
    }
}

fn map_t(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { rows: x.rows, cols: x.cols, data: x.data.iter().map(|v| f(*v)).collect() }
}

fn quat_mul_t(x: &Tensor, y: &Tensor) -> Tensor {
    assert_eq!(x.cols, 4);
    assert_eq!(y.cols, 4);
    assert_eq!(x.rows, y.rows);
    let mut v = Tensor::zeros(x.rows, 4);
    for r in 0..x.rows {
        let a4 = &x.data[r * 4..r * 4 + 4];
        let b4 = &y.data[r * 4..r * 4 + 4];
        let (aw, ax, ay, az) = (a4[0], a4[1], a4[2], a4[3]);
        let (bw, bx, by, bz) = (b4[0], b4[1], b4[2], b4[3]);
        v.data[r * 4] = aw * bw - ax * bx - ay * by - az * bz;
        v.data[r * 4 + 1] = aw * bx + ax * bw + ay * bz - az * by;
        v.data[r * 4 + 2] = aw * by - ax * bz + ay * bw + az * bx;
        v.data[r * 4 + 3] = aw * bz + ax * by - ay * bx + az * bw;
    }
    v
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(t) => {
            assert_eq!(t.data.len(), g.data.len());
            for (o, v) in t.data.iter_mut().zip(&g.data) {
                *o += v;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// layers and optimizer

/// Fully-connected layer; weight is (in, out), bias (1, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Linear {
        let std = (2.0 / fan_in as f64).sqrt();
        Linear { w: Tensor::randn(fan_in, fan_out, std, rng), b: Tensor::zeros(1, fan_out) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Small fully-connected network: shared hidden activation, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Mlp {
        let layers = sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Mlp { layers, activation }
    }

    /// Register layer tensors on a graph; pair order is (w, b) per layer.
    pub fn params(&self, g: &mut Graph) -> Vec<(NodeId, NodeId)> {
        self.layers.iter().map(|l| (g.param(l.w.clone()), g.param(l.b.clone()))).collect()
    }

    /// Forward through layer ids previously registered with `params`.
    pub fn forward(&self, g: &mut Graph, ids: &[(NodeId, NodeId)], mut x: NodeId) -> NodeId {
        let last = ids.len() - 1;
        for (i, (w, b)) in ids.iter().enumerate() {
            let z = g.matmul(x, *w);
            x = g.add_row(z, *b);
            if i < last {
                x = match self.activation {
                    Activation::Relu => g.relu(x),
                    Activation::Tanh => g.tanh(x),
                };
            }
        }
        x
    }

    /// Plain forward pass without graph bookkeeping.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = matmul(&cur, &l.w);
            for row in z.data.chunks_exact_mut(z.cols) {
                for (o, bv) in row.iter_mut().zip(&l.b.data) {
                    *o += bv;
                }
            }
            if i < last {
                match self.activation {
                    Activation::Relu => z.data.iter_mut().for_each(|v| *v = v.max(0.0)),
                    Activation::Tanh => z.data.iter_mut().for_each(|v| *v = v.tanh()),
                }
            }
            cur = z;
        }
        cur
    }

    pub fn flatten(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

/// Adam: adaptive per-parameter step sizes with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p.data[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Central finite differences of a black-box scalar function; the oracle
/// used by the gradient-correctness checks.
pub fn fd_gradient(
    mut f: impl FnMut(&[Tensor]) -> f64,
    params: &[Tensor],
    eps: f64,
) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].rows, params[pi].cols);
        for i in 0..params[pi].data.len() {
            let orig = work[pi].data[i];
            work[pi].data[i] = orig + eps;
            let hi = f(&work);
            work[pi].data[i] = orig - eps;
            let lo = f(&work);
            work[pi].data[i] = orig;
            g.data[i] = (hi - lo) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Relative error between two gradient sets: norm of the difference over
/// the larger of the two norms.
pub fn grad_relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data.iter().zip(&y.data) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn matmul_kernels_agree() {
        let mut r = stream(3, 0);
        let a = Tensor::randn(7, 5, 1.0, &mut r);
        let b = Tensor::randn(5, 9, 1.0, &mut r);
        let c = matmul(&a, &b);
        let transpose = |t: &Tensor| {
            let mut o = Tensor::zeros(t.cols, t.rows);
            for i in 0..t.rows {
                for j in 0..t.cols {
                    o.data[j * t.rows + i] = t.data[i * t.cols + j];
                }
            }
            o
        };
        let c2 = matmul_nt(&a, &transpose(&b));
        let c3 = matmul_tn(&transpose(&a), &b);
        for (x, y) in c.data.iter().zip(&c2.data) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in c.data.iter().zip(&c3.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// One network exercising every op with a gradient path, checked
    /// against central finite differences.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut r = stream(11, 1);
        let params = vec![
            Tensor::randn(6, 8, 0.7, &mut r),
            Tensor::randn(1, 8, 0.2, &mut r),
            Tensor::randn(10, 4, 0.5, &mut r),
            Tensor::randn(5, 4, 0.6, &mut r),
        ];
        let x = Tensor::randn(5, 6, 1.0, &mut r);
        let target = Tensor::randn(1, 3, 0.4, &mut r);
        let idx = Rc::new(vec![0usize, 2, 4, 1, 3]);
        let meta = Rc::new(RayMeta {
            n_rays: 1,
            samples: 5,
            delta: vec![0.17],
            background: [0.2, 0.3, 0.1],
            radiance: [1.0, 0.9, 1.1],
        });

        let run = |p: &[Tensor], want_grads: bool| -> (f64, Option<Vec<Tensor>>, bool) {
            let mut g = Graph::new();
            let xw = g.constant(x.clone());
            let tg = g.constant(target.clone());
            let w1 = g.param(p[0].clone());
            let b1 = g.param(p[1].clone());
            let w2 = g.param(p[2].clone());
            let q = g.param(p[3].clone());

            let h = g.matmul(xw, w1);
            let h = g.add_row(h, b1);
            let h = g.tanh(h);
            let hs = g.sigmoid(h);
            let hp = g.softplus(h);
            let hh = g.mul(hs, hp);
            let part = g.slice_cols(hh, 0, 2);
            let cat = g.concat_cols(&[hh, part]);
            let z = g.matmul(cat, w2);
            let qn = g.normalize_rows(q);
            let zn = g.normalize_rows(z);
            let qm = g.quat_mul_rows(zn, qn);
            let dots = g.row_dot(qm, qn);
            let dabs = g.abs(dots);

            let ga = g.gather_rows(hh, Rc::new(vec![0, 2, 4]));
            let gb = g.gather_rows(hh, Rc::new(vec![1, 3]));
            let gathered = g.concat_rows(&[ga, gb]);
            let relu = g.relu(gathered);
            let scat = g.scatter_add_rows(relu, idx.clone(), 5);
            let sig = g.slice_cols(scat, 0, 1);
            let rgb = g.slice_cols(scat, 1, 4);
            let sigp = g.softplus(sig);
            let rgbs = g.sigmoid(rgb);
            let px = g.composite_rays(sigp, rgbs, meta.clone());
            let d = g.sub(px, tg);
            let d2 = g.mul(d, d);
            let l1 = g.sum_all(d2);
            let l2 = g.sum_all(dabs);
            let l2s = g.scale(l2, 0.3);
            let ltot = g.add(l1, l2s);
            let loss = g.add_scalar(ltot, 0.05);

            if want_grads {
                let replay_ok = g.replay_matches();
                let grads = g.backward(loss);
                let out =
                    [w1, b1, w2, q].iter().map(|id| grads[*id].clone().expect("grad")).collect();
                (g.scalar_value(loss), Some(out), replay_ok)
            } else {
                (g.scalar_value(loss), None, true)
            }
        };

        let (_, analytic, replay_ok) = run(&params, true);
        assert!(replay_ok, "tape replay must reproduce forward values bit-exactly");
        let analytic = analytic.unwrap();
        let fd = fd_gradient(|p| run(p, false).0, &params, 1e-6);
        let err = grad_relative_error(&analytic, &fd);
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn composite_limits() {
        // sigma = 0 gives pure background; huge sigma gives the first
        // sample color.
        let meta = Rc::new(RayMeta {
            n_rays: 1,
            samples: 4,
            delta: vec![0.25],
            background: [0.1, 0.2, 0.3],
            radiance: [1.0, 1.0, 1.0],
        });
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(4, 1));
        let rgb = g.constant(Tensor::from_vec(4, 3, vec![0.5; 12]));
        let px = g.composite_rays(z, rgb, meta.clone());
        assert_eq!(g.value(px).data, vec![0.1, 0.2, 0.3]);

        let mut g = Graph::new();
        let dense = g.constant(Tensor::from_vec(4, 1, vec![1e9; 4]));
        let rgb = g.constant(Tensor::from_vec(4, 3, vec![0.5; 12]));
        let px = g.composite_rays(dense, rgb, meta);
        for v in &g.value(px).data {
            assert!((v - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut p = Tensor::from_vec(1, 3, vec![2.0, -1.5, 0.7]);
        let mut opt = Adam::new(0.05);
        for _ in 0..400 {
            let g = Tensor::from_vec(1, 3, p.data.iter().map(|v| 2.0 * v).collect());
            opt.step(&mut [&mut p], &[&g]);
        }
        assert!(p.data.iter().all(|v| v.abs() < 1e-2), "{:?}", p.data);
    }

    #[test]
    fn mlp_infer_matches_graph_forward() {
        let mut r = stream(9, 2);
        let mlp = Mlp::init(&[4, 16, 3], Activation::Relu, &mut r);
        let x = Tensor::randn(6, 4, 1.0, &mut r);
        let direct = mlp.infer(&x);
        let mut g = Graph::new();
        let ids = mlp.params(&mut g);
        let xin = g.constant(x.clone());
        let out = mlp.forward(&mut g, &ids, xin);
        assert_eq!(g.value(out), &direct);
    }
}
