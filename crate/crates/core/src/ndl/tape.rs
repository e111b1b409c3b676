//! Define-by-run reverse-mode autodiff over tensor-valued nodes.
//!
//! A [`Tape`] is rebuilt for every forward pass; each op records its inputs
//! and enough saved state to run the adjoint. Nodes only ever reference
//! earlier nodes, so a single reverse sweep visits consumers before
//! producers.

use super::tensor::{Sparse, Tensor};
use rand::Rng;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    SparseLmul(Rc<Sparse>, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// y = k*x + c, elementwise with scalar k and c.
    /// The shift is applied in the forward value only; the adjoint needs
    /// just the scale.
    Affine(NodeId, f64),
    /// Broadcast a 1 x cols row over every row of the first input.
    AddRow(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Abs(NodeId),
    /// y = ln(x clamped to [lo, hi]); gradient is zero where a clamp engages.
    LnClamped(NodeId, f64, f64),
    Sum(NodeId),
    MeanAll(NodeId),
    /// Column means: rows x cols -> 1 x cols.
    MeanRows(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    StackRows(Vec<NodeId>),
    /// Each row of a rows x 4 tensor scaled to unit norm. Rows with norm
    /// below 1e-8 map to the identity quaternion with zero gradient.
    QuatNormalizeRows(NodeId),
    /// Rowwise Hamilton product of two rows x 4 tensors.
    QuatMulRows(NodeId, NodeId),
    /// Each quaternion row applied to one constant offset vector,
    /// rows x 4 -> rows x 3. Exact rotation when rows are unit quaternions;
    /// for arbitrary rows it evaluates the same polynomial, which keeps the
    /// adjoint consistent under finite differences.
    QuatRotateRows(NodeId, [f64; 3]),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by [`Tape::backward`]. Nodes the loss never
/// touched have no entry.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// The adjoint, or zeros for an untouched node.
    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(id).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a tensor the backward pass will assign an adjoint to
    /// (parameters and inputs alike).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values used as fixed data.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn sparse_lmul(&mut self, s: Rc<Sparse>, x: NodeId) -> NodeId {
        let v = s.matmul_dense(self.value(x));
        self.push(v, Op::SparseLmul(s, x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, k: f64, c: f64) -> NodeId {
        let v = self.value(x).map(|t| k * t + c);
        self.push(v, Op::Affine(x, k))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.affine(x, k, 0.0)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1);
        assert_eq!(rv.cols(), xv.cols());
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let dst = v.row_mut(r);
            for j in 0..dst.len() {
                dst[j] += rv.get(0, j);
            }
        }
        self.push(v, Op::AddRow(x, row))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| 1.0 / (1.0 + (-t).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.value(x).map(|t| if t > 0.0 { t } else { slope * t });
        self.push(v, Op::LeakyRelu(x, slope))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x))
    }

    pub fn ln_clamped(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(0.0 < lo && lo < hi);
        let v = self.value(x).map(|t| t.clamp(lo, hi).ln());
        self.push(v, Op::LnClamped(x, lo, hi))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::MeanAll(x))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = Tensor::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            let src = xv.row(r);
            for j in 0..src.len() {
                v.data_mut()[j] += src[j];
            }
        }
        let inv = 1.0 / xv.rows() as f64;
        for t in v.data_mut() {
            *t *= inv;
        }
        self.push(v, Op::MeanRows(x))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.rows(), bv.rows());
        let mut v = Tensor::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let dst = v.row_mut(r);
            dst[..av.cols()].copy_from_slice(av.row(r));
            dst[av.cols()..].copy_from_slice(bv.row(r));
        }
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> NodeId {
        let xv = self.value(x);
        assert!(lo < hi && hi <= xv.cols());
        let mut v = Tensor::zeros(xv.rows(), hi - lo);
        for r in 0..xv.rows() {
            v.row_mut(r).copy_from_slice(&xv.row(r)[lo..hi]);
        }
        self.push(v, Op::SliceCols(x, lo, hi))
    }

    pub fn slice_rows(&mut self, x: NodeId, lo: usize, hi: usize) -> NodeId {
        let xv = self.value(x);
        assert!(lo < hi && hi <= xv.rows());
        let mut v = Tensor::zeros(hi - lo, xv.cols());
        for r in lo..hi {
            v.row_mut(r - lo).copy_from_slice(xv.row(r));
        }
        self.push(v, Op::SliceRows(x, lo, hi))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols);
            for r in 0..pv.rows() {
                v.row_mut(at + r).copy_from_slice(pv.row(r));
            }
            at += pv.rows();
        }
        self.push(v, Op::StackRows(parts.to_vec()))
    }

    pub fn quat_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 4);
        let mut v = Tensor::zeros(xv.rows(), 4);
        for r in 0..xv.rows() {
            let q = xv.row(r);
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            let dst = v.row_mut(r);
            if n < 1e-8 {
                dst.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            } else {
                for j in 0..4 {
                    dst[j] = q[j] / n;
                }
            }
        }
        self.push(v, Op::QuatNormalizeRows(x))
    }

    pub fn quat_mul_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), 4);
        assert_eq!(bv.cols(), 4);
        assert_eq!(av.rows(), bv.rows());
        let mut v = Tensor::zeros(av.rows(), 4);
        for r in 0..av.rows() {
            let p = av.row(r);
            let q = bv.row(r);
            let dst = v.row_mut(r);
            dst[0] = p[0] * q[0] - p[1] * q[1] - p[2] * q[2] - p[3] * q[3];
            dst[1] = p[0] * q[1] + p[1] * q[0] + p[2] * q[3] - p[3] * q[2];
            dst[2] = p[0] * q[2] - p[1] * q[3] + p[2] * q[0] + p[3] * q[1];
            dst[3] = p[0] * q[3] + p[1] * q[2] - p[2] * q[1] + p[3] * q[0];
        }
        self.push(v, Op::QuatMulRows(a, b))
    }

    pub fn quat_rotate_rows(&mut self, q: NodeId, offset: [f64; 3]) -> NodeId {
        let qv = self.value(q);
        assert_eq!(qv.cols(), 4);
        let mut out = Tensor::zeros(qv.rows(), 3);
        for r in 0..qv.rows() {
            let row = qv.row(r);
            out.row_mut(r)
                .copy_from_slice(&rotate_poly(row, offset));
        }
        self.push(out, Op::QuatRotateRows(q, offset))
    }

    /// Reverse sweep from a 1x1 loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    ensure(&mut grads, a.0, av.shape()).acc_matmul_nt(&gy, bv);
                    ensure(&mut grads, b.0, bv.shape()).acc_matmul_tn(av, &gy);
                }
                Op::SparseLmul(s, x) => {
                    let shape = self.nodes[x.0].value.shape();
                    s.acc_t_matmul_dense(ensure(&mut grads, x.0, shape), &gy);
                }
                Op::Add(a, b) => {
                    ensure(&mut grads, a.0, gy.shape()).acc(&gy);
                    ensure(&mut grads, b.0, gy.shape()).acc(&gy);
                }
                Op::Sub(a, b) => {
                    ensure(&mut grads, a.0, gy.shape()).acc(&gy);
                    ensure(&mut grads, b.0, gy.shape()).acc_scaled(&gy, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    ensure(&mut grads, a.0, gy.shape()).acc_mul(&gy, bv);
                    ensure(&mut grads, b.0, gy.shape()).acc_mul(&gy, av);
                }
                Op::Affine(x, k) => {
                    ensure(&mut grads, x.0, gy.shape()).acc_scaled(&gy, *k);
                }
                Op::AddRow(x, row) => {
                    ensure(&mut grads, x.0, gy.shape()).acc(&gy);
                    let gr = ensure(&mut grads, row.0, (1, gy.cols()));
                    for r in 0..gy.rows() {
                        let src = gy.row(r);
                        let dst = gr.row_mut(0);
                        for j in 0..src.len() {
                            dst[j] += src[j];
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value;
                    let d = y.map(|s| s * (1.0 - s));
                    ensure(&mut grads, x.0, gy.shape()).acc_mul(&gy, &d);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    let d = y.map(|t| 1.0 - t * t);
                    ensure(&mut grads, x.0, gy.shape()).acc_mul(&gy, &d);
                }
                Op::LeakyRelu(x, slope) => {
                    let d = self.nodes[x.0].value.map(|t| if t > 0.0 { 1.0 } else { *slope });
                    ensure(&mut grads, x.0, gy.shape()).acc_mul(&gy, &d);
                }
                Op::Abs(x) => {
                    let d = self.nodes[x.0]
                        .value
                        .map(|t| if t > 0.0 { 1.0 } else if t < 0.0 { -1.0 } else { 0.0 });
                    ensure(&mut grads, x.0, gy.shape()).acc_mul(&gy, &d);
                }
                Op::LnClamped(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let d = self.nodes[x.0]
                        .value
                        .map(|t| if t > lo && t < hi { 1.0 / t } else { 0.0 });
                    ensure(&mut grads, x.0, gy.shape()).acc_mul(&gy, &d);
                }
                Op::Sum(x) => {
                    let g = gy.get(0, 0);
                    let shape = self.nodes[x.0].value.shape();
                    let gx = ensure(&mut grads, x.0, shape);
                    for t in gx.data_mut() {
                        *t += g;
                    }
                }
                Op::MeanAll(x) => {
                    let shape = self.nodes[x.0].value.shape();
                    let g = gy.get(0, 0) / (shape.0 * shape.1) as f64;
                    let gx = ensure(&mut grads, x.0, shape);
                    for t in gx.data_mut() {
                        *t += g;
                    }
                }
                Op::MeanRows(x) => {
                    let shape = self.nodes[x.0].value.shape();
                    let inv = 1.0 / shape.0 as f64;
                    let gx = ensure(&mut grads, x.0, shape);
                    for r in 0..shape.0 {
                        let dst = gx.row_mut(r);
                        for j in 0..shape.1 {
                            dst[j] += inv * gy.get(0, j);
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].value.cols();
                    let sa = self.nodes[a.0].value.shape();
                    let sb = self.nodes[b.0].value.shape();
                    {
                        let ga = ensure(&mut grads, a.0, sa);
                        for r in 0..gy.rows() {
                            let src = &gy.row(r)[..ca];
                            let dst = ga.row_mut(r);
                            for j in 0..src.len() {
                                dst[j] += src[j];
                            }
                        }
                    }
                    let gb = ensure(&mut grads, b.0, sb);
                    for r in 0..gy.rows() {
                        let src = &gy.row(r)[ca..];
                        let dst = gb.row_mut(r);
                        for j in 0..src.len() {
                            dst[j] += src[j];
                        }
                    }
                }
                Op::SliceCols(x, lo, hi) => {
                    let shape = self.nodes[x.0].value.shape();
                    let gx = ensure(&mut grads, x.0, shape);
                    for r in 0..gy.rows() {
                        let src = gy.row(r);
                        let dst = &mut gx.row_mut(r)[*lo..*hi];
                        for j in 0..src.len() {
                            dst[j] += src[j];
                        }
                    }
                }
                Op::SliceRows(x, lo, hi) => {
                    let shape = self.nodes[x.0].value.shape();
                    let gx = ensure(&mut grads, x.0, shape);
                    debug_assert_eq!(hi - lo, gy.rows());
                    for r in 0..gy.rows() {
                        let src = gy.row(r);
                        let dst = gx.row_mut(lo + r);
                        for j in 0..src.len() {
                            dst[j] += src[j];
                        }
                    }
                }
                Op::StackRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let shape = self.nodes[p.0].value.shape();
                        let gp = ensure(&mut grads, p.0, shape);
                        for r in 0..shape.0 {
                            let src = gy.row(at + r);
                            let dst = gp.row_mut(r);
                            for j in 0..src.len() {
                                dst[j] += src[j];
                            }
                        }
                        at += shape.0;
                    }
                }
                Op::QuatNormalizeRows(x) => {
                    let xv = &self.nodes[x.0].value;
                    let yv = &self.nodes[i].value;
                    let gx = ensure(&mut grads, x.0, xv.shape());
                    for r in 0..xv.rows() {
                        let q = xv.row(r);
                        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
                        if n < 1e-8 {
                            continue;
                        }
                        let y = yv.row(r);
                        let g = gy.row(r);
                        let ydg = y[0] * g[0] + y[1] * g[1] + y[2] * g[2] + y[3] * g[3];
                        let dst = gx.row_mut(r);
                        for j in 0..4 {
                            dst[j] += (g[j] - y[j] * ydg) / n;
                        }
                    }
                }
                Op::QuatMulRows(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let ga = ensure(&mut grads, a.0, av.shape());
                        for r in 0..av.rows() {
                            let q = bv.row(r);
                            let g = gy.row(r);
                            let dst = ga.row_mut(r);
                            dst[0] += g[0] * q[0] + g[1] * q[1] + g[2] * q[2] + g[3] * q[3];
                            dst[1] += -g[0] * q[1] + g[1] * q[0] - g[2] * q[3] + g[3] * q[2];
                            dst[2] += -g[0] * q[2] + g[1] * q[3] + g[2] * q[0] - g[3] * q[1];
                            dst[3] += -g[0] * q[3] - g[1] * q[2] + g[2] * q[1] + g[3] * q[0];
                        }
                    }
                    let gb = ensure(&mut grads, b.0, bv.shape());
                    for r in 0..bv.rows() {
                        let p = av.row(r);
                        let g = gy.row(r);
                        let dst = gb.row_mut(r);
                        dst[0] += g[0] * p[0] + g[1] * p[1] + g[2] * p[2] + g[3] * p[3];
                        dst[1] += -g[0] * p[1] + g[1] * p[0] + g[2] * p[3] - g[3] * p[2];
                        dst[2] += -g[0] * p[2] - g[1] * p[3] + g[2] * p[0] + g[3] * p[1];
                        dst[3] += -g[0] * p[3] + g[1] * p[2] - g[2] * p[1] + g[3] * p[0];
                    }
                }
                Op::QuatRotateRows(q, v) => {
                    let qv = &self.nodes[q.0].value;
                    let gq = ensure(&mut grads, q.0, qv.shape());
                    for r in 0..qv.rows() {
                        let row = qv.row(r);
                        let (w, u) = (row[0], [row[1], row[2], row[3]]);
                        let g = gy.row(r);
                        let dst = gq.row_mut(r);
                        let uxv = cross(u, *v);
                        // dL/dw = g . (2w v + 2 u x v)
                        dst[0] += 2.0 * (w * dot(g, *v) + dot(g, uxv));
                        // dL/du = -2(g.v)u + 2(g.u)v + 2(u.v)g + 2w (v x g)
                        let gv = dot(g, *v);
                        let gu = g[0] * u[0] + g[1] * u[1] + g[2] * u[2];
                        let uv = dot(&u, *v);
                        let vxg = cross(*v, [g[0], g[1], g[2]]);
                        for j in 0..3 {
                            dst[j + 1] +=
                                -2.0 * gv * u[j] + 2.0 * gu * v[j] + 2.0 * uv * g[j] + 2.0 * w * vxg[j];
                        }
                    }
                }
            }
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }
}

fn dot(a: &[f64], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// p = (w^2 - |u|^2) v + 2(u.v) u + 2w (u x v); the quaternion rotation
/// formula written as a polynomial in the row's components.
fn rotate_poly(q: &[f64], v: [f64; 3]) -> [f64; 3] {
    let (w, u) = (q[0], [q[1], q[2], q[3]]);
    let a = w * w - (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    let uv = dot(&u, v);
    let uxv = cross(u, v);
    [
        a * v[0] + 2.0 * uv * u[0] + 2.0 * w * uxv[0],
        a * v[1] + 2.0 * uv * u[1] + 2.0 * w * uxv[1],
        a * v[2] + 2.0 * uv * u[2] + 2.0 * w * uxv[2],
    ]
}

fn ensure(grads: &mut [Option<Tensor>], idx: usize, shape: (usize, usize)) -> &mut Tensor {
    grads[idx].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

/// Inverted-scaling dropout mask: entries are 0 with probability `drop_p`
/// and `1/(1-drop_p)` otherwise, so the expected value is preserved and
/// inference can skip the op entirely.
pub fn dropout_mask(rows: usize, cols: usize, drop_p: f64, rng: &mut impl Rng) -> Tensor {
    assert!((0.0..1.0).contains(&drop_p));
    let keep = 1.0 / (1.0 - drop_p);
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = if rng.gen::<f64>() < drop_p { 0.0 } else { keep };
    }
    t
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::gradient_check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Runs `build` twice: once to get analytic gradients, then inside the
    /// finite-difference loop. The output is contracted against a fixed
    /// random tensor so transposition mistakes cannot hide behind a uniform
    /// upstream gradient.
    fn check_op(
        seed: u64,
        shapes: &[(usize, usize)],
        tol: f64,
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Tensor> = shapes
            .iter()
            .map(|&(r, c)| Tensor::randn(r, c, 0.8, &mut rng))
            .collect();
        let contract = {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let y = build(&mut tape, &ids);
            let (r, c) = tape.value(y).shape();
            Tensor::randn(r, c, 1.0, &mut rng)
        };
        let run = |ps: &[Tensor]| -> (Tape, Vec<NodeId>, NodeId) {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
            let y = build(&mut tape, &ids);
            let c = tape.constant(contract.clone());
            let prod = tape.mul(y, c);
            let loss = tape.sum(prod);
            (tape, ids, loss)
        };
        let analytic: Vec<Tensor> = {
            let (tape, ids, loss) = run(&params);
            let grads = tape.backward(loss);
            ids.iter().map(|&id| grads.get_or_zeros(&tape, id)).collect()
        };
        let err = gradient_check(&mut params, &analytic, 1e-5, |ps| {
            let (tape, _, loss) = run(ps);
            tape.value(loss).get(0, 0)
        });
        assert!(err < tol, "op gradient check failed: {err:e}");
    }

    #[test]
    fn matmul_gradients() {
        check_op(1, &[(3, 4), (4, 2)], 1e-6, |t, ids| t.matmul(ids[0], ids[1]));
    }

    #[test]
    fn sparse_lmul_gradients() {
        let s = Rc::new(Sparse::from_entries(
            3,
            4,
            vec![(0, 0, 1.5), (0, 2, -0.5), (1, 1, 2.0), (2, 0, 0.7), (2, 3, -1.2)],
        ));
        check_op(2, &[(4, 3)], 1e-6, move |t, ids| t.sparse_lmul(s.clone(), ids[0]));
    }

    #[test]
    fn elementwise_gradients() {
        check_op(3, &[(3, 3), (3, 3)], 1e-6, |t, ids| t.add(ids[0], ids[1]));
        check_op(4, &[(3, 3), (3, 3)], 1e-6, |t, ids| t.sub(ids[0], ids[1]));
        check_op(5, &[(3, 3), (3, 3)], 1e-6, |t, ids| t.mul(ids[0], ids[1]));
        check_op(6, &[(3, 3)], 1e-6, |t, ids| t.affine(ids[0], -2.5, 0.75));
    }

    #[test]
    fn activation_gradients() {
        check_op(7, &[(4, 3)], 1e-6, |t, ids| t.sigmoid(ids[0]));
        check_op(8, &[(4, 3)], 1e-6, |t, ids| t.tanh(ids[0]));
        check_op(9, &[(4, 3)], 1e-6, |t, ids| t.leaky_relu(ids[0], 0.01));
        check_op(10, &[(4, 3)], 1e-6, |t, ids| t.abs(ids[0]));
    }

    #[test]
    fn ln_clamped_gradients_and_clamp_zones() {
        // Positive inputs well away from both clamps.
        check_op(11, &[(3, 3)], 1e-6, |t, ids| {
            let a = t.abs(ids[0]);
            let shifted = t.affine(a, 1.0, 0.5);
            t.ln_clamped(shifted, 1e-6, 50.0)
        });
        // Below the lower clamp: value pinned, gradient zero.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-3.0));
        let y = tape.ln_clamped(x, 1e-6, 1.0);
        assert_eq!(tape.value(y).get(0, 0), 1e-6f64.ln());
        let g = tape.backward(y);
        assert_eq!(g.get_or_zeros(&tape, x).get(0, 0), 0.0);
        // Above the upper clamp likewise.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(7.0));
        let y = tape.ln_clamped(x, 1e-6, 2.0);
        assert_eq!(tape.value(y).get(0, 0), 2.0f64.ln());
        let g = tape.backward(y);
        assert_eq!(g.get_or_zeros(&tape, x).get(0, 0), 0.0);
    }

    #[test]
    fn reduction_gradients() {
        check_op(12, &[(4, 3)], 1e-6, |t, ids| t.sum(ids[0]));
        check_op(13, &[(4, 3)], 1e-6, |t, ids| t.mean_all(ids[0]));
        check_op(14, &[(4, 3)], 1e-6, |t, ids| t.mean_rows(ids[0]));
    }

    #[test]
    fn layout_op_gradients() {
        check_op(15, &[(3, 2), (3, 4)], 1e-6, |t, ids| t.concat_cols(ids[0], ids[1]));
        check_op(16, &[(3, 6)], 1e-6, |t, ids| t.slice_cols(ids[0], 1, 4));
        check_op(17, &[(6, 3)], 1e-6, |t, ids| t.slice_rows(ids[0], 2, 5));
        check_op(18, &[(2, 3), (3, 3), (1, 3)], 1e-6, |t, ids| t.stack_rows(ids));
        check_op(19, &[(4, 3), (1, 3)], 1e-6, |t, ids| t.add_row(ids[0], ids[1]));
        // The same node used twice must accumulate both contributions.
        check_op(20, &[(2, 3)], 1e-6, |t, ids| t.stack_rows(&[ids[0], ids[0]]));
    }

    #[test]
    fn quat_op_gradients() {
        check_op(21, &[(5, 4)], 1e-6, |t, ids| t.quat_normalize_rows(ids[0]));
        check_op(22, &[(5, 4), (5, 4)], 1e-6, |t, ids| t.quat_mul_rows(ids[0], ids[1]));
        check_op(23, &[(5, 4)], 1e-6, |t, ids| {
            t.quat_rotate_rows(ids[0], [0.7, -1.2, 0.4])
        });
        // Composition as used by forward kinematics.
        check_op(24, &[(4, 4), (4, 4)], 1e-6, |t, ids| {
            let a = t.quat_normalize_rows(ids[0]);
            let b = t.quat_normalize_rows(ids[1]);
            let g = t.quat_mul_rows(a, b);
            t.quat_rotate_rows(g, [1.0, 2.0, -0.5])
        });
    }

    #[test]
    fn quat_ops_match_scalar_quaternions() {
        use crate::math::{Quat, Vec3};
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = Tensor::randn(6, 4, 1.0, &mut rng);
        let b = Tensor::randn(6, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (ia, ib) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let (na, nb) = (tape.quat_normalize_rows(ia), tape.quat_normalize_rows(ib));
        let prod = tape.quat_mul_rows(na, nb);
        let rot = tape.quat_rotate_rows(prod, [0.3, 1.1, -2.0]);
        for r in 0..6 {
            let qa = Quat::new(a.get(r, 0), a.get(r, 1), a.get(r, 2), a.get(r, 3));
            let qb = Quat::new(b.get(r, 0), b.get(r, 1), b.get(r, 2), b.get(r, 3));
            // The tape normalizes without sign canonicalization, so compare
            // against the plain normalized product.
            let sqa = {
                let n = qa.norm();
                Quat::new(qa.w / n, qa.x / n, qa.y / n, qa.z / n)
            };
            let sqb = {
                let n = qb.norm();
                Quat::new(qb.w / n, qb.x / n, qb.y / n, qb.z / n)
            };
            let want_q = sqa.mul(sqb);
            let got = tape.value(prod).row(r);
            assert!((got[0] - want_q.w).abs() < 1e-12);
            assert!((got[1] - want_q.x).abs() < 1e-12);
            assert!((got[2] - want_q.y).abs() < 1e-12);
            assert!((got[3] - want_q.z).abs() < 1e-12);
            let want_v = want_q.rotate(Vec3::new(0.3, 1.1, -2.0));
            let got_v = tape.value(rot).row(r);
            assert!((got_v[0] - want_v.x).abs() < 1e-9);
            assert!((got_v[1] - want_v.y).abs() < 1e-9);
            assert!((got_v[2] - want_v.z).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_quat_rows_normalize_to_identity_with_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 4, vec![1e-10, 0.0, 0.0, 0.0]));
        let y = tape.quat_normalize_rows(x);
        assert_eq!(tape.value(y).row(0), &[1.0, 0.0, 0.0, 0.0]);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert_eq!(g.get_or_zeros(&tape, x).max_abs(), 0.0);
    }

    #[test]
    fn dropout_mask_is_inverted_scaled_and_half_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let m = dropout_mask(100, 100, 0.5, &mut rng);
        let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / m.len() as f64;
        assert!((frac - 0.5).abs() < 0.05, "zero fraction {frac}");
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 2.0));
        // Expected value of the mask is 1, so activations keep their scale.
        assert!((m.mean() - 1.0).abs() < 0.1);
    }

    #[test]
    fn backward_accumulates_shared_subexpressions() {
        // f(x) = sum(x*x + x*x) -> df/dx = 4x.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x);
        let both = tape.add(sq, sq);
        let loss = tape.sum(both);
        let g = tape.backward(loss);
        let gx = g.get_or_zeros(&tape, x);
        assert_eq!(gx.data(), &[4.0, -8.0, 2.0]);
    }
}
