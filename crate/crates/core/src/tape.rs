//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A forward pass records every operation into a `Tape`; `backward` replays
//! the tape in reverse and accumulates gradients into the leaf parameters
//! that were bound with `Tape::param`. Each training example builds its own
//! tape, so batches can be processed independently and their gradient maps
//! summed in a fixed order.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, matmul, matmul_ta, matmul_tb, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRows { x: usize, bias: usize },
    Scale { a: usize, c: f64 },
    MulScalarVar { a: usize, s: usize },
    MulMask { a: usize, mask: Vec<f64> },
    MatMul { a: usize, b: usize },
    MatMulTransB { a: usize, b: usize },
    MatVec { m: usize, v: usize },
    VecMat { v: usize, m: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Gelu { a: usize },
    Softplus { a: usize },
    SoftmaxRows { a: usize },
    CausalSelfAttention { q: usize, k: usize, v: usize, n_heads: usize },
    FullSelfAttention { q: usize, k: usize, v: usize, n_heads: usize },
    Gather { table: usize, ids: Vec<usize> },
    GatherInject { table: usize, ids: Vec<usize>, inject: Vec<(usize, usize)> },
    AddPosTable { x: usize, table: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    MeanRows { x: usize },
    Row { x: usize, i: usize },
    Pick { x: usize, i: usize },
    SliceVec { x: usize, start: usize, len: usize },
    ConcatVec { a: usize, b: usize },
    SumAll { x: usize },
    BceMany { logits: Vec<usize>, labels: Vec<f64> },
    CeRow { logits: usize, target: usize },
    CeSeq { logits: usize, targets: Vec<Option<usize>> },
}

#[derive(Debug)]
enum Saved {
    None,
    /// Attention probabilities: ragged lower-triangular per head (causal) or
    /// dense t*t per head (full).
    AttnProbs(Vec<f64>),
    /// Normalized activations and reciprocal std per row.
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    /// Softmax probabilities for the supervised rows of a cross-entropy op.
    CeProbs { probs: Vec<f64>, count: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    saved: Saved,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, usize>,
}

/// Gradients keyed by parameter name, in parameter-binding order.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    pub by_name: IndexMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Vec<f64>> {
        self.by_name.get(name)
    }

    /// Adds `other * scale` into self. Missing entries are inserted.
    pub fn accumulate_scaled(&mut self, other: &Gradients, scale: f64) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => axpy(scale, g, acc),
                None => {
                    let mut v = g.clone();
                    if scale != 1.0 {
                        v.iter_mut().for_each(|x| *x *= scale);
                    }
                    self.by_name.insert(name.clone(), v);
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

const LN_EPS: f64 = 1e-5;

fn alibi_slope(head: usize, n_heads: usize) -> f64 {
    // 2^(-8 * (h+1) / n_heads), the usual geometric slope ladder.
    (2.0f64).powf(-8.0 * (head as f64 + 1.0) / n_heads as f64)
}

#[inline]
fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[inline]
fn softplus_fwd(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: IndexMap::new() }
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

    fn data(&self, i: usize) -> &[f64] {
        &self.nodes[i].value.data
    }

    fn shape(&self, i: usize) -> &[usize] {
        &self.nodes[i].value.shape
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Saved) -> Var {
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad,
            other => {
                let mut ins = Vec::new();
                collect_inputs(other, &mut ins);
                ins.iter().any(|&i| self.nodes[i].needs_grad)
            }
        };
        self.nodes.push(Node { op, value, saved, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Binds a tensor as a no-grad constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut v = t.clone();
        v.requires_grad = false;
        self.push(Op::Leaf, v, Saved::None)
    }

    pub fn constant_vec(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(Op::Leaf, Tensor::new(shape, data), Saved::None)
    }

    /// Binds a named parameter leaf. Binding the same name twice returns the
    /// original var so gradients accumulate in one place.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&idx) = self.params.get(name) {
            return Var(idx);
        }
        let var = self.push(Op::Leaf, t.clone(), Saved::None);
        self.params.insert(name.to_string(), var.0);
        var
    }

    // ── elementwise / linear ops ────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.data(a.0), self.data(b.0));
        assert_eq!(va.len(), vb.len(), "add: length mismatch");
        let out: Vec<f64> = va.iter().zip(vb).map(|(x, y)| x + y).collect();
        let shape = self.shape(a.0).to_vec();
        self.push(Op::Add { a: a.0, b: b.0 }, Tensor::new(shape, out), Saved::None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.data(a.0), self.data(b.0));
        assert_eq!(va.len(), vb.len(), "sub: length mismatch");
        let out: Vec<f64> = va.iter().zip(vb).map(|(x, y)| x - y).collect();
        let shape = self.shape(a.0).to_vec();
        self.push(Op::Sub { a: a.0, b: b.0 }, Tensor::new(shape, out), Saved::None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.data(a.0), self.data(b.0));
        assert_eq!(va.len(), vb.len(), "mul: length mismatch");
        let out: Vec<f64> = va.iter().zip(vb).map(|(x, y)| x * y).collect();
        let shape = self.shape(a.0).to_vec();
        self.push(Op::Mul { a: a.0, b: b.0 }, Tensor::new(shape, out), Saved::None)
    }

    /// Adds a length-n bias vector to every row of an m×n (or single-row) input.
    pub fn add_rows(&mut self, x: Var, bias: Var) -> Var {
        let n = self.nodes[x.0].value.cols();
        let m = self.nodes[x.0].value.rows();
        assert_eq!(self.data(bias.0).len(), n, "add_rows: bias length mismatch");
        let xv = self.data(x.0);
        let bv = self.data(bias.0);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                out.push(xv[r * n + c] + bv[c]);
            }
        }
        let shape = self.shape(x.0).to_vec();
        self.push(Op::AddRows { x: x.0, bias: bias.0 }, Tensor::new(shape, out), Saved::None)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(a.0).iter().map(|x| x * c).collect();
        let shape = self.shape(a.0).to_vec();
        self.push(Op::Scale { a: a.0, c }, Tensor::new(shape, out), Saved::None)
    }

    /// Broadcast-multiplies `a` by a scalar variable (shape [1]).
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.data(s.0).len(), 1, "mul_scalar_var: scalar expected");
        let sv = self.data(s.0)[0];
        let out: Vec<f64> = self.data(a.0).iter().map(|x| x * sv).collect();
        let shape = self.shape(a.0).to_vec();
        self.push(Op::MulScalarVar { a: a.0, s: s.0 }, Tensor::new(shape, out), Saved::None)
    }

    /// Elementwise multiply by a fixed mask (dropout).
    pub fn mul_mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        assert_eq!(self.data(a.0).len(), mask.len(), "mul_mask: length mismatch");
        let out: Vec<f64> = self.data(a.0).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a.0).to_vec();
        self.push(Op::MulMask { a: a.0, mask }, Tensor::new(shape, out), Saved::None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
        let (k2, n) = (self.nodes[b.0].value.rows(), self.nodes[b.0].value.cols());
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let out = matmul(self.data(a.0), self.data(b.0), m, k, n);
        self.push(Op::MatMul { a: a.0, b: b.0 }, Tensor::new(vec![m, n], out), Saved::None)
    }

    /// a (m×k) times transpose of b (n×k), yielding m×n.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
        let (n, k2) = (self.nodes[b.0].value.rows(), self.nodes[b.0].value.cols());
        assert_eq!(k, k2, "matmul_tb: inner dimension mismatch");
        let out = matmul_tb(self.data(a.0), self.data(b.0), m, k, n);
        self.push(Op::MatMulTransB { a: a.0, b: b.0 }, Tensor::new(vec![m, n], out), Saved::None)
    }

    /// Matrix (r×c) times vector (c) -> vector (r).
    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        let (r, c) = (self.nodes[m.0].value.rows(), self.nodes[m.0].value.cols());
        assert_eq!(self.data(v.0).len(), c, "matvec: dimension mismatch");
        let mv = self.data(m.0);
        let vv = self.data(v.0);
        let out: Vec<f64> = (0..r).map(|i| dot(&mv[i * c..(i + 1) * c], vv)).collect();
        self.push(Op::MatVec { m: m.0, v: v.0 }, Tensor::new(vec![r], out), Saved::None)
    }

    /// Row vector (r) times matrix (r×c) -> vector (c).
    pub fn vecmat(&mut self, v: Var, m: Var) -> Var {
        let (r, c) = (self.nodes[m.0].value.rows(), self.nodes[m.0].value.cols());
        assert_eq!(self.data(v.0).len(), r, "vecmat: dimension mismatch");
        let vv = self.data(v.0);
        let mv = self.data(m.0);
        let mut out = vec![0.0; c];
        for i in 0..r {
            if vv[i] != 0.0 {
                axpy(vv[i], &mv[i * c..(i + 1) * c], &mut out);
            }
        }
        self.push(Op::VecMat { v: v.0, m: m.0 }, Tensor::new(vec![c], out), Saved::None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a.0).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a.0).to_vec();
        self.push(Op::Sigmoid { a: a.0 }, Tensor::new(shape, out), Saved::None)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a.0).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a.0).to_vec();
        self.push(Op::Tanh { a: a.0 }, Tensor::new(shape, out), Saved::None)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a.0).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a.0).to_vec();
        self.push(Op::Gelu { a: a.0 }, Tensor::new(shape, out), Saved::None)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a.0).iter().map(|&x| softplus_fwd(x)).collect();
        let shape = self.shape(a.0).to_vec();
        self.push(Op::Softplus { a: a.0 }, Tensor::new(shape, out), Saved::None)
    }

    /// Row-wise softmax; a 1-D input is one row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.cols();
        let m = self.nodes[a.0].value.rows();
        let mut out = self.data(a.0).to_vec();
        for r in 0..m {
            softmax_row_inplace(&mut out[r * n..(r + 1) * n]);
        }
        let shape = self.shape(a.0).to_vec();
        self.push(Op::SoftmaxRows { a: a.0 }, Tensor::new(shape, out), Saved::None)
    }

    // ── attention ───────────────────────────────────────────────────────

    /// Multi-head causal self-attention over pre-projected q/k/v of shape t×d.
    /// With `alibi` set, scores get a per-head linear distance penalty.
    pub fn causal_self_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, alibi: bool) -> Var {
        let t = self.nodes[q.0].value.rows();
        let d = self.nodes[q.0].value.cols();
        assert_eq!(d % n_heads, 0, "head count must divide model dim");
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let tri = t * (t + 1) / 2;
        let (qd, kd, vd) = (self.data(q.0), self.data(k.0), self.data(v.0));
        let mut probs = vec![0.0; n_heads * tri];
        let mut out = vec![0.0; t * d];
        let mut row = vec![0.0; t];
        for h in 0..n_heads {
            let off = h * hd;
            let slope = if alibi { alibi_slope(h, n_heads) } else { 0.0 };
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + hd];
                for j in 0..=i {
                    let kj = &kd[j * d + off..j * d + off + hd];
                    row[j] = dot(qi, kj) * scale - slope * (i - j) as f64;
                }
                softmax_row_inplace(&mut row[..=i]);
                let base = h * tri + i * (i + 1) / 2;
                probs[base..base + i + 1].copy_from_slice(&row[..=i]);
                let orow = &mut out[i * d + off..i * d + off + hd];
                for j in 0..=i {
                    axpy(row[j], &vd[j * d + off..j * d + off + hd], orow);
                }
            }
        }
        self.push(
            Op::CausalSelfAttention { q: q.0, k: k.0, v: v.0, n_heads },
            Tensor::new(vec![t, d], out),
            Saved::AttnProbs(probs),
        )
    }

    /// Bidirectional multi-head self-attention (no mask, no position bias).
    pub fn full_self_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Var {
        let t = self.nodes[q.0].value.rows();
        let d = self.nodes[q.0].value.cols();
        assert_eq!(d % n_heads, 0, "head count must divide model dim");
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (self.data(q.0), self.data(k.0), self.data(v.0));
        let mut probs = vec![0.0; n_heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..n_heads {
            let off = h * hd;
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + hd];
                let prow = &mut probs[h * t * t + i * t..h * t * t + (i + 1) * t];
                for j in 0..t {
                    prow[j] = dot(qi, &kd[j * d + off..j * d + off + hd]) * scale;
                }
                softmax_row_inplace(prow);
                let orow = &mut out[i * d + off..i * d + off + hd];
                for j in 0..t {
                    axpy(prow[j], &vd[j * d + off..j * d + off + hd], orow);
                }
            }
        }
        self.push(
            Op::FullSelfAttention { q: q.0, k: k.0, v: v.0, n_heads },
            Tensor::new(vec![t, d], out),
            Saved::AttnProbs(probs),
        )
    }

    // ── lookup / shape ops ──────────────────────────────────────────────

    /// Gathers rows of `table` by id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let d = self.nodes[table.0].value.cols();
        let td = self.data(table.0);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        self.push(
            Op::Gather { table: table.0, ids: ids.to_vec() },
            Tensor::new(vec![ids.len(), d], out),
            Saved::None,
        )
    }

    /// Gathers rows of `table` by id, then overwrites the rows listed in
    /// `inject` with the value of the given vector vars. Gradient at injected
    /// rows flows to the injected vars, not the table.
    pub fn gather_inject(&mut self, table: Var, ids: &[usize], inject: &[(usize, Var)]) -> Var {
        let d = self.nodes[table.0].value.cols();
        let td = self.data(table.0);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        for &(pos, var) in inject {
            assert!(pos < ids.len(), "inject position out of range");
            let vd = self.data(var.0);
            assert_eq!(vd.len(), d, "injected vector length must match embedding dim");
            out[pos * d..(pos + 1) * d].copy_from_slice(vd);
        }
        let inject_idx: Vec<(usize, usize)> = inject.iter().map(|&(p, v)| (p, v.0)).collect();
        self.push(
            Op::GatherInject { table: table.0, ids: ids.to_vec(), inject: inject_idx },
            Tensor::new(vec![ids.len(), d], out),
            Saved::None,
        )
    }

    /// Adds the first t rows of a position table to a t×d input.
    pub fn add_pos_table(&mut self, x: Var, table: Var) -> Var {
        let (t, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        assert!(self.nodes[table.0].value.rows() >= t, "position table shorter than sequence");
        assert_eq!(self.nodes[table.0].value.cols(), d);
        let xv = self.data(x.0);
        let tv = self.data(table.0);
        let out: Vec<f64> = xv.iter().zip(tv[..t * d].iter()).map(|(a, b)| a + b).collect();
        self.push(Op::AddPosTable { x: x.0, table: table.0 }, Tensor::new(vec![t, d], out), Saved::None)
    }

    /// Per-row layer normalization with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        assert_eq!(self.data(gamma.0).len(), n);
        assert_eq!(self.data(beta.0).len(), n);
        let xv = self.data(x.0);
        let gv = self.data(gamma.0);
        let bv = self.data(beta.0);
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let xh = (row[c] - mean) * rs;
                xhat[r * n + c] = xh;
                out[r * n + c] = xh * gv[c] + bv[c];
            }
        }
        let shape = self.shape(x.0).to_vec();
        self.push(
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 },
            Tensor::new(shape, out),
            Saved::LayerNorm { xhat, rstd },
        )
    }

    /// Mean over rows: m×n -> n.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
        let xv = self.data(x.0);
        let mut out = vec![0.0; n];
        for r in 0..m {
            axpy(1.0, &xv[r * n..(r + 1) * n], &mut out);
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        self.push(Op::MeanRows { x: x.0 }, Tensor::new(vec![n], out), Saved::None)
    }

    /// Extracts row i of an m×n tensor as a length-n vector.
    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let n = self.nodes[x.0].value.cols();
        let out = self.data(x.0)[i * n..(i + 1) * n].to_vec();
        self.push(Op::Row { x: x.0, i }, Tensor::new(vec![n], out), Saved::None)
    }

    /// Extracts element i of a vector as a scalar.
    pub fn pick(&mut self, x: Var, i: usize) -> Var {
        let out = vec![self.data(x.0)[i]];
        self.push(Op::Pick { x: x.0, i }, Tensor::new(vec![1], out), Saved::None)
    }

    pub fn slice_vec(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.data(x.0)[start..start + len].to_vec();
        self.push(Op::SliceVec { x: x.0, start, len }, Tensor::new(vec![len], out), Saved::None)
    }

    pub fn concat_vec(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.data(a.0).to_vec();
        out.extend_from_slice(self.data(b.0));
        let n = out.len();
        self.push(Op::ConcatVec { a: a.0, b: b.0 }, Tensor::new(vec![n], out), Saved::None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = vec![self.data(x.0).iter().sum()];
        self.push(Op::SumAll { x: x.0 }, Tensor::new(vec![1], out), Saved::None)
    }

    // ── losses ──────────────────────────────────────────────────────────

    /// Mean binary cross-entropy with logits over a list of scalar logit vars.
    pub fn bce_many(&mut self, logits: &[Var], labels: &[f64]) -> Var {
        assert_eq!(logits.len(), labels.len());
        assert!(!logits.is_empty(), "bce_many: empty batch");
        let mut total = 0.0;
        for (lv, &y) in logits.iter().zip(labels) {
            let z = self.data(lv.0)[0];
            // max(z,0) - y*z + ln(1+exp(-|z|))
            total += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
        }
        let n = logits.len() as f64;
        let idx: Vec<usize> = logits.iter().map(|v| v.0).collect();
        self.push(
            Op::BceMany { logits: idx, labels: labels.to_vec() },
            Tensor::new(vec![1], vec![total / n]),
            Saved::None,
        )
    }

    /// Cross-entropy of a single logits vector against a target index.
    pub fn ce_row(&mut self, logits: Var, target: usize) -> Var {
        let lv = self.data(logits.0);
        let mut probs = lv.to_vec();
        softmax_row_inplace(&mut probs);
        let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv[target];
        self.push(
            Op::CeRow { logits: logits.0, target },
            Tensor::new(vec![1], vec![loss]),
            Saved::CeProbs { probs, count: 1 },
        )
    }

    /// Mean cross-entropy over the supervised rows of a t×v logits matrix.
    /// Rows with target None contribute nothing.
    pub fn ce_seq(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (t, v) = (self.nodes[logits.0].value.rows(), self.nodes[logits.0].value.cols());
        assert_eq!(targets.len(), t);
        let lv = self.data(logits.0);
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "ce_seq: no supervised rows");
        let mut probs = Vec::with_capacity(count * v);
        let mut total = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            if let Some(tgt) = tgt {
                let row = &lv[r * v..(r + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[*tgt];
                let start = probs.len();
                probs.extend_from_slice(row);
                softmax_row_inplace(&mut probs[start..]);
            }
        }
        self.push(
            Op::CeSeq { logits: logits.0, targets: targets.to_vec() },
            Tensor::new(vec![1], vec![total / count as f64]),
            Saved::CeProbs { probs, count },
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Runs reverse-mode accumulation from a scalar loss and returns the
    /// gradients of every reachable named parameter. Parameters bound but not
    /// reached keep no entry (their gradient is zero).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(Error::NonScalarLoss(lnode.value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let g = grads[idx].take().expect("checked above");
            let saved = std::mem::replace(&mut self.nodes[idx].saved, Saved::None);
            self.backprop_node(idx, &g, saved, &mut grads);
        }
        let mut out = Gradients::default();
        for (name, &idx) in &self.params {
            if let Some(g) = grads[idx].take() {
                out.by_name.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], idx: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[idx].needs_grad {
            return None;
        }
        if grads[idx].is_none() {
            grads[idx] = Some(vec![0.0; self.nodes[idx].value.numel()]);
        }
        grads[idx].as_mut()
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64], saved: Saved, grads: &mut [Option<Vec<f64>>]) {
        // Split borrows: read values from self.nodes, write into grads.
        macro_rules! acc {
            ($target:expr, $f:expr) => {
                if let Some(buf) = self.grad_buf(grads, $target) {
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf);
                }
            };
        }
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc!(*a, |buf: &mut Vec<f64>| axpy(1.0, g, buf));
                acc!(*b, |buf: &mut Vec<f64>| axpy(1.0, g, buf));
            }
            Op::Sub { a, b } => {
                acc!(*a, |buf: &mut Vec<f64>| axpy(1.0, g, buf));
                acc!(*b, |buf: &mut Vec<f64>| axpy(-1.0, g, buf));
            }
            Op::Mul { a, b } => {
                let bv = self.data(*b).to_vec();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                let av = self.data(*a).to_vec();
                acc!(*b, |buf: &mut Vec<f64>| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRows { x, bias } => {
                let n = self.nodes[*x].value.cols();
                let m = self.nodes[*x].value.rows();
                acc!(*x, |buf: &mut Vec<f64>| axpy(1.0, g, buf));
                acc!(*bias, |buf: &mut Vec<f64>| {
                    for r in 0..m {
                        axpy(1.0, &g[r * n..(r + 1) * n], buf);
                    }
                });
            }
            Op::Scale { a, c } => {
                acc!(*a, |buf: &mut Vec<f64>| axpy(*c, g, buf));
            }
            Op::MulScalarVar { a, s } => {
                let sv = self.data(*s)[0];
                acc!(*a, |buf: &mut Vec<f64>| axpy(sv, g, buf));
                let av = self.data(*a).to_vec();
                acc!(*s, |buf: &mut Vec<f64>| buf[0] += dot(g, &av));
            }
            Op::MulMask { a, mask } => {
                acc!(*a, |buf: &mut Vec<f64>| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * mask[i];
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let n = self.nodes[*b].value.cols();
                let bv = self.data(*b);
                let da = matmul_tb(g, bv, m, n, k);
                acc!(*a, |buf: &mut Vec<f64>| axpy(1.0, &da, buf));
                let av = self.data(*a);
                let db = matmul_ta(av, g, m, k, n);
                acc!(*b, |buf: &mut Vec<f64>| axpy(1.0, &db, buf));
            }
            Op::MatMulTransB { a, b } => {
                let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let n = self.nodes[*b].value.rows();
                let bv = self.data(*b);
                let da = matmul(g, bv, m, n, k);
                acc!(*a, |buf: &mut Vec<f64>| axpy(1.0, &da, buf));
                let av = self.data(*a);
                let db = matmul_ta(g, av, m, n, k);
                acc!(*b, |buf: &mut Vec<f64>| axpy(1.0, &db, buf));
            }
            Op::MatVec { m, v } => {
                let (r, c) = (self.nodes[*m].value.rows(), self.nodes[*m].value.cols());
                let vv = self.data(*v).to_vec();
                acc!(*m, |buf: &mut Vec<f64>| {
                    for i in 0..r {
                        axpy(g[i], &vv, &mut buf[i * c..(i + 1) * c]);
                    }
                });
                let mv = self.data(*m).to_vec();
                acc!(*v, |buf: &mut Vec<f64>| {
                    for i in 0..r {
                        axpy(g[i], &mv[i * c..(i + 1) * c], buf);
                    }
                });
            }
            Op::VecMat { v, m } => {
                let (r, c) = (self.nodes[*m].value.rows(), self.nodes[*m].value.cols());
                let mv = self.data(*m).to_vec();
                acc!(*v, |buf: &mut Vec<f64>| {
                    for i in 0..r {
                        buf[i] += dot(g, &mv[i * c..(i + 1) * c]);
                    }
                });
                let vv = self.data(*v).to_vec();
                acc!(*m, |buf: &mut Vec<f64>| {
                    for i in 0..r {
                        if vv[i] != 0.0 {
                            axpy(vv[i], g, &mut buf[i * c..(i + 1) * c]);
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let out = &self.nodes[idx].value.data;
                let dv: Vec<f64> = g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                acc!(*a, |buf: &mut Vec<f64>| axpy(1.0, &dv, buf));
            }
            Op::Tanh { a } => {
                let out = &self.nodes[idx].value.data;
                let dv: Vec<f64> = g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                acc!(*a, |buf: &mut Vec<f64>| axpy(1.0, &dv, buf));
            }
            Op::Gelu { a } => {
                let xv = self.data(*a).to_vec();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Softplus { a } => {
                let xv = self.data(*a).to_vec();
                acc!(*a, |buf: &mut Vec<f64>| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::SoftmaxRows { a } => {
                let n = self.nodes[idx].value.cols();
                let m = self.nodes[idx].value.rows();
                let p = &self.nodes[idx].value.data;
                let mut dv = vec![0.0; m * n];
                for r in 0..m {
                    let prow = &p[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let s = dot(grow, prow);
                    for c in 0..n {
                        dv[r * n + c] = prow[c] * (grow[c] - s);
                    }
                }
                acc!(*a, |buf: &mut Vec<f64>| axpy(1.0, &dv, buf));
            }
            Op::CausalSelfAttention { q, k, v, n_heads } => {
                let probs = match &saved {
                    Saved::AttnProbs(p) => p,
                    _ => unreachable!("attention probs not saved"),
                };
                let t = self.nodes[*q].value.rows();
                let d = self.nodes[*q].value.cols();
                let hd = d / n_heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let tri = t * (t + 1) / 2;
                let qd = self.data(*q).to_vec();
                let kd = self.data(*k).to_vec();
                let vd = self.data(*v).to_vec();
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut dp = vec![0.0; t];
                for h in 0..*n_heads {
                    let off = h * hd;
                    for i in 0..t {
                        let base = h * tri + i * (i + 1) / 2;
                        let prow = &probs[base..base + i + 1];
                        let gout = &g[i * d + off..i * d + off + hd];
                        // dv and dp
                        let mut sum = 0.0;
                        for j in 0..=i {
                            let vj = &vd[j * d + off..j * d + off + hd];
                            axpy(prow[j], gout, &mut dv[j * d + off..j * d + off + hd]);
                            dp[j] = dot(gout, vj);
                            sum += dp[j] * prow[j];
                        }
                        // softmax backward, then q/k
                        let qi = &qd[i * d + off..i * d + off + hd];
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - sum) * scale;
                            if ds != 0.0 {
                                axpy(ds, &kd[j * d + off..j * d + off + hd], &mut dq[i * d + off..i * d + off + hd]);
                                axpy(ds, qi, &mut dk[j * d + off..j * d + off + hd]);
                            }
                        }
                    }
                }
                acc!(*q, |buf: &mut Vec<f64>| axpy(1.0, &dq, buf));
                acc!(*k, |buf: &mut Vec<f64>| axpy(1.0, &dk, buf));
                acc!(*v, |buf: &mut Vec<f64>| axpy(1.0, &dv, buf));
            }
            Op::FullSelfAttention { q, k, v, n_heads } => {
                let probs = match &saved {
                    Saved::AttnProbs(p) => p,
                    _ => unreachable!("attention probs not saved"),
                };
                let t = self.nodes[*q].value.rows();
                let d = self.nodes[*q].value.cols();
                let hd = d / n_heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let qd = self.data(*q).to_vec();
                let kd = self.data(*k).to_vec();
                let vd = self.data(*v).to_vec();
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut dp = vec![0.0; t];
                for h in 0..*n_heads {
                    let off = h * hd;
                    for i in 0..t {
                        let prow = &probs[h * t * t + i * t..h * t * t + (i + 1) * t];
                        let gout = &g[i * d + off..i * d + off + hd];
                        let mut sum = 0.0;
                        for j in 0..t {
                            let vj = &vd[j * d + off..j * d + off + hd];
                            axpy(prow[j], gout, &mut dv[j * d + off..j * d + off + hd]);
                            dp[j] = dot(gout, vj);
                            sum += dp[j] * prow[j];
                        }
                        let qi = &qd[i * d + off..i * d + off + hd];
                        for j in 0..t {
                            let ds = prow[j] * (dp[j] - sum) * scale;
                            axpy(ds, &kd[j * d + off..j * d + off + hd], &mut dq[i * d + off..i * d + off + hd]);
                            axpy(ds, qi, &mut dk[j * d + off..j * d + off + hd]);
                        }
                    }
                }
                acc!(*q, |buf: &mut Vec<f64>| axpy(1.0, &dq, buf));
                acc!(*k, |buf: &mut Vec<f64>| axpy(1.0, &dk, buf));
                acc!(*v, |buf: &mut Vec<f64>| axpy(1.0, &dv, buf));
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[*table].value.cols();
                acc!(*table, |buf: &mut Vec<f64>| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut buf[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::GatherInject { table, ids, inject } => {
                let d = self.nodes[*table].value.cols();
                let injected: Vec<usize> = inject.iter().map(|&(p, _)| p).collect();
                acc!(*table, |buf: &mut Vec<f64>| {
                    for (r, &id) in ids.iter().enumerate() {
                        if !injected.contains(&r) {
                            axpy(1.0, &g[r * d..(r + 1) * d], &mut buf[id * d..(id + 1) * d]);
                        }
                    }
                });
                for &(pos, var) in inject {
                    acc!(var, |buf: &mut Vec<f64>| axpy(1.0, &g[pos * d..(pos + 1) * d], buf));
                }
            }
            Op::AddPosTable { x, table } => {
                let n = g.len();
                acc!(*x, |buf: &mut Vec<f64>| axpy(1.0, g, buf));
                acc!(*table, |buf: &mut Vec<f64>| axpy(1.0, g, &mut buf[..n]));
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xhat, rstd) = match &saved {
                    Saved::LayerNorm { xhat, rstd } => (xhat, rstd),
                    _ => unreachable!("layernorm stats not saved"),
                };
                let n = self.nodes[*x].value.cols();
                let m = self.nodes[*x].value.rows();
                let gv = self.data(*gamma).to_vec();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    let xrow = &xhat[r * n..(r + 1) * n];
                    let mut mean_dy = 0.0;
                    let mut mean_dyx = 0.0;
                    for c in 0..n {
                        let dyg = grow[c] * gv[c];
                        mean_dy += dyg;
                        mean_dyx += dyg * xrow[c];
                    }
                    mean_dy /= n as f64;
                    mean_dyx /= n as f64;
                    for c in 0..n {
                        let dyg = grow[c] * gv[c];
                        dx[r * n + c] = (dyg - mean_dy - xrow[c] * mean_dyx) * rstd[r];
                    }
                }
                acc!(*x, |buf: &mut Vec<f64>| axpy(1.0, &dx, buf));
                acc!(*gamma, |buf: &mut Vec<f64>| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                acc!(*beta, |buf: &mut Vec<f64>| {
                    for r in 0..m {
                        axpy(1.0, &g[r * n..(r + 1) * n], buf);
                    }
                });
            }
            Op::MeanRows { x } => {
                let n = self.nodes[*x].value.cols();
                let m = self.nodes[*x].value.rows();
                let inv = 1.0 / m as f64;
                acc!(*x, |buf: &mut Vec<f64>| {
                    for r in 0..m {
                        axpy(inv, g, &mut buf[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Row { x, i } => {
                let n = g.len();
                acc!(*x, |buf: &mut Vec<f64>| axpy(1.0, g, &mut buf[i * n..(i + 1) * n]));
            }
            Op::Pick { x, i } => {
                acc!(*x, |buf: &mut Vec<f64>| buf[*i] += g[0]);
            }
            Op::SliceVec { x, start, len } => {
                acc!(*x, |buf: &mut Vec<f64>| axpy(1.0, g, &mut buf[*start..start + len]));
            }
            Op::ConcatVec { a, b } => {
                let na = self.nodes[*a].value.numel();
                acc!(*a, |buf: &mut Vec<f64>| axpy(1.0, &g[..na], buf));
                acc!(*b, |buf: &mut Vec<f64>| axpy(1.0, &g[na..], buf));
            }
            Op::SumAll { x } => {
                acc!(*x, |buf: &mut Vec<f64>| {
                    for v in buf.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::BceMany { logits, labels } => {
                let n = logits.len() as f64;
                for (li, y) in logits.iter().zip(labels) {
                    let z = self.data(*li)[0];
                    let d = (sigmoid(z) - y) / n * g[0];
                    acc!(*li, |buf: &mut Vec<f64>| buf[0] += d);
                }
            }
            Op::CeRow { logits, target } => {
                let probs = match &saved {
                    Saved::CeProbs { probs, .. } => probs,
                    _ => unreachable!("ce probs not saved"),
                };
                acc!(*logits, |buf: &mut Vec<f64>| {
                    for (c, p) in probs.iter().enumerate() {
                        let onehot = if c == *target { 1.0 } else { 0.0 };
                        buf[c] += g[0] * (p - onehot);
                    }
                });
            }
            Op::CeSeq { logits, targets } => {
                let (probs, count) = match &saved {
                    Saved::CeProbs { probs, count } => (probs, *count),
                    _ => unreachable!("ce probs not saved"),
                };
                let v = self.nodes[*logits].value.cols();
                let gscale = g[0] / count as f64;
                acc!(*logits, |buf: &mut Vec<f64>| {
                    let mut si = 0;
                    for (r, tgt) in targets.iter().enumerate() {
                        if let Some(tgt) = tgt {
                            let prow = &probs[si * v..(si + 1) * v];
                            let brow = &mut buf[r * v..(r + 1) * v];
                            for c in 0..v {
                                brow[c] += gscale * (prow[c] - if c == *tgt { 1.0 } else { 0.0 });
                            }
                            si += 1;
                        }
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn collect_inputs(op: &Op, out: &mut Vec<usize>) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Mul { a, b }
        | Op::MatMul { a, b }
        | Op::MatMulTransB { a, b }
        | Op::ConcatVec { a, b } => out.extend([*a, *b]),
        Op::AddRows { x, bias } => out.extend([*x, *bias]),
        Op::Scale { a, .. }
        | Op::MulMask { a, .. }
        | Op::Sigmoid { a }
        | Op::Tanh { a }
        | Op::Gelu { a }
        | Op::Softplus { a }
        | Op::SoftmaxRows { a } => out.push(*a),
        Op::MulScalarVar { a, s } => out.extend([*a, *s]),
        Op::MatVec { m, v } => out.extend([*m, *v]),
        Op::VecMat { v, m } => out.extend([*v, *m]),
        Op::CausalSelfAttention { q, k, v, .. } | Op::FullSelfAttention { q, k, v, .. } => {
            out.extend([*q, *k, *v])
        }
        Op::Gather { table, .. } => out.push(*table),
        Op::GatherInject { table, inject, .. } => {
            out.push(*table);
            out.extend(inject.iter().map(|&(_, v)| v));
        }
        Op::AddPosTable { x, table } => out.extend([*x, *table]),
        Op::LayerNorm { x, gamma, beta } => out.extend([*x, *gamma, *beta]),
        Op::MeanRows { x } | Op::Row { x, .. } | Op::Pick { x, .. } | Op::SliceVec { x, .. } | Op::SumAll { x } => {
            out.push(*x)
        }
        Op::BceMany { logits, .. } => out.extend(logits.iter().copied()),
        Op::CeRow { logits, .. } | Op::CeSeq { logits, .. } => out.push(*logits),
    }
}
