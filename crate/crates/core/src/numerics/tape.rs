//! Define-by-run computation tape. A forward pass pushes nodes onto the
//! tape; `backward` walks the nodes in reverse creation order (which is a
//! topological order by construction) and accumulates gradients into a
//! [`GradMap`]. Tapes are rebuilt every step and never shared across threads.

use super::kernels::{self, Conv2dDims};
use super::{expect_scalar, GradMap, ParamSet, Precision, Tensor};
use crate::error::Result;
use crate::rng::Rng64;
use std::collections::BTreeMap;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param {
        #[allow(dead_code)]
        pid: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { x: usize, bias: usize },
    Scale { x: usize, c: f64 },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    SliceCols { x: usize, rows: usize, cols: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize>, rows: usize, widths: Vec<usize> },
    GatherRows { table: usize, cols: usize, idx: Vec<usize> },
    GatherRowElems { x: usize, cols: usize, idx: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
    Mish { x: usize },
    Gelu { x: usize },
    Tanh { x: usize },
    Exp { x: usize },
    Ln { x: usize },
    Abs { x: usize },
    SoftmaxRows { x: usize, cols: usize },
    LogSoftmaxRows { x: usize, cols: usize },
    LogSumExpRows { x: usize, cols: usize },
    LayerNormRows { x: usize, gamma: usize, beta: usize, cols: usize, eps: f64 },
    StopGrad {
        #[allow(dead_code)]
        x: usize,
    },
    Reshape { x: usize },
    Conv2d { x: usize, w: usize, b: usize, dims: Conv2dDims },
    UpsampleNearest { x: usize, c: usize, h: usize, w: usize, f: usize },
    CausalAttention(Box<AttnData>),
}

/// Bookkeeping for the fused multi-head causal attention op.
#[derive(Debug, Clone)]
pub(crate) struct AttnData {
    qkv: usize,
    batch: usize,
    seq: usize,
    heads: usize,
    hidden: usize,
    /// Post-softmax attention probabilities, [batch, heads, seq, seq].
    probs: Vec<f64>,
    /// Inverted-dropout multipliers applied to the probabilities.
    drop_mask: Option<Vec<f64>>,
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    precision: Precision,
    param_vars: BTreeMap<usize, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape that records the graph for backpropagation.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            precision: Precision::F64,
        param_vars: BTreeMap::new(),
        }
    }

    /// Forward-only tape: values are computed but no graph is kept.
    pub fn eval() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self
    }

    pub fn is_grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, shape: Vec<usize>, mut values: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.precision.quantize(&mut values);
        // Eval tapes keep op metadata (attention probes read it) but have no
        // parameter leaves, so backward never propagates through them.
        let needs_grad = self.grad_enabled && self.op_needs_grad(&op);
        self.nodes.push(Node {
            values,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A node needs a gradient when it is a parameter or any parent needs
    /// one; stop-gradient and plain leaves never do.
    fn op_needs_grad(&self, op: &Op) -> bool {
        let ng = |i: &usize| self.nodes[*i].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Param { .. } => true,
            Op::StopGrad { .. } => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => ng(a) || ng(b),
            Op::AddBias { x, bias } => ng(x) || ng(bias),
            Op::Scale { x, .. }
            | Op::Transpose { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRowElems { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Mish { x }
            | Op::Gelu { x }
            | Op::Tanh { x }
            | Op::Exp { x }
            | Op::Ln { x }
            | Op::Abs { x }
            | Op::SoftmaxRows { x, .. }
            | Op::LogSoftmaxRows { x, .. }
            | Op::LogSumExpRows { x, .. }
            | Op::Reshape { x }
            | Op::UpsampleNearest { x, .. } => ng(x),
            Op::Matmul { a, b, .. } => ng(a) || ng(b),
            Op::ConcatCols { parts, .. } => parts.iter().any(|p| self.nodes[*p].needs_grad),
            Op::GatherRows { table, .. } => ng(table),
            Op::LayerNormRows { x, gamma, beta, .. } => ng(x) || ng(gamma) || ng(beta),
            Op::Conv2d { x, w, b, .. } => ng(x) || ng(w) || ng(b),
            Op::CausalAttention(d) => self.nodes[d.qkv].needs_grad,
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.nodes[v.0].values.len(), 1, "not a scalar");
        self.nodes[v.0].values[0]
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        assert_eq!(s.len(), 2, "expected 2-d value, got {:?}", s);
        (s[0], s[1])
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Var {
        self.push(shape, values, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(vec![1], vec![v])
    }

    pub fn tensor(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.values().to_vec())
    }

    /// Leaf a parameter onto the tape. Repeated calls with the same id reuse
    /// the existing node so fan-out accumulates naturally.
    pub fn param(&mut self, params: &ParamSet, pid: usize) -> Var {
        if let Some(&n) = self.param_vars.get(&pid) {
            return Var(n);
        }
        let t = params.get(pid);
        let v = self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Param { pid },
        );
        if self.grad_enabled {
            self.param_vars.insert(pid, v.0);
        }
        v
    }

    // ── Elementwise / arithmetic ────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Mul(a.0, b.0))
    }

    /// `[r,c] + [c]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = self.rows_cols(x);
        assert_eq!(self.value(bias).len(), c, "bias width mismatch");
        let mut values = self.value(x).to_vec();
        let b = self.value(bias);
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] += b[j];
            }
        }
        self.push(vec![r, c], values, Op::AddBias { x: x.0, bias: bias.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let values = self.value(x).iter().map(|v| v * c).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Scale { x: x.0, c })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    // ── Linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul inner dims: {}x{} * {}x{}", m, k, k2, n);
        let mut values = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut values, m, k, n);
        self.push(vec![m, n], values, Op::Matmul { a: a.0, b: b.0, m, k, n })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.rows_cols(x);
        let xv = self.value(x);
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = xv[i * c + j];
            }
        }
        self.push(vec![c, r], values, Op::Transpose { x: x.0, rows: r, cols: c })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.rows_cols(x);
        assert!(start + len <= c, "slice out of range");
        let xv = self.value(x);
        let mut values = Vec::with_capacity(r * len);
        for i in 0..r {
            values.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        self.push(
            vec![r, len],
            values,
            Op::SliceCols { x: x.0, rows: r, cols: c, start, len },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.rows_cols(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.rows_cols(p);
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p);
                values.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        self.push(
            vec![r, total],
            values,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
                rows: r,
                widths,
            },
        )
    }

    /// `out[i,:] = table[idx[i],:]`. Used both for embedding lookups and for
    /// selecting a subset of sequence positions.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let (r, c) = self.rows_cols(table);
        let tv = self.value(table);
        let mut values = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows index {} out of {}", i, r);
            values.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        self.push(
            vec![idx.len(), c],
            values,
            Op::GatherRows { table: table.0, cols: c, idx: idx.to_vec() },
        )
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn gather_row_elems(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.rows_cols(x);
        assert_eq!(idx.len(), r, "one index per row");
        let xv = self.value(x);
        let values = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "gather_row_elems index {} out of {}", j, c);
                xv[i * c + j]
            })
            .collect();
        self.push(
            vec![r],
            values,
            Op::GatherRowElems { x: x.0, cols: c, idx: idx.to_vec() },
        )
    }

    // ── Reductions ─────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        self.push(vec![1], vec![s], Op::Mean { x: x.0 })
    }

    // ── Nonlinearities ─────────────────────────────────────────────────

    pub fn mish(&mut self, x: Var) -> Var {
        let values = self.value(x).iter().map(|&v| kernels::mish(v)).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Mish { x: x.0 })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let values = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Gelu { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let values = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Tanh { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let values = self.value(x).iter().map(|v| v.exp()).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Exp { x: x.0 })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let values = self.value(x).iter().map(|v| v.ln()).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Ln { x: x.0 })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let values = self.value(x).iter().map(|v| v.abs()).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Abs { x: x.0 })
    }

    // ── Row-wise softmax family ────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.rows_cols(x);
        let xv = self.value(x);
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                values[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                values[i * c + j] /= z;
            }
        }
        self.push(vec![r, c], values, Op::SoftmaxRows { x: x.0, cols: c })
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.rows_cols(x);
        let xv = self.value(x);
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..c {
                values[i * c + j] = row[j] - lse;
            }
        }
        self.push(vec![r, c], values, Op::LogSoftmaxRows { x: x.0, cols: c })
    }

    /// `out[i] = log sum_j exp(x[i,j])`, shift-invariant by max subtraction.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.rows_cols(x);
        let xv = self.value(x);
        let mut values = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            values[i] = m + z.ln();
        }
        self.push(vec![r], values, Op::LogSumExpRows { x: x.0, cols: c })
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.rows_cols(x);
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                values[i * c + j] = (row[j] - mu) * rstd * g[j] + b[j];
            }
        }
        self.push(
            vec![r, c],
            values,
            Op::LayerNormRows { x: x.0, gamma: gamma.0, beta: beta.0, cols: c, eps },
        )
    }

    // ── Structural ─────────────────────────────────────────────────────

    /// Identity in the forward pass, blocks gradient in the backward pass.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let values = self.value(x).to_vec();
        self.push(self.nodes[x.0].shape.clone(), values, Op::StopGrad { x: x.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(x).len(),
            "reshape element count mismatch"
        );
        let values = self.value(x).to_vec();
        self.push(shape, values, Op::Reshape { x: x.0 })
    }

    /// Multiply by an inverted-dropout mask sampled from `rng`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.leaf(self.nodes[x.0].shape.clone(), mask);
        self.mul(x, m)
    }

    // ── Convolution ────────────────────────────────────────────────────

    /// `x`: [c_in, h, w], `w`: [c_out, c_in, kh, kw], `b`: [c_out].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [c,h,w]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [co,ci,kh,kw]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let dims = Conv2dDims {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let (oh, ow) = (dims.out_h(), dims.out_w());
        let mut values = vec![0.0; dims.c_out * oh * ow];
        kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), &dims, &mut values);
        self.push(
            vec![dims.c_out, oh, ow],
            values,
            Op::Conv2d { x: x.0, w: w.0, b: b.0, dims },
        )
    }

    /// Nearest-neighbor upsampling of a [c,h,w] value by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Var {
        assert!(f >= 1);
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "upsample input must be [c,h,w]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let (oh, ow) = (f * h, f * w);
        let mut values = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = xv[(ch * h + i) * w + j];
                    for di in 0..f {
                        for dj in 0..f {
                            values[(ch * oh + f * i + di) * ow + f * j + dj] = v;
                        }
                    }
                }
            }
        }
        self.push(
            vec![c, oh, ow],
            values,
            Op::UpsampleNearest { x: x.0, c, h, w, f },
        )
    }

    /// Fused multi-head causal self-attention over a batch of equal-length
    /// sequences packed as [batch * seq, 3 * hidden] (query, key, value
    /// column blocks). Position i attends to valid positions j <= i of its
    /// own sequence (or itself when padded). Returns [batch * seq, hidden].
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        valid: &[bool],
        dropout_p: f64,
        rng: Option<&mut Rng64>,
    ) -> Var {
        let (rows, w) = self.rows_cols(qkv);
        assert_eq!(rows, batch * seq, "qkv row count mismatch");
        assert_eq!(w % 3, 0, "qkv width must be 3 * hidden");
        let hidden = w / 3;
        assert_eq!(hidden % heads, 0);
        assert_eq!(valid.len(), rows);
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.value(qkv);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * hidden];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let base = b * seq;
            for h in 0..heads {
                let q_off = h * dh;
                let k_off = hidden + h * dh;
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &x[(base + i) * w + q_off..(base + i) * w + q_off + dh];
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..=i {
                        if !(valid[base + j] || j == i) {
                            continue;
                        }
                        let kj = &x[(base + j) * w + k_off..(base + j) * w + k_off + dh];
                        let mut dot = 0.0;
                        for d in 0..dh {
                            dot = qi[d].mul_add(kj[d], dot);
                        }
                        let sc = dot * scale;
                        scores[j] = sc;
                        if sc > m {
                            m = sc;
                        }
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        if !(valid[base + j] || j == i) {
                            continue;
                        }
                        let e = (scores[j] - m).exp();
                        probs[p_base + i * seq + j] = e;
                        z += e;
                    }
                    for j in 0..=i {
                        probs[p_base + i * seq + j] /= z;
                    }
                }
            }
        }
        // Dropout on the attention probabilities (inverted scaling).
        let drop_mask = match (dropout_p > 0.0, rng) {
            (true, Some(r)) => {
                let keep = 1.0 - dropout_p;
                let mask: Vec<f64> = (0..probs.len())
                    .map(|_| if r.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                Some(mask)
            }
            _ => None,
        };
        // Mix values.
        for b in 0..batch {
            let base = b * seq;
            for h in 0..heads {
                let v_off = 2 * hidden + h * dh;
                let o_off = h * dh;
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let orow = (base + i) * hidden + o_off;
                    for j in 0..=i {
                        let mut p = probs[p_base + i * seq + j];
                        if p == 0.0 {
                            continue;
                        }
                        if let Some(mask) = &drop_mask {
                            p *= mask[p_base + i * seq + j];
                            if p == 0.0 {
                                continue;
                            }
                        }
                        let vj = &x[(base + j) * w + v_off..(base + j) * w + v_off + dh];
                        for d in 0..dh {
                            out[orow + d] = p.mul_add(vj[d], out[orow + d]);
                        }
                    }
                }
            }
        }
        self.push(
            vec![rows, hidden],
            out,
            Op::CausalAttention(Box::new(AttnData {
                qkv: qkv.0,
                batch,
                seq,
                heads,
                hidden,
                probs,
                drop_mask,
            })),
        )
    }

    /// Attention probabilities of a fused attention node, if `v` is one.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], usize, usize, usize)> {
        match &self.nodes[v.0].op {
            Op::CausalAttention(d) => Some((&d.probs, d.batch, d.heads, d.seq)),
            _ => None,
        }
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Returns gradients for every
    /// parameter leafed onto this tape; parameters unreachable from the root
    /// get zero-filled entries.
    pub fn backward(&mut self, root: Var) -> Result<GradMap> {
        expect_scalar(self.shape(root))?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(mut gy) = grads[i].take() else {
                continue;
            };
            self.precision.quantize(&mut gy);
            // Reborrow for the match; node ops only reference earlier ids.
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param { .. } => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    acc_slice(&mut grads, *a, &gy, &self.nodes);
                    acc_move(&mut grads, *b, gy, &self.nodes);
                }
                Op::Sub(a, b) => {
                    acc_slice(&mut grads, *a, &gy, &self.nodes);
                    if self.nodes[*b].needs_grad {
                        let mut neg = gy;
                        neg.iter_mut().for_each(|v| *v = -*v);
                        acc_move(&mut grads, *b, neg, &self.nodes);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        let bv = &self.nodes[*b].values;
                        let da: Vec<f64> = gy.iter().zip(bv).map(|(g, v)| g * v).collect();
                        acc_move(&mut grads, *a, da, &self.nodes);
                    }
                    if self.nodes[*b].needs_grad {
                        let av = &self.nodes[*a].values;
                        let db: Vec<f64> = gy.iter().zip(av).map(|(g, v)| g * v).collect();
                        acc_move(&mut grads, *b, db, &self.nodes);
                    }
                }
                Op::AddBias { x, bias } => {
                    acc_slice(&mut grads, *x, &gy, &self.nodes);
                    let c = self.nodes[*bias].values.len();
                    let mut db = vec![0.0; c];
                    for (j, g) in gy.iter().enumerate() {
                        db[j % c] += g;
                    }
                    acc_slice(&mut grads, *bias, &db, &self.nodes);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = gy.iter().map(|g| g * c).collect();
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    if self.nodes[a].needs_grad {
                        let mut da = grads[a].take().unwrap_or_else(|| vec![0.0; m * k]);
                        kernels::matmul_nt_acc(&gy, &self.nodes[b].values, &mut da, m, n, k);
                        grads[a] = Some(da);
                    }
                    if self.nodes[b].needs_grad {
                        let mut db = grads[b].take().unwrap_or_else(|| vec![0.0; k * n]);
                        kernels::matmul_tn_acc(&self.nodes[a].values, &gy, &mut db, m, k, n);
                        grads[b] = Some(db);
                    }
                }
                Op::Transpose { x, rows, cols } => {
                    // gy has shape [cols, rows]; transpose it back.
                    let mut dx = vec![0.0; rows * cols];
                    for j in 0..*cols {
                        for i in 0..*rows {
                            dx[i * cols + j] = gy[j * rows + i];
                        }
                    }
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::SliceCols { x, rows, cols, start, len } => {
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..*rows {
                        for j in 0..*len {
                            dx[i * cols + start + j] = gy[i * len + j];
                        }
                    }
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::ConcatCols { parts, rows, widths } => {
                    let total: usize = widths.iter().sum();
                    let mut off = 0usize;
                    let parts = parts.clone();
                    let widths = widths.clone();
                    let rows = *rows;
                    for (p, w) in parts.iter().zip(&widths) {
                        let mut dp = vec![0.0; rows * w];
                        for i in 0..rows {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&gy[i * total + off..i * total + off + w]);
                        }
                        acc_slice(&mut grads, *p, &dp, &self.nodes);
                        off += w;
                    }
                }
                Op::GatherRows { table, cols, idx } => {
                    let table = *table;
                    if !self.nodes[table].needs_grad {
                        continue;
                    }
                    let cols = *cols;
                    let len = self.nodes[table].values.len();
                    let mut dt = grads[table].take().unwrap_or_else(|| vec![0.0; len]);
                    for (i, &row) in idx.iter().enumerate() {
                        for j in 0..cols {
                            dt[row * cols + j] += gy[i * cols + j];
                        }
                    }
                    grads[table] = Some(dt);
                }
                Op::GatherRowElems { x, cols, idx } => {
                    let mut dx = vec![0.0; self.nodes[*x].values.len()];
                    for (i, &j) in idx.iter().enumerate() {
                        dx[i * cols + j] = gy[i];
                    }
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::Sum { x } => {
                    let dx = vec![gy[0]; self.nodes[*x].values.len()];
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::Mean { x } => {
                    let n = self.nodes[*x].values.len().max(1);
                    let dx = vec![gy[0] / n as f64; self.nodes[*x].values.len()];
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::Mish { x } => {
                    let xv = &self.nodes[*x].values;
                    let dx: Vec<f64> = gy
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| g * kernels::mish_deriv(v))
                        .collect();
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::Gelu { x } => {
                    let xv = &self.nodes[*x].values;
                    let dx: Vec<f64> = gy
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| g * kernels::gelu_deriv(v))
                        .collect();
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::Tanh { x } => {
                    let yv = &node.values;
                    let dx: Vec<f64> = gy.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::Exp { x } => {
                    let yv = &node.values;
                    let dx: Vec<f64> = gy.iter().zip(yv).map(|(g, y)| g * y).collect();
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::Ln { x } => {
                    let xv = &self.nodes[*x].values;
                    let dx: Vec<f64> = gy.iter().zip(xv).map(|(g, v)| g / v).collect();
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::Abs { x } => {
                    let xv = &self.nodes[*x].values;
                    let dx: Vec<f64> = gy
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| g * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
                        .collect();
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::SoftmaxRows { x, cols } => {
                    let p = &node.values;
                    let r = p.len() / cols;
                    let mut dx = vec![0.0; p.len()];
                    for i in 0..r {
                        let row = i * cols;
                        let dot: f64 = (0..*cols).map(|j| p[row + j] * gy[row + j]).sum();
                        for j in 0..*cols {
                            dx[row + j] = p[row + j] * (gy[row + j] - dot);
                        }
                    }
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::LogSoftmaxRows { x, cols } => {
                    let y = &node.values;
                    let r = y.len() / cols;
                    let mut dx = vec![0.0; y.len()];
                    for i in 0..r {
                        let row = i * cols;
                        let gsum: f64 = (0..*cols).map(|j| gy[row + j]).sum();
                        for j in 0..*cols {
                            dx[row + j] = gy[row + j] - y[row + j].exp() * gsum;
                        }
                    }
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::LogSumExpRows { x, cols } => {
                    let y = &node.values;
                    let xv = &self.nodes[*x].values;
                    let mut dx = vec![0.0; xv.len()];
                    for (i, (&lse, &g)) in y.iter().zip(&gy).enumerate() {
                        for j in 0..*cols {
                            dx[i * cols + j] = g * (xv[i * cols + j] - lse).exp();
                        }
                    }
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
                Op::LayerNormRows { x, gamma, beta, cols, eps } => {
                    let xv = &self.nodes[*x].values;
                    let g = &self.nodes[*gamma].values;
                    let c = *cols;
                    let r = xv.len() / c;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let mu = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                        let rstd = 1.0 / (var + eps).sqrt();
                        let gy_row = &gy[i * c..(i + 1) * c];
                        let mut m1 = 0.0; // mean(dy*gamma)
                        let mut m2 = 0.0; // mean(dy*gamma*xhat)
                        for j in 0..c {
                            let xh = (row[j] - mu) * rstd;
                            let dyg = gy_row[j] * g[j];
                            m1 += dyg;
                            m2 += dyg * xh;
                            dgamma[j] += gy_row[j] * xh;
                            dbeta[j] += gy_row[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let xh = (row[j] - mu) * rstd;
                            dx[i * c + j] = rstd * (gy_row[j] * g[j] - m1 - xh * m2);
                        }
                    }
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                    acc_slice(&mut grads, *gamma, &dgamma, &self.nodes);
                    acc_slice(&mut grads, *beta, &dbeta, &self.nodes);
                }
                Op::StopGrad { .. } => {}
                Op::Reshape { x } => {
                    acc_slice(&mut grads, *x, &gy, &self.nodes);
                }
                Op::Conv2d { x, w, b, dims } => {
                    let xv = &self.nodes[*x].values;
                    let wv = &self.nodes[*w].values;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    let mut db = vec![0.0; self.nodes[*b].values.len()];
                    kernels::conv2d_backward(xv, wv, &gy, dims, &mut dx, &mut dw, &mut db);
                    let (x, w, b) = (*x, *w, *b);
                    acc_slice(&mut grads, x, &dx, &self.nodes);
                    acc_slice(&mut grads, w, &dw, &self.nodes);
                    acc_slice(&mut grads, b, &db, &self.nodes);
                }
                Op::CausalAttention(data) => {
                    let d = data.as_ref();
                    let w3 = 3 * d.hidden;
                    let dh = d.hidden / d.heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let x = &self.nodes[d.qkv].values;
                    let mut dx = grads[d.qkv]
                        .take()
                        .unwrap_or_else(|| vec![0.0; x.len()]);
                    let mut d_drop = vec![0.0; d.seq];
                    let mut d_scores = vec![0.0; d.seq];
                    for b in 0..d.batch {
                        let base = b * d.seq;
                        for h in 0..d.heads {
                            let q_off = h * dh;
                            let k_off = d.hidden + h * dh;
                            let v_off = 2 * d.hidden + h * dh;
                            let o_off = h * dh;
                            let p_base = (b * d.heads + h) * d.seq * d.seq;
                            for i in 0..d.seq {
                                let grow = (base + i) * d.hidden + o_off;
                                let go = &gy[grow..grow + dh];
                                // dV and d(dropped probs)
                                for j in 0..=i {
                                    let p = d.probs[p_base + i * d.seq + j];
                                    if p == 0.0 {
                                        d_drop[j] = 0.0;
                                        continue;
                                    }
                                    let keepw = d
                                        .drop_mask
                                        .as_ref()
                                        .map(|m| m[p_base + i * d.seq + j])
                                        .unwrap_or(1.0);
                                    let vj = &x[(base + j) * w3 + v_off..(base + j) * w3 + v_off + dh];
                                    let mut dot = 0.0;
                                    for dd in 0..dh {
                                        dot = go[dd].mul_add(vj[dd], dot);
                                    }
                                    d_drop[j] = dot * keepw;
                                    if keepw != 0.0 {
                                        let pv = p * keepw;
                                        let dvj = &mut dx[(base + j) * w3 + v_off
                                            ..(base + j) * w3 + v_off + dh];
                                        for dd in 0..dh {
                                            dvj[dd] = pv.mul_add(go[dd], dvj[dd]);
                                        }
                                    }
                                }
                                // softmax backward
                                let mut inner = 0.0;
                                for j in 0..=i {
                                    inner += d.probs[p_base + i * d.seq + j] * d_drop[j];
                                }
                                for j in 0..=i {
                                    let p = d.probs[p_base + i * d.seq + j];
                                    d_scores[j] = p * (d_drop[j] - inner);
                                }
                                // scores backward: dq, dk
                                let qi_base = (base + i) * w3 + q_off;
                                for j in 0..=i {
                                    let ds = d_scores[j] * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj_base = (base + j) * w3 + k_off;
                                    for dd in 0..dh {
                                        dx[qi_base + dd] =
                                            ds.mul_add(x[kj_base + dd], dx[qi_base + dd]);
                                        dx[kj_base + dd] =
                                            ds.mul_add(x[qi_base + dd], dx[kj_base + dd]);
                                    }
                                }
                            }
                        }
                    }
                    grads[d.qkv] = Some(dx);
                }
                Op::UpsampleNearest { x, c, h, w, f } => {
                    let (c, h, w, f) = (*c, *h, *w, *f);
                    let (oh, ow) = (f * h, f * w);
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let mut s = 0.0;
                                for di in 0..f {
                                    for dj in 0..f {
                                        s += gy[(ch * oh + f * i + di) * ow + f * j + dj];
                                    }
                                }
                                dx[(ch * h + i) * w + j] = s;
                            }
                        }
                    }
                    acc_slice(&mut grads, *x, &dx, &self.nodes);
                }
            }
        }

        let mut map = GradMap::new();
        for (&pid, &node_idx) in &self.param_vars {
            let g = grads[node_idx]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[node_idx].values.len()]);
            map.insert(pid, g);
        }
        Ok(map)
    }
}

fn acc_slice(grads: &mut [Option<Vec<f64>>], idx: usize, delta: &[f64], nodes: &[Node]) {
    if !nodes[idx].needs_grad {
        return;
    }
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].values.len()]);
    debug_assert_eq!(slot.len(), delta.len());
    for (a, d) in slot.iter_mut().zip(delta) {
        *a += d;
    }
}

/// Accumulate by moving the buffer when the slot is empty.
fn acc_move(grads: &mut [Option<Vec<f64>>], idx: usize, delta: Vec<f64>, nodes: &[Node]) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut grads[idx] {
        Some(slot) => {
            for (a, d) in slot.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Elementwise mish on a plain tensor (no graph).
pub fn mish_tensor(x: &Tensor) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.values().iter().map(|&v| kernels::mish(v)).collect(),
    )
}
