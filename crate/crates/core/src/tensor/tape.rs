//! Reverse-mode autodiff over a recorded operation tape.
//!
//! Forward builders append nodes in topological order; `backward` walks the
//! tape once in reverse, accumulating gradients by summation so a tensor
//! consumed twice receives both contributions. Single-threaded per tape;
//! independent tapes may live on independent threads.

use super::{
    gelu_grad_scalar, gelu_scalar, gemm_nn, gemm_nt, gemm_tn, rope_rotate, sigmoid_scalar,
    Tensor, MASK_NEG,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    /// a[m×k] · b[n×k]ᵀ — keys stay row-major in attention logits.
    MatMulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: f64 },
    Transpose { a: Var },
    Reshape { a: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Gather { table: Var, indices: Vec<usize> },
    Gelu { a: Var },
    Sigmoid { a: Var },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<usize>, active: Vec<bool>, count: usize },
    /// x[n×m] scaled per row by col[n×1], broadcast over features.
    MulColBroadcast { x: Var, col: Var },
    Rope { a: Var, pos_offset: usize, theta: f64 },
    /// Quantize-dequantize with straight-through backward; evaluation only.
    FakeQuant { a: Var },
    SumAll { a: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the node's value (zeros if the node
    /// never received a contribution).
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape.clone(), g.clone()),
            None => Tensor::zeros(node.value.shape.clone()),
        }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── forward builders ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.rows(), "matmul: {:?} x {:?}", ta.shape, tb.shape);
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        gemm_nn(m, k, n, &ta.data, &tb.data, &mut out.data, 0.0);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::MatMul { a, b })
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "matmul_nt: {:?} x {:?}ᵀ", ta.shape, tb.shape);
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(vec![m, n]);
        gemm_nt(m, k, n, &ta.data, &tb.data, &mut out.data, 0.0);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::MatMulNT { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).hadamard(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::Mul { a, b })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(out, ng, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(out, ng, Op::MulScalar { a, c })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(out, ng, Op::Transpose { a })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a);
        assert_eq!(t.numel(), shape.iter().product::<usize>(), "reshape: numel mismatch");
        let out = Tensor::new(shape, t.data.clone());
        let ng = self.needs(a);
        self.push(out, ng, Op::Reshape { a })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        let c = t.cols();
        assert!(start < end && end <= t.rows(), "slice_rows: {start}..{end} of {}", t.rows());
        let out = Tensor::new(vec![end - start, c], t.data[start * c..end * c].to_vec());
        let ng = self.needs(a);
        self.push(out, ng, Op::SliceRows { a, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        assert!(start < end && end <= c, "slice_cols: {start}..{end} of {c}");
        let w = end - start;
        let mut out = Tensor::zeros(vec![r, w]);
        for i in 0..r {
            out.data[i * w..(i + 1) * w].copy_from_slice(&t.data[i * c + start..i * c + end]);
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::SliceCols { a, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows: column mismatch");
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(vec![rows, c], data), ng, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(vec![r, total]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), r, "concat_cols: row mismatch");
            for i in 0..r {
                out.data[i * total + off..i * total + off + w]
                    .copy_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, ng, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Row lookup: out[i] = table[indices[i]]. Backward scatter-adds.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            assert!(idx < rows, "gather: index {idx} out of range {rows}");
            data.extend_from_slice(&t.data[idx * d..(idx + 1) * d]);
        }
        let ng = self.needs(table);
        self.push(
            Tensor::new(vec![indices.len(), d], data),
            ng,
            Op::Gather { table, indices: indices.to_vec() },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        let ng = self.needs(a);
        self.push(out, ng, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        let ng = self.needs(a);
        self.push(out, ng, Op::Sigmoid { a })
    }

    /// Row softmax; masked entries (mask true) are pushed to [`MASK_NEG`]
    /// before normalizing. Panics on a fully masked row — callers guard.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let t = self.value(a);
        let masked = match mask {
            Some(m) => {
                assert_eq!(m.len(), t.numel(), "softmax_rows: mask length");
                let mut shifted = t.clone();
                for (x, &dead) in shifted.data.iter_mut().zip(m) {
                    if dead {
                        *x += MASK_NEG;
                    }
                }
                shifted
            }
            None => t.clone(),
        };
        let out = super::softmax_rows(&masked, None).expect("softmax_rows on tape: degenerate row");
        let ng = self.needs(a);
        self.push(out, ng, Op::SoftmaxRows { a })
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let out = super::layernorm(self.value(x), self.value(gamma), self.value(beta), eps);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, ng, Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Mean negative log-softmax probability over rows not excluded by
    /// `ignore`. Output is a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<&[bool]>) -> Var {
        let t = self.value(logits);
        let (n, v) = (t.rows(), t.cols());
        assert_eq!(targets.len(), n, "cross_entropy: target count");
        let active: Vec<bool> = (0..n).map(|i| !ignore.map(|m| m[i]).unwrap_or(false)).collect();
        let count = active.iter().filter(|&&x| x).count();
        assert!(count > 0, "cross_entropy: all positions masked");
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for i in 0..n {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[i * v + j] /= sum;
            }
            if active[i] {
                assert!(targets[i] < v, "cross_entropy: target {} out of range {v}", targets[i]);
                total -= probs[i * v + targets[i]].max(f64::MIN_POSITIVE).ln();
            }
        }
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(total / count as f64),
            ng,
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), active, count },
        )
    }

    pub fn mul_col_broadcast(&mut self, x: Var, col: Var) -> Var {
        let (tx, tc) = (self.value(x), self.value(col));
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(tc.rows(), r, "mul_col_broadcast: row mismatch");
        assert_eq!(tc.cols(), 1, "mul_col_broadcast: gate must be a column");
        let mut out = Tensor::zeros(tx.shape.clone());
        for i in 0..r {
            let g = tc.data[i];
            for j in 0..c {
                out.data[i * c + j] = tx.data[i * c + j] * g;
            }
        }
        let ng = self.needs(x) || self.needs(col);
        self.push(out, ng, Op::MulColBroadcast { x, col })
    }

    pub fn rope(&mut self, a: Var, pos_offset: usize, theta: f64) -> Var {
        let out = rope_rotate(self.value(a), pos_offset, theta, false);
        let ng = self.needs(a);
        self.push(out, ng, Op::Rope { a, pos_offset, theta })
    }

    /// Quantize-dequantize for simulated-integer evaluation. Backward is
    /// straight-through; do not train through this node.
    pub fn fake_quant(&mut self, a: Var, params: &crate::quant::QuantParams) -> Var {
        let out = crate::quant::fake_quant(self.value(a), params);
        let ng = self.needs(a);
        self.push(out, ng, Op::FakeQuant { a })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), ng, Op::SumAll { a })
    }

    // ── backward ─────────────────────────────────────────────────────

    fn add_to_grad(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let buf = node.grad.get_or_insert_with(|| vec![0.0; node.value.numel()]);
        debug_assert_eq!(buf.len(), delta.len());
        for (g, d) in buf.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reverse pass from a scalar node. Visits every tape entry exactly once.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward: loss must be scalar");
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            let out_shape = self.nodes[i].value.shape.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.value(a).rows(), self.value(a).cols());
                    let n = self.value(b).cols();
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        gemm_nt(m, n, k, &g, &self.value(b).data, &mut da, 0.0);
                        self.add_to_grad(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; k * n];
                        gemm_tn(k, m, n, &self.value(a).data, &g, &mut db, 0.0);
                        self.add_to_grad(b, &db);
                    }
                }
                Op::MatMulNT { a, b } => {
                    let (m, k) = (self.value(a).rows(), self.value(a).cols());
                    let n = self.value(b).rows();
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        gemm_nn(m, n, k, &g, &self.value(b).data, &mut da, 0.0);
                        self.add_to_grad(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; n * k];
                        gemm_tn(n, m, k, &g, &self.value(a).data, &mut db, 0.0);
                        self.add_to_grad(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    self.add_to_grad(a, &g);
                    self.add_to_grad(b, &g);
                }
                Op::Sub { a, b } => {
                    self.add_to_grad(a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.add_to_grad(b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da: Vec<f64> =
                            g.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
                        self.add_to_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> =
                            g.iter().zip(&self.value(a).data).map(|(x, y)| x * y).collect();
                        self.add_to_grad(b, &db);
                    }
                }
                Op::AddScalar { a } => self.add_to_grad(a, &g),
                Op::MulScalar { a, c } => {
                    let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                    self.add_to_grad(a, &da);
                }
                Op::Transpose { a } => {
                    let (r, c) = (out_shape[0], out_shape[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] = g[i * c + j];
                        }
                    }
                    self.add_to_grad(a, &da);
                }
                Op::Reshape { a } => self.add_to_grad(a, &g),
                Op::SliceRows { a, start } => {
                    let t = self.value(a);
                    let (r, c) = (t.rows(), t.cols());
                    let mut da = vec![0.0; r * c];
                    da[start * c..start * c + g.len()].copy_from_slice(&g);
                    self.add_to_grad(a, &da);
                }
                Op::SliceCols { a, start } => {
                    let t = self.value(a);
                    let (r, c) = (t.rows(), t.cols());
                    let w = out_shape[1];
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + start + w]
                            .copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    self.add_to_grad(a, &da);
                }
                Op::ConcatRows { parts } => {
                    let c = out_shape[1];
                    let mut off = 0;
                    for p in parts {
                        let rows = self.value(p).rows();
                        let slice = g[off * c..(off + rows) * c].to_vec();
                        self.add_to_grad(p, &slice);
                        off += rows;
                    }
                }
                Op::ConcatCols { parts } => {
                    let (r, total) = (out_shape[0], out_shape[1]);
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(p).cols();
                        let mut dp = vec![0.0; r * w];
                        for i in 0..r {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        self.add_to_grad(p, &dp);
                        off += w;
                    }
                }
                Op::Gather { table, indices } => {
                    let t = self.value(table);
                    let (rows, d) = (t.rows(), t.cols());
                    let mut dt = vec![0.0; rows * d];
                    for (i, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[idx * d + j] += g[i * d + j];
                        }
                    }
                    self.add_to_grad(table, &dt);
                }
                Op::Gelu { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.value(a).data)
                        .map(|(gv, &x)| gv * gelu_grad_scalar(x))
                        .collect();
                    self.add_to_grad(a, &da);
                }
                Op::Sigmoid { a } => {
                    let out = &self.nodes[i].value.data;
                    let da: Vec<f64> = g.iter().zip(out).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
                    self.add_to_grad(a, &da);
                }
                Op::SoftmaxRows { a } => {
                    // dL/dlogit = α ⊙ (dL/dα − Σ_row α ⊙ dL/dα)
                    let alpha = &self.nodes[i].value;
                    let (r, c) = (alpha.rows(), alpha.cols());
                    let mut da = vec![0.0; r * c];
                    for row in 0..r {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g[row * c + j] * alpha.data[row * c + j];
                        }
                        for j in 0..c {
                            da[row * c + j] = alpha.data[row * c + j] * (g[row * c + j] - dot);
                        }
                    }
                    self.add_to_grad(a, &da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xt = self.value(x);
                    let (r, d) = (xt.rows(), xt.cols());
                    let gamma_data = self.value(gamma).data.clone();
                    let mut dx = vec![0.0; r * d];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for row in 0..r {
                        let xs = xt.row(row);
                        let gs = &g[row * d..(row + 1) * d];
                        let mean = xs.iter().sum::<f64>() / d as f64;
                        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgamma[j] += gs[j] * xhat[j];
                            dbeta[j] += gs[j];
                            dxhat[j] = gs[j] * gamma_data[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[row * d + j] =
                                inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.add_to_grad(x, &dx);
                    self.add_to_grad(gamma, &dgamma);
                    self.add_to_grad(beta, &dbeta);
                }
                Op::CrossEntropy { logits, probs, targets, active, count } => {
                    let v = self.value(logits).cols();
                    let n = targets.len();
                    let gscale = g[0] / count as f64;
                    let mut dl = vec![0.0; n * v];
                    for i in 0..n {
                        if !active[i] {
                            continue;
                        }
                        for j in 0..v {
                            dl[i * v + j] = gscale * probs[i * v + j];
                        }
                        dl[i * v + targets[i]] -= gscale;
                    }
                    self.add_to_grad(logits, &dl);
                }
                Op::MulColBroadcast { x, col } => {
                    let (r, c) = (out_shape[0], out_shape[1]);
                    if self.needs(x) {
                        let cv = &self.value(col).data;
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = g[i * c + j] * cv[i];
                            }
                        }
                        self.add_to_grad(x, &dx);
                    }
                    if self.needs(col) {
                        let xv = &self.value(x).data;
                        let mut dc = vec![0.0; r];
                        for i in 0..r {
                            let mut s = 0.0;
                            for j in 0..c {
                                s += g[i * c + j] * xv[i * c + j];
                            }
                            dc[i] = s;
                        }
                        self.add_to_grad(col, &dc);
                    }
                }
                Op::Rope { a, pos_offset, theta } => {
                    let gt = Tensor::new(out_shape, g.clone());
                    let da = rope_rotate(&gt, pos_offset, theta, true);
                    self.add_to_grad(a, &da.data);
                }
                Op::FakeQuant { a } => self.add_to_grad(a, &g),
                Op::SumAll { a } => {
                    let da = vec![g[0]; self.value(a).numel()];
                    self.add_to_grad(a, &da);
                }
            }
        }
    }
}
