//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Operations are recorded onto a linear tape during the forward pass and
//! replayed in reverse to accumulate gradients. The primitive set is the
//! smallest one covering the model: matmul, batched matmul, elementwise
//! arithmetic, activations, row softmax with mask sentinel, row gather/scatter
//! for embedding lookups, and the binary cross-entropy head.

use crate::error::{DeattError, Result};
use crate::matrix::{
    matmul_abt_acc, matmul_acc, matmul_atb_acc, sigmoid, softmax_row, Activation, Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    MatMul(usize, usize),
    /// Block-diagonal matmul: `a` holds `batch` stacked (m x k) blocks.
    /// With `trans_b`, `b` holds (p x k) blocks and each block computes
    /// A_i * B_i^T; otherwise `b` holds (k x p) blocks computing A_i * B_i.
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    /// (m x n) + broadcast of a (1 x n) row vector.
    AddRowVec(usize, usize),
    Hadamard(usize, usize),
    /// Multiply every entry by a learnable 1x1 scalar.
    ScaleVar { m: usize, s: usize },
    /// (m x n) with column broadcast of a (m x 1) gate vector.
    MulColVec { m: usize, g: usize },
    Act { kind: Activation, x: usize },
    SoftmaxRows(usize),
    GatherRows { src: usize, indices: Vec<u32> },
    ConcatCols(Vec<usize>),
    /// parts are (B x d) each; output row b*k+i is row b of part i.
    InterleaveRows(Vec<usize>),
    Reshape(usize),
    AffineConst { x: usize, mul: f64 },
    /// Elementwise multiply by a constant mask (straight-through gradient).
    MaskConst { x: usize, mask: Vec<f64> },
    /// Overwrite listed flat positions with a constant; gradient is zero there.
    SetConst { x: usize, positions: Vec<u32> },
    MeanAll(usize),
    SumAll(usize),
    BceWithLogits { logits: usize, labels: Vec<f64> },
    /// Per-row normalization to zero mean and unit variance (no affine).
    LayerNormRows { x: usize, eps: f64 },
}

struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(
            Op::Leaf {
                requires_grad: false,
            },
            value,
        )
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(
            Op::Leaf {
                requires_grad: true,
            },
            value,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(DeattError::Shape(format!(
                "matmul {}x{} * {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        }
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        matmul_acc(
            va.data(),
            vb.data(),
            out.data_mut(),
            va.rows(),
            va.cols(),
            vb.cols(),
        );
        Ok(self.push(Op::MatMul(a.0, b.0), out))
    }

    pub fn bmm(&mut self, a: Var, b: Var, batch: usize, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if batch == 0 || va.rows() % batch != 0 || vb.rows() % batch != 0 {
            return Err(DeattError::Shape("bmm: rows not divisible by batch".into()));
        }
        let m = va.rows() / batch;
        let k = va.cols();
        let (p, ok) = if trans_b {
            (vb.rows() / batch, vb.cols() == k)
        } else {
            (vb.cols(), vb.rows() / batch == k)
        };
        if !ok {
            return Err(DeattError::Shape(format!(
                "bmm {}x{} with {}x{} (batch {}, trans_b {})",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols(),
                batch,
                trans_b
            )));
        }
        let mut out = Matrix::zeros(batch * m, p);
        // per-block element count of b; same either way round
        let bk = p * k;
        for i in 0..batch {
            let ab = &va.data()[i * m * k..(i + 1) * m * k];
            let bb = &vb.data()[i * bk..(i + 1) * bk];
            let cb = &mut out.data_mut()[i * m * p..(i + 1) * m * p];
            if trans_b {
                matmul_abt_acc(ab, bb, cb, m, k, p);
            } else {
                matmul_acc(ab, bb, cb, m, k, p);
            }
        }
        Ok(self.push(
            Op::Bmm {
                a: a.0,
                b: b.0,
                batch,
                trans_b,
            },
            out,
        ))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(DeattError::Shape(format!(
                "{name}: {}x{} vs {}x{}",
                self.value(a).rows(),
                self.value(a).cols(),
                self.value(b).rows(),
                self.value(b).cols()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Matrix::from_vec_unchecked(va.rows(), va.cols(), data);
        Ok(self.push(Op::Add(a.0, b.0), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Matrix::from_vec_unchecked(va.rows(), va.cols(), data);
        Ok(self.push(Op::Sub(a.0, b.0), out))
    }

    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (va, vv) = (self.value(a), self.value(v));
        if vv.rows() != 1 || vv.cols() != va.cols() {
            return Err(DeattError::Shape(format!(
                "add_row_vec: {}x{} + {}x{}",
                va.rows(),
                va.cols(),
                vv.rows(),
                vv.cols()
            )));
        }
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(idx, x)| x + vv.data()[idx % cols])
            .collect();
        let out = Matrix::from_vec_unchecked(va.rows(), cols, data);
        Ok(self.push(Op::AddRowVec(a.0, v.0), out))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "hadamard")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Matrix::from_vec_unchecked(va.rows(), va.cols(), data);
        Ok(self.push(Op::Hadamard(a.0, b.0), out))
    }

    pub fn scale_var(&mut self, m: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.rows() != 1 || vs.cols() != 1 {
            return Err(DeattError::Shape("scale_var: scalar must be 1x1".into()));
        }
        let c = vs.get(0, 0);
        let vm = self.value(m);
        let out = vm.map(|x| x * c);
        Ok(self.push(Op::ScaleVar { m: m.0, s: s.0 }, out))
    }

    pub fn mul_col_vec(&mut self, m: Var, g: Var) -> Result<Var> {
        let (vm, vg) = (self.value(m), self.value(g));
        if vg.cols() != 1 || vg.rows() != vm.rows() {
            return Err(DeattError::Shape(format!(
                "mul_col_vec: {}x{} with {}x{}",
                vm.rows(),
                vm.cols(),
                vg.rows(),
                vg.cols()
            )));
        }
        let cols = vm.cols();
        let data = vm
            .data()
            .iter()
            .enumerate()
            .map(|(idx, x)| x * vg.data()[idx / cols])
            .collect();
        let out = Matrix::from_vec_unchecked(vm.rows(), cols, data);
        Ok(self.push(Op::MulColVec { m: m.0, g: g.0 }, out))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(Op::Act { kind, x: x.0 }, out)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            softmax_row(vx.row(i), &mut out.data_mut()[i * cols..(i + 1) * cols])
                .map_err(|_| DeattError::DegenerateRow { row: i })?;
        }
        Ok(self.push(Op::SoftmaxRows(x.0), out))
    }

    pub fn gather_rows(&mut self, src: Var, indices: Vec<u32>) -> Result<Var> {
        let vs = self.value(src);
        let cols = vs.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &idx in &indices {
            let idx = idx as usize;
            if idx >= vs.rows() {
                return Err(DeattError::InvalidArgument(format!(
                    "gather index {} out of {} rows",
                    idx,
                    vs.rows()
                )));
            }
            data.extend_from_slice(vs.row(idx));
        }
        let out = Matrix::from_vec_unchecked(indices.len(), cols, data);
        Ok(self.push(Op::GatherRows { src: src.0, indices }, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DeattError::InvalidArgument("concat_cols: empty".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut total_cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(DeattError::Shape("concat_cols: row mismatch".into()));
            }
            total_cols += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Matrix::from_vec_unchecked(rows, total_cols, data);
        Ok(self.push(Op::ConcatCols(parts.iter().map(|v| v.0).collect()), out))
    }

    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DeattError::InvalidArgument("interleave_rows: empty".into()));
        }
        let (rows, cols) = {
            let v = self.value(parts[0]);
            (v.rows(), v.cols())
        };
        for &p in parts {
            if self.value(p).rows() != rows || self.value(p).cols() != cols {
                return Err(DeattError::Shape("interleave_rows: shape mismatch".into()));
            }
        }
        let k = parts.len();
        let mut data = Vec::with_capacity(rows * k * cols);
        for b in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(b));
            }
        }
        let out = Matrix::from_vec_unchecked(rows * k, cols, data);
        Ok(self.push(Op::InterleaveRows(parts.iter().map(|v| v.0).collect()), out))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let vx = self.value(x);
        if rows * cols != vx.len() {
            return Err(DeattError::Shape(format!(
                "reshape {}x{} -> {}x{}",
                vx.rows(),
                vx.cols(),
                rows,
                cols
            )));
        }
        let out = Matrix::from_vec_unchecked(rows, cols, vx.data().to_vec());
        Ok(self.push(Op::Reshape(x.0), out))
    }

    pub fn affine_const(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out = self.value(x).map(|v| v * mul + add);
        self.push(Op::AffineConst { x: x.0, mul }, out)
    }

    pub fn mask_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(DeattError::Shape("mask_const: length mismatch".into()));
        }
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Matrix::from_vec_unchecked(vx.rows(), vx.cols(), data);
        Ok(self.push(Op::MaskConst { x: x.0, mask }, out))
    }

    pub fn set_const(&mut self, x: Var, positions: Vec<u32>, value: f64) -> Result<Var> {
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for &p in &positions {
            let p = p as usize;
            if p >= data.len() {
                return Err(DeattError::InvalidArgument(format!(
                    "set_const position {} out of {}",
                    p,
                    data.len()
                )));
            }
            data[p] = value;
        }
        let out = Matrix::from_vec_unchecked(vx.rows(), vx.cols(), data);
        Ok(self.push(
            Op::SetConst {
                x: x.0,
                positions,
            },
            out,
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mean = vx.data().iter().sum::<f64>() / vx.len() as f64;
        self.push(Op::MeanAll(x.0), Matrix::scalar(mean))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let sum = self.value(x).data().iter().sum::<f64>();
        self.push(Op::SumAll(x.0), Matrix::scalar(sum))
    }

    /// Mean binary cross-entropy of a (N x 1) logit column against 0/1 labels,
    /// computed in the numerically stable log-sum-exp form.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<f64>) -> Result<Var> {
        let vl = self.value(logits);
        if vl.cols() != 1 || vl.rows() != labels.len() {
            return Err(DeattError::Shape(format!(
                "bce_with_logits: {}x{} logits vs {} labels",
                vl.rows(),
                vl.cols(),
                labels.len()
            )));
        }
        let mut total = 0.0;
        for (&z, &y) in vl.data().iter().zip(&labels) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Op::BceWithLogits {
                logits: logits.0,
                labels,
            },
            Matrix::scalar(loss),
        ))
    }

    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.data_mut()[i * cols + j] = (v - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows { x: x.0, eps }, out)
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let vl = self.value(loss);
        if vl.rows() != 1 || vl.cols() != 1 {
            return Err(DeattError::Shape("backward: loss must be scalar".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g_out) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[idx] = Some(g_out);
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    let ga = ensure(&mut grads[*a], m, k);
                    matmul_abt_acc(g_out.data(), vb.data(), ga.data_mut(), m, n, k);
                    let gb = ensure(&mut grads[*b], k, n);
                    matmul_atb_acc(va.data(), g_out.data(), gb.data_mut(), m, k, n);
                }
                Op::Bmm {
                    a,
                    b,
                    batch,
                    trans_b,
                } => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let m = va.rows() / batch;
                    let k = va.cols();
                    let p = g_out.cols();
                    let bk = p * k;
                    {
                        let ga = ensure(&mut grads[*a], va.rows(), k);
                        for i in 0..*batch {
                            let gc = &g_out.data()[i * m * p..(i + 1) * m * p];
                            let bb = &vb.data()[i * bk..(i + 1) * bk];
                            let gab = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                            if *trans_b {
                                // dA_i += dC_i * B_i
                                matmul_acc(gc, bb, gab, m, p, k);
                            } else {
                                // dA_i += dC_i * B_i^T
                                matmul_abt_acc(gc, bb, gab, m, p, k);
                            }
                        }
                    }
                    let gb = ensure(&mut grads[*b], vb.rows(), vb.cols());
                    for i in 0..*batch {
                        let gc = &g_out.data()[i * m * p..(i + 1) * m * p];
                        let ab = &va.data()[i * m * k..(i + 1) * m * k];
                        let gbb = &mut gb.data_mut()[i * bk..(i + 1) * bk];
                        if *trans_b {
                            // dB_i += dC_i^T * A_i
                            matmul_atb_acc(gc, ab, gbb, m, p, k);
                        } else {
                            // dB_i += A_i^T * dC_i
                            matmul_atb_acc(ab, gc, gbb, m, k, p);
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], &g_out, &self.nodes[*a].value, 1.0);
                    accumulate(&mut grads[*b], &g_out, &self.nodes[*b].value, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], &g_out, &self.nodes[*a].value, 1.0);
                    accumulate(&mut grads[*b], &g_out, &self.nodes[*b].value, -1.0);
                }
                Op::AddRowVec(a, v) => {
                    accumulate(&mut grads[*a], &g_out, &self.nodes[*a].value, 1.0);
                    let cols = g_out.cols();
                    let gv = ensure(&mut grads[*v], 1, cols);
                    for (idx2, val) in g_out.data().iter().enumerate() {
                        gv.data_mut()[idx2 % cols] += val;
                    }
                }
                Op::Hadamard(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = ensure(&mut grads[*a], va.rows(), va.cols());
                    for ((g, x), o) in ga.data_mut().iter_mut().zip(vb.data()).zip(g_out.data()) {
                        *g += x * o;
                    }
                    let gb = ensure(&mut grads[*b], vb.rows(), vb.cols());
                    for ((g, x), o) in gb.data_mut().iter_mut().zip(va.data()).zip(g_out.data()) {
                        *g += x * o;
                    }
                }
                Op::ScaleVar { m, s } => {
                    let c = self.nodes[*s].value.get(0, 0);
                    accumulate(&mut grads[*m], &g_out, &self.nodes[*m].value, c);
                    let dot: f64 = self.nodes[*m]
                        .value
                        .data()
                        .iter()
                        .zip(g_out.data())
                        .map(|(x, o)| x * o)
                        .sum();
                    let gs = ensure(&mut grads[*s], 1, 1);
                    gs.data_mut()[0] += dot;
                }
                Op::MulColVec { m, g } => {
                    let (vm, vg) = (&self.nodes[*m].value, &self.nodes[*g].value);
                    let cols = vm.cols();
                    let gm = ensure(&mut grads[*m], vm.rows(), cols);
                    for (idx2, o) in g_out.data().iter().enumerate() {
                        gm.data_mut()[idx2] += o * vg.data()[idx2 / cols];
                    }
                    let gg = ensure(&mut grads[*g], vg.rows(), 1);
                    for (idx2, o) in g_out.data().iter().enumerate() {
                        gg.data_mut()[idx2 / cols] += o * vm.data()[idx2];
                    }
                }
                Op::Act { kind, x } => {
                    let vy = &node.value;
                    let vx = &self.nodes[*x].value;
                    let gx = ensure(&mut grads[*x], vx.rows(), vx.cols());
                    for ((g, y), o) in gx.data_mut().iter_mut().zip(vy.data()).zip(g_out.data()) {
                        *g += kind.derivative_from_output(*y) * o;
                    }
                }
                Op::SoftmaxRows(x) => {
                    let vy = &node.value;
                    let vx = &self.nodes[*x].value;
                    let cols = vy.cols();
                    let gx = ensure(&mut grads[*x], vx.rows(), cols);
                    for i in 0..vy.rows() {
                        let y = vy.row(i);
                        let go = &g_out.data()[i * cols..(i + 1) * cols];
                        let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                        let gr = &mut gx.data_mut()[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            gr[j] += y[j] * (go[j] - dot);
                        }
                    }
                }
                Op::GatherRows { src, indices } => {
                    let vs = &self.nodes[*src].value;
                    let cols = vs.cols();
                    let gs = ensure(&mut grads[*src], vs.rows(), cols);
                    for (r, &idx2) in indices.iter().enumerate() {
                        let dst = &mut gs.data_mut()[idx2 as usize * cols..(idx2 as usize + 1) * cols];
                        let srcrow = &g_out.data()[r * cols..(r + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(srcrow) {
                            *d += s;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let mut col_off = 0;
                    for &p in parts {
                        let vp = &self.nodes[p].value;
                        let pc = vp.cols();
                        let gp = ensure(&mut grads[p], rows, pc);
                        for i in 0..rows {
                            let src =
                                &g_out.row(i)[col_off..col_off + pc];
                            let dst = &mut gp.data_mut()[i * pc..(i + 1) * pc];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        col_off += pc;
                    }
                }
                Op::InterleaveRows(parts) => {
                    let k = parts.len();
                    let cols = node.value.cols();
                    let b_rows = node.value.rows() / k;
                    for (i, &p) in parts.iter().enumerate() {
                        let gp = ensure(&mut grads[p], b_rows, cols);
                        for b in 0..b_rows {
                            let src = &g_out.data()[(b * k + i) * cols..(b * k + i + 1) * cols];
                            let dst = &mut gp.data_mut()[b * cols..(b + 1) * cols];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    let vx = &self.nodes[*x].value;
                    let gx = ensure(&mut grads[*x], vx.rows(), vx.cols());
                    for (g, o) in gx.data_mut().iter_mut().zip(g_out.data()) {
                        *g += o;
                    }
                }
                Op::AffineConst { x, mul } => {
                    accumulate(&mut grads[*x], &g_out, &self.nodes[*x].value, *mul);
                }
                Op::MaskConst { x, mask } => {
                    let vx = &self.nodes[*x].value;
                    let gx = ensure(&mut grads[*x], vx.rows(), vx.cols());
                    for ((g, m), o) in gx.data_mut().iter_mut().zip(mask).zip(g_out.data()) {
                        *g += m * o;
                    }
                }
                Op::SetConst { x, positions } => {
                    let vx = &self.nodes[*x].value;
                    let gx = ensure(&mut grads[*x], vx.rows(), vx.cols());
                    for (g, o) in gx.data_mut().iter_mut().zip(g_out.data()) {
                        *g += o;
                    }
                    for &p in positions {
                        // the overwritten cells contribute nothing upstream;
                        // subtract what the blanket pass just added
                        gx.data_mut()[p as usize] -= g_out.data()[p as usize];
                    }
                }
                Op::MeanAll(x) => {
                    let vx = &self.nodes[*x].value;
                    let scale = g_out.get(0, 0) / vx.len() as f64;
                    let gx = ensure(&mut grads[*x], vx.rows(), vx.cols());
                    for g in gx.data_mut() {
                        *g += scale;
                    }
                }
                Op::SumAll(x) => {
                    let vx = &self.nodes[*x].value;
                    let scale = g_out.get(0, 0);
                    let gx = ensure(&mut grads[*x], vx.rows(), vx.cols());
                    for g in gx.data_mut() {
                        *g += scale;
                    }
                }
                Op::LayerNormRows { x, eps } => {
                    let vx = &self.nodes[*x].value;
                    let vy = &node.value;
                    let cols = vx.cols();
                    let gx = ensure(&mut grads[*x], vx.rows(), cols);
                    for i in 0..vx.rows() {
                        let xr = vx.row(i);
                        let yr = vy.row(i);
                        let go = &g_out.data()[i * cols..(i + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / cols as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mean_g = go.iter().sum::<f64>() / cols as f64;
                        let mean_gy =
                            go.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / cols as f64;
                        let gr = &mut gx.data_mut()[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            gr[j] += inv * (go[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
                Op::BceWithLogits { logits, labels } => {
                    let vl = &self.nodes[*logits].value;
                    let scale = g_out.get(0, 0) / labels.len() as f64;
                    let gl = ensure(&mut grads[*logits], vl.rows(), 1);
                    for ((g, &z), &y) in gl.data_mut().iter_mut().zip(vl.data()).zip(labels) {
                        *g += scale * (sigmoid(z) - y);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn ensure(slot: &mut Option<Matrix>, rows: usize, cols: usize) -> &mut Matrix {
    if slot.is_none() {
        *slot = Some(Matrix::zeros(rows, cols));
    }
    slot.as_mut().unwrap()
}

fn accumulate(slot: &mut Option<Matrix>, g_out: &Matrix, like: &Matrix, scale: f64) {
    let g = ensure(slot, like.rows(), like.cols());
    for (d, s) in g.data_mut().iter_mut().zip(g_out.data()) {
        *d += scale * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::SENTINEL;

    /// Central-difference oracle for a scalar function of one matrix entry set.
    fn fd_grad(
        base: &Matrix,
        h: f64,
        f: impl Fn(&Matrix) -> f64,
    ) -> Matrix {
        let mut g = Matrix::zeros(base.rows(), base.cols());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert!(a.same_shape(b));
        for (x, y) in a.data().iter().zip(b.data()) {
            let err = (x - y).abs() / f64::max(1.0, y.abs());
            assert!(err <= tol, "analytic {x} vs fd {y}");
        }
    }

    #[test]
    fn quadratic_gradient_exact() {
        // loss = mean of p^2 has exact gradient 2p/len under central differences
        let p0 = Matrix::from_vec(2, 2, vec![0.3, -1.1, 2.0, 0.7]).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(p0.clone());
        let sq = tape.hadamard(p, p).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(p).unwrap();
        for (gv, pv) in g.data().iter().zip(p0.data()) {
            assert!((gv - 2.0 * pv).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_loss_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let zeroed = tape.affine_const(p, 0.0, 5.0);
        let loss = tape.mean_all(zeroed);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(p).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matmul_softmax_composite_matches_central_difference() {
        let a0 = Matrix::from_vec(2, 3, vec![0.2, -0.4, 0.9, 1.3, 0.1, -0.7]).unwrap();
        let b0 = Matrix::from_vec(3, 2, vec![0.5, 0.3, -0.2, 0.8, 0.4, -0.6]).unwrap();
        let eval = |a: &Matrix, b: &Matrix| -> (f64, Option<(Matrix, Matrix)>) {
            let mut tape = Tape::new();
            let va = tape.param(a.clone());
            let vb = tape.param(b.clone());
            let c = tape.matmul(va, vb).unwrap();
            let s = tape.softmax_rows(c).unwrap();
            let t = tape.activation(Activation::Tanh, s);
            let loss = tape.mean_all(t);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).get(0, 0),
                Some((
                    grads.wrt(va).unwrap().clone(),
                    grads.wrt(vb).unwrap().clone(),
                )),
            )
        };
        let (_, g) = eval(&a0, &b0);
        let (ga, gb) = g.unwrap();
        let fa = fd_grad(&a0, 1e-5, |a| eval(a, &b0).0);
        let fb = fd_grad(&b0, 1e-5, |b| eval(&a0, b).0);
        assert_close(&ga, &fa, 1e-6);
        assert_close(&gb, &fb, 1e-6);
    }

    #[test]
    fn bmm_matches_central_difference() {
        let a0 = Matrix::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let eval = |a: &Matrix| -> (f64, Matrix) {
            let mut tape = Tape::new();
            let va = tape.param(a.clone());
            // scores = A_i A_i^T per 2-row block, then attend back over A_i
            let s = tape.bmm(va, va, 2, true).unwrap();
            let p = tape.softmax_rows(s).unwrap();
            let out = tape.bmm(p, va, 2, false).unwrap();
            let t = tape.activation(Activation::Sigmoid, out);
            let loss = tape.mean_all(t);
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).get(0, 0), grads.wrt(va).unwrap().clone())
        };
        let (_, ga) = eval(&a0);
        let fa = fd_grad(&a0, 1e-5, |a| eval(a).0);
        assert_close(&ga, &fa, 1e-6);
    }

    #[test]
    fn gather_scatter_and_interleave_match_central_difference() {
        let table = Matrix::from_vec(5, 2, (0..10).map(|i| (i as f64 * 0.21).cos()).collect())
            .unwrap();
        let eval = |t: &Matrix| -> (f64, Matrix) {
            let mut tape = Tape::new();
            let vt = tape.param(t.clone());
            let g1 = tape.gather_rows(vt, vec![0, 3, 3]).unwrap();
            let g2 = tape.gather_rows(vt, vec![1, 4, 0]).unwrap();
            let stacked = tape.interleave_rows(&[g1, g2]).unwrap();
            let sq = tape.hadamard(stacked, stacked).unwrap();
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).get(0, 0), grads.wrt(vt).unwrap().clone())
        };
        let (_, g) = eval(&table);
        let f = fd_grad(&table, 1e-5, |t| eval(t).0);
        assert_close(&g, &f, 1e-6);
        // row 2 is never gathered
        assert_eq!(g.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn bce_with_logits_matches_central_difference() {
        let z0 = Matrix::from_vec(4, 1, vec![0.3, -2.0, 5.0, -0.1]).unwrap();
        let labels = vec![1.0, 0.0, 1.0, 0.0];
        let eval = |z: &Matrix| -> (f64, Matrix) {
            let mut tape = Tape::new();
            let vz = tape.param(z.clone());
            let loss = tape.bce_with_logits(vz, labels.clone()).unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).get(0, 0), grads.wrt(vz).unwrap().clone())
        };
        let (loss, g) = eval(&z0);
        assert!(loss.is_finite());
        let f = fd_grad(&z0, 1e-6, |z| eval(z).0);
        assert_close(&g, &f, 1e-6);
    }

    #[test]
    fn set_const_blocks_gradient_at_positions() {
        let x0 = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(x0);
        let masked = tape.set_const(x, vec![0, 3], SENTINEL).unwrap();
        let sq = tape.hadamard(masked, masked).unwrap();
        let capped = tape.mask_const(sq, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let loss = tape.sum_all(capped);
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(x).unwrap();
        assert_eq!(g.data()[0], 0.0);
        assert_eq!(g.data()[3], 0.0);
        assert!((g.data()[1] - 4.0).abs() < 1e-12);
        assert!((g.data()[2] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_matches_central_difference() {
        let x0 = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.83).sin() * 2.0).collect())
            .unwrap();
        let eval = |x: &Matrix| -> (f64, Matrix) {
            let mut tape = Tape::new();
            let vx = tape.param(x.clone());
            let y = tape.layer_norm_rows(vx, 1e-6);
            let t = tape.activation(Activation::Sigmoid, y);
            let loss = tape.mean_all(t);
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).get(0, 0), grads.wrt(vx).unwrap().clone())
        };
        let (_, g) = eval(&x0);
        let f = fd_grad(&x0, 1e-5, |x| eval(x).0);
        assert_close(&g, &f, 1e-5);
    }

    #[test]
    fn scale_and_colvec_broadcast_match_central_difference() {
        let m0 = Matrix::from_vec(3, 2, vec![0.5, -0.3, 1.2, 0.9, -1.1, 0.4]).unwrap();
        let g0 = Matrix::from_vec(3, 1, vec![0.7, -0.2, 1.5]).unwrap();
        let s0 = Matrix::scalar(1.3);
        let eval = |m: &Matrix, g: &Matrix, s: &Matrix| -> (f64, Matrix, Matrix, Matrix) {
            let mut tape = Tape::new();
            let vm = tape.param(m.clone());
            let vg = tape.param(g.clone());
            let vs = tape.param(s.clone());
            let gated = tape.mul_col_vec(vm, vg).unwrap();
            let scaled = tape.scale_var(gated, vs).unwrap();
            let t = tape.activation(Activation::Tanh, scaled);
            let loss = tape.mean_all(t);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).get(0, 0),
                grads.wrt(vm).unwrap().clone(),
                grads.wrt(vg).unwrap().clone(),
                grads.wrt(vs).unwrap().clone(),
            )
        };
        let (_, gm, gg, gs) = eval(&m0, &g0, &s0);
        assert_close(&gm, &fd_grad(&m0, 1e-5, |m| eval(m, &g0, &s0).0), 1e-6);
        assert_close(&gg, &fd_grad(&g0, 1e-5, |g| eval(&m0, g, &s0).0), 1e-6);
        assert_close(&gs, &fd_grad(&s0, 1e-5, |s| eval(&m0, &g0, s).0), 1e-6);
    }
}
