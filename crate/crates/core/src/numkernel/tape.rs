use super::kernels::{self, LinearTaps};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    AvgPool2 {
        x: Var,
        h: usize,
        w: usize,
    },
    UpsampleNearest2 {
        x: Var,
        w: usize,
    },
    UpsampleBilinear {
        x: Var,
        w: usize,
        rows: LinearTaps,
        cols: LinearTaps,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations during a forward pass and replays them in reverse to
/// produce gradients.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the graph. A node requires a gradient iff at least one
/// of its inputs does; backward only visits those nodes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Total derivatives of a scalar root with respect to every leaf that was
/// recorded with `requires_grad`.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Contract(format!("{op}: expected a matrix, got shape {s:?}"))),
    }
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
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul_nt", self.value(a))?;
        let (n, k2) = matrix_dims("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Op::MatMulNt(a, b),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.value(a))?;
        let out = kernels::transpose(self.value(a).data(), m, n);
        self.push("transpose", Tensor::from_parts(vec![n, m], out), &[a], Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push("reshape", value, &[a], Op::Reshape(a))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor::from_parts(shape, out), &[a, b], op)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor::from_parts(shape, out), &[a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = matrix_dims("add_row", self.value(x))?;
        if self.value(bias).numel() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push("add_row", Tensor::from_parts(vec![m, n], out), &[x, bias], Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, kernels::sigmoid, Op::Sigmoid(a))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, |x| x * kernels::normal_cdf(x), Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), &[a], Op::Mean(a))
    }

    /// Column means of an `[m×n]` matrix, as `[1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("mean_rows", self.value(a))?;
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push("mean_rows", Tensor::from_parts(vec![1, n], out), &[a], Op::MeanRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("softmax_rows", self.value(a))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let inv = 1.0 / total;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        self.push("softmax_rows", Tensor::from_parts(vec![m, n], out), &[a], Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("log_softmax_rows", self.value(a))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(
            "log_softmax_rows",
            Tensor::from_parts(vec![m, n], out),
            &[a],
            Op::LogSoftmaxRows(a),
        )
    }

    /// Row-wise layer normalization with population variance and ε = 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (m, n) = matrix_dims("layer_norm", self.value(x))?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for (row, out_row) in xhat.chunks_exact_mut(n).zip(out.chunks_exact_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std.push(inv);
            for ((v, o), (&gv, &bv)) in row.iter_mut().zip(out_row.iter_mut()).zip(g.iter().zip(b)) {
                *v = (*v - mean) * inv;
                *o = gv * *v + bv;
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(vec![m, n], out),
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows: no inputs".into()))?;
        let (_, n) = matrix_dims("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.value(p))?;
            if c != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![rows, n], out),
            parts,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols: no inputs".into()))?;
        let (m, _) = matrix_dims("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![m, n], out),
            parts,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = matrix_dims("slice_rows", self.value(a))?;
        if start >= end || end > m {
            return Err(Error::Contract(format!(
                "slice_rows: range {start}..{end} invalid for {m} rows"
            )));
        }
        let out = self.value(a).data()[start * n..end * n].to_vec();
        self.push(
            "slice_rows",
            Tensor::from_parts(vec![end - start, n], out),
            &[a],
            Op::SliceRows(a, start),
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = matrix_dims("slice_cols", self.value(a))?;
        if start >= end || end > n {
            return Err(Error::Contract(format!(
                "slice_cols: range {start}..{end} invalid for {n} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in self.value(a).data().chunks_exact(n) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![m, w], out),
            &[a],
            Op::SliceCols(a, start),
        )
    }

    fn grid_dims(&self, op: &'static str, a: Var, h: usize, w: usize) -> Result<usize> {
        let (m, c) = matrix_dims(op, self.value(a))?;
        if m != h * w {
            return Err(Error::dim(op, self.shape(a), &[h, w]));
        }
        Ok(c)
    }

    /// 2×2 average pooling of an `h×w` grid stored as `[(h·w)×c]`.
    pub fn avg_pool2(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.grid_dims("avg_pool2", a, h, w)?;
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(Error::dim("avg_pool2", &[h, w], &[2, 2]));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(a).data();
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..h {
            for xx in 0..w {
                let src = &x[(y * w + xx) * c..(y * w + xx + 1) * c];
                let dst = &mut out[((y / 2) * ow + xx / 2) * c..((y / 2) * ow + xx / 2 + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += 0.25 * s;
                }
            }
        }
        self.push(
            "avg_pool2",
            Tensor::from_parts(vec![oh * ow, c], out),
            &[a],
            Op::AvgPool2 { x: a, h, w },
        )
    }

    /// Nearest-neighbour ×2 upsampling of an `h×w` grid stored as `[(h·w)×c]`.
    pub fn upsample_nearest2(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.grid_dims("upsample_nearest2", a, h, w)?;
        let (oh, ow) = (h * 2, w * 2);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((y / 2) * w + xx / 2) * c;
                out.extend_from_slice(&x[s..s + c]);
            }
        }
        self.push(
            "upsample_nearest2",
            Tensor::from_parts(vec![oh * ow, c], out),
            &[a],
            Op::UpsampleNearest2 { x: a, w },
        )
    }

    /// Bilinear resampling (half-pixel centres) of an `h×w` grid to `out_h×out_w`.
    pub fn upsample_bilinear(
        &mut self,
        a: Var,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let c = self.grid_dims("upsample_bilinear", a, h, w)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("upsample_bilinear", &[h, w], &[out_h, out_w]));
        }
        let rows = LinearTaps::new(h, out_h);
        let cols = LinearTaps::new(w, out_w);
        let x = self.value(a).data();
        let mut out = vec![0.0; out_h * out_w * c];
        for oy in 0..out_h {
            let (y0, y1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let weights = [
                    ((y0 * w + x0), (1.0 - fy) * (1.0 - fx)),
                    ((y0 * w + x1), (1.0 - fy) * fx),
                    ((y1 * w + x0), fy * (1.0 - fx)),
                    ((y1 * w + x1), fy * fx),
                ];
                let dst = &mut out[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                for (src, wt) in weights {
                    for (d, &s) in dst.iter_mut().zip(&x[src * c..(src + 1) * c]) {
                        *d += wt * s;
                    }
                }
            }
        }
        self.push(
            "upsample_bilinear",
            Tensor::from_parts(vec![out_h * out_w, c], out),
            &[a],
            Op::UpsampleBilinear {
                x: a,
                w,
                rows,
                cols,
            },
        )
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            shapes: self.nodes[..=root.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.as_matrix();
                let n = self.nodes[b.0].value.as_matrix().1;
                if let Some(da) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, val(*b), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(val(*a), g, db, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.nodes[a.0].value.as_matrix();
                let n = self.nodes[b.0].value.as_matrix().0;
                if let Some(da) = self.slot(grads, *a) {
                    kernels::matmul_acc(g, val(*b), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(g, val(*a), db, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a.0].value.as_matrix();
                if let Some(da) = self.slot(grads, *a) {
                    let gt = kernels::transpose(g, n, m);
                    da.iter_mut().zip(gt).for_each(|(d, v)| *d += v);
                }
            }
            Op::Reshape(a) | Op::AddScalar(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::Div(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv / bv;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (((d, gv), av), bv) in db.iter_mut().zip(g).zip(val(*a)).zip(val(*b)) {
                        *d -= gv * av / (bv * bv);
                    }
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let pick_a: Vec<bool> = match node.op {
                    Op::Minimum(..) => val(*a).iter().zip(val(*b)).map(|(x, y)| x <= y).collect(),
                    _ => val(*a).iter().zip(val(*b)).map(|(x, y)| x >= y).collect(),
                };
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), &p) in da.iter_mut().zip(g).zip(&pick_a) {
                        if p {
                            *d += gv;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, gv), &p) in db.iter_mut().zip(g).zip(&pick_a) {
                        if !p {
                            *d += gv;
                        }
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                let n = self.nodes[bias.0].value.numel();
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * s);
                }
            }
            Op::Square(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), x) in da.iter_mut().zip(g).zip(val(*a)) {
                        *d += 2.0 * x * gv;
                    }
                }
            }
            Op::Abs(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), &x) in da.iter_mut().zip(g).zip(val(*a)) {
                        if x > 0.0 {
                            *d += gv;
                        } else if x < 0.0 {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), &x) in da.iter_mut().zip(g).zip(val(*a)) {
                        if x > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), s) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * s * (1.0 - s);
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), &x) in da.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * (kernels::normal_cdf(x) + x * kernels::normal_pdf(x));
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = self.nodes[a.0].value.as_matrix();
                let inv = 1.0 / m as f64;
                if let Some(da) = self.slot(grads, *a) {
                    for row in da.chunks_exact_mut(n) {
                        row.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * inv);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (_, n) = node.value.as_matrix();
                let y = node.value.data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((drow, grow), yrow) in
                        da.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n))
                    {
                        let s: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - s);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let (_, n) = node.value.as_matrix();
                let y = node.value.data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((drow, grow), yrow) in
                        da.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n))
                    {
                        let s: f64 = grow.iter().sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - yv.exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (_, n) = node.value.as_matrix();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((d, gv), xv) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in g.chunks_exact(n) {
                        db.iter_mut().zip(grow).for_each(|(d, gv)| *d += gv);
                    }
                }
                let gam = val(*gamma);
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    for (((drow, grow), xrow), &inv) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .zip(inv_std)
                    {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for ((gv, gm), xv) in grow.iter().zip(gam).zip(xrow) {
                            let dxh = gv * gm;
                            sum_d += dxh;
                            sum_dx += dxh * xv;
                        }
                        for (((d, gv), gm), xv) in drow.iter_mut().zip(grow).zip(gam).zip(xrow) {
                            let dxh = gv * gm;
                            *d += inv / nf * (nf * dxh - sum_d - xv * sum_dx);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if let Some(dp) = self.slot(grads, p) {
                        dp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, gv)| *d += gv);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.as_matrix();
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.as_matrix().1;
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..m {
                            let src = &g[r * n + col..r * n + col + w];
                            dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, gv)| *d += gv);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = node.value.as_matrix().1;
                if let Some(da) = self.slot(grads, *a) {
                    da[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gv)| *d += gv);
                }
            }
            Op::SliceCols(a, start) => {
                let w = node.value.as_matrix().1;
                let n = self.nodes[a.0].value.as_matrix().1;
                if let Some(da) = self.slot(grads, *a) {
                    for (drow, grow) in da.chunks_exact_mut(n).zip(g.chunks_exact(w)) {
                        drow[*start..start + w]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::AvgPool2 { x, h, w } => {
                let c = node.value.as_matrix().1;
                let ow = w / 2;
                if let Some(dx) = self.slot(grads, *x) {
                    for y in 0..*h {
                        for xx in 0..*w {
                            let o = ((y / 2) * ow + xx / 2) * c;
                            let s = (y * w + xx) * c;
                            for k in 0..c {
                                dx[s + k] += 0.25 * g[o + k];
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest2 { x, w } => {
                let c = node.value.as_matrix().1;
                let (oh, ow) = (node.value.as_matrix().0 / (w * 2), w * 2);
                if let Some(dx) = self.slot(grads, *x) {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let s = ((y / 2) * w + xx / 2) * c;
                            let o = (y * ow + xx) * c;
                            for k in 0..c {
                                dx[s + k] += g[o + k];
                            }
                        }
                    }
                }
            }
            Op::UpsampleBilinear {
                x,
                w,
                rows,
                cols,
            } => {
                let c = node.value.as_matrix().1;
                let (out_h, out_w) = (rows.lo.len(), cols.lo.len());
                if let Some(dx) = self.slot(grads, *x) {
                    for oy in 0..out_h {
                        let (y0, y1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
                        for ox in 0..out_w {
                            let (x0, x1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                            let go = &g[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                            let weights = [
                                ((y0 * w + x0), (1.0 - fy) * (1.0 - fx)),
                                ((y0 * w + x1), (1.0 - fy) * fx),
                                ((y1 * w + x0), fy * (1.0 - fx)),
                                ((y1 * w + x1), fy * fx),
                            ];
                            for (src, wt) in weights {
                                for (d, gv) in dx[src * c..(src + 1) * c].iter_mut().zip(go) {
                                    *d += wt * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
