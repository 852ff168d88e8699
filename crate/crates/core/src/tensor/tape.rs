use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::{Result, Tensor, TensorError};

/// Inputs to `exp` are clamped here so the output stays finite.
const EXP_MAX: f64 = 700.0;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Huber(usize, f64),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterMean {
        input: usize,
        dst: Rc<[usize]>,
        inv_count: Rc<[f64]>,
    },
    MatMul(usize, usize),
    Cross(usize, usize),
    DotRows(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed primitives. Nodes are appended as operations
/// run, so every node's inputs always precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, if it was reachable.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradient for `var` (if any) into `tensor.grad`.
    pub fn accumulate_into(&self, var: Var<'_>, tensor: &mut Tensor) {
        if let Some(g) = self.get(var) {
            tensor.accumulate_grad(g);
        }
    }
}

fn rows_width(shape: &[usize]) -> (usize, usize) {
    let numel: usize = shape.iter().product();
    (shape[0], numel / shape[0])
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// `c = alpha * a·b + beta * c` on strided row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: buffer extents are checked above and the strides address
    // exactly an m×k, k×n and m×n block inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Registers a tensor as a leaf; gradients flow to it when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Registers a value that never receives gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        Ok(self.constant(Tensor::new(shape.to_vec(), data)?))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var<'_>]) -> Result<Var<'_>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let rows = first.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::Dimension {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: s,
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let v = &nodes[p.id].value;
                for r in 0..rows {
                    out[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&v[r * w..(r + 1) * w]);
                }
                offset += w;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(ids), needs))
    }

    /// Concatenates tensors with equal trailing dimensions along rows.
    pub fn concat_rows(&self, parts: &[Var<'_>]) -> Result<Var<'_>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let tail = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let n = &nodes[p.id];
                if n.shape[1..] != tail[..] {
                    return Err(TensorError::Dimension {
                        op: "concat_rows",
                        lhs: nodes[first.id].shape.clone(),
                        rhs: n.shape.clone(),
                    });
                }
                rows += n.shape[0];
                out.extend_from_slice(&n.value);
            }
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(shape, out, Op::ConcatRows(ids), needs))
    }

    /// Runs reverse accumulation from a scalar loss.
    ///
    /// Every operation on the tape up to `loss` is visited once, newest
    /// first. The returned gradients cover the trainable leaves.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, node, &g, &mut grads);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| -> &[f64] { &nodes[id].value };
    let want = |id: usize| nodes[id].needs_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &i in [a, b] {
                if want(i) {
                    let s = slot(grads, i, g.len());
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if want(*a) {
                let s = slot(grads, *a, g.len());
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            if want(*b) {
                let s = slot(grads, *b, g.len());
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
            if want(*a) {
                let s = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] * bv[i];
                }
            }
            if want(*b) {
                let s = slot(grads, *b, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] * av[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
            if want(*a) {
                let s = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] / bv[i];
                }
            }
            if want(*b) {
                let s = slot(grads, *b, g.len());
                for i in 0..g.len() {
                    s[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        Op::AddRow(a, row) => {
            let n = val(*row).len();
            if want(*a) {
                let s = slot(grads, *a, g.len());
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            if want(*row) {
                let s = slot(grads, *row, n);
                for (i, gi) in g.iter().enumerate() {
                    s[i % n] += gi;
                }
            }
        }
        Op::MulCol(a, col) => {
            let (av, cv) = (val(*a).to_vec(), val(*col).to_vec());
            let width = g.len() / cv.len();
            if want(*a) {
                let s = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] * cv[i / width];
                }
            }
            if want(*col) {
                let s = slot(grads, *col, cv.len());
                for i in 0..g.len() {
                    s[i / width] += g[i] * av[i];
                }
            }
        }
        Op::Neg(a) => {
            let s = slot(grads, *a, g.len());
            s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
        }
        Op::Scale(a, c) => {
            let s = slot(grads, *a, g.len());
            s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
        }
        Op::AddScalar(a) => {
            let s = slot(grads, *a, g.len());
            s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
        }
        Op::Relu(a) => {
            let s = slot(grads, *a, g.len());
            for i in 0..g.len() {
                if out[i] > 0.0 {
                    s[i] += g[i];
                }
            }
        }
        Op::Sigmoid(a) => {
            let s = slot(grads, *a, g.len());
            for i in 0..g.len() {
                s[i] += g[i] * out[i] * (1.0 - out[i]);
            }
        }
        Op::Exp(a) => {
            let x = val(*a).to_vec();
            let s = slot(grads, *a, g.len());
            for i in 0..g.len() {
                if x[i] < EXP_MAX {
                    s[i] += g[i] * out[i];
                }
            }
        }
        Op::Ln(a) => {
            let x = val(*a).to_vec();
            let s = slot(grads, *a, g.len());
            for i in 0..g.len() {
                s[i] += g[i] / x[i].max(f64::MIN_POSITIVE);
            }
        }
        Op::Sqrt(a) => {
            let s = slot(grads, *a, g.len());
            for i in 0..g.len() {
                if out[i] > 0.0 {
                    s[i] += g[i] * 0.5 / out[i];
                }
            }
        }
        Op::Square(a) => {
            let x = val(*a).to_vec();
            let s = slot(grads, *a, g.len());
            for i in 0..g.len() {
                s[i] += 2.0 * g[i] * x[i];
            }
        }
        Op::Huber(a, delta) => {
            let x = val(*a).to_vec();
            let s = slot(grads, *a, g.len());
            for i in 0..g.len() {
                s[i] += g[i] * x[i].clamp(-delta, *delta);
            }
        }
        Op::Softmax(a) => {
            let n = last_dim(&node.shape);
            let s = slot(grads, *a, g.len());
            for r in 0..g.len() / n {
                let span = r * n..(r + 1) * n;
                let dot: f64 = g[span.clone()]
                    .iter()
                    .zip(&out[span.clone()])
                    .map(|(g, p)| g * p)
                    .sum();
                for i in span {
                    s[i] += out[i] * (g[i] - dot);
                }
            }
        }
        Op::LogSoftmax(a) => {
            let n = last_dim(&node.shape);
            let s = slot(grads, *a, g.len());
            for r in 0..g.len() / n {
                let span = r * n..(r + 1) * n;
                let total: f64 = g[span.clone()].iter().sum();
                for i in span {
                    s[i] += g[i] - out[i].exp() * total;
                }
            }
        }
        Op::Sum(a) => {
            let len = nodes[*a].value.len();
            let s = slot(grads, *a, len);
            s.iter_mut().for_each(|s| *s += g[0]);
        }
        Op::Reshape(a) => {
            let s = slot(grads, *a, g.len());
            s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
        }
        Op::ConcatCols(ids) => {
            let rows = node.shape[0];
            let total = node.shape[1];
            let mut offset = 0;
            for &id in ids {
                let w = nodes[id].shape[1];
                if want(id) {
                    let s = slot(grads, id, rows * w);
                    for r in 0..rows {
                        for c in 0..w {
                            s[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &id in ids {
                let len = nodes[id].value.len();
                if want(id) {
                    let s = slot(grads, id, len);
                    s.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(s, g)| *s += g);
                }
                offset += len;
            }
        }
        Op::SliceRows(a, start) => {
            let (_, width) = rows_width(&nodes[*a].shape);
            let len = nodes[*a].value.len();
            let s = slot(grads, *a, len);
            let base = start * width;
            s[base..base + g.len()]
                .iter_mut()
                .zip(g)
                .for_each(|(s, g)| *s += g);
        }
        Op::GatherRows(a, idx) => {
            let (_, width) = rows_width(&nodes[*a].shape);
            let len = nodes[*a].value.len();
            let s = slot(grads, *a, len);
            for (k, &row) in idx.iter().enumerate() {
                for c in 0..width {
                    s[row * width + c] += g[k * width + c];
                }
            }
        }
        Op::ScatterMean {
            input,
            dst,
            inv_count,
        } => {
            let (_, width) = rows_width(&nodes[*input].shape);
            let len = nodes[*input].value.len();
            let s = slot(grads, *input, len);
            for (e, &d) in dst.iter().enumerate() {
                for c in 0..width {
                    s[e * width + c] += g[d * width + c] * inv_count[d];
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if want(*a) {
                // dA = G · Bᵀ
                let bv = &nodes[*b].value;
                let s = slot(grads, *a, m * k);
                gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), 1.0, s);
            }
            if want(*b) {
                // dB = Aᵀ · G
                let av = &nodes[*a].value;
                let s = slot(grads, *b, k * n);
                gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), 1.0, s);
            }
        }
        Op::Cross(a, b) => {
            let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
            let rows = g.len() / 3;
            if want(*a) {
                let s = slot(grads, *a, g.len());
                for r in 0..rows {
                    let c = cross3(&bv[r * 3..r * 3 + 3], &g[r * 3..r * 3 + 3]);
                    (0..3).for_each(|i| s[r * 3 + i] += c[i]);
                }
            }
            if want(*b) {
                let s = slot(grads, *b, g.len());
                for r in 0..rows {
                    let c = cross3(&g[r * 3..r * 3 + 3], &av[r * 3..r * 3 + 3]);
                    (0..3).for_each(|i| s[r * 3 + i] += c[i]);
                }
            }
        }
        Op::DotRows(a, b) => {
            let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
            let width = av.len() / g.len();
            if want(*a) {
                let s = slot(grads, *a, av.len());
                for i in 0..av.len() {
                    s[i] += g[i / width] * bv[i];
                }
            }
            if want(*b) {
                let s = slot(grads, *b, bv.len());
                for i in 0..bv.len() {
                    s[i] += g[i / width] * av[i];
                }
            }
        }
        Op::Conv2d { input, kernel } => {
            let geom = ConvGeom::new(&nodes[*input].shape, &nodes[*kernel].shape);
            let (iv, kv) = (val(*input).to_vec(), val(*kernel).to_vec());
            if want(*input) {
                let s = slot(grads, *input, iv.len());
                geom.for_each_tap(|o, c, y, x, iy, ix, dy, dx| {
                    s[geom.in_idx(c, iy, ix)] +=
                        g[geom.out_idx(o, y, x)] * kv[geom.k_idx(o, c, dy, dx)];
                });
            }
            if want(*kernel) {
                let s = slot(grads, *kernel, kv.len());
                geom.for_each_tap(|o, c, y, x, iy, ix, dy, dx| {
                    s[geom.k_idx(o, c, dy, dx)] +=
                        g[geom.out_idx(o, y, x)] * iv[geom.in_idx(c, iy, ix)];
                });
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (rows, feats) = rows_width(&nodes[*x].shape);
            let gv = val(*gamma).to_vec();
            if want(*beta) {
                let s = slot(grads, *beta, feats);
                for i in 0..g.len() {
                    s[i % feats] += g[i];
                }
            }
            if want(*gamma) {
                let s = slot(grads, *gamma, feats);
                for i in 0..g.len() {
                    s[i % feats] += g[i] * xhat[i];
                }
            }
            if want(*x) {
                let n = rows as f64;
                let s = slot(grads, *x, g.len());
                for f in 0..feats {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for r in 0..rows {
                        let i = r * feats + f;
                        let d = g[i] * gv[f];
                        sum_d += d;
                        sum_dx += d * xhat[i];
                    }
                    for r in 0..rows {
                        let i = r * feats + f;
                        let d = g[i] * gv[f];
                        s[i] += inv_std[f] / n * (n * d - sum_d - xhat[i] * sum_dx);
                    }
                }
            }
        }
    }
}

fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Index bookkeeping for a same-padded 2-D convolution. Total padding is
/// `z - 1`, split `floor` before and `ceil` after.
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    z: usize,
    lead: isize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize]) -> Self {
        Self {
            c_in: input[0],
            c_out: kernel[0],
            h: input[1],
            w: input[2],
            z: kernel[2],
            lead: ((kernel[2] - 1) / 2) as isize,
        }
    }

    fn in_idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    fn out_idx(&self, o: usize, y: usize, x: usize) -> usize {
        (o * self.h + y) * self.w + x
    }

    fn k_idx(&self, o: usize, c: usize, dy: usize, dx: usize) -> usize {
        ((o * self.c_in + c) * self.z + dy) * self.z + dx
    }

    #[allow(clippy::too_many_arguments)]
    fn for_each_tap(
        &self,
        mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize),
    ) {
        for o in 0..self.c_out {
            for c in 0..self.c_in {
                for y in 0..self.h {
                    for x in 0..self.w {
                        for dy in 0..self.z {
                            let iy = y as isize + dy as isize - self.lead;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for dx in 0..self.z {
                                let ix = x as isize + dx as isize - self.lead;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(o, c, y, x, iy as usize, ix as usize, dy, dx);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.node(self.id).value.clone()
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.tape.node(self.id).value[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        let n = self.tape.node(self.id);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are well formed")
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, out, needs) = {
            let n = self.tape.node(self.id);
            (
                n.shape.clone(),
                n.value.iter().map(|&x| f(x)).collect(),
                n.needs_grad,
            )
        };
        self.tape.push(shape, out, op, needs)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (shape, out) = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(other.id);
            if a.shape != b.shape {
                return Err(TensorError::Dimension {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let out = a
                .value
                .iter()
                .zip(&b.value)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (a.shape.clone(), out)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(shape, out, op, needs))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Adds a length-`n` row to every row of an `[m×n]` tensor.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = {
            let a = self.tape.node(self.id);
            let r = self.tape.node(row.id);
            let n = r.value.len();
            if last_dim(&a.shape) != n {
                return Err(TensorError::Dimension {
                    op: "add_row",
                    lhs: a.shape.clone(),
                    rhs: r.shape.clone(),
                });
            }
            let out = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| x + r.value[i % n])
                .collect();
            (a.shape.clone(), out)
        };
        let needs = self.tape.needs(&[self.id, row.id]);
        Ok(self
            .tape
            .push(shape, out, Op::AddRow(self.id, row.id), needs))
    }

    /// Multiplies row `i` of an `[m×n]` tensor by `col[i]`.
    pub fn mul_col(&self, col: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = {
            let a = self.tape.node(self.id);
            let c = self.tape.node(col.id);
            if a.shape[0] != c.value.len() {
                return Err(TensorError::Dimension {
                    op: "mul_col",
                    lhs: a.shape.clone(),
                    rhs: c.shape.clone(),
                });
            }
            let width = a.value.len() / a.shape[0];
            let out = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| x * c.value[i / width])
                .collect();
            (a.shape.clone(), out)
        };
        let needs = self.tape.needs(&[self.id, col.id]);
        Ok(self
            .tape
            .push(shape, out, Op::MulCol(self.id, col.id), needs))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), stable_sigmoid)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |x| x.min(EXP_MAX).exp())
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Ln(self.id), |x| x.max(f64::MIN_POSITIVE).ln())
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |x| x.max(0.0).sqrt())
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&self, delta: f64) -> Var<'t> {
        self.unary(Op::Huber(self.id, delta), move |x| {
            let a = x.abs();
            if a <= delta {
                0.5 * x * x
            } else {
                delta * (a - 0.5 * delta)
            }
        })
    }

    /// Softmax over the last dimension, shifted by the row maximum.
    pub fn softmax(&self) -> Var<'t> {
        let (shape, out, needs) = {
            let n = self.tape.node(self.id);
            let width = last_dim(&n.shape);
            let mut out = n.value.clone();
            for row in out.chunks_mut(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            (n.shape.clone(), out, n.needs_grad)
        };
        self.tape.push(shape, out, Op::Softmax(self.id), needs)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&self) -> Var<'t> {
        let (shape, out, needs) = {
            let n = self.tape.node(self.id);
            let width = last_dim(&n.shape);
            let mut out = n.value.clone();
            for row in out.chunks_mut(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                row.iter_mut().for_each(|v| *v -= lse);
            }
            (n.shape.clone(), out, n.needs_grad)
        };
        self.tape.push(shape, out, Op::LogSoftmax(self.id), needs)
    }

    pub fn sum(&self) -> Var<'t> {
        let (total, needs) = {
            let n = self.tape.node(self.id);
            (n.value.iter().sum(), n.needs_grad)
        };
        self.tape
            .push(vec![1], vec![total], Op::Sum(self.id), needs)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.tape.node(self.id).value.len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, needs, old) = {
            let n = self.tape.node(self.id);
            (n.value.clone(), n.needs_grad, n.shape.clone())
        };
        if shape.iter().product::<usize>() != value.len() || shape.contains(&0) {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Reshape(self.id), needs))
    }

    /// Rows `start..end` along the first dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (shape, out, needs) = {
            let n = self.tape.node(self.id);
            if start >= end || end > n.shape[0] {
                return Err(TensorError::Contract(format!(
                    "row slice {start}..{end} out of range for shape {:?}",
                    n.shape
                )));
            }
            let (_, width) = rows_width(&n.shape);
            let mut shape = n.shape.clone();
            shape[0] = end - start;
            (
                shape,
                n.value[start * width..end * width].to_vec(),
                n.needs_grad,
            )
        };
        Ok(self
            .tape
            .push(shape, out, Op::SliceRows(self.id, start), needs))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (shape, out, needs) = {
            let n = self.tape.node(self.id);
            let (rows, width) = rows_width(&n.shape);
            if idx.is_empty() {
                return Err(TensorError::Contract("gather of zero rows".into()));
            }
            if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(TensorError::Contract(format!(
                    "gather index {bad} out of range for {rows} rows"
                )));
            }
            let mut out = Vec::with_capacity(idx.len() * width);
            for &i in idx {
                out.extend_from_slice(&n.value[i * width..(i + 1) * width]);
            }
            let mut shape = n.shape.clone();
            shape[0] = idx.len();
            (shape, out, n.needs_grad)
        };
        Ok(self
            .tape
            .push(shape, out, Op::GatherRows(self.id, idx.into()), needs))
    }

    /// Averages rows into `n_out` buckets: row `e` goes to bucket `dst[e]`.
    /// Empty buckets are zero.
    pub fn scatter_mean_rows(&self, dst: &[usize], n_out: usize) -> Result<Var<'t>> {
        let (shape, out, needs, inv) = {
            let n = self.tape.node(self.id);
            let (rows, width) = rows_width(&n.shape);
            if dst.len() != rows {
                return Err(TensorError::Dimension {
                    op: "scatter_mean_rows",
                    lhs: n.shape.clone(),
                    rhs: vec![dst.len()],
                });
            }
            if let Some(bad) = dst.iter().find(|&&d| d >= n_out) {
                return Err(TensorError::Contract(format!(
                    "scatter target {bad} out of range for {n_out} rows"
                )));
            }
            let mut count = vec![0usize; n_out];
            dst.iter().for_each(|&d| count[d] += 1);
            let inv: Vec<f64> = count
                .iter()
                .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
                .collect();
            let mut out = vec![0.0; n_out * width];
            for (e, &d) in dst.iter().enumerate() {
                for c in 0..width {
                    out[d * width + c] += n.value[e * width + c];
                }
            }
            for (d, &s) in inv.iter().enumerate() {
                out[d * width..(d + 1) * width]
                    .iter_mut()
                    .for_each(|v| *v *= s);
            }
            let mut shape = n.shape.clone();
            shape[0] = n_out;
            (shape, out, n.needs_grad, inv)
        };
        Ok(self.tape.push(
            shape,
            out,
            Op::ScatterMean {
                input: self.id,
                dst: dst.into(),
                inv_count: inv.into(),
            },
            needs,
        ))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k, n, out) = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(other.id);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::Dimension {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                &a.value,
                (k as isize, 1),
                &b.value,
                (n as isize, 1),
                0.0,
                &mut out,
            );
            (m, k, n, out)
        };
        let _ = k;
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self
            .tape
            .push(vec![m, n], out, Op::MatMul(self.id, other.id), needs))
    }

    /// Row-wise cross product of two `[m×3]` tensors.
    pub fn cross(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(other.id);
            if a.shape != b.shape || a.shape.len() != 2 || a.shape[1] != 3 {
                return Err(TensorError::Dimension {
                    op: "cross",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let out = a
                .value
                .chunks(3)
                .zip(b.value.chunks(3))
                .flat_map(|(x, y)| cross3(x, y))
                .collect();
            (a.shape.clone(), out)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self
            .tape
            .push(shape, out, Op::Cross(self.id, other.id), needs))
    }

    /// Row-wise dot product `[m×n]·[m×n] -> [m×1]`.
    pub fn dot_rows(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (rows, out) = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(other.id);
            if a.shape != b.shape || a.shape.len() != 2 {
                return Err(TensorError::Dimension {
                    op: "dot_rows",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let w = a.shape[1];
            let out: Vec<f64> = a
                .value
                .chunks(w)
                .zip(b.value.chunks(w))
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
                .collect();
            (a.shape[0], out)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self
            .tape
            .push(vec![rows, 1], out, Op::DotRows(self.id, other.id), needs))
    }

    /// Same-padded 2-D cross-correlation of `[C_in×H×W]` with
    /// `[C_out×C_in×z×z]`.
    pub fn conv2d(&self, kernel: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = {
            let i = self.tape.node(self.id);
            let k = self.tape.node(kernel.id);
            if i.shape.len() != 3
                || k.shape.len() != 4
                || k.shape[1] != i.shape[0]
                || k.shape[2] != k.shape[3]
            {
                return Err(TensorError::Dimension {
                    op: "conv2d",
                    lhs: i.shape.clone(),
                    rhs: k.shape.clone(),
                });
            }
            let geom = ConvGeom::new(&i.shape, &k.shape);
            let mut out = vec![0.0; geom.c_out * geom.h * geom.w];
            geom.for_each_tap(|o, c, y, x, iy, ix, dy, dx| {
                out[geom.out_idx(o, y, x)] +=
                    i.value[geom.in_idx(c, iy, ix)] * k.value[geom.k_idx(o, c, dy, dx)];
            });
            (vec![geom.c_out, geom.h, geom.w], out)
        };
        let needs = self.tape.needs(&[self.id, kernel.id]);
        Ok(self.tape.push(
            shape,
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
            },
            needs,
        ))
    }

    /// Normalizes each column of a `[rows×features]` tensor over its rows,
    /// then applies `gamma * x̂ + beta`.
    ///
    /// Statistics always come from the current input. With a single row the
    /// centred value is zero, so the output is `beta`. A column whose
    /// variance plus `eps` is exactly zero normalizes to zero.
    pub fn batch_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (shape, out, xhat, inv_std) = {
            let x = self.tape.node(self.id);
            let gm = self.tape.node(gamma.id);
            let bt = self.tape.node(beta.id);
            let (rows, feats) = rows_width(&x.shape);
            if gm.value.len() != feats || bt.value.len() != feats {
                return Err(TensorError::Dimension {
                    op: "batch_norm",
                    lhs: x.shape.clone(),
                    rhs: gm.shape.clone(),
                });
            }
            let n = rows as f64;
            let mut mean = vec![0.0; feats];
            let mut var = vec![0.0; feats];
            for (i, v) in x.value.iter().enumerate() {
                mean[i % feats] += v / n;
            }
            for (i, v) in x.value.iter().enumerate() {
                let d = v - mean[i % feats];
                var[i % feats] += d * d / n;
            }
            let inv_std: Vec<f64> = var
                .iter()
                .map(|v| {
                    let s = v + eps;
                    if s > 0.0 {
                        1.0 / s.sqrt()
                    } else {
                        0.0
                    }
                })
                .collect();
            let xhat: Vec<f64> = x
                .value
                .iter()
                .enumerate()
                .map(|(i, v)| (v - mean[i % feats]) * inv_std[i % feats])
                .collect();
            let out = xhat
                .iter()
                .enumerate()
                .map(|(i, h)| gm.value[i % feats] * h + bt.value[i % feats])
                .collect();
            (x.shape.clone(), out, xhat, inv_std)
        };
        let needs = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            shape,
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            needs,
        ))
    }
}
