//! Minimal tape-based reverse-mode differentiation over dense 2-D `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar (1×1) node walks the tape in reverse and
//! returns a [`Gradients`] table. Nodes that do not depend on any
//! gradient-tracking leaf are skipped during the backward pass, so constants
//! and detached values cost nothing there.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Transpose(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    LogClamp(Var, f64),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    RowSums(Var),
    ColMeans(Var),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            grad_enabled: true,
        }
    }

    /// A graph in which nothing is tracked; useful for inference.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked: tracked && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn t(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let tr = self.t(a) || self.t(b);
        self.push(value, Op::MatMul(a, b), tr)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let tr = self.t(a) || self.t(b);
        self.push(value, Op::MatMulNT(a, b), tr)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let tr = self.t(a) || self.t(b);
        self.push(value, Op::Add(a, b), tr)
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be a single row");
        let value = self.value(a) + self.value(row);
        let tr = self.t(a) || self.t(row);
        self.push(value, Op::AddRow(a, row), tr)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let tr = self.t(a) || self.t(b);
        self.push(value, Op::Sub(a, b), tr)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let tr = self.t(a) || self.t(b);
        self.push(value, Op::Mul(a, b), tr)
    }

    /// Multiplies every row of `a` elementwise by the 1×n row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: expects a single row");
        let value = self.value(a) * self.value(row);
        let tr = self.t(a) || self.t(row);
        self.push(value, Op::MulRow(a, row), tr)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let tr = self.t(a);
        self.push(value, Op::Scale(a, k), tr)
    }

    /// `a + c` for a constant matrix `c` (entries may be `-inf` to mask a softmax).
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        assert_eq!(self.shape(a), c.dim(), "add_const: shape mismatch");
        let value = self.value(a) + c;
        let tr = self.t(a);
        self.push(value, Op::AddConst(a), tr)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let tr = self.t(a);
        self.push(value, Op::Transpose(a), tr)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let tr = self.t(a);
        self.push(value, Op::Gelu(a), tr)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let tr = self.t(a);
        self.push(value, Op::Relu(a), tr)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let tr = self.t(a);
        self.push(value, Op::Exp(a), tr)
    }

    /// `ln(max(a, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamp(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor).ln());
        let tr = self.t(a);
        self.push(value, Op::LogClamp(a, floor), tr)
    }

    /// `ln σ(a)` without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(log_sigmoid);
        let tr = self.t(a);
        self.push(value, Op::LogSigmoid(a), tr)
    }

    /// Row-wise softmax. `-inf` entries get probability zero; every row needs
    /// at least one finite entry.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        let tr = self.t(a);
        self.push(value, Op::SoftmaxRows(a), tr)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let tr = self.t(a);
        self.push(value, Op::LogSoftmaxRows(a), tr)
    }

    /// Row-wise layer normalization with affine 1×n `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.dim();
        let mut xhat = Array2::zeros((m, n));
        let mut inv_std = Vec::with_capacity(m);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let tr = self.t(x) || self.t(gamma) || self.t(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tr,
        )
    }

    /// `x / max(‖x‖, eps)` per row.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            norms.push(n);
            row /= n.max(eps);
        }
        let tr = self.t(x);
        self.push(value, Op::L2NormalizeRows { x, eps, norms }, tr)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let tr = self.t(a);
        self.push(value, Op::SliceRows(a, start), tr)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let tr = self.t(a);
        self.push(value, Op::SliceCols(a, start), tr)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let tr = parts.iter().any(|&p| self.t(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), tr)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let tr = parts.iter().any(|&p| self.t(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), tr)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let tr = self.t(a);
        self.push(value, Op::SumAll(a), tr)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// m×n → m×1
    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let tr = self.t(a);
        self.push(value, Op::RowSums(a), tr)
    }

    /// m×n → 1×n
    pub fn col_means(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("col_means of empty matrix")
            .insert_axis(Axis(0));
        let tr = self.t(a);
        self.push(value, Op::ColMeans(a), tr)
    }

    /// Sum of several same-shape nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.t(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.t(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.t(*a) {
                        let ga = g.dot(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.t(*b) {
                        let gb = g.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.t(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.t(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.t(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.t(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.t(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if self.t(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.t(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.t(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::MulRow(a, row) => {
                    if self.t(*row) {
                        let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.t(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*row));
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *gi *= 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g * &node.value),
                Op::LogClamp(a, floor) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        *gi = if x > *floor { *gi / x } else { 0.0 };
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        *gi *= sigmoid(-x);
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|gi, &yi| *gi -= yi * dot);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let total = grow.sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gi, &ly| *gi -= ly.exp() * total);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.t(*beta) {
                        accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.t(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if self.t(*x) {
                        let gxhat = &g * self.value(*gamma);
                        let n = xhat.ncols() as f64;
                        let mut gx = Array2::zeros(xhat.dim());
                        for i in 0..xhat.nrows() {
                            let gr = gxhat.row(i);
                            let xr = xhat.row(i);
                            let mean_g = gr.sum() / n;
                            let mean_gx = gr.dot(&xr) / n;
                            for j in 0..xhat.ncols() {
                                gx[[i, j]] = inv_std[i] * (gr[j] - mean_g - xr[j] * mean_gx);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::L2NormalizeRows { x, eps, norms } => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (i, mut grow) in gx.rows_mut().into_iter().enumerate() {
                        let n = norms[i];
                        let s = n.max(*eps);
                        let xr = xv.row(i);
                        let dot = xr.dot(&grow);
                        let coef = if n > *eps { dot / (n * n * n) } else { 0.0 };
                        Zip::from(&mut grow)
                            .and(&xr)
                            .for_each(|gi, &xi| *gi = *gi / s - xi * coef);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let end = start + g.nrows();
                    ga.slice_mut(s![*start..end, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let end = start + g.ncols();
                    ga.slice_mut(s![.., *start..end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let r = self.shape(p).0;
                        if self.t(p) {
                            let gp = g.slice(s![off..off + r, ..]).to_owned();
                            accumulate(&mut grads, p, gp);
                        }
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        if self.t(p) {
                            let gp = g.slice(s![.., off..off + c]).to_owned();
                            accumulate(&mut grads, p, gp);
                        }
                        off += c;
                    }
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSums(a) => {
                    let (m, n) = self.shape(*a);
                    let ga = Array2::from_shape_fn((m, n), |(i, _)| g[[i, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ColMeans(a) => {
                    let (m, n) = self.shape(*a);
                    let inv = 1.0 / m as f64;
                    let ga = Array2::from_shape_fn((m, n), |(_, j)| g[[0, j]] * inv);
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x) = -softplus(-x)`, stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
