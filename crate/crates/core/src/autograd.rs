//! Reverse-mode gradients over a closed set of primitives, plus the Adam
//! update rule.
//!
//! The losses in this crate are compositions of a small, fixed operation set
//! (affine maps, leaky rectifier, logistic, row normalization, fused
//! softmax/cross-entropy, Gaussian-kernel MMD, reductions). Each primitive's
//! gradient is hand-derived; a minimal tape composes them. There is no
//! general expression compiler and none is needed: the operation set is
//! closed and small.
//!
//! All tape arithmetic is double precision. [`Tape::replay`] recomputes the
//! forward pass after leaf edits, which is what the finite-difference
//! checker uses; constants captured at build time (labels, kernel banks,
//! the fairness constant `alpha`) stay frozen, matching the stop-gradient
//! semantics of the losses.

use crate::error::{Error, Result};
use crate::mkmmd::{mmd_sq_biased, mmd_sq_biased_with_grad, KernelBank};
use crate::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBroadcast { m: Var, row: Var },
    Affine { x: Var, mul: f64, add: f64 },
    LeakyRelu { x: Var, slope: f64 },
    Logistic(Var),
    Ln(Var),
    RowNormScale { x: Var, target_norm: f64 },
    MeanAll(Var),
    SumSquares(Var),
    SelectRows { x: Var, rows: Vec<usize>, source_rows: usize },
    SelectCols { x: Var, cols: Vec<usize>, source_cols: usize },
    ConcatRows(Var, Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    MmdBiased { a: Var, b: Var, bank: KernelBank<f64> },
    AddWeighted(Vec<(Var, f64)>),
}

struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

/// Evaluation trace. Values are computed eagerly as the graph is built.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    min_abs_preact: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), min_abs_preact: f64::INFINITY }
    }

    /// Trainable input; gradients are produced for it.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf { trainable: true }, value, true)
    }

    /// Frozen input; treated as a constant by every gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf { trainable: false }, value, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar read of a non-scalar node");
        m.get(0, 0)
    }

    /// Smallest rectifier pre-activation magnitude seen in the last forward
    /// pass; infinite if the graph has no rectifier.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.min_abs_preact
    }

    /// Overwrite a leaf's value. Combine with [`Tape::replay`].
    pub fn set_leaf(&mut self, v: Var, value: Mat) {
        match self.nodes[v.0].op {
            Op::Leaf { .. } => {
                assert_eq!(self.nodes[v.0].value.shape(), value.shape(), "leaf shape change");
                self.nodes[v.0].value = value;
            }
            _ => panic!("set_leaf on a non-leaf node"),
        }
    }

    /// Recompute every non-leaf value in graph order.
    pub fn replay(&mut self) {
        self.min_abs_preact = f64::INFINITY;
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.compute(&op);
            self.nodes[i].value = value;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        self.apply(Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.apply(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.apply(Op::Sub(a, b))
    }

    /// Add a `1 x c` row vector to every row of an `n x c` matrix.
    pub fn add_row_broadcast(&mut self, m: Var, row: Var) -> Var {
        self.apply(Op::AddRowBroadcast { m, row })
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        self.apply(Op::Affine { x, mul, add })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.apply(Op::LeakyRelu { x, slope })
    }

    pub fn logistic(&mut self, x: Var) -> Var {
        self.apply(Op::Logistic(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.apply(Op::Ln(x))
    }

    /// Rescale every row to the target Euclidean norm.
    pub fn row_norm_scale(&mut self, x: Var, target_norm: f64) -> Var {
        self.apply(Op::RowNormScale { x, target_norm })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.apply(Op::MeanAll(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        self.apply(Op::SumSquares(x))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let source_rows = self.value(x).rows();
        self.apply(Op::SelectRows { x, rows, source_rows })
    }

    pub fn select_cols(&mut self, x: Var, cols: Vec<usize>) -> Var {
        let source_cols = self.value(x).cols();
        self.apply(Op::SelectCols { x, cols, source_cols })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        self.apply(Op::ConcatRows(a, b))
    }

    /// Mean cross-entropy of `logits` against integer labels, fused with the
    /// softmax for stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        self.apply(Op::SoftmaxCrossEntropy { logits, labels })
    }

    /// Biased multi-kernel squared MMD between the rows of two matrices. The
    /// bank is captured as a constant.
    pub fn mmd_biased(&mut self, a: Var, b: Var, bank: KernelBank<f64>) -> Var {
        self.apply(Op::MmdBiased { a, b, bank })
    }

    /// Weighted sum of same-shaped terms.
    pub fn add_weighted(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty(), "add_weighted needs at least one term");
        self.apply(Op::AddWeighted(terms))
    }

    fn apply(&mut self, op: Op) -> Var {
        let needs = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        let value = self.compute(&op);
        self.push(op, value, needs)
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> Var {
        assert!(value.is_finite(), "non-finite value entering the tape");
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::ConcatRows(a, b) => {
                vec![*a, *b]
            }
            Op::AddRowBroadcast { m, row } => vec![*m, *row],
            Op::Affine { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::Logistic(x)
            | Op::Ln(x)
            | Op::RowNormScale { x, .. }
            | Op::MeanAll(x)
            | Op::SumSquares(x)
            | Op::SelectRows { x, .. }
            | Op::SelectCols { x, .. }
            | Op::SoftmaxCrossEntropy { logits: x, .. } => vec![*x],
            Op::MmdBiased { a, b, .. } => vec![*a, *b],
            Op::AddWeighted(terms) => terms.iter().map(|(v, _)| *v).collect(),
        }
    }

    fn compute(&mut self, op: &Op) -> Mat {
        match op {
            Op::Leaf { .. } => unreachable!("leaves are never recomputed"),
            Op::MatMul { a, b, ta, tb } => self.value(*a).matmul_opt(self.value(*b), *ta, *tb),
            Op::Add(a, b) => self.value(*a).add(self.value(*b)),
            Op::Sub(a, b) => self.value(*a).sub(self.value(*b)),
            Op::AddRowBroadcast { m, row } => {
                let (m, row) = (self.value(*m), self.value(*row));
                assert_eq!(row.rows(), 1);
                assert_eq!(m.cols(), row.cols());
                let mut out = m.clone();
                for i in 0..out.rows() {
                    for (v, b) in out.row_mut(i).iter_mut().zip(row.row(0)) {
                        *v += *b;
                    }
                }
                out
            }
            Op::Affine { x, mul, add } => self.value(*x).map(|v| mul * v + add),
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                let (out, local_min) = {
                    let xv = self.value(*x);
                    let mut local_min = f64::INFINITY;
                    for &v in xv.data() {
                        local_min = local_min.min(v.abs());
                    }
                    (xv.map(|v| if v > 0.0 { v } else { s * v }), local_min)
                };
                self.min_abs_preact = self.min_abs_preact.min(local_min);
                out
            }
            Op::Logistic(x) => self.value(*x).map(|v| 1.0 / (1.0 + (-v).exp())),
            Op::Ln(x) => self.value(*x).map(|v| v.ln()),
            Op::RowNormScale { x, target_norm } => {
                let x = self.value(*x);
                let mut out = x.clone();
                for i in 0..out.rows() {
                    let r = x.row_norm(i);
                    assert!(r > 0.0, "row normalization of a zero row");
                    let s = target_norm / r;
                    for v in out.row_mut(i) {
                        *v *= s;
                    }
                }
                out
            }
            Op::MeanAll(x) => {
                let x = self.value(*x);
                let n = (x.rows() * x.cols()) as f64;
                Mat::scalar(x.data().iter().sum::<f64>() / n)
            }
            Op::SumSquares(x) => Mat::scalar(self.value(*x).frobenius_sq()),
            Op::SelectRows { x, rows, .. } => self.value(*x).select_rows(rows),
            Op::SelectCols { x, cols, .. } => self.value(*x).select_cols(cols),
            Op::ConcatRows(a, b) => self.value(*a).vstack(self.value(*b)).expect("concat shapes"),
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let v = crate::adapt::cross_entropy(self.value(*logits), labels)
                    .expect("cross entropy shapes");
                Mat::scalar(v)
            }
            Op::MmdBiased { a, b, bank } => {
                let v = mmd_sq_biased(self.value(*a), self.value(*b), bank).expect("mmd shapes");
                Mat::scalar(v)
            }
            Op::AddWeighted(terms) => {
                let mut out = self.value(terms[0].0).scale(terms[0].1);
                for (v, c) in &terms[1..] {
                    out.add_assign(&self.value(*v).scale(*c));
                }
                out
            }
        }
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per node;
    /// query with [`Gradients::get`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::UnsupportedGraph(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad && !matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) -> Result<()> {
        let mut accumulate = |v: Var, contribution: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da, db) = match (ta, tb) {
                    (false, false) => {
                        (g.matmul_opt(bv, false, true), av.matmul_opt(g, true, false))
                    }
                    (true, false) => {
                        (bv.matmul_opt(g, false, true), av.matmul_opt(g, false, false))
                    }
                    (false, true) => {
                        (g.matmul_opt(bv, false, false), g.matmul_opt(av, true, false))
                    }
                    (true, true) => {
                        (bv.matmul_opt(g, true, true), g.matmul_opt(av, true, true))
                    }
                };
                accumulate(*a, da);
                accumulate(*b, db);
            }
            Op::Add(a, b) => {
                accumulate(*a, g.clone());
                accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(*a, g.clone());
                accumulate(*b, g.scale(-1.0));
            }
            Op::AddRowBroadcast { m, row } => {
                accumulate(*m, g.clone());
                let mut row_grad = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (acc, v) in row_grad.row_mut(0).iter_mut().zip(g.row(i)) {
                        *acc += *v;
                    }
                }
                accumulate(*row, row_grad);
            }
            Op::Affine { x, mul, .. } => accumulate(*x, g.scale(*mul)),
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                accumulate(*x, g.zip_with(xv, |gv, v| if v > 0.0 { gv } else { slope * gv }));
            }
            Op::Logistic(x) => {
                let y = &self.nodes[i].value;
                accumulate(*x, g.zip_with(y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Ln(x) => {
                let xv = self.value(*x);
                accumulate(*x, g.zip_with(xv, |gv, v| gv / v));
            }
            Op::RowNormScale { x, target_norm } => {
                // y = t x / ||x||, so dx = t (g / r - x (x . g) / r^3) per row
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let nrm = xv.row_norm(r);
                    let xg: f64 = xr.iter().zip(gr).map(|(&x, &gg)| x * gg).sum();
                    let inv = 1.0 / nrm;
                    let inv3 = inv * inv * inv;
                    for (c, slot) in dx.row_mut(r).iter_mut().enumerate() {
                        *slot = target_norm * (gr[c] * inv - xr[c] * xg * inv3);
                    }
                }
                accumulate(*x, dx);
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let v = g.get(0, 0) / (xv.rows() * xv.cols()) as f64;
                accumulate(*x, Mat::from_fn(xv.rows(), xv.cols(), |_, _| v));
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x);
                accumulate(*x, xv.scale(2.0 * g.get(0, 0)));
            }
            Op::SelectRows { x, rows, source_rows } => {
                let mut dx = Mat::zeros(*source_rows, g.cols());
                for (r, &src) in rows.iter().enumerate() {
                    for (acc, v) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *acc += *v;
                    }
                }
                accumulate(*x, dx);
            }
            Op::SelectCols { x, cols, source_cols } => {
                let mut dx = Mat::zeros(g.rows(), *source_cols);
                for r in 0..g.rows() {
                    for (c, &src) in cols.iter().enumerate() {
                        dx.set(r, src, dx.get(r, src) + g.get(r, c));
                    }
                }
                accumulate(*x, dx);
            }
            Op::ConcatRows(a, b) => {
                let top = self.value(*a).rows();
                let idx_top: Vec<usize> = (0..top).collect();
                let idx_bot: Vec<usize> = (top..g.rows()).collect();
                accumulate(*a, g.select_rows(&idx_top));
                accumulate(*b, g.select_rows(&idx_bot));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lg = self.value(*logits);
                let mut p = crate::adapt::softmax_rows(lg);
                let scale = g.get(0, 0) / labels.len() as f64;
                for (r, &label) in labels.iter().enumerate() {
                    p.set(r, label, p.get(r, label) - 1.0);
                    for v in p.row_mut(r) {
                        *v *= scale;
                    }
                }
                accumulate(*logits, p);
            }
            Op::MmdBiased { a, b, bank } => {
                let (_, da, db) = mmd_sq_biased_with_grad(self.value(*a), self.value(*b), bank)?;
                let s = g.get(0, 0);
                accumulate(*a, da.scale(s));
                accumulate(*b, db.scale(s));
            }
            Op::AddWeighted(terms) => {
                for (v, c) in terms {
                    accumulate(*v, g.scale(*c));
                }
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

/// Gradient of a scalar loss with respect to trainable leaves. Parameters
/// the loss does not touch get zero gradients; asking for the gradient of a
/// constant or non-leaf node is an unsupported-graph error.
pub fn grad(tape: &Tape, loss: Var, wrt: &[Var]) -> Result<Vec<Mat>> {
    for &v in wrt {
        match tape.nodes[v.0].op {
            Op::Leaf { trainable: true } => {}
            Op::Leaf { trainable: false } => {
                return Err(Error::UnsupportedGraph(
                    "gradient requested for a constant leaf".to_string(),
                ))
            }
            _ => {
                return Err(Error::UnsupportedGraph(
                    "gradient requested for a non-leaf node".to_string(),
                ))
            }
        }
    }
    let grads = tape.backward(loss)?;
    Ok(wrt
        .iter()
        .map(|&v| {
            grads.get(v).cloned().unwrap_or_else(|| {
                let (r, c) = tape.value(v).shape();
                Mat::zeros(r, c)
            })
        })
        .collect())
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// (parameter index, row, col) of the worst coordinate.
    pub worst: (usize, usize, usize),
    pub checked: usize,
    /// Coordinates skipped because a rectifier pre-activation came within
    /// `kink_tol` of zero at a probe point.
    pub excluded_kinks: usize,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Tolerance below which a rectifier pre-activation counts as kink-adjacent.
pub const KINK_TOL: f64 = 1e-6;

/// Compare analytic gradients against central finite differences by
/// replaying the tape with perturbed leaves. Constants captured in the graph
/// (labels, kernel bandwidths, `alpha`) stay frozen, so the comparison
/// matches the stop-gradient semantics of the analytic path.
///
/// Relative error per coordinate is `|a - fd| / max(|a|, |fd|, 1e-6)`.
pub fn finite_difference_check(
    tape: &mut Tape,
    loss: Var,
    params: &[Var],
    analytic: &[Mat],
    step: f64,
    tolerance: f64,
) -> Result<FdReport> {
    if params.len() != analytic.len() {
        return Err(Error::parameter(format!(
            "{} params with {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: (0, 0, 0),
        checked: 0,
        excluded_kinks: 0,
        tolerance,
    };
    for (pi, (&p, an)) in params.iter().zip(analytic).enumerate() {
        let base = tape.value(p).clone();
        if base.shape() != an.shape() {
            return Err(Error::parameter(format!(
                "analytic gradient {pi} has shape {:?}, parameter has {:?}",
                an.shape(),
                base.shape()
            )));
        }
        for r in 0..base.rows() {
            for c in 0..base.cols() {
                let orig = base.get(r, c);
                let probe = |v: f64, tape: &mut Tape| -> (f64, f64) {
                    let mut m = tape.value(p).clone();
                    m.set(r, c, v);
                    tape.set_leaf(p, m);
                    tape.replay();
                    (tape.scalar(loss), tape.min_abs_preactivation())
                };
                let (lp, kink_p) = probe(orig + step, tape);
                let (lm, kink_m) = probe(orig - step, tape);
                // restore before deciding anything
                let mut m = tape.value(p).clone();
                m.set(r, c, orig);
                tape.set_leaf(p, m);
                if kink_p < KINK_TOL || kink_m < KINK_TOL {
                    report.excluded_kinks += 1;
                    continue;
                }
                let fd = (lp - lm) / (2.0 * step);
                let a = an.get(r, c);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                report.checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = (pi, r, c);
                }
            }
        }
        tape.replay();
    }
    Ok(report)
}

/// Adam hyper-parameters. `eps` sits inside the denominator's addition:
/// `lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first and second moments plus the shared step counter for
/// one parameter group.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update across the group. The counter increments before bias
    /// correction; updates are elementwise, so tensor order never matters.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[&Mat]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::parameter(format!(
                "adam group holds {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::parameter(format!(
                    "adam shape mismatch: state {:?}, param {:?}, grad {:?}",
                    m.shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
