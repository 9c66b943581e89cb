//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients for every variable. Everything
//! is `f64` end to end so gradients can be checked against central finite
//! differences at tight tolerances, and so repeated runs are bit-identical.
//!
//! The op set is deliberately small: matrix product, elementwise arithmetic,
//! row broadcasts, a handful of activations, row-wise softmax / layer norm,
//! reductions, slicing and concatenation, row gathers, and an escape hatch
//! ([`CustomGrad`]) for losses whose gradients are cheaper to state
//! analytically than to compose.

use ndarray::{s, Array2, Axis};
use std::cell::RefCell;
use std::sync::Arc;

/// Dense row-major matrix of `f64`. Vectors are `1 x n` or `n x 1`.
pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule supplied by the caller for ops the tape does not know.
///
/// `backward` receives the upstream gradient, the input values, and the
/// forward output, and returns one gradient per input (`None` where an
/// input does not receive gradient).
pub trait CustomGrad: Send + Sync {
    fn backward(&self, grad: &Mat, inputs: &[&Mat], output: &Mat) -> Vec<Option<Mat>>;
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `(r,c) + (1,c)` broadcast over rows.
    AddRow(usize, usize),
    /// `(r,c) * (1,c)` broadcast over rows.
    MulRow(usize, usize),
    /// Matrix times a `1x1` variable.
    MulScalar(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Transpose(usize),
    Relu(usize),
    Silu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Powf(usize, f64),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    /// Row-wise normalization; `rstd` is the saved `1/sqrt(var+eps)` per row.
    LayerNorm { x: usize, rstd: Arc<Mat> },
    SumAll(usize),
    MeanAll(usize),
    /// Sum within each row -> `(r,1)`.
    SumCols(usize),
    /// Sum down each column -> `(1,c)`.
    SumRows(usize),
    /// Mean down each column -> `(1,c)`.
    MeanRows(usize),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    /// Row-major reinterpretation to a new (rows, cols) with equal length.
    Reshape(usize),
    /// Rows of `x` at the given indices (embedding lookup).
    GatherRows { x: usize, idx: Arc<Vec<usize>> },
    /// One element per row, `out[i,0] = x[i, cols[i]]`.
    PickPerRow { x: usize, cols: Arc<Vec<usize>> },
    Detach,
    Custom { inputs: Vec<usize>, op: Arc<dyn CustomGrad> },
}

struct Inner {
    ops: Vec<Op>,
    vals: Vec<Arc<Mat>>,
}

/// Gradient record produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }
}

/// The operation record. Construct one per forward/backward pass.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                ops: Vec::new(),
                vals: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, val: Mat) -> Var {
        self.push_arc(op, Arc::new(val))
    }

    fn push_arc(&self, op: Op, val: Arc<Mat>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.ops.push(op);
        inner.vals.push(val);
        Var(inner.ops.len() - 1)
    }

    /// Current value of a node (cheap: shared pointer clone).
    pub fn value(&self, v: Var) -> Arc<Mat> {
        self.inner.borrow().vals[v.0].clone()
    }

    /// Value of a `1x1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar_value on non-1x1 node");
        m[(0, 0)]
    }

    pub fn dim(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    // ---- leaves -------------------------------------------------------

    pub fn input(&self, m: Mat) -> Var {
        self.push(Op::Leaf, m)
    }

    pub fn input_arc(&self, m: Arc<Mat>) -> Var {
        self.push_arc(Op::Leaf, m)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.input(Mat::from_elem((1, 1), v))
    }

    // ---- binary -------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dims");
        self.push(Op::MatMul(a.0, b.0), va.dot(&*vb))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add shape");
        self.push(Op::Add(a.0, b.0), &*va + &*vb)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "sub shape");
        self.push(Op::Sub(a.0, b.0), &*va - &*vb)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mul shape");
        self.push(Op::Mul(a.0, b.0), &*va * &*vb)
    }

    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row wants a 1xc row");
        assert_eq!(va.ncols(), vr.ncols(), "add_row width");
        self.push(Op::AddRow(a.0, row.0), &*va + &*vr)
    }

    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "mul_row wants a 1xc row");
        assert_eq!(va.ncols(), vr.ncols(), "mul_row width");
        self.push(Op::MulRow(a.0, row.0), &*va * &*vr)
    }

    pub fn mul_scalar(&self, a: Var, sc: Var) -> Var {
        let (va, vs) = (self.value(a), self.value(sc));
        assert_eq!(vs.dim(), (1, 1), "mul_scalar wants 1x1");
        self.push(Op::MulScalar(a.0, sc.0), &*va * vs[(0, 0)])
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        self.push(Op::Scale(a.0, k), &*va * k)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Add a constant matrix (attention masks, fixed offsets). The constant
    /// receives no gradient.
    pub fn add_const(&self, a: Var, c: Arc<Mat>) -> Var {
        let va = self.value(a);
        assert_eq!(va.dim(), c.dim(), "add_const shape");
        let out = &*va + &*c;
        self.push(Op::AddConst(a.0), out)
    }

    pub fn add_scalar_const(&self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        let c = Arc::new(Mat::from_elem(va.dim(), k));
        self.add_const(a, c)
    }

    // ---- unary --------------------------------------------------------

    pub fn transpose(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Op::Transpose(a.0), va.t().to_owned())
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Op::Relu(a.0), va.mapv(|x| x.max(0.0)))
    }

    pub fn silu(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Op::Silu(a.0), va.mapv(|x| x * sigmoid_scalar(x)))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Op::Tanh(a.0), va.mapv(f64::tanh))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Op::Sigmoid(a.0), va.mapv(sigmoid_scalar))
    }

    pub fn exp(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Op::Exp(a.0), va.mapv(f64::exp))
    }

    pub fn ln(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Op::Ln(a.0), va.mapv(f64::ln))
    }

    pub fn powf(&self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        self.push(Op::Powf(a.0, k), va.mapv(|x| x.powf(k)))
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Op::SoftmaxRows(a.0), softmax_rows(&va))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Op::LogSoftmaxRows(a.0), log_softmax_rows(&va))
    }

    /// Row-wise layer normalization without affine terms; compose with
    /// [`Tape::mul_row`]/[`Tape::add_row`] for gain and bias.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let (y, rstd) = layer_norm_rows(&va, eps);
        self.push(
            Op::LayerNorm {
                x: a.0,
                rstd: Arc::new(rstd),
            },
            y,
        )
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Op::SumAll(a.0), Mat::from_elem((1, 1), va.sum()))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = (va.nrows() * va.ncols()) as f64;
        self.push(Op::MeanAll(a.0), Mat::from_elem((1, 1), va.sum() / n))
    }

    /// Sum within each row: `(r,c) -> (r,1)`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumCols(a.0), out)
    }

    /// Sum down each column: `(r,c) -> (1,c)`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::SumRows(a.0), out)
    }

    /// Mean down each column: `(r,c) -> (1,c)`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        self.push(Op::MeanRows(a.0), out)
    }

    // ---- shape --------------------------------------------------------

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.nrows(), "slice_rows out of range");
        let out = va.slice(s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows { x: a.0, start }, out)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.ncols(), "slice_cols out of range");
        let out = va.slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols { x: a.0, start }, out)
    }

    pub fn row(&self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, 1)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Arc<Mat>> = parts.iter().map(|v| self.value(*v)).collect();
        let cols = vals[0].ncols();
        let rows: usize = vals.iter().map(|v| v.nrows()).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut at = 0;
        for v in &vals {
            assert_eq!(v.ncols(), cols, "concat_rows width");
            out.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        self.push(Op::ConcatRows(parts.iter().map(|v| v.0).collect()), out)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Arc<Mat>> = parts.iter().map(|v| self.value(*v)).collect();
        let rows = vals[0].nrows();
        let cols: usize = vals.iter().map(|v| v.ncols()).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut at = 0;
        for v in &vals {
            assert_eq!(v.nrows(), rows, "concat_cols height");
            out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(Op::ConcatCols(parts.iter().map(|v| v.0).collect()), out)
    }

    /// Row-major reshape; element count must match.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape element count");
        let out = Mat::from_shape_vec((rows, cols), va.iter().copied().collect())
            .expect("reshape");
        self.push(Op::Reshape(a.0), out)
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros((idx.len(), va.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < va.nrows(), "gather_rows index {i} out of range");
            out.row_mut(k).assign(&va.row(i));
        }
        self.push(
            Op::GatherRows {
                x: a.0,
                idx: Arc::new(idx.to_vec()),
            },
            out,
        )
    }

    /// `out[i,0] = a[i, cols[i]]` — the gather used by cross-entropy.
    pub fn pick_per_row(&self, a: Var, cols: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(cols.len(), va.nrows(), "pick_per_row wants one column per row");
        let mut out = Mat::zeros((va.nrows(), 1));
        for (i, &c) in cols.iter().enumerate() {
            assert!(c < va.ncols(), "pick_per_row column {c} out of range");
            out[(i, 0)] = va[(i, c)];
        }
        self.push(
            Op::PickPerRow {
                x: a.0,
                cols: Arc::new(cols.to_vec()),
            },
            out,
        )
    }

    /// Value passes through, gradient does not.
    pub fn detach(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push_arc(Op::Detach, va)
    }

    /// Record a caller-computed op. `output` must have been computed from
    /// the current values of `inputs`; `op` supplies the backward rule.
    pub fn custom(&self, inputs: &[Var], output: Mat, op: Arc<dyn CustomGrad>) -> Var {
        self.push(
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                op,
            },
            output,
        )
    }

    // ---- compositions -------------------------------------------------

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        self.add_row(self.matmul(x, w), b)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        self.mean_all(self.square(d))
    }

    // ---- backward -----------------------------------------------------

    /// Accumulate `d loss / d node` for every node that feeds `loss`.
    /// `loss` must be `1x1`.
    pub fn backward(&self, loss: Var) -> Grads {
        let inner = self.inner.borrow();
        assert_eq!(inner.vals[loss.0].dim(), (1, 1), "backward seed must be 1x1");
        let mut g: Vec<Option<Mat>> = Vec::with_capacity(loss.0 + 1);
        g.resize_with(loss.0 + 1, || None);
        g[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            match &inner.ops[i] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&inner.vals[*a], &inner.vals[*b]);
                    acc(&mut g[*a], gi.dot(&vb.t()));
                    acc(&mut g[*b], va.t().dot(&gi));
                }
                Op::Add(a, b) => {
                    acc(&mut g[*a], gi.clone());
                    acc(&mut g[*b], gi.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut g[*a], gi.clone());
                    acc(&mut g[*b], -&gi);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&inner.vals[*a], &inner.vals[*b]);
                    acc(&mut g[*a], &gi * &**vb);
                    acc(&mut g[*b], &gi * &**va);
                }
                Op::AddRow(a, r) => {
                    acc(&mut g[*a], gi.clone());
                    acc(&mut g[*r], gi.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulRow(a, r) => {
                    let (va, vr) = (&inner.vals[*a], &inner.vals[*r]);
                    acc(&mut g[*a], &gi * &**vr);
                    let gr = (&gi * &**va).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g[*r], gr);
                }
                Op::MulScalar(a, sc) => {
                    let (va, vs) = (&inner.vals[*a], &inner.vals[*sc]);
                    acc(&mut g[*a], &gi * vs[(0, 0)]);
                    let gs = (&gi * &**va).sum();
                    acc(&mut g[*sc], Mat::from_elem((1, 1), gs));
                }
                Op::Scale(a, k) => acc(&mut g[*a], &gi * *k),
                Op::AddConst(a) => acc(&mut g[*a], gi.clone()),
                Op::Transpose(a) => acc(&mut g[*a], gi.t().to_owned()),
                Op::Relu(a) => {
                    let va = &inner.vals[*a];
                    let mut d = gi.clone();
                    d.zip_mut_with(va, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    acc(&mut g[*a], d);
                }
                Op::Silu(a) => {
                    let va = &inner.vals[*a];
                    let mut d = gi.clone();
                    d.zip_mut_with(va, |gv, &xv| {
                        let sv = sigmoid_scalar(xv);
                        *gv *= sv * (1.0 + xv * (1.0 - sv));
                    });
                    acc(&mut g[*a], d);
                }
                Op::Tanh(a) => {
                    let y = &inner.vals[i];
                    let mut d = gi.clone();
                    d.zip_mut_with(y, |gv, &yv| *gv *= 1.0 - yv * yv);
                    acc(&mut g[*a], d);
                }
                Op::Sigmoid(a) => {
                    let y = &inner.vals[i];
                    let mut d = gi.clone();
                    d.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                    acc(&mut g[*a], d);
                }
                Op::Exp(a) => {
                    let y = &inner.vals[i];
                    acc(&mut g[*a], &gi * &**y);
                }
                Op::Ln(a) => {
                    let va = &inner.vals[*a];
                    acc(&mut g[*a], &gi / &**va);
                }
                Op::Powf(a, k) => {
                    let va = &inner.vals[*a];
                    let mut d = gi.clone();
                    d.zip_mut_with(va, |gv, &xv| *gv *= k * xv.powf(k - 1.0));
                    acc(&mut g[*a], d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &inner.vals[i];
                    // dx = y ⊙ (g - rowsum(g ⊙ y))
                    let dot = (&gi * &**y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = &**y * &(&gi - &dot);
                    acc(&mut g[*a], d);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &inner.vals[i];
                    // dx = g - softmax ⊙ rowsum(g)
                    let p = y.mapv(f64::exp);
                    let rs = gi.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut g[*a], &gi - &(&p * &rs));
                }
                Op::LayerNorm { x, rstd } => {
                    let y = &inner.vals[i];
                    // dx = rstd * (g - mean(g) - y ⊙ mean(g ⊙ y)) per row
                    let c = y.ncols() as f64;
                    let gm = gi.sum_axis(Axis(1)).insert_axis(Axis(1)) / c;
                    let gym = (&gi * &**y).sum_axis(Axis(1)).insert_axis(Axis(1)) / c;
                    let d = (&gi - &gm - &(&**y * &gym)) * &**rstd;
                    acc(&mut g[*x], d);
                }
                Op::SumAll(a) => {
                    let va = &inner.vals[*a];
                    acc(&mut g[*a], Mat::from_elem(va.dim(), gi[(0, 0)]));
                }
                Op::MeanAll(a) => {
                    let va = &inner.vals[*a];
                    let n = (va.nrows() * va.ncols()) as f64;
                    acc(&mut g[*a], Mat::from_elem(va.dim(), gi[(0, 0)] / n));
                }
                Op::SumCols(a) => {
                    let va = &inner.vals[*a];
                    let mut d = Mat::zeros(va.dim());
                    for (mut row, &gv) in d.rows_mut().into_iter().zip(gi.column(0)) {
                        row.fill(gv);
                    }
                    acc(&mut g[*a], d);
                }
                Op::SumRows(a) => {
                    let va = &inner.vals[*a];
                    let mut d = Mat::zeros(va.dim());
                    d += &gi;
                    acc(&mut g[*a], d);
                }
                Op::MeanRows(a) => {
                    let va = &inner.vals[*a];
                    let r = va.nrows() as f64;
                    let mut d = Mat::zeros(va.dim());
                    d += &(&gi / r);
                    acc(&mut g[*a], d);
                }
                Op::SliceRows { x, start } => {
                    let vx = &inner.vals[*x];
                    let mut d = Mat::zeros(vx.dim());
                    d.slice_mut(s![*start..*start + gi.nrows(), ..]).assign(&gi);
                    acc(&mut g[*x], d);
                }
                Op::SliceCols { x, start } => {
                    let vx = &inner.vals[*x];
                    let mut d = Mat::zeros(vx.dim());
                    d.slice_mut(s![.., *start..*start + gi.ncols()]).assign(&gi);
                    acc(&mut g[*x], d);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = inner.vals[p].nrows();
                        acc(&mut g[p], gi.slice(s![at..at + rows, ..]).to_owned());
                        at += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let cols = inner.vals[p].ncols();
                        acc(&mut g[p], gi.slice(s![.., at..at + cols]).to_owned());
                        at += cols;
                    }
                }
                Op::Reshape(a) => {
                    let va = &inner.vals[*a];
                    let d = Mat::from_shape_vec(va.dim(), gi.iter().copied().collect())
                        .expect("reshape grad");
                    acc(&mut g[*a], d);
                }
                Op::GatherRows { x, idx } => {
                    let vx = &inner.vals[*x];
                    let mut d = Mat::zeros(vx.dim());
                    for (k, &row) in idx.iter().enumerate() {
                        let mut dst = d.row_mut(row);
                        dst += &gi.row(k);
                    }
                    acc(&mut g[*x], d);
                }
                Op::PickPerRow { x, cols } => {
                    let vx = &inner.vals[*x];
                    let mut d = Mat::zeros(vx.dim());
                    for (i_row, &c) in cols.iter().enumerate() {
                        d[(i_row, c)] += gi[(i_row, 0)];
                    }
                    acc(&mut g[*x], d);
                }
                Op::Detach => {}
                Op::Custom { inputs, op } => {
                    let in_vals: Vec<&Mat> =
                        inputs.iter().map(|&p| inner.vals[p].as_ref()).collect();
                    let out_val = inner.vals[i].as_ref();
                    let contribs = op.backward(&gi, &in_vals, out_val);
                    assert_eq!(contribs.len(), inputs.len(), "custom backward arity");
                    for (&p, c) in inputs.iter().zip(contribs) {
                        if let Some(c) = c {
                            assert_eq!(c.dim(), inner.vals[p].dim(), "custom grad shape");
                            acc(&mut g[p], c);
                        }
                    }
                }
            }
            g[i] = Some(gi);
        }
        Grads { g }
    }
}

fn acc(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(m) => *m += &delta,
        None => *slot = Some(delta),
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction. Shared by the tape op and
/// no-tape inference paths.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = row.fold(0.0, |a, &b| a + (b - m).exp()).ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    y
}

/// Row-wise layer norm returning the normalized matrix and per-row
/// `1/sqrt(var+eps)`.
pub fn layer_norm_rows(x: &Mat, eps: f64) -> (Mat, Mat) {
    let r = x.nrows();
    let c = x.ncols() as f64;
    let mut y = x.clone();
    let mut rstd = Mat::zeros((r, 1));
    for (i, mut row) in y.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / c;
        let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / c;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[(i, 0)] = rs;
        row.mapv_inplace(|v| (v - mean) * rs);
    }
    (y, rstd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use crate::rng::DetRng;

    fn rand_mat(rng: &mut DetRng, r: usize, c: usize) -> Mat {
        Mat::from_shape_vec((r, c), rng.normal_vec(r * c)).unwrap()
    }

    /// Random matrix with every entry at least 0.2 from zero, for ops with
    /// kinks or domain limits at the origin.
    fn rand_mat_off_zero(rng: &mut DetRng, r: usize, c: usize) -> Mat {
        let mut m = rand_mat(rng, r, c);
        m.mapv_inplace(|v| v.signum() * (0.2 + v.abs()));
        m
    }

    fn check<F>(inputs: Vec<Mat>, build: F)
    where
        F: Fn(&Tape, &[Var]) -> Var,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.input(m.clone())).collect();
        let loss = build(&tape, &vars);
        let grads = tape.backward(loss);

        let mut f = |xs: &[Mat]| {
            let t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|m| t.input(m.clone())).collect();
            t.scalar_value(build(&t, &vs))
        };
        let numeric = fd::finite_diff(&mut f, &inputs, 1e-5);
        for (k, v) in vars.iter().enumerate() {
            let a = grads.get(*v).expect("missing gradient");
            let err = fd::max_rel_err(a, &numeric[k]);
            assert!(err < 1e-6, "input {k}: rel err {err:.3e}");
        }
    }

    #[test]
    fn grad_matmul_add_mul() {
        let mut rng = DetRng::new(7, "t");
        check(
            vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2), rand_mat(&mut rng, 3, 2)],
            |t, v| {
                let p = t.matmul(v[0], v[1]);
                let q = t.mul(p, v[2]);
                t.mean_all(t.add(q, v[2]))
            },
        );
    }

    #[test]
    fn grad_row_broadcasts_and_scalar() {
        let mut rng = DetRng::new(8, "t");
        check(
            vec![rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 1, 3), rand_mat(&mut rng, 1, 1)],
            |t, v| {
                let a = t.add_row(v[0], v[1]);
                let b = t.mul_row(a, v[1]);
                let c = t.mul_scalar(b, v[2]);
                t.sum_all(c)
            },
        );
    }

    #[test]
    fn grad_activations() {
        let mut rng = DetRng::new(9, "t");
        check(vec![rand_mat_off_zero(&mut rng, 3, 5)], |t, v| {
            let a = t.silu(v[0]);
            let b = t.tanh(a);
            let c = t.sigmoid(b);
            let d = t.relu(c); // sigmoid output > 0, no kink crossing
            t.mean_all(d)
        });
    }

    #[test]
    fn grad_exp_ln_powf() {
        let mut rng = DetRng::new(10, "t");
        let mut m = rand_mat(&mut rng, 3, 3);
        m.mapv_inplace(|v| 0.5 + v.abs()); // positive domain
        check(vec![m], |t, v| {
            let a = t.ln(v[0]);
            let b = t.powf(v[0], 1.7);
            let c = t.exp(t.scale(a, 0.3));
            t.mean_all(t.add(b, c))
        });
    }

    #[test]
    fn grad_softmax_logsoftmax_layernorm() {
        let mut rng = DetRng::new(11, "t");
        check(vec![rand_mat(&mut rng, 4, 6)], |t, v| {
            let s = t.softmax_rows(v[0]);
            let l = t.log_softmax_rows(v[0]);
            let n = t.layer_norm(v[0], 1e-5);
            let sum = t.add(t.add(s, l), n);
            t.mean_all(sum)
        });
    }

    #[test]
    fn grad_reductions() {
        let mut rng = DetRng::new(12, "t");
        check(vec![rand_mat(&mut rng, 3, 4)], |t, v| {
            let a = t.sum_cols(v[0]); // (3,1)
            let b = t.sum_rows(v[0]); // (1,4)
            let c = t.mean_rows(v[0]); // (1,4)
            let bt = t.transpose(b);
            let ct = t.transpose(c);
            let joined = t.concat_rows(&[a, bt, ct]); // (11,1)
            t.mean_all(t.square(joined))
        });
    }

    #[test]
    fn grad_slice_concat_gather_pick() {
        let mut rng = DetRng::new(13, "t");
        check(vec![rand_mat(&mut rng, 5, 4), rand_mat(&mut rng, 5, 4)], |t, v| {
            let top = t.slice_rows(v[0], 0, 2);
            let bottom = t.slice_rows(v[1], 2, 3);
            let joined = t.concat_rows(&[top, bottom]); // (5,4)
            let left = t.slice_cols(joined, 0, 2);
            let right = t.slice_cols(joined, 2, 2);
            let wide = t.concat_cols(&[right, left]);
            let gathered = t.gather_rows(wide, &[4, 0, 0, 2]);
            let picked = t.pick_per_row(gathered, &[1, 3, 0, 2]);
            let squished = t.reshape(picked, 2, 2);
            t.mean_all(t.square(squished))
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.input(Mat::from_elem((2, 2), 3.0));
        let d = tape.detach(x);
        let loss = tape.mean_all(tape.square(d));
        let grads = tape.backward(loss);
        assert!(grads.get(x).is_none());
        assert!(grads.get(d).is_some());
    }

    struct PassThrough;
    impl CustomGrad for PassThrough {
        fn backward(&self, grad: &Mat, _inputs: &[&Mat], _output: &Mat) -> Vec<Option<Mat>> {
            vec![Some(grad.clone())]
        }
    }

    #[test]
    fn custom_op_routes_gradient() {
        let tape = Tape::new();
        let x = tape.input(Mat::from_elem((2, 3), 1.5));
        let rounded = tape.value(x).mapv(f64::round);
        let q = tape.custom(&[x], rounded, Arc::new(PassThrough));
        let loss = tape.mean_all(tape.square(q));
        let grads = tape.backward(loss);
        // Straight-through: gradient of mean(q²) w.r.t. q, forwarded to x.
        let gx = grads.get(x).unwrap();
        let expect = 2.0 * 2.0 / 6.0; // d/dq mean(q²) with q = round(1.5) = 2
        for v in gx.iter() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = mean(x ⊙ x) uses x twice; gradient must sum both paths.
        let tape = Tape::new();
        let x = tape.input(Mat::from_elem((2, 2), 3.0));
        let loss = tape.mean_all(tape.mul(x, x));
        let grads = tape.backward(loss);
        for v in grads.get(x).unwrap() {
            assert!((v - 2.0 * 3.0 / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = DetRng::new(14, "t");
        let x = rand_mat(&mut rng, 6, 9);
        let y = softmax_rows(&x);
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_centered_unit() {
        let mut rng = DetRng::new(15, "t");
        let x = rand_mat(&mut rng, 4, 16);
        let (y, _) = layer_norm_rows(&x, 0.0);
        for row in y.rows() {
            let c = row.len() as f64;
            let mean = row.sum() / c;
            let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / c;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
