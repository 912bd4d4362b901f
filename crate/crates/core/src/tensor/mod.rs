//! Minimal reverse-mode autodiff over `ndarray`.
//!
//! A [`Graph`] is a tape of nodes built during one forward pass. Every op
//! pushes a node holding its value (always in standard layout) plus a boxed
//! backward rule. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients per node; parameter leaves keep their gradients so
//! the optimizer can collect them by parameter id.
//!
//! The engine is generic over [`Elem`] (`f32` for training, `f64` for
//! finite-difference gradient checks). All reductions run in a fixed
//! sequential order so results are bit-reproducible across runs.

mod conv;
mod norm;
mod spatial;

pub use conv::{conv2d_shape, conv_transpose2d_shape};
pub use norm::BatchNormSaved;
pub use spatial::ResizeMode;

use ndarray::{ArrayD, Axis, IxDyn};
use ndarray::linalg::general_mat_mul;

/// Scalar element type the engine works with.
pub trait Elem:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub id: usize,
}

pub(crate) trait BackwardOp<A: Elem> {
    /// Gradient contributions for each parent, in parent order. `None`
    /// entries are skipped (parent does not need a gradient from this op).
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>>;
}

struct NodeMeta<A: Elem> {
    parents: Vec<usize>,
    op: Option<Box<dyn BackwardOp<A>>>,
    needs_grad: bool,
    param: Option<usize>,
}

/// Gradients produced by [`Graph::backward`], indexed by node id.
pub struct Grads<A: Elem> {
    by_node: Vec<Option<ArrayD<A>>>,
}

impl<A: Elem> Grads<A> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<A>> {
        self.by_node.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<A>> {
        self.by_node.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Reverse-mode tape. Rebuilt for every forward pass.
pub struct Graph<A: Elem> {
    vals: Vec<ArrayD<A>>,
    meta: Vec<NodeMeta<A>>,
    /// Training-mode flag read by layers (batch norm statistics).
    pub train: bool,
}

impl<A: Elem> Default for Graph<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Elem> Graph<A> {
    pub fn new() -> Self {
        Graph {
            vals: Vec::new(),
            meta: Vec::new(),
            train: false,
        }
    }

    pub fn train() -> Self {
        Graph {
            vals: Vec::new(),
            meta: Vec::new(),
            train: true,
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn val(&self, v: Var) -> &ArrayD<A> {
        &self.vals[v.id]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.id].shape()
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<A>,
        parents: Vec<usize>,
        op: Option<Box<dyn BackwardOp<A>>>,
        param: Option<usize>,
    ) -> Var {
        debug_assert!(value.is_standard_layout() || value.ndim() == 0);
        let needs_grad =
            param.is_some() || parents.iter().any(|&p| self.meta[p].needs_grad);
        self.vals.push(value);
        self.meta.push(NodeMeta {
            parents,
            op: if needs_grad { op } else { None },
            needs_grad,
            param,
        });
        Var {
            id: self.vals.len() - 1,
        }
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: ArrayD<A>) -> Var {
        let value = to_standard(value);
        self.push(value, vec![], None, None)
    }

    /// Leaf that accumulates a gradient (for gradient checks on inputs).
    pub fn leaf_grad(&mut self, value: ArrayD<A>) -> Var {
        let value = to_standard(value);
        let v = self.push(value, vec![], None, None);
        self.meta[v.id].needs_grad = true;
        v
    }

    /// Leaf bound to a parameter-store entry.
    pub fn param_leaf(&mut self, value: ArrayD<A>, param_id: usize) -> Var {
        let value = to_standard(value);
        self.push(value, vec![], None, Some(param_id))
    }

    /// Walk the tape backwards from a scalar loss.
    pub fn backward(&self, loss: Var) -> Grads<A> {
        assert_eq!(
            self.vals[loss.id].len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.vals[loss.id].shape()
        );
        let mut grads: Vec<Option<ArrayD<A>>> = (0..self.vals.len()).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::ones(self.vals[loss.id].raw_dim()));
        for i in (0..=loss.id).rev() {
            if !self.meta[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(op) = self.meta[i].op.as_ref() else {
                continue; // leaf: keep its gradient
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parents = &self.meta[i].parents;
            let contribs = op.backward(&self.vals, parents, &g);
            debug_assert_eq!(contribs.len(), parents.len());
            for (p, c) in parents.iter().zip(contribs) {
                if let Some(c) = c {
                    if self.meta[*p].needs_grad {
                        accumulate(&mut grads[*p], c);
                    }
                }
            }
        }
        Grads { by_node: grads }
    }

    /// Gradients of all parameter leaves, as `(param_id, grad)` pairs.
    pub fn param_grads(&self, grads: &mut Grads<A>) -> Vec<(usize, ArrayD<A>)> {
        let mut out = Vec::new();
        for (i, m) in self.meta.iter().enumerate() {
            if let Some(pid) = m.param {
                if let Some(g) = grads.by_node[i].take() {
                    out.push((pid, g));
                }
            }
        }
        out
    }
}

fn to_standard<A: Elem>(a: ArrayD<A>) -> ArrayD<A> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn accumulate<A: Elem>(slot: &mut Option<ArrayD<A>>, c: ArrayD<A>) {
    match slot {
        None => *slot = Some(c),
        Some(s) => *s += &c,
    }
}

/// Sum `g` down to `shape` over axes where `shape` has extent 1 or is
/// missing on the left. Inverse of a broadcast.
pub(crate) fn reduce_to_shape<A: Elem>(g: &ArrayD<A>, shape: &[usize]) -> ArrayD<A> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

pub(crate) fn reshape_arr<A: Elem>(a: &ArrayD<A>, shape: &[usize]) -> ArrayD<A> {
    let n: usize = shape.iter().product();
    assert_eq!(a.len(), n, "reshape {:?} -> {:?}", a.shape(), shape);
    a.as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("contiguous reshape")
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

enum Unary<A> {
    Tanh,
    Relu,
    Relu6,
    Exp,
    /// x^p for constant p; defined for x > 0 when p is fractional.
    PowScalar(A),
    /// k*x + c
    AffineScalar(A),
}

struct UnaryBack<A> {
    kind: Unary<A>,
    own: usize,
}

impl<A: Elem> BackwardOp<A> for UnaryBack<A> {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let x = &vals[parents[0]];
        let y = &vals[self.own];
        let one = A::one();
        let d = match &self.kind {
            Unary::Tanh => {
                let mut d = grad.clone();
                ndarray::Zip::from(&mut d).and(y).for_each(|g, &y| *g *= one - y * y);
                d
            }
            Unary::Relu => {
                let mut d = grad.clone();
                ndarray::Zip::from(&mut d).and(x).for_each(|g, &x| {
                    if x <= A::zero() {
                        *g = A::zero();
                    }
                });
                d
            }
            Unary::Relu6 => {
                let six = A::from_f64(6.0);
                let mut d = grad.clone();
                ndarray::Zip::from(&mut d).and(x).for_each(|g, &x| {
                    if x <= A::zero() || x >= six {
                        *g = A::zero();
                    }
                });
                d
            }
            Unary::Exp => {
                let mut d = grad.clone();
                d *= y;
                d
            }
            Unary::PowScalar(p) => {
                let p = *p;
                let mut d = grad.clone();
                ndarray::Zip::from(&mut d)
                    .and(x)
                    .for_each(|g, &x| *g *= p * x.powf(p - one));
                d
            }
            Unary::AffineScalar(k) => {
                let mut d = grad.clone();
                d *= *k;
                d
            }
        };
        vec![Some(d)]
    }
}

enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryBack {
    kind: Binary,
}

impl<A: Elem> BackwardOp<A> for BinaryBack {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        match self.kind {
            Binary::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Binary::Sub => vec![Some(grad.clone()), Some(-grad.clone())],
            Binary::Mul => {
                let a = &vals[parents[0]];
                let b = &vals[parents[1]];
                vec![Some(grad * b), Some(grad * a)]
            }
        }
    }
}

/// `a op b` where `b` may have extent-1 axes to be broadcast.
enum Bcast {
    Mul,
    Div,
}

struct BcastBack {
    kind: Bcast,
}

impl<A: Elem> BackwardOp<A> for BcastBack {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let a = &vals[parents[0]];
        let b = &vals[parents[1]];
        let bb = b.broadcast(a.raw_dim()).expect("broadcast");
        match self.kind {
            Bcast::Mul => {
                let da = grad * &bb;
                let ga = grad * a;
                let db = reduce_to_shape(&(&ga / &bb), b.shape());
                vec![Some(da), Some(db)]
            }
            Bcast::Div => {
                let da = grad / &bb;
                // d/db (a/b) = -a/b^2
                let mut t = grad * a;
                t = &t / &bb;
                t = &t / &bb;
                let db = reduce_to_shape(&(-t), b.shape());
                vec![Some(da), Some(db)]
            }
        }
    }
}

struct SumAllBack {
    n: usize,
    mean: bool,
    shape: Vec<usize>,
}

impl<A: Elem> BackwardOp<A> for SumAllBack {
    fn backward(
        &self,
        _vals: &[ArrayD<A>],
        _parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let g = grad.iter().next().copied().unwrap_or_else(A::zero);
        let g = if self.mean {
            g / A::from_usize(self.n)
        } else {
            g
        };
        vec![Some(ArrayD::from_elem(IxDyn(&self.shape), g))]
    }
}

struct SumAxisKeepBack {
    axis: usize,
    shape: Vec<usize>,
}

impl<A: Elem> BackwardOp<A> for SumAxisKeepBack {
    fn backward(
        &self,
        _vals: &[ArrayD<A>],
        _parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let _ = self.axis;
        let g = grad
            .broadcast(IxDyn(&self.shape))
            .expect("broadcast")
            .to_owned();
        vec![Some(g)]
    }
}

struct ReshapeBack {
    from: Vec<usize>,
}

impl<A: Elem> BackwardOp<A> for ReshapeBack {
    fn backward(
        &self,
        _vals: &[ArrayD<A>],
        _parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        vec![Some(reshape_arr(grad, &self.from))]
    }
}

struct PermuteBack {
    axes: Vec<usize>,
}

impl<A: Elem> BackwardOp<A> for PermuteBack {
    fn backward(
        &self,
        _vals: &[ArrayD<A>],
        _parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let mut inv = vec![0usize; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inv[a] = i;
        }
        let g = grad.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned();
        vec![Some(g)]
    }
}

struct ConcatBack {
    axis: usize,
    sizes: Vec<usize>,
}

impl<A: Elem> BackwardOp<A> for ConcatBack {
    fn backward(
        &self,
        _vals: &[ArrayD<A>],
        _parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut start = 0;
        for &s in &self.sizes {
            let sl = grad
                .slice_axis(Axis(self.axis), ndarray::Slice::from(start..start + s as isize));
            out.push(Some(sl.as_standard_layout().to_owned()));
            start += s as isize;
        }
        out
    }
}

struct SliceColsBack {
    start: usize,
    ncols: usize,
}

impl<A: Elem> BackwardOp<A> for SliceColsBack {
    fn backward(
        &self,
        _vals: &[ArrayD<A>],
        _parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let rows = grad.shape()[0];
        let mut g = ArrayD::<A>::zeros(IxDyn(&[rows, self.ncols]));
        let w = grad.shape()[1];
        for i in 0..rows {
            for j in 0..w {
                g[[i, self.start + j]] = grad[[i, j]];
            }
        }
        vec![Some(g)]
    }
}

struct MatMul2Back;

impl<A: Elem> BackwardOp<A> for MatMul2Back {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let a = vals[parents[0]].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = vals[parents[1]].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let g = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let da = g.dot(&b.t());
        let db = a.t().dot(&g);
        vec![Some(da.into_dyn()), Some(db.into_dyn())]
    }
}

struct BmmBack;

impl<A: Elem> BackwardOp<A> for BmmBack {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let a = &vals[parents[0]];
        let b = &vals[parents[1]];
        let (n, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let p = b.shape()[2];
        let mut da = ArrayD::zeros(IxDyn(&[n, m, k]));
        let mut db = ArrayD::zeros(IxDyn(&[n, k, p]));
        for i in 0..n {
            let ai = a.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
            let bi = b.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
            let gi = grad.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut dai = da.index_axis_mut(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
            general_mat_mul(A::one(), &gi, &bi.t(), A::zero(), &mut dai);
            let mut dbi = db.index_axis_mut(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
            general_mat_mul(A::one(), &ai.t(), &gi, A::zero(), &mut dbi);
        }
        vec![Some(da), Some(db)]
    }
}

struct AddBias2Back;

impl<A: Elem> BackwardOp<A> for AddBias2Back {
    fn backward(
        &self,
        _vals: &[ArrayD<A>],
        _parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let db = grad.sum_axis(Axis(0));
        vec![Some(grad.clone()), Some(db)]
    }
}

struct AddChanBiasBack;

impl<A: Elem> BackwardOp<A> for AddChanBiasBack {
    fn backward(
        &self,
        _vals: &[ArrayD<A>],
        _parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        // grad: (B,C,H,W) -> bias grad over (B,H,W)
        let db = grad.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        vec![Some(grad.clone()), Some(db)]
    }
}

struct SoftmaxLastBack {
    own: usize,
}

impl<A: Elem> BackwardOp<A> for SoftmaxLastBack {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        _parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let y = &vals[self.own];
        let last = y.ndim() - 1;
        let t = y * grad;
        let s = t.sum_axis(Axis(last)).insert_axis(Axis(last));
        let d = &t - &(y * &s.broadcast(y.raw_dim()).unwrap());
        vec![Some(d)]
    }
}

struct NormalizeRowsBack {
    own: usize,
    eps: f64,
}

impl<A: Elem> BackwardOp<A> for NormalizeRowsBack {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let x = &vals[parents[0]];
        let y = &vals[self.own];
        let eps = A::from_f64(self.eps);
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let mut d = ArrayD::zeros(IxDyn(&[m, n]));
        for i in 0..m {
            let xi = x.index_axis(Axis(0), i);
            let yi = y.index_axis(Axis(0), i);
            let gi = grad.index_axis(Axis(0), i);
            let norm = xi.iter().fold(A::zero(), |s, &v| s + v * v).sqrt() + eps;
            let dot = yi.iter().zip(gi.iter()).fold(A::zero(), |s, (&y, &g)| s + y * g);
            let mut di = d.index_axis_mut(Axis(0), i);
            ndarray::Zip::from(&mut di).and(&gi).and(&yi).for_each(|d, &g, &y| {
                *d = (g - y * dot) / norm;
            });
        }
        vec![Some(d)]
    }
}

struct MseBack {
    n: usize,
}

impl<A: Elem> BackwardOp<A> for MseBack {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let r = &vals[parents[0]];
        let t = &vals[parents[1]];
        let g = grad.iter().next().copied().unwrap();
        let k = A::from_f64(2.0) / A::from_usize(self.n) * g;
        let dr = (r - t) * k;
        let dt = -dr.clone();
        vec![Some(dr), Some(dt)]
    }
}

/// Per-sample normalized weighted squared error over flattened images:
/// `L = mean_b [ sum_i w_bi (r_bi - t_bi)^2 / sum_i w_bi ]`.
struct WeightedMseBack<A> {
    per_sample: Vec<A>,
    wsum: Vec<A>,
}

impl<A: Elem> BackwardOp<A> for WeightedMseBack<A> {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let r = &vals[parents[0]];
        let t = &vals[parents[1]];
        let w = &vals[parents[2]];
        let g = grad.iter().next().copied().unwrap();
        let b = r.shape()[0];
        let p = r.shape()[1];
        let binv = A::one() / A::from_usize(b);
        let mut dr = ArrayD::zeros(r.raw_dim());
        let mut dw = ArrayD::zeros(w.raw_dim());
        for bi in 0..b {
            let s = self.wsum[bi];
            let lb = self.per_sample[bi];
            let two = A::from_f64(2.0);
            for i in 0..p {
                let e = r[[bi, i]] - t[[bi, i]];
                let wi = w[[bi, i]];
                dr[[bi, i]] = two * wi / s * e * binv * g;
                dw[[bi, i]] = (e * e - lb) / s * binv * g;
            }
        }
        let dt = -dr.clone();
        vec![Some(dr), Some(dt), Some(dw)]
    }
}

struct SolveLinBack {
    own: usize,
}

impl<A: Elem> BackwardOp<A> for SolveLinBack {
    fn backward(
        &self,
        vals: &[ArrayD<A>],
        parents: &[usize],
        grad: &ArrayD<A>,
    ) -> Vec<Option<ArrayD<A>>> {
        let a = &vals[parents[0]];
        let x = &vals[self.own];
        let at = a
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .t()
            .as_standard_layout()
            .to_owned();
        let db = solve_dense(&at.into_dyn(), grad).expect("solve backward");
        // dA = -dB . X^T
        let db2 = db.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let da = -db2.dot(&x2.t());
        vec![Some(da.into_dyn()), Some(db)]
    }
}

/// Dense linear solve `A X = B` by Gaussian elimination with partial
/// pivoting. Returns `None` when `A` is numerically singular.
pub fn solve_dense<A: Elem>(a: &ArrayD<A>, b: &ArrayD<A>) -> Option<ArrayD<A>> {
    let n = a.shape()[0];
    assert_eq!(a.shape()[1], n);
    let m = b.shape()[1];
    let mut lu: Vec<A> = a.iter().copied().collect();
    let mut x: Vec<A> = b.iter().copied().collect();
    let tiny = A::from_f64(1e-300);
    for col in 0..n {
        let mut piv = col;
        let mut best = lu[col * n + col].abs();
        for row in col + 1..n {
            let v = lu[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best <= tiny || !best.is_finite() {
            return None;
        }
        if piv != col {
            for k in 0..n {
                lu.swap(col * n + k, piv * n + k);
            }
            for k in 0..m {
                x.swap(col * m + k, piv * m + k);
            }
        }
        let d = lu[col * n + col];
        for row in col + 1..n {
            let f = lu[row * n + col] / d;
            if f == A::zero() {
                continue;
            }
            for k in col..n {
                let v = lu[col * n + k] * f;
                lu[row * n + k] = lu[row * n + k] - v;
            }
            for k in 0..m {
                let v = x[col * m + k] * f;
                x[row * m + k] = x[row * m + k] - v;
            }
        }
    }
    for col in (0..n).rev() {
        let d = lu[col * n + col];
        for k in 0..m {
            let mut acc = x[col * m + k];
            for j in col + 1..n {
                acc = acc - lu[col * n + j] * x[j * m + k];
            }
            x[col * m + k] = acc / d;
        }
    }
    Some(ArrayD::from_shape_vec(IxDyn(&[n, m]), x).unwrap())
}

// ---------------------------------------------------------------------------
// Graph op constructors
// ---------------------------------------------------------------------------

impl<A: Elem> Graph<A> {
    fn unary(&mut self, x: Var, value: ArrayD<A>, kind: Unary<A>) -> Var {
        let own = self.len();
        self.push(value, vec![x.id], Some(Box::new(UnaryBack { kind, own })), None)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.vals[x.id].mapv(|v| v.tanh());
        self.unary(x, v, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.vals[x.id].mapv(|v| if v > A::zero() { v } else { A::zero() });
        self.unary(x, v, Unary::Relu)
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let six = A::from_f64(6.0);
        let v = self.vals[x.id].mapv(|v| {
            if v <= A::zero() {
                A::zero()
            } else if v >= six {
                six
            } else {
                v
            }
        });
        self.unary(x, v, Unary::Relu6)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.vals[x.id].mapv(|v| v.exp());
        self.unary(x, v, Unary::Exp)
    }

    /// Elementwise `x.powf(p)`. Intended for positive inputs when `p` is
    /// fractional (attention weights are strictly positive).
    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Var {
        let pa = A::from_f64(p);
        let v = self.vals[x.id].mapv(|v| v.powf(pa));
        self.unary(x, v, Unary::PowScalar(pa))
    }

    /// `k*x + c` elementwise (works on scalars too).
    pub fn affine_scalar(&mut self, x: Var, k: f64, c: f64) -> Var {
        let ka = A::from_f64(k);
        let ca = A::from_f64(c);
        let v = self.vals[x.id].mapv(|v| ka * v + ca);
        self.unary(x, v, Unary::AffineScalar(ka))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine_scalar(x, k, 0.0)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "binary op shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let v = match kind {
            Binary::Add => &self.vals[a.id] + &self.vals[b.id],
            Binary::Sub => &self.vals[a.id] - &self.vals[b.id],
            Binary::Mul => &self.vals[a.id] * &self.vals[b.id],
        };
        self.push(v, vec![a.id, b.id], Some(Box::new(BinaryBack { kind })), None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }

    /// `a * b` with `b` broadcast over extent-1 axes.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        let bb = self.vals[b.id]
            .broadcast(self.vals[a.id].raw_dim())
            .expect("broadcast");
        let v = &self.vals[a.id] * &bb;
        self.push(v, vec![a.id, b.id], Some(Box::new(BcastBack { kind: Bcast::Mul })), None)
    }

    /// `a / b` with `b` broadcast over extent-1 axes.
    pub fn div_bcast(&mut self, a: Var, b: Var) -> Var {
        let bb = self.vals[b.id]
            .broadcast(self.vals[a.id].raw_dim())
            .expect("broadcast");
        let v = &self.vals[a.id] / &bb;
        self.push(v, vec![a.id, b.id], Some(Box::new(BcastBack { kind: Bcast::Div })), None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = self.vals[x.id].len();
        let s = self.vals[x.id].iter().fold(A::zero(), |acc, &v| acc + v);
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(
            v,
            vec![x.id],
            Some(Box::new(SumAllBack { n, mean: false, shape })),
            None,
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = self.vals[x.id].len();
        let s = self.vals[x.id].iter().fold(A::zero(), |acc, &v| acc + v);
        let v = ArrayD::from_elem(IxDyn(&[]), s / A::from_usize(n));
        self.push(
            v,
            vec![x.id],
            Some(Box::new(SumAllBack { n, mean: true, shape })),
            None,
        )
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis_keep(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let v = self.vals[x.id].sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.push(
            to_standard(v),
            vec![x.id],
            Some(Box::new(SumAxisKeepBack { axis, shape })),
            None,
        )
    }

    /// Columns `[start, end)` of a 2D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        assert!(start < end && end <= s[1]);
        let v = self.vals[x.id]
            .slice_axis(Axis(1), ndarray::Slice::from(start as isize..end as isize))
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            vec![x.id],
            Some(Box::new(SliceColsBack { start, ncols: s[1] })),
            None,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let from = self.shape(x).to_vec();
        let v = reshape_arr(&self.vals[x.id], shape);
        self.push(v, vec![x.id], Some(Box::new(ReshapeBack { from })), None)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let v = self.vals[x.id]
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            vec![x.id],
            Some(Box::new(PermuteBack { axes: axes.to_vec() })),
            None,
        )
    }

    pub fn concat(&mut self, axis: usize, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs.iter().map(|x| self.vals[x.id].view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes = xs.iter().map(|x| self.shape(*x)[axis]).collect();
        let parents = xs.iter().map(|x| x.id).collect();
        self.push(
            to_standard(v),
            parents,
            Some(Box::new(ConcatBack { axis, sizes })),
            None,
        )
    }

    /// `(M,K) x (K,N) -> (M,N)`
    pub fn matmul2(&mut self, a: Var, b: Var) -> Var {
        let av = self.vals[a.id].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = self.vals[b.id].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul2 inner dim");
        let v = av.dot(&bv).into_dyn();
        self.push(v, vec![a.id, b.id], Some(Box::new(MatMul2Back)), None)
    }

    /// Batched matmul `(N,M,K) x (N,K,P) -> (N,M,P)`
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (n, m, k) = {
            let s = self.shape(a);
            (s[0], s[1], s[2])
        };
        let (nb, kb, p) = {
            let s = self.shape(b);
            (s[0], s[1], s[2])
        };
        assert_eq!(n, nb, "bmm batch");
        assert_eq!(k, kb, "bmm inner dim");
        let mut v = ArrayD::zeros(IxDyn(&[n, m, p]));
        for i in 0..n {
            let ai = self.vals[a.id].index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
            let bi = self.vals[b.id].index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut vi = v.index_axis_mut(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
            general_mat_mul(A::one(), &ai, &bi, A::zero(), &mut vi);
        }
        self.push(v, vec![a.id, b.id], Some(Box::new(BmmBack)), None)
    }

    /// `(M,N) + bias(N)`
    pub fn add_bias2(&mut self, x: Var, b: Var) -> Var {
        let v = &self.vals[x.id] + &self.vals[b.id].broadcast(self.vals[x.id].raw_dim()).unwrap();
        self.push(v, vec![x.id, b.id], Some(Box::new(AddBias2Back)), None)
    }

    /// `(B,C,H,W) + bias(C)`
    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Var {
        let c = self.shape(x)[1];
        assert_eq!(self.shape(b), [c]);
        let bv = reshape_arr(&self.vals[b.id], &[1, c, 1, 1]);
        let v = &self.vals[x.id] + &bv.broadcast(self.vals[x.id].raw_dim()).unwrap();
        self.push(v, vec![x.id, b.id], Some(Box::new(AddChanBiasBack)), None)
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mut v = self.vals[x.id].clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let mx = lane.iter().fold(A::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut s = A::zero();
            for e in lane.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            for e in lane.iter_mut() {
                *e /= s;
            }
        }
        let own = self.len();
        self.push(v, vec![x.id], Some(Box::new(SoftmaxLastBack { own })), None)
    }

    /// Rows of `(M,N)` scaled to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let eps = 1e-12;
        let epsa = A::from_f64(eps);
        let mut v = self.vals[x.id].clone();
        for mut row in v.rows_mut() {
            let n = row.iter().fold(A::zero(), |s, &v| s + v * v).sqrt() + epsa;
            for e in row.iter_mut() {
                *e /= n;
            }
        }
        let own = self.len();
        self.push(v, vec![x.id], Some(Box::new(NormalizeRowsBack { own, eps })), None)
    }

    /// Mean squared error over all elements; scalar output.
    pub fn mse(&mut self, recon: Var, target: Var) -> Var {
        assert_eq!(self.shape(recon), self.shape(target), "mse shape mismatch");
        let n = self.vals[recon.id].len();
        let mut s = A::zero();
        ndarray::Zip::from(&self.vals[recon.id])
            .and(&self.vals[target.id])
            .for_each(|&r, &t| {
                let e = r - t;
                s += e * e;
            });
        let v = ArrayD::from_elem(IxDyn(&[]), s / A::from_usize(n));
        self.push(v, vec![recon.id, target.id], Some(Box::new(MseBack { n })), None)
    }

    /// Per-sample normalized weighted squared error; see module docs.
    /// All inputs are `(B, P)` with `P` the flattened pixel count.
    pub fn weighted_mse_norm(&mut self, recon: Var, target: Var, weights: Var) -> Var {
        let (b, p) = {
            let s = self.shape(recon);
            (s[0], s[1])
        };
        assert_eq!(self.shape(target), [b, p]);
        assert_eq!(self.shape(weights), [b, p]);
        let r = &self.vals[recon.id];
        let t = &self.vals[target.id];
        let w = &self.vals[weights.id];
        let mut per_sample = Vec::with_capacity(b);
        let mut wsum = Vec::with_capacity(b);
        let mut total = A::zero();
        for bi in 0..b {
            let mut s = A::zero();
            let mut num = A::zero();
            for i in 0..p {
                let e = r[[bi, i]] - t[[bi, i]];
                num += w[[bi, i]] * e * e;
                s += w[[bi, i]];
            }
            let lb = num / s;
            per_sample.push(lb);
            wsum.push(s);
            total += lb;
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total / A::from_usize(b));
        self.push(
            v,
            vec![recon.id, target.id, weights.id],
            Some(Box::new(WeightedMseBack { per_sample, wsum })),
            None,
        )
    }

    /// Solve `A X = B` for square `A (N,N)`, `B (N,M)`. Differentiable in
    /// both arguments. Panics on singular systems (callers validate).
    pub fn solve_lin(&mut self, a: Var, b: Var) -> Var {
        let v = solve_dense(&self.vals[a.id], &self.vals[b.id])
            .expect("solve_lin: singular system");
        let own = self.len();
        self.push(v, vec![a.id, b.id], Some(Box::new(SolveLinBack { own })), None)
    }

    /// Identity with gradients blocked.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.vals[x.id].clone();
        self.constant(v)
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Gradcheck driver: builds the graph with `build`, compares analytic
    /// input gradient against central differences.
    fn gradcheck(shape: &[usize], build: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let x0 = rand_arr(shape, &mut rng);
        let mut g = Graph::<f64>::new();
        let x = g.leaf_grad(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic: Vec<f64> = grads.get(x).unwrap().iter().copied().collect();
        let flat: Vec<f64> = x0.iter().copied().collect();
        let numeric = numeric_grad(
            |v| {
                let arr = ArrayD::from_shape_vec(IxDyn(shape), v.to_vec()).unwrap();
                let mut g = Graph::<f64>::new();
                let x = g.constant(arr);
                let loss = build(&mut g, x);
                g.val(loss).iter().next().copied().unwrap()
            },
            &flat,
            1e-5,
        );
        max_rel_err(&analytic, &numeric)
    }

    #[test]
    fn unary_op_gradients() {
        assert!(gradcheck(&[3, 4], |g, x| {
            let y = g.tanh(x);
            g.sum_all(y)
        }) < 1e-7);
        assert!(gradcheck(&[3, 4], |g, x| {
            let y = g.exp(x);
            g.mean_all(y)
        }) < 1e-7);
        assert!(gradcheck(&[6], |g, x| {
            // keep away from the relu kink
            let y = g.affine_scalar(x, 1.0, 3.0);
            let y = g.relu(y);
            g.sum_all(y)
        }) < 1e-7);
        assert!(gradcheck(&[6], |g, x| {
            let y = g.affine_scalar(x, 0.5, 2.0); // in (1.5, 2.5), inside relu6 band
            let y = g.relu6(y);
            g.sum_all(y)
        }) < 1e-7);
        assert!(gradcheck(&[5], |g, x| {
            let y = g.affine_scalar(x, 0.25, 1.0); // positive inputs for powf
            let y = g.pow_scalar(y, 1.7);
            g.sum_all(y)
        }) < 1e-6);
    }

    #[test]
    fn binary_and_bcast_gradients() {
        assert!(gradcheck(&[2, 3], |g, x| {
            let y = g.mul(x, x);
            let z = g.add(y, x);
            g.sum_all(z)
        }) < 1e-7);
        assert!(gradcheck(&[2, 4], |g, x| {
            let c = g.constant(ArrayD::from_elem(IxDyn(&[2, 1]), 0.7));
            let y = g.mul_bcast(x, c);
            g.sum_all(y)
        }) < 1e-7);
        // div_bcast: gradient w.r.t. the divisor
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let num = rand_arr(&[3, 4], &mut rng);
        let err = {
            let den0 = ArrayD::from_shape_fn(IxDyn(&[3, 1]), |_| rng.gen_range(0.5..1.5));
            let mut g = Graph::<f64>::new();
            let n = g.constant(num.clone());
            let d = g.leaf_grad(den0.clone());
            let y = g.div_bcast(n, d);
            let loss = g.sum_all(y);
            let grads = g.backward(loss);
            let analytic: Vec<f64> = grads.get(d).unwrap().iter().copied().collect();
            let flat: Vec<f64> = den0.iter().copied().collect();
            let numeric = numeric_grad(
                |v| {
                    let arr = ArrayD::from_shape_vec(IxDyn(&[3, 1]), v.to_vec()).unwrap();
                    let mut g = Graph::<f64>::new();
                    let n = g.constant(num.clone());
                    let d = g.constant(arr);
                    let y = g.div_bcast(n, d);
                    let loss = g.sum_all(y);
                    g.val(loss)[IxDyn(&[])]
                },
                &flat,
                1e-5,
            );
            max_rel_err(&analytic, &numeric)
        };
        assert!(err < 1e-7, "div_bcast divisor grad err {err}");
    }

    #[test]
    fn shape_op_gradients() {
        assert!(gradcheck(&[2, 3, 4], |g, x| {
            let y = g.permute(x, &[2, 0, 1]);
            let y = g.reshape(y, &[4, 6]);
            let z = g.mul(y, y);
            g.sum_all(z)
        }) < 1e-7);
        assert!(gradcheck(&[2, 6], |g, x| {
            let y = g.concat(1, &[x, x]);
            let z = g.mul(y, y);
            g.mean_all(z)
        }) < 1e-7);
        assert!(gradcheck(&[3, 5], |g, x| {
            let s = g.sum_axis_keep(x, 1);
            let y = g.div_bcast(x, s);
            let z = g.mul(y, y);
            g.sum_all(z)
        }) < 1e-6);
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let b0 = rand_arr(&[4, 3], &mut rng);
        assert!(gradcheck(&[2, 4], |g, x| {
            let b = g.constant(b0.clone());
            let y = g.matmul2(x, b);
            let z = g.mul(y, y);
            g.sum_all(z)
        }) < 1e-7);
        let bb = rand_arr(&[2, 4, 3], &mut rng);
        assert!(gradcheck(&[2, 3, 4], |g, x| {
            let b = g.constant(bb.clone());
            let y = g.bmm(x, b);
            g.sum_all(y)
        }) < 1e-7);
        // grads also flow into the second operand
        let a0 = rand_arr(&[3, 4], &mut rng);
        assert!(gradcheck(&[4, 2], |g, x| {
            let a = g.constant(a0.clone());
            let y = g.matmul2(a, x);
            let z = g.mul(y, y);
            g.sum_all(z)
        }) < 1e-7);
    }

    #[test]
    fn softmax_and_normalize_gradients() {
        assert!(gradcheck(&[3, 5], |g, x| {
            let y = g.softmax_last(x);
            let z = g.mul(y, y);
            g.sum_all(z)
        }) < 1e-6);
        assert!(gradcheck(&[2, 4], |g, x| {
            let y = g.normalize_rows(x);
            let w = g.constant(ArrayD::from_shape_fn(IxDyn(&[2, 4]), |ix| {
                (ix[0] as f64) - 0.3 * (ix[1] as f64)
            }));
            let z = g.mul(y, w);
            g.sum_all(z)
        }) < 1e-6);
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let tgt = rand_arr(&[2, 9], &mut rng);
        assert!(gradcheck(&[2, 9], |g, x| {
            let t = g.constant(tgt.clone());
            g.mse(x, t)
        }) < 1e-7);
        let w = ArrayD::from_shape_fn(IxDyn(&[2, 9]), |_| rng.gen_range(0.1..1.0));
        assert!(gradcheck(&[2, 9], |g, x| {
            let t = g.constant(tgt.clone());
            let wv = g.constant(w.clone());
            g.weighted_mse_norm(x, t, wv)
        }) < 1e-7);
        // gradient w.r.t. the weights as well
        let recon = rand_arr(&[2, 9], &mut rng);
        let err = {
            let w0 = ArrayD::from_shape_fn(IxDyn(&[2, 9]), |_| rng.gen_range(0.1..1.0));
            let mut g = Graph::<f64>::new();
            let r = g.constant(recon.clone());
            let t = g.constant(tgt.clone());
            let wv = g.leaf_grad(w0.clone());
            let loss = g.weighted_mse_norm(r, t, wv);
            let grads = g.backward(loss);
            let analytic: Vec<f64> = grads.get(wv).unwrap().iter().copied().collect();
            let flat: Vec<f64> = w0.iter().copied().collect();
            let numeric = numeric_grad(
                |v| {
                    let arr = ArrayD::from_shape_vec(IxDyn(&[2, 9]), v.to_vec()).unwrap();
                    let mut g = Graph::<f64>::new();
                    let r = g.constant(recon.clone());
                    let t = g.constant(tgt.clone());
                    let wv = g.constant(arr);
                    let loss = g.weighted_mse_norm(r, t, wv);
                    g.val(loss)[IxDyn(&[])]
                },
                &flat,
                1e-5,
            );
            max_rel_err(&analytic, &numeric)
        };
        assert!(err < 1e-6, "weighted_mse weight grad err {err}");
    }

    #[test]
    fn solve_lin_gradient_and_correctness() {
        // well-conditioned SPD system
        let a0 = {
            let mut rng = ChaCha12Rng::seed_from_u64(5);
            let m = rand_arr(&[3, 3], &mut rng);
            let m2 = m.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let spd = m2.t().dot(&m2) + ndarray::Array2::<f64>::eye(3) * 2.0;
            spd.into_dyn()
        };
        let b0 = {
            let mut rng = ChaCha12Rng::seed_from_u64(6);
            rand_arr(&[3, 2], &mut rng)
        };
        // correctness: A x = b
        let x = solve_dense(&a0, &b0).unwrap();
        let a2 = a0.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let r = a2.dot(&x2);
        for (u, v) in r.iter().zip(b0.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
        // gradient w.r.t. B
        assert!(gradcheck(&[3, 2], |g, b| {
            let a = g.constant(a0.clone());
            let x = g.solve_lin(a, b);
            let z = g.mul(x, x);
            g.sum_all(z)
        }) < 1e-6);
        // gradient w.r.t. A
        let errs = {
            let mut g = Graph::<f64>::new();
            let a = g.leaf_grad(a0.clone());
            let b = g.constant(b0.clone());
            let x = g.solve_lin(a, b);
            let z = g.mul(x, x);
            let loss = g.sum_all(z);
            let grads = g.backward(loss);
            let analytic: Vec<f64> = grads.get(a).unwrap().iter().copied().collect();
            let flat: Vec<f64> = a0.iter().copied().collect();
            let numeric = numeric_grad(
                |v| {
                    let arr = ArrayD::from_shape_vec(IxDyn(&[3, 3]), v.to_vec()).unwrap();
                    let mut g = Graph::<f64>::new();
                    let a = g.constant(arr);
                    let b = g.constant(b0.clone());
                    let x = g.solve_lin(a, b);
                    let z = g.mul(x, x);
                    let loss = g.sum_all(z);
                    g.val(loss)[IxDyn(&[])]
                },
                &flat,
                1e-5,
            );
            max_rel_err(&analytic, &numeric)
        };
        assert!(errs < 1e-5, "solve A-grad err {errs}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_grad(ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        let gx = grads.get(x).unwrap();
        // only the non-detached path contributes: dy/dx = d = 2
        for v in gx.iter() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }
}
