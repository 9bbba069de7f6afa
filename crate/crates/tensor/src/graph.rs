//! Tape-based reverse-mode differentiation over 2-D matrices.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together with
//! its forward value. [`Graph::backward`] walks the tape in reverse and returns
//! parameter gradients. Graphs are cheap to build; one graph per utterance per
//! step is the intended usage.

use rand::Rng;

use crate::linalg::Lu;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::{Matrix, Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 1-D convolution over the row (time) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    /// Zero rows implicitly added on each side.
    pub padding: usize,
}

impl ConvSpec {
    /// Stride 1 with output length equal to input length (odd kernels).
    pub fn same(kernel: usize, dilation: usize) -> Self {
        assert!(kernel % 2 == 1, "same-padding needs an odd kernel, got {kernel}");
        Self { kernel, dilation, stride: 1, padding: dilation * (kernel - 1) / 2 }
    }

    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input_len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

enum Op<F> {
    Leaf,
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d { x: Var, w: Var, spec: ConvSpec, cols: Option<Matrix<F>> },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, F, F),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix<F>, inv_std: Vec<F> },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    PoolRows(Var, usize),
    PermuteCols(Var, Vec<usize>),
    RelToAbs(Var, usize),
    AbsToRel(Var, usize),
    Sum(Var),
    Dropout(Var, Matrix<F>),
    LogAbsDet { w: Var, inv_t: Matrix<F> },
}

struct Node<F> {
    value: Matrix<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<'s, F: Scalar> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

#[inline]
fn clamp_rel(i: usize, j: usize, window: usize) -> usize {
    let d = j as isize - i as isize;
    (d.clamp(-(window as isize), window as isize) + window as isize) as usize
}

impl<'s, F: Scalar> Graph<'s, F> {
    /// Graph that tracks gradients for parameters and inputs.
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self { store, nodes: Vec::new(), grad_enabled: true }
    }

    /// Graph for pure evaluation; `backward` yields empty gradients.
    pub fn inference(store: &'s ParamStore<F>) -> Self {
        Self { store, nodes: Vec::new(), grad_enabled: false }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<F> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn push_unary(&mut self, a: Var, value: Matrix<F>, op: Op<F>) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn push_binary(&mut self, a: Var, b: Var, value: Matrix<F>, op: Op<F>) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    // ---- leaves -----------------------------------------------------------

    pub fn constant(&mut self, m: Matrix<F>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, m: Matrix<F>) -> Var {
        self.push(m, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        self.push(value, Op::Param(id), true)
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_binary(a, b, value, Op::Mul(a, b))
    }

    /// `a + row` with a `1×C` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects 1x{c}");
        let rv = self.value(row).as_slice();
        let av = self.value(a);
        let value = Matrix::from_fn(r, c, |i, j| av[(i, j)] + rv[j]);
        self.push_binary(a, row, value, Op::AddRow(a, row))
    }

    /// `a ⊙ row` with a `1×C` row broadcast.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects 1x{c}");
        let rv = self.value(row).as_slice();
        let av = self.value(a);
        let value = Matrix::from_fn(r, c, |i, j| av[(i, j)] * rv[j]);
        self.push_binary(a, row, value, Op::MulRow(a, row))
    }

    /// `a ⊙ col` with an `R×1` column broadcast.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col expects {r}x1");
        let cv = self.value(col).as_slice();
        let av = self.value(a);
        let value = Matrix::from_fn(r, c, |i, j| av[(i, j)] * cv[i]);
        self.push_binary(a, col, value, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push_unary(a, value, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push_unary(a, value, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push_unary(a, value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(F::tanh);
        self.push_unary(a, value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push_unary(a, value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(F::exp);
        self.push_unary(a, value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(F::ln);
        self.push_unary(a, value, Op::Log(a))
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(log_sigmoid);
        self.push_unary(a, value, Op::LogSigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push_unary(a, value, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(F::abs);
        self.push_unary(a, value, Op::Abs(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        self.push_unary(a, value, Op::Clamp(a, lo, hi))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (r, c) = self.shape(a);
        let keep = F::c(1.0 / (1.0 - p));
        let mask = Matrix::from_fn(r, c, |_, _| if rng.gen::<f64>() < p { F::zero() } else { keep });
        let value = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push_unary(a, value, Op::Dropout(a, mask))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push_binary(a, b, value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push_unary(a, value, Op::Transpose(a))
    }

    /// Row-major reinterpretation; `T×C → (T/2)×2C` folds frame pairs into channels.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols);
        self.push_unary(a, value, Op::Reshape(a))
    }

    /// Convolution over rows. `w` is `(kernel·C_in)×C_out` with row index
    /// `tap·C_in + channel`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let (t_in, cin) = self.shape(x);
        let (wr, _) = self.shape(w);
        assert_eq!(wr, spec.kernel * cin, "conv1d weight rows {wr} != kernel {} * c_in {cin}", spec.kernel);
        if spec.is_pointwise() {
            let value = self.value(x).matmul(self.value(w));
            return self.push_binary(x, w, value, Op::Conv1d { x, w, spec, cols: None });
        }
        let t_out = spec.output_len(t_in).unwrap_or_else(|| panic!("conv1d: input of {t_in} rows too short"));
        let cols = im2col(self.value(x), spec, t_out);
        let value = cols.matmul(self.value(w));
        self.push_binary(x, w, value, Op::Conv1d { x, w, spec, cols: Some(cols) })
    }

    /// `log|det W|` of a square matrix as a 1×1 value.
    pub fn log_abs_det(&mut self, w: Var) -> Result<Var, TensorError> {
        let lu = Lu::new(self.value(w))?;
        let (_, logdet) = lu.sign_log_det();
        let inv_t = lu.inverse().transpose();
        Ok(self.push_unary(w, Matrix::scalar(logdet), Op::LogAbsDet { w, inv_t }))
    }

    // ---- normalization ----------------------------------------------------

    /// Per-row layer normalization over channels with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let xv = self.value(x);
        let gv = self.value(gain).as_slice();
        let bv = self.value(bias).as_slice();
        let n = F::c(c as f64);
        let eps = F::c(eps);
        let mut xhat = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        let mut value = Matrix::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[(i, j)] = h;
                value[(i, j)] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    /// Row-wise softmax. Entries with `mask[i*cols+j] == false` get exactly zero
    /// weight; a fully masked row yields all zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let (r, c) = self.shape(x);
        if let Some(m) = mask {
            assert_eq!(m.len(), r * c, "softmax mask size");
        }
        let xv = self.value(x);
        let mut value = Matrix::zeros(r, c);
        for i in 0..r {
            let allowed = |j: usize| mask.map_or(true, |m| m[i * c + j]);
            let mut mx = F::neg_infinity();
            for j in 0..c {
                if allowed(j) {
                    mx = mx.max(xv[(i, j)]);
                }
            }
            if mx == F::neg_infinity() {
                continue;
            }
            let mut s = F::zero();
            for j in 0..c {
                if allowed(j) {
                    let e = (xv[(i, j)] - mx).exp();
                    value[(i, j)] = e;
                    s += e;
                }
            }
            for j in 0..c {
                value[(i, j)] /= s;
            }
        }
        self.push_unary(x, value, Op::SoftmaxRows(x))
    }

    // ---- structural -------------------------------------------------------

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).cols_range(start, len);
        self.push_unary(a, value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).rows_range(start, len);
        self.push_unary(a, value, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Output row `t` is input row `idx[t]` (repetition allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut value = Matrix::zeros(idx.len(), c);
        for (t, &i) in idx.iter().enumerate() {
            value.row_mut(t).copy_from_slice(av.row(i));
        }
        self.push_unary(a, value, Op::GatherRows(a, idx))
    }

    /// Output row `s` is the sum of input rows labelled `s`; `n_segments` rows.
    pub fn segment_sum(&mut self, a: Var, labels: Vec<usize>, n_segments: usize) -> Var {
        let av = self.value(a);
        assert_eq!(labels.len(), av.rows(), "segment labels length");
        let c = av.cols();
        let mut value = Matrix::zeros(n_segments, c);
        for (p, &s) in labels.iter().enumerate() {
            for (o, &v) in value.row_mut(s).iter_mut().zip(av.row(p)) {
                *o += v;
            }
        }
        self.push_unary(a, value, Op::SegmentSum(a, labels))
    }

    pub fn segment_mean(&mut self, a: Var, labels: Vec<usize>, n_segments: usize) -> Var {
        let mut counts = vec![0usize; n_segments];
        for &s in &labels {
            counts[s] += 1;
        }
        let inv = Matrix::from_fn(n_segments, 1, |s, _| {
            if counts[s] == 0 {
                F::zero()
            } else {
                F::one() / F::c(counts[s] as f64)
            }
        });
        let sums = self.segment_sum(a, labels, n_segments);
        let inv = self.constant(inv);
        self.mul_col(sums, inv)
    }

    /// Mean over non-overlapping blocks of `factor` rows.
    pub fn pool_rows(&mut self, a: Var, factor: usize) -> Var {
        let av = self.value(a);
        let (r, c) = av.shape();
        assert!(factor > 0 && r % factor == 0, "pool_rows: {r} rows not divisible by {factor}");
        let inv = F::one() / F::c(factor as f64);
        let mut value = Matrix::zeros(r / factor, c);
        for t in 0..r {
            for (o, &v) in value.row_mut(t / factor).iter_mut().zip(av.row(t)) {
                *o += v * inv;
            }
        }
        self.push_unary(a, value, Op::PoolRows(a, factor))
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, a: Var, perm: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(perm.len(), av.cols(), "permutation length");
        let value = Matrix::from_fn(av.rows(), av.cols(), |i, j| av[(i, perm[j])]);
        self.push_unary(a, value, Op::PermuteCols(a, perm))
    }

    /// `T×(2w+1)` relative-offset scores to `T×T`: `out[i,j] = x[i, clip(j-i)+w]`.
    pub fn rel_to_abs(&mut self, a: Var, window: usize) -> Var {
        let av = self.value(a);
        let t = av.rows();
        assert_eq!(av.cols(), 2 * window + 1, "rel_to_abs width");
        let value = Matrix::from_fn(t, t, |i, j| av[(i, clamp_rel(i, j, window))]);
        self.push_unary(a, value, Op::RelToAbs(a, window))
    }

    /// Adjoint of [`Self::rel_to_abs`]: sums `T×T` weights into relative-offset bins.
    pub fn abs_to_rel(&mut self, a: Var, window: usize) -> Var {
        let av = self.value(a);
        let t = av.rows();
        assert_eq!(av.cols(), t, "abs_to_rel expects square input");
        let mut value = Matrix::zeros(t, 2 * window + 1);
        for i in 0..t {
            for j in 0..t {
                value[(i, clamp_rel(i, j, window))] += av[(i, j)];
            }
        }
        self.push_unary(a, value, Op::AbsToRel(a, window))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push_unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, F::one() / F::c(n as f64))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Gradients of the 1×1 node `root` with respect to every parameter and input.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        self.backward_with(root, Matrix::filled(1, 1, F::one()))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Matrix<F>) -> Gradients<F> {
        let mut out = Gradients::empty(self.store.len());
        if !self.grad_enabled || !self.rg(root) {
            return out;
        }
        assert_eq!(seed.shape(), self.shape(root), "backward seed shape");
        let mut grads: Vec<Option<Matrix<F>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, m: Matrix<F>| {
                if self.nodes[v.0].requires_grad {
                    match &mut grads[v.0] {
                        Some(x) => x.add_assign(&m),
                        slot @ None => *slot = Some(m),
                    }
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Input => out.inputs.push((i, g)),
                Op::Param(id) => out.accumulate_param(*id, &g),
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.col_sums());
                    acc(*a, g);
                }
                Op::MulRow(a, row) => {
                    let rv = self.value(*row).as_slice();
                    let (r, c) = g.shape();
                    acc(*a, Matrix::from_fn(r, c, |p, q| g[(p, q)] * rv[q]));
                    acc(*row, g.zip_map(self.value(*a), |x, y| x * y).col_sums());
                }
                Op::MulCol(a, col) => {
                    let cv = self.value(*col).as_slice();
                    let (r, c) = g.shape();
                    acc(*a, Matrix::from_fn(r, c, |p, q| g[(p, q)] * cv[p]));
                    let av = self.value(*a);
                    acc(*col, Matrix::from_fn(r, 1, |p, _| (0..c).map(|q| g[(p, q)] * av[(p, q)]).sum()));
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
                Op::AddScalar(a) => acc(*a, g),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.matmul_t(false, self.value(*b), true));
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).matmul_t(true, &g, false));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, g.reshape(r, c));
                }
                Op::Conv1d { x, w, spec, cols } => {
                    let xv = self.value(*x);
                    match cols {
                        None => {
                            if self.rg(*w) {
                                acc(*w, xv.matmul_t(true, &g, false));
                            }
                            if self.rg(*x) {
                                acc(*x, g.matmul_t(false, self.value(*w), true));
                            }
                        }
                        Some(cols) => {
                            if self.rg(*w) {
                                acc(*w, cols.matmul_t(true, &g, false));
                            }
                            if self.rg(*x) {
                                let dcols = g.matmul_t(false, self.value(*w), true);
                                acc(*x, col2im(&dcols, *spec, xv.rows(), xv.cols()));
                            }
                        }
                    }
                }
                Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |d, x| if x > F::zero() { d } else { F::zero() })),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |d, y| d * (F::one() - y * y))),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y * (F::one() - y))),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y)),
                Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |d, x| d / x)),
                Op::LogSigmoid(a) => acc(*a, g.zip_map(self.value(*a), |d, x| d * sigmoid(-x))),
                Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |d, x| d * (x + x))),
                Op::Abs(a) => acc(
                    *a,
                    g.zip_map(self.value(*a), |d, x| {
                        if x > F::zero() {
                            d
                        } else if x < F::zero() {
                            -d
                        } else {
                            F::zero()
                        }
                    }),
                ),
                Op::Clamp(a, lo, hi) => {
                    acc(*a, g.zip_map(self.value(*a), |d, x| if x > *lo && x < *hi { d } else { F::zero() }))
                }
                Op::Dropout(a, mask) => acc(*a, g.zip_map(mask, |d, m| d * m)),
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (r, c) = g.shape();
                    if self.rg(*bias) {
                        acc(*bias, g.col_sums());
                    }
                    if self.rg(*gain) {
                        acc(*gain, g.zip_map(xhat, |d, h| d * h).col_sums());
                    }
                    if self.rg(*x) {
                        let gv = self.value(*gain).as_slice();
                        let n = F::c(c as f64);
                        let mut dx = Matrix::zeros(r, c);
                        for p in 0..r {
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for q in 0..c {
                                let dh = g[(p, q)] * gv[q];
                                m1 += dh;
                                m2 += dh * xhat[(p, q)];
                            }
                            m1 /= n;
                            m2 /= n;
                            for q in 0..c {
                                let dh = g[(p, q)] * gv[q];
                                dx[(p, q)] = inv_std[p] * (dh - m1 - xhat[(p, q)] * m2);
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut dx = Matrix::zeros(r, c);
                    for p in 0..r {
                        let dot: F = (0..c).map(|q| g[(p, q)] * y[(p, q)]).sum();
                        for q in 0..c {
                            dx[(p, q)] = y[(p, q)] * (g[(p, q)] - dot);
                        }
                    }
                    acc(*a, dx);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut full = Matrix::zeros(r, c);
                    for p in 0..r {
                        full.row_mut(p)[*start..*start + g.cols()].copy_from_slice(g.row(p));
                    }
                    acc(*a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.rg(p) {
                            acc(p, g.cols_range(off, w));
                        }
                        off += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut full = Matrix::zeros(r, c);
                    for p in 0..g.rows() {
                        full.row_mut(start + p).copy_from_slice(g.row(p));
                    }
                    acc(*a, full);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.rg(p) {
                            acc(p, g.rows_range(off, h));
                        }
                        off += h;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut full = Matrix::zeros(r, c);
                    for (t, &src) in idx.iter().enumerate() {
                        for (o, &v) in full.row_mut(src).iter_mut().zip(g.row(t)) {
                            *o += v;
                        }
                    }
                    acc(*a, full);
                }
                Op::SegmentSum(a, labels) => {
                    let c = g.cols();
                    let mut full = Matrix::zeros(labels.len(), c);
                    for (p, &s) in labels.iter().enumerate() {
                        full.row_mut(p).copy_from_slice(g.row(s));
                    }
                    acc(*a, full);
                }
                Op::PoolRows(a, factor) => {
                    let (r, c) = self.shape(*a);
                    let inv = F::one() / F::c(*factor as f64);
                    acc(*a, Matrix::from_fn(r, c, |t, q| g[(t / factor, q)] * inv));
                }
                Op::PermuteCols(a, perm) => {
                    let (r, c) = g.shape();
                    let mut full = Matrix::zeros(r, c);
                    for p in 0..r {
                        for (j, &src) in perm.iter().enumerate() {
                            full[(p, src)] += g[(p, j)];
                        }
                    }
                    acc(*a, full);
                }
                Op::RelToAbs(a, window) => {
                    let t = g.rows();
                    let mut full = Matrix::zeros(t, 2 * window + 1);
                    for p in 0..t {
                        for q in 0..t {
                            full[(p, clamp_rel(p, q, *window))] += g[(p, q)];
                        }
                    }
                    acc(*a, full);
                }
                Op::AbsToRel(a, window) => {
                    let t = g.rows();
                    acc(*a, Matrix::from_fn(t, t, |p, q| g[(p, clamp_rel(p, q, *window))]));
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, Matrix::filled(r, c, g.item()));
                }
                Op::LogAbsDet { w, inv_t } => {
                    let s = g.item();
                    acc(*w, inv_t.map(|x| x * s));
                }
            }
        }
        out
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn log_sigmoid<F: Scalar>(x: F) -> F {
    // log σ(x) = -softplus(-x)
    if x >= F::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    sigmoid(x)
}

pub fn log_sigmoid_scalar<F: Scalar>(x: F) -> F {
    log_sigmoid(x)
}

fn im2col<F: Scalar>(x: &Matrix<F>, spec: ConvSpec, t_out: usize) -> Matrix<F> {
    let (t_in, cin) = x.shape();
    let width = spec.kernel * cin;
    let mut cols = Matrix::zeros(t_out, width);
    for t in 0..t_out {
        let base = (t * spec.stride) as isize - spec.padding as isize;
        let out_row = cols.row_mut(t);
        for j in 0..spec.kernel {
            let src = base + (j * spec.dilation) as isize;
            if src >= 0 && (src as usize) < t_in {
                out_row[j * cin..(j + 1) * cin].copy_from_slice(x.row(src as usize));
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(dcols: &Matrix<F>, spec: ConvSpec, t_in: usize, cin: usize) -> Matrix<F> {
    let mut dx = Matrix::zeros(t_in, cin);
    for t in 0..dcols.rows() {
        let base = (t * spec.stride) as isize - spec.padding as isize;
        let row = dcols.row(t);
        for j in 0..spec.kernel {
            let src = base + (j * spec.dilation) as isize;
            if src >= 0 && (src as usize) < t_in {
                for (o, &v) in dx.row_mut(src as usize).iter_mut().zip(&row[j * cin..(j + 1) * cin]) {
                    *o += v;
                }
            }
        }
    }
    dx
}
