//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! Every node holds a dense 2-D `f64` tensor. The tape is rebuilt for each
//! evaluation; parameters enter as leaves bound to [`ParamStore`] blocks and
//! receive their gradients there on [`Tape::backward`].

mod mlp;
mod params;

pub use mlp::{positional_encode, Activation, Mlp, MlpSpec};
pub use params::{Block, BlockId, ParamStore};

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::math;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(BlockId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    RowSum(Var),
    RowSumSq(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    SumGroups(Var, usize),
    GroupSoftmax(Var, usize),
    AxisAngleQuat(Var),
    AxisAngleMat(Var),
    QuatMul(Var, Var),
    NormalizeQuat(Var),
    MatVec(Var, Var),
    ClampNorm(Var, f64),
    PosEnc(Var, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of every tape node after a backward pass.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Values of every detached node, in creation order.
    detached: Vec<Array2<f64>>,
    /// Substitutes for detached nodes, in creation order.
    frozen: Option<Vec<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `k`-th [`detach`](Self::detach) yields `values[k]`
    /// instead of its input. Differencing a function on such a tape holds
    /// its stop-gradient inputs fixed, matching what backward computes.
    pub fn with_frozen_detached(values: Vec<Array2<f64>>) -> Self {
        Self {
            frozen: Some(values),
            ..Self::default()
        }
    }

    pub fn detached_values(&self) -> &[Array2<f64>] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Leaf bound to a parameter block.
    pub fn param(&mut self, store: &ParamStore, id: BlockId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Copies a node's value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let k = self.detached.len();
        let value = match &self.frozen {
            Some(frozen) => {
                let value = frozen.get(k).expect("fewer frozen values than detached nodes").clone();
                assert_eq!(value.dim(), self.shape(v), "frozen value has the wrong shape");
                value
            }
            None => self.value(v).clone(),
        };
        self.detached.push(value.clone());
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a + b` with the single row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1);
        let value = self.value(a) + self.value(b);
        self.push(value, Op::AddRow(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is n×1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col), (self.shape(a).0, 1), "mul_col shape mismatch");
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col))
    }

    /// Scales all of `a` by the 1×1 node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let k = self.scalar(s);
        let value = self.value(a) * k;
        self.push(value, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.push(value, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(math::sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sin);
        self.push(value, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::cos);
        self.push(value, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum, n×m → n×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(a))
    }

    /// Per-row squared Euclidean norm, n×m → n×1.
    pub fn row_norm_sq(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r))
            .insert_axis(Axis(1));
        self.push(value, Op::RowSumSq(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    /// Row `r` of the output is row `idx[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&src.row(i));
        }
        self.push(value, Op::GatherRows(a, idx))
    }

    /// Sums consecutive groups of `k` rows: (n·k)×m → n×m.
    pub fn sum_groups(&mut self, a: Var, k: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows() % k, 0);
        let n = src.nrows() / k;
        let mut value = Array2::zeros((n, src.ncols()));
        for (r, row) in src.rows().into_iter().enumerate() {
            let mut out = value.row_mut(r / k);
            out += &row;
        }
        self.push(value, Op::SumGroups(a, k))
    }

    /// Softmax over consecutive groups of `k` entries of a column vector.
    pub fn group_softmax(&mut self, a: Var, k: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.ncols(), 1);
        assert_eq!(src.nrows() % k, 0);
        let mut value = src.clone();
        for mut g in value.exact_chunks_mut((k, 1)) {
            let max = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            g.mapv_inplace(|x| (x - max).exp());
            let total = g.sum();
            g.mapv_inplace(|x| x / total);
        }
        self.push(value, Op::GroupSoftmax(a, k))
    }

    /// Axis-angle rows (n×3) to unit quaternion rows (n×4, w first).
    pub fn axis_angle_quat(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((src.nrows(), 4));
        for (r, row) in src.rows().into_iter().enumerate() {
            let q = math::axis_angle_to_quat([row[0], row[1], row[2]]);
            for c in 0..4 {
                value[[r, c]] = q[c];
            }
        }
        self.push(value, Op::AxisAngleQuat(a))
    }

    /// Axis-angle rows (n×3) to row-major rotation matrices (n×9).
    pub fn axis_angle_mat(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((src.nrows(), 9));
        for (r, row) in src.rows().into_iter().enumerate() {
            let m = math::axis_angle_to_mat([row[0], row[1], row[2]]);
            for i in 0..3 {
                for j in 0..3 {
                    value[[r, 3 * i + j]] = m[i][j];
                }
            }
        }
        self.push(value, Op::AxisAngleMat(a))
    }

    /// Row-wise Hamilton product `a ⊗ b`.
    pub fn quat_mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        assert_eq!(self.shape(a).1, 4);
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = Array2::zeros(va.raw_dim());
        for r in 0..va.nrows() {
            let q = math::quat_mul(row4(va, r), row4(vb, r));
            for c in 0..4 {
                value[[r, c]] = q[c];
            }
        }
        self.push(value, Op::QuatMul(a, b))
    }

    /// Row-wise normalization; rows with norm below 1e-8 become the
    /// identity quaternion.
    pub fn normalize_quat(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n < QUAT_DEGENERATE {
                row.assign(&ndarray::arr1(&math::IDENTITY_QUAT));
            } else {
                row.mapv_inplace(|x| x / n);
            }
        }
        self.push(value, Op::NormalizeQuat(a))
    }

    /// Row-wise matrix-vector product: `m` is n×9 (row-major 3×3), `v` n×3.
    pub fn mat_vec(&mut self, m: Var, v: Var) -> Var {
        let (vm, vv) = (self.value(m), self.value(v));
        assert_eq!(vm.ncols(), 9);
        assert_eq!(vv.ncols(), 3);
        assert_eq!(vm.nrows(), vv.nrows());
        let mut value = Array2::zeros((vv.nrows(), 3));
        for r in 0..vv.nrows() {
            for i in 0..3 {
                value[[r, i]] = vm[[r, 3 * i]] * vv[[r, 0]]
                    + vm[[r, 3 * i + 1]] * vv[[r, 1]]
                    + vm[[r, 3 * i + 2]] * vv[[r, 2]];
            }
        }
        self.push(value, Op::MatVec(m, v))
    }

    /// Rescales rows whose Euclidean norm exceeds `max` onto the sphere of
    /// radius `max`.
    pub fn clamp_norm(&mut self, a: Var, max: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > max {
                row.mapv_inplace(|x| x * max / n);
            }
        }
        self.push(value, Op::ClampNorm(a, max))
    }

    /// Sinusoidal encoding with `freqs` octaves, see [`positional_encode`].
    pub fn pos_enc(&mut self, a: Var, freqs: usize) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((src.nrows(), 2 * freqs * src.ncols()));
        for (r, row) in src.rows().into_iter().enumerate() {
            let enc = positional_encode(row.as_slice().expect("standard layout"), freqs);
            value.row_mut(r).assign(&ndarray::arr1(&enc));
        }
        self.push(value, Op::PosEnc(a, freqs))
    }

    /// Backpropagates from a scalar node into the parameter store.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Grads> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, Array2::ones((1, 1)))], store)
    }

    /// Backpropagates explicit upstream gradients. Used where part of the
    /// graph (the rasterizer) is differentiated by hand.
    pub fn backward_seeded(
        &self,
        seeds: &[(Var, Array2<f64>)],
        store: &mut ParamStore,
    ) -> Result<Grads> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.dim() != self.shape(*v) {
                return Err(Error::invalid("seed gradient shape mismatch"));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
        store: &mut ParamStore,
    ) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                *store.grad_mut(*id) += g;
            }
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(g));
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * val(*b));
                accumulate(grads, *b, g * val(*a));
            }
            Op::MulCol(a, c) => {
                accumulate(grads, *a, g * val(*c));
                let gc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                accumulate(grads, *c, gc);
            }
            Op::MulScalar(a, s) => {
                let k = val(*s)[[0, 0]];
                accumulate(grads, *a, g * k);
                let gs = (g * val(*a)).sum();
                accumulate(grads, *s, Array2::from_elem((1, 1), gs));
            }
            Op::Scale(a, k) => accumulate(grads, *a, g * *k),
            Op::Offset(a) => accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                accumulate(grads, *a, ga);
            }
            Op::Sin(a) => accumulate(grads, *a, g * &val(*a).mapv(f64::cos)),
            Op::Cos(a) => accumulate(grads, *a, -(g * &val(*a).mapv(f64::sin))),
            Op::Exp(a) => accumulate(grads, *a, g * &node.value),
            Op::Log(a) => accumulate(grads, *a, g / val(*a)),
            Op::Square(a) => accumulate(grads, *a, g * val(*a) * 2.0),
            Op::Sum(a) => {
                let k = g[[0, 0]];
                accumulate(grads, *a, Array2::from_elem(val(*a).raw_dim(), k));
            }
            Op::RowSum(a) => {
                let ga = Array2::from_shape_fn(val(*a).raw_dim(), |(r, _)| g[[r, 0]]);
                accumulate(grads, *a, ga);
            }
            Op::RowSumSq(a) => {
                let src = val(*a);
                let ga = Array2::from_shape_fn(src.raw_dim(), |(r, c)| 2.0 * src[[r, c]] * g[[r, 0]]);
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    accumulate(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(val(*a).raw_dim());
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    accumulate(grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(val(*a).raw_dim());
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Array2::zeros(val(*a).raw_dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = ga.row_mut(src);
                    row += &g.row(r);
                }
                accumulate(grads, *a, ga);
            }
            Op::SumGroups(a, k) => {
                let ga = Array2::from_shape_fn(val(*a).raw_dim(), |(r, c)| g[[r / k, c]]);
                accumulate(grads, *a, ga);
            }
            Op::GroupSoftmax(a, k) => {
                let y = &node.value;
                let mut ga = Array2::zeros(y.raw_dim());
                for start in (0..y.nrows()).step_by(*k) {
                    let dot: f64 = (start..start + k).map(|r| g[[r, 0]] * y[[r, 0]]).sum();
                    for r in start..start + k {
                        ga[[r, 0]] = y[[r, 0]] * (g[[r, 0]] - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::AxisAngleQuat(a) => {
                let src = val(*a);
                let mut ga = Array2::zeros(src.raw_dim());
                for r in 0..src.nrows() {
                    let v = [src[[r, 0]], src[[r, 1]], src[[r, 2]]];
                    let (s, ds) = half_sinc(math::norm(v));
                    let gw = g[[r, 0]];
                    let gv = [g[[r, 1]], g[[r, 2]], g[[r, 3]]];
                    let gdv = math::dot(gv, v);
                    for j in 0..3 {
                        ga[[r, j]] = -0.5 * s * gw * v[j] + s * gv[j] + ds * gdv * v[j];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::AxisAngleMat(a) => {
                let src = val(*a);
                let mut ga = Array2::zeros(src.raw_dim());
                for r in 0..src.nrows() {
                    let v = [src[[r, 0]], src[[r, 1]], src[[r, 2]]];
                    let gm = [
                        [g[[r, 0]], g[[r, 1]], g[[r, 2]]],
                        [g[[r, 3]], g[[r, 4]], g[[r, 5]]],
                        [g[[r, 6]], g[[r, 7]], g[[r, 8]]],
                    ];
                    let d = axis_angle_mat_vjp(v, &gm);
                    for j in 0..3 {
                        ga[[r, j]] = d[j];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::QuatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Array2::zeros(va.raw_dim());
                let mut gb = Array2::zeros(vb.raw_dim());
                for r in 0..va.nrows() {
                    let (qa, qb, gq) = (row4(va, r), row4(vb, r), row4(g, r));
                    for k in 0..4 {
                        let mut e = [0.0; 4];
                        e[k] = 1.0;
                        ga[[r, k]] = math::quat_dot(gq, math::quat_mul(e, qb));
                        gb[[r, k]] = math::quat_dot(gq, math::quat_mul(qa, e));
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::NormalizeQuat(a) => {
                let src = val(*a);
                let y = &node.value;
                let mut ga = Array2::zeros(src.raw_dim());
                for r in 0..src.nrows() {
                    let n = src.row(r).dot(&src.row(r)).sqrt();
                    if n < QUAT_DEGENERATE {
                        continue;
                    }
                    let yg = y.row(r).dot(&g.row(r));
                    for c in 0..4 {
                        ga[[r, c]] = (g[[r, c]] - y[[r, c]] * yg) / n;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MatVec(m, v) => {
                let (vm, vv) = (val(*m), val(*v));
                let mut gm = Array2::zeros(vm.raw_dim());
                let mut gv = Array2::zeros(vv.raw_dim());
                for r in 0..vv.nrows() {
                    for i in 0..3 {
                        for j in 0..3 {
                            gm[[r, 3 * i + j]] = g[[r, i]] * vv[[r, j]];
                            gv[[r, j]] += g[[r, i]] * vm[[r, 3 * i + j]];
                        }
                    }
                }
                accumulate(grads, *m, gm);
                accumulate(grads, *v, gv);
            }
            Op::ClampNorm(a, max) => {
                let src = val(*a);
                let mut ga = g.clone();
                for r in 0..src.nrows() {
                    let n = src.row(r).dot(&src.row(r)).sqrt();
                    if n > *max {
                        let u = src.row(r).mapv(|x| x / n);
                        let ug = u.dot(&g.row(r));
                        for c in 0..src.ncols() {
                            ga[[r, c]] = (g[[r, c]] - u[c] * ug) * max / n;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::PosEnc(a, freqs) => {
                let src = val(*a);
                let n = src.ncols();
                let mut ga = Array2::zeros(src.raw_dim());
                for r in 0..src.nrows() {
                    for k in 0..*freqs {
                        let w = (1u64 << k) as f64 * std::f64::consts::PI;
                        for c in 0..n {
                            let col = 2 * (k * n + c);
                            let (sn, cs) = math::sin_cos(w * src[[r, c]]);
                            ga[[r, c]] += w * (g[[r, col]] * cs - g[[r, col + 1]] * sn);
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

const QUAT_DEGENERATE: f64 = 1e-8;

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn row4(a: &Array2<f64>, r: usize) -> [f64; 4] {
    [a[[r, 0]], a[[r, 1]], a[[r, 2]], a[[r, 3]]]
}

/// `(sin(θ/2)/θ, s'(θ)/θ)` with a series near zero.
fn half_sinc(theta: f64) -> (f64, f64) {
    if theta < 1e-3 {
        let t2 = theta * theta;
        (0.5 - t2 / 48.0 + t2 * t2 / 3840.0, -1.0 / 24.0 + t2 / 960.0)
    } else {
        let (s, c) = math::sin_cos(0.5 * theta);
        (s / theta, (0.5 * theta * c - s) / (theta * theta * theta))
    }
}

/// Vector-Jacobian product of the Rodrigues map `v ↦ R(v)` for upstream
/// gradient `gm` on the matrix entries.
pub(crate) fn axis_angle_mat_vjp(v: math::Vec3, gm: &math::Mat3) -> math::Vec3 {
    let theta = math::norm(v);
    let (a, b) = math::rodrigues_coeffs(theta);
    let (da, db) = math::rodrigues_coeff_derivs(theta);
    let k = math::skew(v);
    let k2 = math::mat_mul(&k, &k);
    let inner = |m: &math::Mat3| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += gm[i][j] * m[i][j];
            }
        }
        s
    };
    let gk = inner(&k);
    let gk2 = inner(&k2);
    let mut out = [0.0; 3];
    for (j, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[j] = 1.0;
        let ej = math::skew(e);
        let ek = math::mat_mul(&ej, &k);
        let ke = math::mat_mul(&k, &ej);
        let mut sym = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                sym[r][c] = ek[r][c] + ke[r][c];
            }
        }
        *o = a * inner(&ej) + da * v[j] * gk + b * inner(&sym) + db * v[j] * gk2;
    }
    out
}
