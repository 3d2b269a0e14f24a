use std::borrow::Cow;

use super::{DenseArray, NnError};

/// GELU tanh-approximation constants.
const GELU_C: f64 = 0.797_884_560_8;
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Transpose(Var),
    SwapAxes01(Var),
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    MergeRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    Pick {
        src: Var,
        cols: Vec<usize>,
    },
}

struct Node<'p> {
    value: Cow<'p, DenseArray>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications so that [`Tape::backward`] can replay them
/// in reverse. Parameter leaves borrow their storage for the tape's lifetime.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&DenseArray> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<DenseArray> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn check_finite(op: &'static str, value: &DenseArray) -> Result<(), NnError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &DenseArray, b: &DenseArray) -> NnError {
    NnError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Strided matrix view handed to the GEMM kernel.
#[derive(Clone, Copy)]
struct View {
    ptr: *const f64,
    rs: isize,
    cs: isize,
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product.
///
/// # Safety
/// Every view must address valid memory for its declared extent and `c`
/// must not alias `a` or `b`.
unsafe fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: *mut f64, rsc: isize, csc: isize) {
    matrixmultiply::dgemm(m, k, n, 1.0, a.ptr, a.rs, a.cs, b.ptr, b.rs, b.cs, beta, c, rsc, csc);
}

/// Strides of the `op(X)` view for a stored `rows×cols` matrix.
fn op_strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

struct MatDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    a_cols: usize,
    b_cols: usize,
}

fn matmul_dims(a: &DenseArray, b: &DenseArray, ta: bool, tb: bool) -> Result<MatDims, NnError> {
    let (ar, br) = (a.rank(), b.rank());
    if !(2..=3).contains(&ar) || !(2..=3).contains(&br) || (ar == 2 && br == 3) {
        return Err(mismatch("matmul", a, b));
    }
    let sa = &a.shape()[ar - 2..];
    let sb = &b.shape()[br - 2..];
    let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
    let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
    if ka != kb {
        return Err(mismatch("matmul", a, b));
    }
    let batch = if ar == 3 { a.shape()[0] } else { 1 };
    if br == 3 && b.shape()[0] != batch {
        return Err(mismatch("matmul", a, b));
    }
    Ok(MatDims {
        batch,
        a_batched: ar == 3,
        b_batched: br == 3,
        m,
        k: ka,
        n,
        a_cols: sa[1],
        b_cols: sb[1],
    })
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, DenseArray>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op_name: &'static str, value: DenseArray, op: Op, inputs: &[Var]) -> Result<Var, NnError> {
        check_finite(op_name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Cow::Owned(value), op, requires_grad))
    }

    /// Trainable leaf borrowing its storage.
    pub fn param(&mut self, value: &'p DenseArray) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Trainable leaf owning its storage.
    pub fn param_owned(&mut self, value: DenseArray) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &DenseArray {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Matrix product of the last two axes, `op(a) · op(b)` where `op`
    /// optionally transposes. Supports `2×2`, batched `3×3` and `3×2`
    /// (right operand broadcast over the batch).
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = matmul_dims(av, bv, ta, tb)?;
        let shape = if d.a_batched {
            vec![d.batch, d.m, d.n]
        } else {
            vec![d.m, d.n]
        };
        let mut out = DenseArray::zeros(&shape);
        let (ars, acs) = op_strides(d.a_cols, ta);
        let (brs, bcs) = op_strides(d.b_cols, tb);
        let a_step = if d.a_batched { d.m * d.k } else { 0 };
        let b_step = if d.b_batched { d.k * d.n } else { 0 };
        for bi in 0..d.batch {
            let ap = av.data()[bi * a_step..].as_ptr();
            let bp = bv.data()[bi * b_step..].as_ptr();
            let cp = out.data_mut()[bi * d.m * d.n..].as_mut_ptr();
            // SAFETY: offsets and strides stay inside each buffer by construction of `d`.
            unsafe {
                gemm(
                    d.m,
                    d.k,
                    d.n,
                    View {
                        ptr: ap,
                        rs: ars,
                        cs: acs,
                    },
                    View {
                        ptr: bp,
                        rs: brs,
                        cs: bcs,
                    },
                    0.0,
                    cp,
                    d.n as isize,
                    1,
                );
            }
        }
        self.push_op("matmul", out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.matmul_t(a, b, false, false)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = DenseArray::new(av.shape().to_vec(), data)?;
        self.push_op(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape (bias rows,
    /// attention bias shared across heads).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add_broadcast", av, bv));
        }
        let block = bv.len();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(block) {
            for (x, y) in chunk.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        self.push_op("add_broadcast", out, Op::AddBroadcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NnError> {
        let av = self.value(a);
        let out = DenseArray::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())?;
        self.push_op("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push_op("reshape", out, Op::Reshape(a), &[a])
    }

    /// Transpose of a rank-2 array.
    pub fn transpose(&mut self, a: Var) -> Result<Var, NnError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(NnError::InvalidShape {
                shape: av.shape().to_vec(),
            });
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut out = DenseArray::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = av.data()[i * c + j];
            }
        }
        self.push_op("transpose", out, Op::Transpose(a), &[a])
    }

    /// `[a, b, c] -> [b, a, c]`.
    pub fn swap_axes01(&mut self, a: Var) -> Result<Var, NnError> {
        let av = self.value(a);
        if av.rank() != 3 {
            return Err(NnError::InvalidShape {
                shape: av.shape().to_vec(),
            });
        }
        let out = swap01(av);
        self.push_op("swap_axes01", out, Op::SwapAxes01(a), &[a])
    }

    /// Rows of a rank-2 array (embedding lookup when `src` is a table).
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var, NnError> {
        let sv = self.value(src);
        if sv.rank() != 2 {
            return Err(NnError::InvalidShape {
                shape: sv.shape().to_vec(),
            });
        }
        let (n, c) = (sv.shape()[0], sv.shape()[1]);
        if rows.is_empty() {
            return Err(NnError::EmptyIndex { op: "gather_rows" });
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(NnError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    bound: n,
                });
            }
            data.extend_from_slice(sv.row(r));
        }
        let out = DenseArray::new(vec![rows.len(), c], data)?;
        self.push_op(
            "gather_rows",
            out,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
            &[src],
        )
    }

    /// Scatter the rows of each part into a `total × cols` array; rows not
    /// named by any part are zero.
    pub fn merge_rows(&mut self, total: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var, NnError> {
        let Some((first, _)) = parts.first() else {
            return Err(NnError::EmptyIndex { op: "merge_rows" });
        };
        let cols = self.value(*first).cols();
        let mut out = DenseArray::zeros(&[total, cols]);
        let mut seen = vec![false; total];
        for (v, idx) in &parts {
            let pv = self.value(*v);
            if pv.rank() != 2 || pv.cols() != cols || pv.rows() != idx.len() {
                return Err(NnError::ShapeMismatch {
                    op: "merge_rows",
                    lhs: vec![idx.len(), cols],
                    rhs: pv.shape().to_vec(),
                });
            }
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= total || seen[dst] {
                    return Err(NnError::IndexOutOfRange {
                        op: "merge_rows",
                        index: dst,
                        bound: total,
                    });
                }
                seen[dst] = true;
                out.data_mut()[dst * cols..(dst + 1) * cols].copy_from_slice(pv.row(r));
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        self.push_op("merge_rows", out, Op::MergeRows { parts }, &inputs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push_op("softmax", out, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis followed by the affine
    /// `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [c] {
            return Err(mismatch("layer_norm", xv, gv));
        }
        if bv.shape() != [c] {
            return Err(mismatch("layer_norm", xv, bv));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = DenseArray::zeros(xv.shape());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out.data_mut()[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.push_op(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NnError> {
        let av = self.value(a);
        let out = DenseArray::new(
            av.shape().to_vec(),
            av.data()
                .iter()
                .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
                .collect(),
        )?;
        self.push_op("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NnError> {
        let av = self.value(a);
        let out = DenseArray::new(av.shape().to_vec(), av.data().iter().map(|x| x * x).collect())?;
        self.push_op("square", out, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NnError> {
        let out = DenseArray::scalar(self.value(a).sum());
        self.push_op("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NnError> {
        let av = self.value(a);
        let out = DenseArray::scalar(av.sum() / av.len() as f64);
        self.push_op("mean", out, Op::Mean(a), &[a])
    }

    /// `log Σ exp` over the last axis; drops that axis (rank-1 input gives a
    /// length-1 result).
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var, NnError> {
        let av = self.value(a);
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = av.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            data.push(m + s.ln());
        }
        let shape = if av.rank() == 1 {
            vec![1]
        } else {
            av.shape()[..av.rank() - 1].to_vec()
        };
        let out = DenseArray::new(shape, data)?;
        self.push_op("log_sum_exp", out, Op::LogSumExp(a), &[a])
    }

    /// `out[r] = a[r, cols[r]]` for a rank-2 `a`.
    pub fn pick(&mut self, src: Var, cols: &[usize]) -> Result<Var, NnError> {
        let sv = self.value(src);
        if sv.rank() != 2 || sv.shape()[0] != cols.len() {
            return Err(NnError::ShapeMismatch {
                op: "pick",
                lhs: sv.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let c = sv.shape()[1];
        let mut data = Vec::with_capacity(cols.len());
        for (r, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(NnError::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    bound: c,
                });
            }
            data.push(sv.data()[r * c + j]);
        }
        let out = DenseArray::new(vec![cols.len()], data)?;
        self.push_op(
            "pick",
            out,
            Op::Pick {
                src,
                cols: cols.to_vec(),
            },
            &[src],
        )
    }

    /// Reverse pass from a scalar `loss`. Nodes are visited in exact reverse
    /// recording order; gradients from multiple consumers accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseArray::filled(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<'p>, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = matmul_dims(av, bv, *ta, *tb).expect("validated in forward");
                let (ars, acs) = op_strides(d.a_cols, *ta);
                let (brs, bcs) = op_strides(d.b_cols, *tb);
                let a_step = if d.a_batched { d.m * d.k } else { 0 };
                let b_step = if d.b_batched { d.k * d.n } else { 0 };
                let c_step = d.m * d.n;
                if self.wants(*a) {
                    let ga = grad_buf(grads, *a, av.shape());
                    for bi in 0..d.batch {
                        // SAFETY: same extents as the forward product.
                        unsafe {
                            gemm(
                                d.m,
                                d.n,
                                d.k,
                                View {
                                    ptr: g.data()[bi * c_step..].as_ptr(),
                                    rs: d.n as isize,
                                    cs: 1,
                                },
                                View {
                                    ptr: bv.data()[bi * b_step..].as_ptr(),
                                    rs: bcs,
                                    cs: brs,
                                },
                                1.0,
                                ga.data_mut()[bi * a_step..].as_mut_ptr(),
                                ars,
                                acs,
                            );
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = grad_buf(grads, *b, bv.shape());
                    for bi in 0..d.batch {
                        // SAFETY: same extents as the forward product.
                        unsafe {
                            gemm(
                                d.k,
                                d.m,
                                d.n,
                                View {
                                    ptr: av.data()[bi * a_step..].as_ptr(),
                                    rs: acs,
                                    cs: ars,
                                },
                                View {
                                    ptr: g.data()[bi * c_step..].as_ptr(),
                                    rs: d.n as isize,
                                    cs: 1,
                                },
                                1.0,
                                gb.data_mut()[bi * b_step..].as_mut_ptr(),
                                brs,
                                bcs,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        grad_buf(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    grad_buf(grads, *a, g.shape()).add_assign(g);
                }
                if self.wants(*b) {
                    let gb = grad_buf(grads, *b, g.shape());
                    for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = grad_buf(grads, *a, g.shape());
                    for ((x, gy), o) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += gy * o;
                    }
                }
                if self.wants(*b) {
                    let gb = grad_buf(grads, *b, g.shape());
                    for ((x, gy), o) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gy * o;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.wants(*a) {
                    grad_buf(grads, *a, g.shape()).add_assign(g);
                }
                if self.wants(*b) {
                    let bshape = self.value(*b).shape().to_vec();
                    let gb = grad_buf(grads, *b, &bshape);
                    let block = gb.len();
                    for chunk in g.data().chunks(block) {
                        for (x, y) in gb.data_mut().iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let ga = grad_buf(grads, *a, g.shape());
                    for (x, y) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += c * y;
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let ga = grad_buf(grads, *a, &shape);
                    for (x, y) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let (r, c) = (shape[0], shape[1]);
                    let ga = grad_buf(grads, *a, &shape);
                    for i in 0..r {
                        for j in 0..c {
                            ga.data_mut()[i * c + j] += g.data()[j * r + i];
                        }
                    }
                }
            }
            Op::SwapAxes01(a) => {
                if self.wants(*a) {
                    let back = swap01(g);
                    grad_buf(grads, *a, back.shape()).add_assign(&back);
                }
            }
            Op::GatherRows { src, rows } => {
                if self.wants(*src) {
                    let shape = self.value(*src).shape().to_vec();
                    let c = shape[1];
                    let gs = grad_buf(grads, *src, &shape);
                    for (r, &dst) in rows.iter().enumerate() {
                        let row = &g.data()[r * c..(r + 1) * c];
                        for (x, y) in gs.data_mut()[dst * c..(dst + 1) * c].iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::MergeRows { parts } => {
                let c = g.cols();
                for (v, idx) in parts {
                    if !self.wants(*v) {
                        continue;
                    }
                    let shape = self.value(*v).shape().to_vec();
                    let gv = grad_buf(grads, *v, &shape);
                    for (r, &src) in idx.iter().enumerate() {
                        let row = &g.data()[src * c..(src + 1) * c];
                        for (x, y) in gv.data_mut()[r * c..(r + 1) * c].iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let c = y.cols();
                    let ga = grad_buf(grads, *a, g.shape());
                    for ((gx, gy), yr) in ga
                        .data_mut()
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(y.data().chunks(c))
                    {
                        let dot: f64 = gy.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            gx[j] += yr[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let gv = self.value(*gamma);
                if self.wants(*gamma) {
                    let gg = grad_buf(grads, *gamma, &[c]);
                    for (gy, h) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg.data_mut()[j] += gy[j] * h[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = grad_buf(grads, *beta, &[c]);
                    for gy in g.data().chunks(c) {
                        for j in 0..c {
                            gb.data_mut()[j] += gy[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = grad_buf(grads, *x, g.shape());
                    let mut dh = vec![0.0; c];
                    for (r, (gy, h)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            dh[j] = gy[j] * gv.data()[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * h[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        let out = &mut gx.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let ga = grad_buf(grads, *a, g.shape());
                    for ((gx, gy), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *gx += gy * d;
                    }
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let ga = grad_buf(grads, *a, g.shape());
                    for ((gx, gy), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *gx += 2.0 * x * gy;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let s = if matches!(node.op, Op::Mean(_)) {
                        g.item() / n as f64
                    } else {
                        g.item()
                    };
                    let ga = grad_buf(grads, *a, &shape);
                    for x in ga.data_mut() {
                        *x += s;
                    }
                }
            }
            Op::LogSumExp(a) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let c = av.cols();
                    let shape = av.shape().to_vec();
                    let ga = grad_buf(grads, *a, &shape);
                    for (r, (gx, xr)) in ga.data_mut().chunks_mut(c).zip(av.data().chunks(c)).enumerate() {
                        let lse = node.value.data()[r];
                        let gy = g.data()[r];
                        for j in 0..c {
                            gx[j] += gy * (xr[j] - lse).exp();
                        }
                    }
                }
            }
            Op::Pick { src, cols } => {
                if self.wants(*src) {
                    let shape = self.value(*src).shape().to_vec();
                    let c = shape[1];
                    let gs = grad_buf(grads, *src, &shape);
                    for (r, &j) in cols.iter().enumerate() {
                        gs.data_mut()[r * c + j] += g.data()[r];
                    }
                }
            }
        }
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<DenseArray>], v: Var, shape: &[usize]) -> &'g mut DenseArray {
    grads[v.0].get_or_insert_with(|| DenseArray::zeros(shape))
}

fn swap01(a: &DenseArray) -> DenseArray {
    let (x, y, z) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = DenseArray::zeros(&[y, x, z]);
    for i in 0..x {
        for j in 0..y {
            let src = (i * y + j) * z;
            let dst = (j * x + i) * z;
            out.data_mut()[dst..dst + z].copy_from_slice(&a.data()[src..src + z]);
        }
    }
    out
}
