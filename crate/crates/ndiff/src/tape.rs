//! The recording tape: eager forward evaluation plus a reverse pass with a
//! hand-written rule per operator.
//!
//! Nodes are appended in construction order, which is therefore already a
//! topological order; `backward` walks it once in reverse.  Only nodes that
//! (transitively) depend on a parameter leaf participate in the reverse pass,
//! so constants — index matrices, masks — cost nothing at backward time.

use crate::tensor::{gelu_grad, gelu_value, gemm, gemm_nt, gemm_tn, softmax_rows};
use crate::{shape_string, Error, Result, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Bmm(Var, Var),
    BmmNT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, T),
    MulScalar(Var, T),
    RowScale(Var, Var),
    Transpose102(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    MeanRows(Var),
    Softmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Log(Var),
    SumAll(Var),
    MeanAll(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// The gradient of the loss with respect to `var`, if any path reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Tracked leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf: data the reverse pass treats as fixed.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Matmul(a, b)
            | Op::MatmulNT(a, b)
            | Op::Bmm(a, b)
            | Op::BmmNT(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Mul(a, b)
            | Op::RowScale(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.nodes[x.0].needs_grad
                    || self.nodes[gamma.0].needs_grad
                    || self.nodes[beta.0].needs_grad
            }
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => {
                parts.iter().any(|p| self.nodes[p.0].needs_grad)
            }
            Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Transpose102(a)
            | Op::Reshape(a)
            | Op::SliceRows(a, _)
            | Op::Gather(a, _)
            | Op::Pick(a, _)
            | Op::MeanRows(a)
            | Op::Softmax(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Log(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => self.nodes[a.0].needs_grad,
        };
        self.push(value, op, needs_grad)
    }

    fn dims(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.dims()
    }

    fn mismatch(op: &'static str, expected: String, got: &[usize]) -> Error {
        Error::ShapeMismatch {
            op,
            expected,
            got: shape_string(got),
        }
    }

    // -- binary linear algebra -------------------------------------------------

    /// `a[m,k] · b[k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Self::mismatch(
                "matmul",
                format!("[m, k] x [k, n], lhs {}", shape_string(&da)),
                &db,
            ));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        Ok(self.push_op(Tensor::from_vec(&[m, n], out), Op::Matmul(a, b)))
    }

    /// `a[m,k] · b[n,k]ᵀ -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() != 2 || db.len() != 2 || da[1] != db[1] {
            return Err(Self::mismatch(
                "matmul_nt",
                format!("[m, k] x [n, k], lhs {}", shape_string(&da)),
                &db,
            ));
        }
        let (m, k, n) = (da[0], da[1], db[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        Ok(self.push_op(Tensor::from_vec(&[m, n], out), Op::MatmulNT(a, b)))
    }

    /// Batched `a[b,m,k] · c[b,k,n] -> [b,m,n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() != 3 || db.len() != 3 || da[0] != db[0] || da[2] != db[1] {
            return Err(Self::mismatch(
                "bmm",
                format!("[b, m, k] x [b, k, n], lhs {}", shape_string(&da)),
                &db,
            ));
        }
        let (bs, m, k, n) = (da[0], da[1], da[2], db[2]);
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push_op(Tensor::from_vec(&[bs, m, n], out), Op::Bmm(a, b)))
    }

    /// Batched `a[b,m,k] · c[b,n,k]ᵀ -> [b,m,n]`
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() != 3 || db.len() != 3 || da[0] != db[0] || da[2] != db[2] {
            return Err(Self::mismatch(
                "bmm_nt",
                format!("[b, m, k] x [b, n, k], lhs {}", shape_string(&da)),
                &db,
            ));
        }
        let (bs, m, k, n) = (da[0], da[1], da[2], db[1]);
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm_nt(
                m,
                k,
                n,
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push_op(Tensor::from_vec(&[bs, m, n], out), Op::BmmNT(a, b)))
    }

    // -- elementwise -----------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            let expected = shape_string(self.dims(a));
            return Err(Self::mismatch("add", expected, self.dims(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push_op(Tensor::from_vec(&dims, out), Op::Add(a, b)))
    }

    /// Adds `bias[n]` to every row of `a[..., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let da = self.dims(a).to_vec();
        let n = *da.last().unwrap_or(&0);
        if self.dims(bias) != [n] {
            return Err(Self::mismatch(
                "add_bias",
                format!("[{}]", n),
                self.dims(bias),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(&b).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push_op(Tensor::from_vec(&da, out), Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            let expected = shape_string(self.dims(a));
            return Err(Self::mismatch("mul", expected, self.dims(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push_op(Tensor::from_vec(&dims, out), Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push_op(value, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push_op(value, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, T::one())
    }

    /// Scales row `i` of `a[m,n]` by `s[i]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let da = self.dims(a).to_vec();
        if da.len() != 2 || self.dims(s) != [da[0]] {
            return Err(Self::mismatch(
                "row_scale",
                format!("[m, n] with scale [m], lhs {}", shape_string(&da)),
                self.dims(s),
            ));
        }
        let (m, n) = (da[0], da[1]);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let si = self.value(s).data()[i];
            out.extend(self.value(a).data()[i * n..(i + 1) * n].iter().map(|&x| x * si));
        }
        Ok(self.push_op(Tensor::from_vec(&[m, n], out), Op::RowScale(a, s)))
    }

    // -- shape manipulation ----------------------------------------------------

    /// `[a,b,c] -> [b,a,c]`
    pub fn transpose_102(&mut self, a: Var) -> Result<Var> {
        let da = self.dims(a).to_vec();
        if da.len() != 3 {
            return Err(Self::mismatch("transpose_102", "[a, b, c]".into(), &da));
        }
        let out = transpose_102_data(&da, self.value(a).data());
        Ok(self.push_op(
            Tensor::from_vec(&[da[1], da[0], da[2]], out),
            Op::Transpose102(a),
        ))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let len: usize = dims.iter().product();
        if dims.len() > 4 {
            return Err(Error::RankOverflow {
                op: "reshape",
                rank: dims.len(),
            });
        }
        if len != self.value(a).len() {
            let expected = format!("{} elements", self.value(a).len());
            return Err(Self::mismatch("reshape", expected, dims));
        }
        let value = self.value(a).reshaped(dims);
        Ok(self.push_op(value, Op::Reshape(a)))
    }

    /// Concatenates along dimension 0; parts must agree on trailing dims.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let head = self.dims(parts[0]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let dp = self.dims(p);
            if dp.len() != head.len() || dp[1..] != head[1..] {
                return Err(Self::mismatch(
                    "concat_rows",
                    format!("[_, {}]", shape_string(&head[1..])),
                    dp,
                ));
            }
            rows += dp[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut dims = head;
        dims[0] = rows;
        Ok(self.push_op(
            Tensor::from_vec(&dims, data),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Concatenates rank-2 parts along dimension 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.dims(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let dp = self.dims(p);
            if dp.len() != 2 || dp[0] != m {
                return Err(Self::mismatch("concat_cols", format!("[{}, _]", m), dp));
            }
            widths.push(dp[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push_op(
            Tensor::from_vec(&[m, total], data),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Rows `start..start + rows` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, rows: usize) -> Result<Var> {
        let da = self.dims(a).to_vec();
        if da.is_empty() || start + rows > da[0] {
            return Err(Error::IndexOutOfBounds {
                op: "slice_rows",
                index: start + rows,
                size: da.first().copied().unwrap_or(0),
            });
        }
        let stride: usize = da[1..].iter().product();
        let data = self.value(a).data()[start * stride..(start + rows) * stride].to_vec();
        let mut dims = da;
        dims[0] = rows;
        Ok(self.push_op(Tensor::from_vec(&dims, data), Op::SliceRows(a, start)))
    }

    /// Selects rows of `table[v, ...]` by index, in order.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let dt = self.dims(table).to_vec();
        if dt.is_empty() {
            return Err(Self::mismatch("gather", "[v, ...]".into(), &dt));
        }
        let stride: usize = dt[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= dt[0] {
                return Err(Error::IndexOutOfBounds {
                    op: "gather",
                    index: i,
                    size: dt[0],
                });
            }
            data.extend_from_slice(&self.value(table).data()[i * stride..(i + 1) * stride]);
        }
        let mut dims = dt;
        dims[0] = idx.len();
        Ok(self.push_op(Tensor::from_vec(&dims, data), Op::Gather(table, idx.to_vec())))
    }

    /// `a[m,n]` and one column index per row -> `[m]` of picked entries.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let da = self.dims(a).to_vec();
        if da.len() != 2 || idx.len() != da[0] {
            return Err(Self::mismatch(
                "pick",
                format!("[m, n] with {} indices", idx.len()),
                &da,
            ));
        }
        let n = da[1];
        let mut data = Vec::with_capacity(da[0]);
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::IndexOutOfBounds {
                    op: "pick",
                    index: j,
                    size: n,
                });
            }
            data.push(self.value(a).data()[i * n + j]);
        }
        Ok(self.push_op(Tensor::from_vec(&[da[0]], data), Op::Pick(a, idx.to_vec())))
    }

    /// Mean over dimension 0 of `a[m,n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let da = self.dims(a).to_vec();
        if da.len() != 2 || da[0] == 0 {
            return Err(Self::mismatch("mean_rows", "[m > 0, n]".into(), &da));
        }
        let (m, n) = (da[0], da[1]);
        let inv = T::one() / T::from_f64(m as f64);
        let mut out = vec![T::zero(); n];
        for row in self.value(a).data().chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        Ok(self.push_op(Tensor::from_vec(&[n], out), Op::MeanRows(a)))
    }

    // -- nonlinearities --------------------------------------------------------

    /// Stable softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let da = self.dims(a).to_vec();
        let n = *da.last().unwrap_or(&0);
        if n == 0 {
            return Err(Self::mismatch("softmax", "[..., n > 0]".into(), &da));
        }
        let mut data = self.value(a).data().to_vec();
        softmax_rows(n, &mut data);
        Ok(self.push_op(Tensor::from_vec(&da, data), Op::Softmax(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push_op(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        self.push_op(value, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_value);
        self.push_op(value, Op::Gelu(a))
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let dx = self.dims(x).to_vec();
        let n = *dx.last().unwrap_or(&0);
        if n == 0 {
            return Err(Self::mismatch("layer_norm", "[..., n > 0]".into(), &dx));
        }
        if self.dims(gamma) != [n] || self.dims(beta) != [n] {
            return Err(Self::mismatch(
                "layer_norm",
                format!("gain and bias of shape [{}]", n),
                self.dims(gamma),
            ));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(n) {
            let (mean, inv_std) = row_moments(row, eps);
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mean) * inv_std * g[j] + b[j]);
            }
        }
        Ok(self.push_op(
            Tensor::from_vec(&dx, out),
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        self.push_op(value, Op::Log(a))
    }

    // -- reductions ------------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        self.push_op(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let len = self.value(a).len().max(1);
        let s: T = self.value(a).iter().copied().sum();
        let m = s / T::from_f64(len as f64);
        self.push_op(Tensor::scalar(m), Op::MeanAll(a))
    }

    // -- composed conveniences -------------------------------------------------

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Inverted-dropout with a caller-supplied 0/1 mask; scaling by
    /// `1 / keep_prob` keeps activations unbiased.
    pub fn dropout(&mut self, x: Var, mask: Var, keep_prob: T) -> Result<Var> {
        let masked = self.mul(x, mask)?;
        Ok(self.mul_scalar(masked, T::one() / keep_prob))
    }

    /// Per-row negative log probability of the target entries: `probs[m,n]`
    /// with one gold column per row -> `[m]`.
    pub fn cross_entropy_from_probs(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let picked = self.pick(probs, targets)?;
        let logp = self.log(picked);
        Ok(self.neg(logp))
    }

    // -- reverse pass ----------------------------------------------------------

    /// Runs the reverse pass from a scalar `loss`, returning gradients for
    /// every tracked node that influences it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss {
                got: shape_string(self.value(loss).dims()),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &grad, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(grad);
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|data| Tensor::from_vec(self.nodes[id].value.dims(), data)))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, update: impl FnOnce(&mut [T])) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        let slot = &mut grads[var.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[var.0].value.len()]);
        }
        update(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (da, db) = (self.dims(*a).to_vec(), self.dims(*b).to_vec());
                let (m, k, n) = (da[0], da[1], db[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| gemm_nt(m, n, k, g, bv, ga));
                self.accumulate(grads, *b, |gb| gemm_tn(k, m, n, av, g, gb));
            }
            Op::MatmulNT(a, b) => {
                let (da, db) = (self.dims(*a).to_vec(), self.dims(*b).to_vec());
                let (m, k, n) = (da[0], da[1], db[0]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| gemm(m, n, k, g, bv, ga));
                self.accumulate(grads, *b, |gb| gemm_tn(n, m, k, g, av, gb));
            }
            Op::Bmm(a, b) => {
                let (da, db) = (self.dims(*a).to_vec(), self.dims(*b).to_vec());
                let (bs, m, k, n) = (da[0], da[1], da[2], db[2]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..bs {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..bs {
                        gemm_tn(
                            k,
                            m,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::BmmNT(a, b) => {
                let (da, db) = (self.dims(*a).to_vec(), self.dims(*b).to_vec());
                let (bs, m, k, n) = (da[0], da[1], da[2], db[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * n * k..(i + 1) * n * k],
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..bs {
                        gemm_tn(
                            n,
                            m,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            &av[i * m * k..(i + 1) * m * k],
                            &mut gb[i * n * k..(i + 1) * n * k],
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::AddBias(a, bias) => {
                let n = self.value(*bias).len();
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |ga| {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                });
            }
            Op::RowScale(a, s) => {
                let n = self.dims(*a)[1];
                let av = self.value(*a).data();
                let sv = self.value(*s).data();
                self.accumulate(grads, *a, |ga| {
                    for (i, (grow, orow)) in g.chunks(n).zip(ga.chunks_mut(n)).enumerate() {
                        let si = sv[i];
                        for (o, &gi) in orow.iter_mut().zip(grow) {
                            *o += gi * si;
                        }
                    }
                });
                self.accumulate(grads, *s, |gs| {
                    for (i, (grow, arow)) in g.chunks(n).zip(av.chunks(n)).enumerate() {
                        let mut acc = T::zero();
                        for (&gi, &ai) in grow.iter().zip(arow) {
                            acc += gi * ai;
                        }
                        gs[i] += acc;
                    }
                });
            }
            Op::Transpose102(a) => {
                let dy = self.dims(Var(id)).to_vec();
                self.accumulate(grads, *a, |ga| {
                    let back = transpose_102_data(&dy, g);
                    add_into(ga, &back);
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.dims(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.dims(p)[1]).sum();
                let mut col = 0;
                for &p in parts {
                    let w = self.dims(p)[1];
                    self.accumulate(grads, p, |gp| {
                        for i in 0..m {
                            let src = &g[i * total + col..i * total + col + w];
                            add_into(&mut gp[i * w..(i + 1) * w], src);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let stride: usize = self.dims(*a)[1..].iter().product();
                let offset = start * stride;
                self.accumulate(grads, *a, |ga| {
                    add_into(&mut ga[offset..offset + g.len()], g)
                });
            }
            Op::Gather(table, idx) => {
                let stride: usize = self.dims(*table)[1..].iter().product::<usize>().max(1);
                self.accumulate(grads, *table, |gt| {
                    for (i, &row) in idx.iter().enumerate() {
                        add_into(
                            &mut gt[row * stride..(row + 1) * stride],
                            &g[i * stride..(i + 1) * stride],
                        );
                    }
                });
            }
            Op::Pick(a, idx) => {
                let n = self.dims(*a)[1];
                self.accumulate(grads, *a, |ga| {
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * n + j] += g[i];
                    }
                });
            }
            Op::MeanRows(a) => {
                let m = self.dims(*a)[0];
                let inv = T::one() / T::from_f64(m as f64);
                self.accumulate(grads, *a, |ga| {
                    for row in ga.chunks_mut(g.len()) {
                        for (o, &gj) in row.iter_mut().zip(g) {
                            *o += gj * inv;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = self.value(Var(id)).data();
                let n = *self.dims(Var(id)).last().unwrap();
                self.accumulate(grads, *a, |ga| {
                    for ((grow, yrow), orow) in
                        g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n))
                    {
                        let mut dot = T::zero();
                        for (&gi, &yi) in grow.iter().zip(yrow) {
                            dot += gi * yi;
                        }
                        for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += (gi - dot) * yi;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.value(Var(id)).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (T::one() - yi);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.value(Var(id)).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * (T::one() - yi * yi);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi * gelu_grad(xi);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let n = *self.dims(*x).last().unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let eps = *eps;
                self.accumulate(grads, *x, |gx| {
                    for ((grow, xrow), orow) in
                        g.chunks(n).zip(xv.chunks(n)).zip(gx.chunks_mut(n))
                    {
                        let (mean, inv_std) = row_moments(xrow, eps);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for (j, (&gi, &xi)) in grow.iter().zip(xrow).enumerate() {
                            let gg = gi * gv[j];
                            let xh = (xi - mean) * inv_std;
                            m1 += gg;
                            m2 += gg * xh;
                        }
                        let inv_n = T::one() / T::from_f64(n as f64);
                        m1 *= inv_n;
                        m2 *= inv_n;
                        for (j, (o, (&gi, &xi))) in
                            orow.iter_mut().zip(grow.iter().zip(xrow)).enumerate()
                        {
                            let xh = (xi - mean) * inv_std;
                            *o += (gi * gv[j] - m1 - xh * m2) * inv_std;
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (grow, xrow) in g.chunks(n).zip(xv.chunks(n)) {
                        let (mean, inv_std) = row_moments(xrow, eps);
                        for (j, (&gi, &xi)) in grow.iter().zip(xrow).enumerate() {
                            gg[j] += gi * (xi - mean) * inv_std;
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi / xi;
                    }
                });
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                self.accumulate(grads, *a, |ga| {
                    for o in ga.iter_mut() {
                        *o += g0;
                    }
                });
            }
            Op::MeanAll(a) => {
                let g0 = g[0] / T::from_f64(self.value(*a).len().max(1) as f64);
                self.accumulate(grads, *a, |ga| {
                    for o in ga.iter_mut() {
                        *o += g0;
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_102_data<T: Scalar>(dims: &[usize], data: &[T]) -> Vec<T> {
    let (a, b, c) = (dims[0], dims[1], dims[2]);
    let mut out = vec![T::zero(); data.len()];
    for i in 0..a {
        for j in 0..b {
            let src = &data[(i * b + j) * c..(i * b + j + 1) * c];
            out[(j * a + i) * c..(j * a + i + 1) * c].copy_from_slice(src);
        }
    }
    out
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::zero();
    for &x in row {
        mean += x;
    }
    mean /= n;
    let mut var = T::zero();
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    var /= n;
    (mean, T::one() / (var + eps).sqrt())
}
