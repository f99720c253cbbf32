//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every value on the tape is a row-major matrix. Rank-1 tensors enter as a
//! single row and scalars as `1x1`. Parameters are borrowed from a
//! [`ParamSet`] rather than copied, and their gradients are reported by
//! parameter id after [`Tape::backward`].

use rand::Rng;

use super::{NumericError, ParamSet, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Storage<'p, T> {
    Owned(Vec<T>),
    Borrowed(&'p [T]),
}

impl<T> Storage<'_, T> {
    fn as_slice(&self) -> &[T] {
        match self {
            Storage::Owned(v) => v,
            Storage::Borrowed(s) => s,
        }
    }
}

enum Op<T> {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, T),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<T>),
    CrossEntropy(Var, Vec<usize>, Vec<T>),
    Cosine(Var, Var, T, T),
    Sum(Var),
    Mean(Var),
    Dropout(Var, Vec<T>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<'p, T> {
    value: Storage<'p, T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    params: Vec<(usize, Vec<T>)>,
    leaves: Vec<(Var, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of each parameter reached by the pass, in parameter-id order.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: usize) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient with respect to a leaf created with `requires_grad`.
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.leaves
            .iter()
            .find(|(v, _)| *v == var)
            .map(|(_, g)| g.as_slice())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

pub struct Tape<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<'p, T>>,
    param_vars: Vec<Option<Var>>,
    track_params: bool,
}

fn mismatch(msg: String) -> NumericError {
    NumericError::ShapeMismatch(msg)
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation: 0.5 x (1 + tanh(k (x + 0.044715 x^3)))
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dinner = k * (one + T::of(3.0) * c * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * dinner;
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// Eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ar.iter().zip(br) {
        s = s + x * y;
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// A tape whose parameter leaves accumulate gradients.
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            track_params: true,
        }
    }

    /// A tape for inference: parameters are treated as constants.
    pub fn inference(params: &'p ParamSet<T>) -> Self {
        let mut t = Self::new(params);
        t.track_params = false;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.dims(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn row(&self, v: Var, r: usize) -> &[T] {
        let (_, c) = self.dims(v);
        &self.value(v)[r * c..(r + 1) * c]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        value: Vec<T>,
        rows: usize,
        cols: usize,
        op: Op<T>,
        needs_grad: bool,
    ) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value: Storage::Owned(value),
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a constant or differentiable input.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Result<Var, NumericError> {
        if !t.is_finite() {
            return Err(NumericError::NonFiniteInput("tape leaf".into()));
        }
        let (r, c) = t.dims2();
        Ok(self.push(t.data().to_vec(), r, c, Op::Leaf, requires_grad))
    }

    pub fn constant(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<T>,
    ) -> Result<Var, NumericError> {
        self.leaf(&Tensor::matrix(rows, cols, data)?, false)
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var, NumericError> {
        self.leaf(&Tensor::matrix(rows, cols, data)?, true)
    }

    /// Node for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let params = self.params;
        let t = params.get(id);
        let (rows, cols) = t.dims2();
        self.nodes.push(Node {
            value: Storage::Borrowed(t.data()),
            rows,
            cols,
            op: Op::Param(id),
            needs_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize), NumericError> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(mismatch(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn zip_map(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, NumericError> {
        let (r, c) = self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, r, c, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[m,n] + row[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(mismatch(format!(
                "add_row: {:?} vs {:?}",
                (m, n),
                self.dims(row)
            )));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|ch| ch.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, m, n, Op::AddRow(a, row), ng))
    }

    /// `a[m,n] * row[1,n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(mismatch(format!(
                "mul_row: {:?} vs {:?}",
                (m, n),
                self.dims(row)
            )));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|ch| ch.iter().zip(r).map(|(&x, &y)| x * y))
            .collect();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, m, n, Op::MulRow(a, row), ng))
    }

    /// `a[m,n] * col[m,1]`: scales each row by its own scalar.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a);
        if self.dims(col) != (m, 1) {
            return Err(mismatch(format!(
                "mul_col: {:?} vs {:?}",
                (m, n),
                self.dims(col)
            )));
        }
        let c = self.value(col);
        let out = self
            .value(a)
            .chunks(n)
            .zip(c)
            .flat_map(|(ch, &s)| ch.iter().map(move |&x| x * s))
            .collect();
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(out, m, n, Op::MulCol(a, col), ng))
    }

    /// `scale * a + shift` with constant scalars.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (m, n) = self.dims(a);
        let (s, b) = (T::of(scale), T::of(shift));
        let out = self.value(a).iter().map(|&x| s * x + b).collect();
        let ng = self.needs(a);
        self.push(out, m, n, Op::Affine(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(mismatch(format!("matmul: [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, m, n, Op::MatMul(a, b), ng))
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(mismatch(format!("matmul_t: [{m},{k}] x [{n},{k2}]ᵀ")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(dot(ar, &bv[j * k..(j + 1) * k]));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, m, n, Op::MatMulT(a, b), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let Some(&first) = parts.first() else {
            return Err(mismatch("concat_rows: no inputs".into()));
        };
        let n = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(mismatch(format!("concat_rows: width {c} vs {n}")));
            }
            out.extend_from_slice(self.value(p));
            rows += r;
            ng |= self.needs(p);
        }
        Ok(self.push(out, rows, n, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let Some(&first) = parts.first() else {
            return Err(mismatch("concat_cols: no inputs".into()));
        };
        let m = self.dims(first).0;
        let mut cols = 0;
        let mut ng = false;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(mismatch(format!("concat_cols: height {r} vs {m}")));
            }
            cols += c;
            ng |= self.needs(p);
        }
        let mut out = Vec::with_capacity(m * cols);
        for i in 0..m {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(out, m, cols, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a);
        if start + len > m || len == 0 {
            return Err(mismatch(format!("slice_rows {start}+{len} of {m}")));
        }
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        let ng = self.needs(a);
        Ok(self.push(out, len, n, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a);
        if start + len > n || len == 0 {
            return Err(mismatch(format!("slice_cols {start}+{len} of {n}")));
        }
        let v = self.value(a);
        let out = (0..m)
            .flat_map(|i| v[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let ng = self.needs(a);
        Ok(self.push(out, m, len, Op::SliceCols(a, start), ng))
    }

    /// Gathers rows by index; repeated indices are allowed. This is the
    /// embedding lookup when `a` is an embedding table.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a);
        if idx.is_empty() {
            return Err(NumericError::EmptySeq);
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(mismatch(format!("select_rows: index {bad} out of {m}")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        let ng = self.needs(a);
        Ok(self.push(out, idx.len(), n, Op::SelectRows(a, idx.to_vec()), ng))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        self.select_rows(table, ids)
    }

    /// Mean of consecutive row segments with the given lengths.
    pub fn segment_mean(&mut self, a: Var, lengths: &[usize]) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a);
        if lengths.iter().sum::<usize>() != m || lengths.iter().any(|&l| l == 0) {
            return Err(mismatch(format!(
                "segment_mean: lengths {lengths:?} over {m} rows"
            )));
        }
        let v = self.value(a);
        let mut out = vec![T::zero(); lengths.len() * n];
        let mut r = 0;
        for (s, &len) in lengths.iter().enumerate() {
            let o = &mut out[s * n..(s + 1) * n];
            for row in r..r + len {
                axpy(T::one(), &v[row * n..(row + 1) * n], o);
            }
            let inv = T::one() / T::of(len as f64);
            o.iter_mut().for_each(|x| *x = *x * inv);
            r += len;
        }
        let ng = self.needs(a);
        Ok(self.push(
            out,
            lengths.len(),
            n,
            Op::SegmentMean(a, lengths.to_vec()),
            ng,
        ))
    }

    /// Column mean of all rows, `[m,n] -> [1,n]`.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var, NumericError> {
        let m = self.dims(a).0;
        self.segment_mean(a, &[m])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericError> {
        let (m, n) = self.dims(a);
        if m * n != rows * cols {
            return Err(mismatch(format!("reshape [{m},{n}] -> [{rows},{cols}]")));
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(out, rows, cols, Op::Reshape(a), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.needs(a);
        self.push(out, m, n, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.needs(a);
        self.push(out, m, n, Op::Softmax(a), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let nf = T::of(n as f64);
        for row in v.chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            out.extend(row.iter().map(|&x| (x - mean) * inv));
            inv_std.push(inv);
        }
        let ng = self.needs(a);
        self.push(out, m, n, Op::LayerNorm(a, inv_std), ng)
    }

    /// Mean token cross-entropy of `logits[T,V]` against target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericError> {
        let (t, v) = self.dims(logits);
        if targets.len() != t || t == 0 {
            return Err(mismatch(format!(
                "cross_entropy: {} targets for {t} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(mismatch(format!("cross_entropy: target {bad} out of {v}")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(v).zip(targets) {
            loss = loss - log_softmax_at(row, y);
            softmax_in_place(row);
        }
        loss = loss / T::of(t as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            vec![loss],
            1,
            1,
            Op::CrossEntropy(logits, targets.to_vec(), probs),
            ng,
        ))
    }

    /// `u·v / (‖u‖‖v‖)` with each norm floored at 1e-12.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape(a, b, "cosine_similarity")?;
        let (av, bv) = (self.value(a), self.value(b));
        let floor = T::of(COSINE_NORM_FLOOR);
        let na = dot(av, av).sqrt().max(floor);
        let nb = dot(bv, bv).sqrt().max(floor);
        let c = dot(av, bv) / (na * nb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![c], 1, 1, Op::Cosine(a, b, na, nb), ng))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.needs(a);
        self.push(vec![s], 1, 1, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let ng = self.needs(a);
        self.push(vec![s], 1, 1, Op::Mean(a), ng)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (m, n) = self.dims(a);
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..m * n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &k)| x * k)
            .collect();
        let ng = self.needs(a);
        self.push(out, m, n, Op::Dropout(a, mask), ng)
    }

    /// Multi-head scaled dot-product attention, full (unmasked).
    ///
    /// `q: [Nq,d]`, `k, v: [Nk,d]`; heads split the feature dimension.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NumericError> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if dk != d || self.dims(v) != (nk, d) || heads == 0 || d % heads != 0 {
            return Err(mismatch(format!(
                "attention: q {:?} k {:?} v {:?} heads {heads}",
                (nq, d),
                (nk, dk),
                self.dims(v)
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &qv[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qi, &kv[j * d + off..j * d + off + dh]) * scale;
                }
                softmax_in_place(p);
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    axpy(pj, &vv[j * d + off..j * d + off + dh], o);
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            nq,
            d,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericError> {
        if self.dims(loss) != (1, 1) {
            return Err(NumericError::NotScalar(self.dims(loss)));
        }
        self.backward_with_seed(loss, &[T::one()])
    }

    /// Reverse pass from an arbitrary node with upstream gradient `seed`.
    pub fn backward_with_seed(&self, root: Var, seed: &[T]) -> Result<Gradients<T>, NumericError> {
        let (r, c) = self.dims(root);
        if seed.len() != r * c {
            return Err(mismatch(format!(
                "seed of {} for node [{r},{c}]",
                seed.len()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed.to_vec());
        let mut out = Gradients {
            params: Vec::new(),
            leaves: Vec::new(),
        };
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            match node.op {
                Op::Param(id) => out.params.push((id, g)),
                Op::Leaf => out.leaves.push((Var(idx), g)),
                _ => {}
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let (m, n) = (node.rows, node.cols);
        let y = node.value.as_slice();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].rows * self.nodes[v.0].cols;
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| axpy(T::one(), g, s));
                acc(*b, &mut |s| axpy(T::one(), g, s));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| axpy(T::one(), g, s));
                acc(*b, &mut |s| axpy(-T::one(), g, s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(bv)
                        .for_each(|((s, &g), &b)| *s = *s + g * b)
                });
                acc(*b, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(av)
                        .for_each(|((s, &g), &a)| *s = *s + g * a)
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |s| axpy(T::one(), g, s));
                acc(*row, &mut |s| {
                    g.chunks(n).for_each(|gr| axpy(T::one(), gr, s))
                });
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                acc(*a, &mut |s| {
                    for (sr, gr) in s.chunks_mut(n).zip(g.chunks(n)) {
                        sr.iter_mut()
                            .zip(gr)
                            .zip(rv)
                            .for_each(|((s, &g), &r)| *s = *s + g * r);
                    }
                });
                acc(*row, &mut |s| {
                    for (ar, gr) in av.chunks(n).zip(g.chunks(n)) {
                        s.iter_mut()
                            .zip(gr)
                            .zip(ar)
                            .for_each(|((s, &g), &a)| *s = *s + g * a);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                acc(*a, &mut |s| {
                    for ((sr, gr), &c) in s.chunks_mut(n).zip(g.chunks(n)).zip(cv) {
                        axpy(c, gr, sr);
                    }
                });
                acc(*col, &mut |s| {
                    for ((sc, gr), ar) in s.iter_mut().zip(g.chunks(n)).zip(av.chunks(n)) {
                        *sc = *sc + dot(gr, ar);
                    }
                });
            }
            Op::Affine(a, scale) => acc(*a, &mut |s| axpy(*scale, g, s)),
            Op::MatMul(a, b) => {
                let (k, _) = self.dims(*b);
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G Bᵀ, dB = Aᵀ G
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            s[i * k + p] = s[i * k + p] + dot(gr, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip != T::zero() {
                                axpy(a_ip, gr, &mut s[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let k = self.dims(*a).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                acc(*a, &mut |s| matmul_into(g, bv, s, m, n, k));
                acc(*b, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != T::zero() {
                                axpy(gij, &av[i * k..(i + 1) * k], &mut s[j * k..(j + 1) * k]);
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |s| axpy(T::one(), &g[off..off + len], s));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    acc(p, &mut |s| {
                        for i in 0..m {
                            axpy(
                                T::one(),
                                &g[i * n + off..i * n + off + c],
                                &mut s[i * c..(i + 1) * c],
                            );
                        }
                    });
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                acc(*a, &mut |s| {
                    axpy(T::one(), g, &mut s[start * n..(start + m) * n])
                });
            }
            Op::SliceCols(a, start) => {
                let w = self.dims(*a).1;
                acc(*a, &mut |s| {
                    for i in 0..m {
                        axpy(
                            T::one(),
                            &g[i * n..(i + 1) * n],
                            &mut s[i * w + start..i * w + start + n],
                        );
                    }
                });
            }
            Op::SelectRows(a, idx) => {
                acc(*a, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(T::one(), &g[r * n..(r + 1) * n], &mut s[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::SegmentMean(a, lengths) => {
                acc(*a, &mut |s| {
                    let mut r = 0;
                    for (seg, &len) in lengths.iter().enumerate() {
                        let inv = T::one() / T::of(len as f64);
                        for row in r..r + len {
                            axpy(
                                inv,
                                &g[seg * n..(seg + 1) * n],
                                &mut s[row * n..(row + 1) * n],
                            );
                        }
                        r += len;
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| axpy(T::one(), g, s)),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(av) {
                        if x > T::zero() {
                            *s = *s + g;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(av)
                        .for_each(|((s, &g), &x)| *s = *s + g * gelu_parts(x).1)
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((s, &g), &y)| *s = *s + g * y * (T::one() - y))
                });
            }
            Op::Tanh(a) => {
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((s, &g), &y)| *s = *s + g * (T::one() - y * y))
                });
            }
            Op::Softmax(a) => {
                acc(*a, &mut |s| {
                    for ((sr, gr), yr) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let d = dot(gr, yr);
                        sr.iter_mut()
                            .zip(gr)
                            .zip(yr)
                            .for_each(|((s, &g), &y)| *s = *s + y * (g - d));
                    }
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let nf = T::of(n as f64);
                acc(*a, &mut |s| {
                    for (((sr, gr), yr), &inv) in s
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(y.chunks(n))
                        .zip(inv_std)
                    {
                        let mg = gr.iter().copied().sum::<T>() / nf;
                        let mgy = dot(gr, yr) / nf;
                        sr.iter_mut()
                            .zip(gr)
                            .zip(yr)
                            .for_each(|((s, &g), &y)| *s = *s + inv * (g - mg - y * mgy));
                    }
                });
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let v = self.dims(*logits).1;
                let scale = g[0] / T::of(targets.len() as f64);
                acc(*logits, &mut |s| {
                    for (t, &yt) in targets.iter().enumerate() {
                        let sr = &mut s[t * v..(t + 1) * v];
                        let pr = &probs[t * v..(t + 1) * v];
                        axpy(scale, pr, sr);
                        sr[yt] = sr[yt] - scale;
                    }
                });
            }
            Op::Cosine(a, b, na, nb) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = y[0];
                let floor = T::of(COSINE_NORM_FLOOR);
                let gs = g[0];
                let denom = *na * *nb;
                acc(*a, &mut |s| {
                    let corr = if *na > floor {
                        c / (*na * *na)
                    } else {
                        T::zero()
                    };
                    s.iter_mut()
                        .zip(av)
                        .zip(bv)
                        .for_each(|((s, &a), &b)| *s = *s + gs * (b / denom - corr * a));
                });
                acc(*b, &mut |s| {
                    let corr = if *nb > floor {
                        c / (*nb * *nb)
                    } else {
                        T::zero()
                    };
                    s.iter_mut()
                        .zip(bv)
                        .zip(av)
                        .for_each(|((s, &b), &a)| *s = *s + gs * (a / denom - corr * b));
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x = *x + g[0])),
            Op::Mean(a) => {
                let inv = g[0] / T::of(self.value(*a).len() as f64);
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x = *x + inv));
            }
            Op::Dropout(a, mask) => {
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(mask)
                        .for_each(|((s, &g), &k)| *s = *s + g * k)
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let d = n;
                let nq = m;
                let nk = self.dims(*k).0;
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                // dS for every head and query row, computed once.
                let mut ds = vec![T::zero(); heads * nq * nk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..nq {
                        let gi = &g[i * d + off..i * d + off + dh];
                        let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let dsr = &mut ds[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        for (j, dsj) in dsr.iter_mut().enumerate() {
                            *dsj = dot(gi, &vv[j * d + off..j * d + off + dh]);
                        }
                        let pd = dot(p, dsr);
                        dsr.iter_mut()
                            .zip(p)
                            .for_each(|(x, &pj)| *x = pj * (*x - pd) * scale);
                    }
                }
                acc(*v, &mut |s| {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..nq {
                            let gi = &g[i * d + off..i * d + off + dh];
                            let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                            for (j, &pj) in p.iter().enumerate() {
                                axpy(pj, gi, &mut s[j * d + off..j * d + off + dh]);
                            }
                        }
                    }
                });
                acc(*q, &mut |s| {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..nq {
                            let dsr = &ds[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                            for (j, &x) in dsr.iter().enumerate() {
                                axpy(
                                    x,
                                    &kv[j * d + off..j * d + off + dh],
                                    &mut s[i * d + off..i * d + off + dh],
                                );
                            }
                        }
                    }
                });
                acc(*k, &mut |s| {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..nq {
                            let dsr = &ds[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                            let qi = &qv[i * d + off..i * d + off + dh];
                            for (j, &x) in dsr.iter().enumerate() {
                                axpy(x, qi, &mut s[j * d + off..j * d + off + dh]);
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    row.iter_mut().for_each(|x| *x = *x / total);
}

/// `log softmax(row)[at]` without materializing the distribution.
pub fn log_softmax_at<T: Real>(row: &[T], at: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row[at] - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let ps = ParamSet::<f64>::new();
        let mut t = Tape::new(&ps);
        let x = t.constant(1, 1, vec![0.0]).unwrap();
        let s = t.sigmoid(x);
        assert_eq!(t.scalar(s), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let ps = ParamSet::<f64>::new();
        let mut t = Tape::new(&ps);
        let x = t.constant(1, 3, vec![0.0; 3]).unwrap();
        let s = t.softmax(x);
        for &p in t.value(s) {
            assert!(approx(p, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let ps = ParamSet::<f64>::new();
        let mut t = Tape::new(&ps);
        let x = t.constant(1, 4, vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let c = t.cosine_similarity(x, x).unwrap();
        assert!(approx(t.scalar(c), 1.0, 1e-15));
    }

    #[test]
    fn cosine_of_zero_vector_is_finite() {
        let ps = ParamSet::<f64>::new();
        let mut t = Tape::new(&ps);
        let x = t.constant(1, 3, vec![0.0; 3]).unwrap();
        let y = t.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let c = t.cosine_similarity(x, y).unwrap();
        assert_eq!(t.scalar(c), 0.0);
    }

    #[test]
    fn linear_gradient_is_input_outer_product() {
        // loss = sum(W x) with W: [2,3] applied as x[1,2] · W[2,3]
        let mut ps = ParamSet::<f64>::new();
        let w = ps
            .register(
                "w",
                Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            )
            .unwrap();
        let mut t = Tape::new(&ps);
        let x = t.constant(1, 2, vec![0.5, -2.0]).unwrap();
        let wv = t.param(w);
        let y = t.matmul(x, wv).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap(), &[0.5, 0.5, 0.5, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn unreachable_parameters_get_no_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let a = ps.register("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = ps.register("b", Tensor::vector(vec![3.0])).unwrap();
        let mut t = Tape::new(&ps);
        let av = t.param(a);
        let _bv = t.param(b);
        let loss = t.sum(av);
        let g = t.backward(loss).unwrap();
        assert!(g.param(b).is_none());
        assert_eq!(g.param(a).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let ps = ParamSet::<f64>::new();
        let mut t = Tape::new(&ps);
        let x = t.input(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(x), Err(NumericError::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let ps = ParamSet::<f64>::new();
        let mut t = Tape::new(&ps);
        let x = t.constant(2, 3, vec![0.0; 6]).unwrap();
        let y = t.constant(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            t.matmul(x, y),
            Err(NumericError::ShapeMismatch(_))
        ));
        assert!(matches!(
            t.add_row(x, y),
            Err(NumericError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let ps = ParamSet::<f64>::new();
        let mut t = Tape::new(&ps);
        assert!(matches!(
            t.constant(1, 1, vec![f64::NAN]),
            Err(NumericError::NonFiniteInput(_))
        ));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ps = ParamSet::<f64>::new();
        let mut t = Tape::new(&ps);
        let data: Vec<f64> = (0..32).map(|i| ((i * 37 % 11) as f64) - 4.0).collect();
        let x = t.constant(2, 16, data).unwrap();
        let y = t.layer_norm(x);
        for row in t.value(y).chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
