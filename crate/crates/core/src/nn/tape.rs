//! Reverse-mode differentiation over row-major matrices.
//!
//! Only the handful of ops needed by the transformer and the GMM head are
//! supported. Parameter leaves borrow directly from a [`ParamStore`].

use std::borrow::Cow;
use std::collections::HashMap;

use super::gmm;
use super::params::{Grads, ParamId, ParamStore};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × c` row to every row.
    AddRow(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    WeightedSum(Var, Vec<f64>),
    /// Mean mixture NLL over unmasked rows; gradient precomputed on the forward pass.
    GmmNll {
        raw: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    rows: usize,
    cols: usize,
    val: Cow<'a, [f64]>,
    op: Op,
}

pub const LN_EPS: f64 = 1e-5;

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> NnError {
    NnError::Shape(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, val: Cow<'a, [f64]>, op: Op) -> Var {
        debug_assert_eq!(val.len(), rows * cols);
        self.nodes.push(Node { rows, cols, val, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].val
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::Shape(format!("input: {} values for {rows}x{cols}", data.len())));
        }
        Ok(self.push(rows, cols, Cow::Owned(data), Op::Input))
    }

    /// Leaf for a stored parameter; 1-D parameters become a single row.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let shape = self.store.shape(id);
        let (rows, cols) = match shape {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, shape.iter().product()),
        };
        let v = self.push(rows, cols, Cow::Borrowed(self.store.value(id)), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var, NnError> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let ((n, k), (k2, m)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul", (n, k), (k2, m)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(&bv[p * m..(p + 1) * m]) {
                    *o += s * w;
                }
            }
        }
        Ok(self.push(n, m, Cow::Owned(out), Op::MatMul(a, b)))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let ((n, k), (m, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul_bt", (n, k), (m, k2)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = av[i * k..(i + 1) * k]
                    .iter()
                    .zip(&bv[j * k..(j + 1) * k])
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        Ok(self.push(n, m, Cow::Owned(out), Op::MatMulBT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.shape(a);
        Ok(self.push(r, c, Cow::Owned(out), Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let ((r, c), (r2, c2)) = (self.shape(a), self.shape(row));
        if r2 != 1 || c2 != c {
            return Err(shape_err("add_row", (r, c), (r2, c2)));
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(r, c, Cow::Owned(out), Op::AddRow(a, row)))
    }

    /// `a W + b` with `W` shaped `[in, out]` and `b` shaped `[out]`.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let y = self.matmul(a, w)?;
        self.add_row(y, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| v.max(0.0)).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, Cow::Owned(out), Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * s).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, Cow::Owned(out), Op::Scale(a, s))
    }

    /// Row softmax. With `causal`, entries with column > row are excluded.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let lim = if causal { (i + 1).min(c) } else { c };
            let row = &av[i * c..i * c + lim];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..lim {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            for v in &mut out[i * c..i * c + lim] {
                *v /= s;
            }
        }
        self.push(r, c, Cow::Owned(out), Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(shape_err("layer_norm", (r, c), self.shape(gamma)));
        }
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            r,
            c,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(NnError::Shape(format!("slice_cols {start}+{len} of {c}")));
        }
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(r, len, Cow::Owned(out), Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(NnError::Shape(format!("slice_rows {start}+{len} of {r}")));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, Cow::Owned(out), Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| NnError::Shape("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(NnError::Shape("concat_cols: row mismatch".into()));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, c, Cow::Owned(out), Op::ConcatCols(parts.to_vec())))
    }

    /// Mean GMM negative log-likelihood of `targets` (`rows × 2`) under the
    /// raw head output `raw` (`rows × 5K`), over rows where `mask` is set.
    pub fn gmm_nll(
        &mut self,
        raw: Var,
        k: usize,
        std_floor: f64,
        targets: &[[f64; 2]],
        mask: &[bool],
    ) -> Result<Var, NnError> {
        let (r, c) = self.shape(raw);
        if c != 5 * k || targets.len() != r || mask.len() != r {
            return Err(NnError::Shape(format!("gmm_nll: raw {r}x{c}, k={k}, {} targets", targets.len())));
        }
        let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
        let rv = self.value(raw);
        let mut grad = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let (l, g) = gmm::nll_raw(&rv[i * c..(i + 1) * c], k, std_floor, targets[i]);
            loss += l;
            for (d, s) in grad[i * c..(i + 1) * c].iter_mut().zip(g) {
                *d = s / n;
            }
        }
        Ok(self.push(1, 1, Cow::Owned(vec![loss / n]), Op::GmmNll { raw, grad }))
    }

    /// Backpropagates from a scalar node, adding parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Grads) -> Result<(), NnError> {
        self.backward_full(loss, grads).map(|_| ())
    }

    /// Like [`Tape::backward`] but also returns the gradient of every node.
    pub fn backward_full(&self, loss: Var, grads: &mut Grads) -> Result<Vec<Vec<f64>>, NnError> {
        if self.shape(loss) != (1, 1) {
            return Err(NnError::Shape("backward needs a scalar".into()));
        }
        let mut g: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.val.len()]).collect();
        g[loss.0][0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let dy = std::mem::take(&mut g[idx]);
            if dy.iter().all(|&v| v == 0.0) {
                g[idx] = dy;
                continue;
            }
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (a, b) in grads.get_mut(*id).iter_mut().zip(&dy) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.shape(*a);
                    let m = cols;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = &mut g[a.0];
                    for i in 0..n {
                        for p in 0..k {
                            ga[i * k + p] += dy[i * m..(i + 1) * m]
                                .iter()
                                .zip(&bv[p * m..(p + 1) * m])
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    }
                    let gb = &mut g[b.0];
                    for i in 0..n {
                        for p in 0..k {
                            let s = av[i * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            for (o, d) in gb[p * m..(p + 1) * m].iter_mut().zip(&dy[i * m..(i + 1) * m]) {
                                *o += s * d;
                            }
                        }
                    }
                }
                Op::MatMulBT(a, b) => {
                    let (n, k) = self.shape(*a);
                    let m = cols;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    for i in 0..n {
                        for j in 0..m {
                            let d = dy[i * m + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                g[a.0][i * k + p] += d * bv[j * k + p];
                                g[b.0][j * k + p] += d * av[i * k + p];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (x, d) in g[a.0].iter_mut().zip(&dy) {
                        *x += d;
                    }
                    for (x, d) in g[b.0].iter_mut().zip(&dy) {
                        *x += d;
                    }
                }
                Op::AddRow(a, row) => {
                    for (x, d) in g[a.0].iter_mut().zip(&dy) {
                        *x += d;
                    }
                    for i in 0..rows {
                        for j in 0..cols {
                            g[row.0][j] += dy[i * cols + j];
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    for ((x, d), v) in g[a.0].iter_mut().zip(&dy).zip(av) {
                        if *v > 0.0 {
                            *x += d;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    for (x, d) in g[a.0].iter_mut().zip(&dy) {
                        *x += s * d;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.val;
                    for i in 0..rows {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let dr = &dy[i * cols..(i + 1) * cols];
                        let dotp: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for j in 0..cols {
                            g[a.0][i * cols + j] += yr[j] * (dr[j] - dotp);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    for i in 0..rows {
                        let dr = &dy[i * cols..(i + 1) * cols];
                        let hr = &xhat[i * cols..(i + 1) * cols];
                        let mut dh = vec![0.0; cols];
                        for j in 0..cols {
                            g[gamma.0][j] += dr[j] * hr[j];
                            g[beta.0][j] += dr[j];
                            dh[j] = dr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            g[x.0][i * cols + j] += inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let ac = self.shape(*a).1;
                    for i in 0..rows {
                        for j in 0..cols {
                            g[a.0][i * ac + start + j] += dy[i * cols + j];
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    for (x, d) in g[a.0][start * cols..].iter_mut().zip(&dy) {
                        *x += d;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.shape(*p).1;
                        for i in 0..rows {
                            for j in 0..pc {
                                g[p.0][i * pc + j] += dy[i * cols + off + j];
                            }
                        }
                        off += pc;
                    }
                }
                Op::WeightedSum(a, w) => {
                    for (x, c) in g[a.0].iter_mut().zip(w) {
                        *x += dy[0] * c;
                    }
                }
                Op::GmmNll { raw, grad } => {
                    let s = dy[0];
                    for (x, d) in g[raw.0].iter_mut().zip(grad) {
                        *x += s * d;
                    }
                }
            }
            g[idx] = dy;
        }
        Ok(g)
    }

    /// Gradient of `loss` with respect to an input node.
    pub fn input_grad(&self, loss: Var, input: Var) -> Result<Vec<f64>, NnError> {
        let mut scratch = self.store.new_grads();
        let mut all = self.backward_full(loss, &mut scratch)?;
        Ok(std::mem::take(&mut all[input.0]))
    }

    /// Scalar `Σ w_ij a_ij` for a constant weight matrix `w`.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<f64>) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if w.len() != r * c {
            return Err(NnError::Shape(format!("weighted_sum: {} weights for {r}x{c}", w.len())));
        }
        let s = self.value(a).iter().zip(&w).map(|(x, y)| x * y).sum();
        Ok(self.push(1, 1, Cow::Owned(vec![s]), Op::WeightedSum(a, w)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NnError> {
        let n = self.value(a).len();
        self.weighted_sum(a, vec![1.0; n])
    }
}
