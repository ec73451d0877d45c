//! Dense `f64` tensors and a small reverse-mode autodiff tape.
//!
//! The tape records only the operations the backbone needs. Every op stores
//! what its backward pass reads, so [`Graph::backward`] is a single reverse
//! sweep over the node list.

use std::rc::Rc;

use crate::error::{Error, Result};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        match self.shape.last() {
            Some(&c) if c > 0 => self.data.len() / c,
            _ => 0,
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
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
    /// `[batch, m, k] x [batch, k, n]`, or `[batch, n, k]` when `trans_b`.
    /// `b_batched == false` shares one `b` across all batches.
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        b_batched: bool,
    },
    Add(Var, Var),
    /// `x[i] + b[i % b.len()]`.
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Softmax(Var),
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    /// Concatenation of blocks: output is `outer` repetitions of
    /// `[a_inner elements of a | b_inner elements of b]`.
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    /// `[groups, rows, cols] -> [groups, cols]` by averaging over rows.
    MeanRows {
        x: Var,
        groups: usize,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Batched matrix product. `a` is `[batch, m, k]` (any leading layout with
    /// `batch * m * k` elements); `b` is either shared `[k, n]` or per-batch.
    #[allow(clippy::too_many_arguments)]
    pub fn matmul(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        b_batched: bool,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let b_len = if b_batched { batch * k * n } else { k * n };
        if av.len() != batch * m * k || bv.len() != b_len {
            return Err(Error::Shape(format!(
                "matmul batch={batch} m={m} k={k} n={n}: a has {}, b has {}",
                av.len(),
                bv.len()
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        for g in 0..batch {
            let a_off = g * m * k;
            let b_off = if b_batched { g * k * n } else { 0 };
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    av.data.as_ptr().add(a_off),
                    k as isize,
                    1,
                    bv.data.as_ptr().add(b_off),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr().add(g * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                b_batched,
            },
            rg,
        ))
    }

    /// `x [.., in] @ w [in, out] + bias [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::Shape(format!("linear: x {xs:?} with w {ws:?}")));
        }
        let rows = self.value(x).rows();
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = ws[1];
        let y = self.matmul(x, w, 1, rows, ws[0], ws[1], false, false, out_shape)?;
        match bias {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                av.shape, bv.shape
            )));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let p = bv.len();
        if p == 0 || xv.len() % p != 0 {
            return Err(Error::Shape(format!(
                "add_broadcast: {} elements over period {p}",
                xv.len()
            )));
        }
        let mut data = xv.data.clone();
        for chunk in data.chunks_mut(p) {
            for (d, bb) in chunk.iter_mut().zip(&bv.data) {
                *d += bb;
            }
        }
        let value = Tensor::new(xv.shape.clone(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddBroadcast(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * s).collect(),
        };
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!("layer_norm: width {c}")));
        }
        let rows = xv.rows();
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bt[j];
            }
        }
        let value = Tensor::new(xv.shape.clone(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data.clone();
        for row in data.chunks_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// `out[i] = x[index[i]]`; covers reshapes, permutes, slices and broadcasts.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if index.iter().any(|&i| i >= xv.len()) {
            return Err(Error::Shape("gather index out of range".into()));
        }
        let data = index.iter().map(|&i| xv.data[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// Concatenate `[outer, a_rows, c]` and `[outer, b_rows, c]` along axis 1.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Shape(format!("concat_rows: {sa:?} and {sb:?}")));
        }
        let outer = sa[0];
        let a_inner = sa[1] * sa[2];
        let b_inner = sb[1] * sb[2];
        let (ad, bd) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(outer * (a_inner + b_inner));
        for o in 0..outer {
            data.extend_from_slice(&ad[o * a_inner..(o + 1) * a_inner]);
            data.extend_from_slice(&bd[o * b_inner..(o + 1) * b_inner]);
        }
        let value = Tensor::new(vec![outer, sa[1] + sb[1], sa[2]], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            },
            rg,
        ))
    }

    /// `[groups, rows, cols] -> [groups, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape.clone();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::Shape(format!("mean_rows: {s:?}")));
        }
        let (groups, rows, cols) = (s[0], s[1], s[2]);
        let xd = &self.value(x).data;
        let mut out = vec![0.0; groups * cols];
        for g in 0..groups {
            for r in 0..rows {
                let base = (g * rows + r) * cols;
                for c in 0..cols {
                    out[g * cols + c] += xd[base + c];
                }
            }
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![groups, cols], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::MeanRows {
                x,
                groups,
                rows,
                cols,
            },
            rg,
        ))
    }

    /// Reverse sweep seeded with upstream gradients for selected nodes.
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::Shape(format!(
                    "seed gradient for node {} has {} elements, node has {}",
                    v.0,
                    g.len(),
                    self.value(*v).len()
                )));
            }
            accumulate(&mut grads[v.0], g);
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                b_batched,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if self.rg(*a) {
                    // dA = dC . B^T
                    let mut da = vec![0.0; av.len()];
                    for g in 0..batch {
                        let b_off = if *b_batched { g * k * n } else { 0 };
                        // B as [k, n]: B^T element (j, kk) at b[kk*n + j] -> rs=1, cs=n
                        // B stored [n, k] when trans_b: B^T is that matrix, rs=k, cs=1
                        let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                        unsafe {
                            matrixmultiply::dgemm(
                                m,
                                n,
                                k,
                                1.0,
                                gy.as_ptr().add(g * m * n),
                                n as isize,
                                1,
                                bv.as_ptr().add(b_off),
                                rs,
                                cs,
                                0.0,
                                da.as_mut_ptr().add(g * m * k),
                                k as isize,
                                1,
                            );
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for g in 0..batch {
                        let b_off = if *b_batched { g * k * n } else { 0 };
                        let beta = if *b_batched || g == 0 { 0.0 } else { 1.0 };
                        unsafe {
                            if *trans_b {
                                // dB [n, k] = dC^T . A
                                matrixmultiply::dgemm(
                                    n,
                                    m,
                                    k,
                                    1.0,
                                    gy.as_ptr().add(g * m * n),
                                    1,
                                    n as isize,
                                    av.as_ptr().add(g * m * k),
                                    k as isize,
                                    1,
                                    beta,
                                    db.as_mut_ptr().add(b_off),
                                    k as isize,
                                    1,
                                );
                            } else {
                                // dB [k, n] = A^T . dC
                                matrixmultiply::dgemm(
                                    k,
                                    m,
                                    n,
                                    1.0,
                                    av.as_ptr().add(g * m * k),
                                    1,
                                    k as isize,
                                    gy.as_ptr().add(g * m * n),
                                    n as isize,
                                    1,
                                    beta,
                                    db.as_mut_ptr().add(b_off),
                                    n as isize,
                                    1,
                                );
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], gy);
                }
            }
            Op::AddBroadcast(x, b) => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], gy);
                }
                if self.rg(*b) {
                    let p = self.value(*b).len();
                    let mut gb = vec![0.0; p];
                    for chunk in gy.chunks(p) {
                        for (s, v) in gb.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(x, s) => {
                let gx: Vec<f64> = gy.iter().map(|v| v * s).collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let g = &self.value(*gamma).data;
                if self.rg(*x) {
                    let mut gx = vec![0.0; gy.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let dy = &gy[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let gd = dy[j] * g[j];
                            m1 += gd;
                            m2 += gd * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            gx[r * c + j] = s * (dy[j] * g[j] - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for (dy, xh) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += dy[j] * xh[j];
                            gb[j] += dy[j];
                        }
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut grads[gamma.0], &gg);
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads[beta.0], &gb);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &self.value(*x).data;
                let gx: Vec<f64> = xv
                    .iter()
                    .zip(gy)
                    .map(|(&v, &d)| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let y = &node.value.data;
                let mut gx = vec![0.0; y.len()];
                for ((yr, dr), gr) in y.chunks(c).zip(gy.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Gather { x, index } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (&src, d) in index.iter().zip(gy) {
                    gx[src] += d;
                }
                accumulate(&mut grads[x.0], &gx);
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let w = a_inner + b_inner;
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(outer * a_inner);
                    for o in 0..*outer {
                        ga.extend_from_slice(&gy[o * w..o * w + a_inner]);
                    }
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.rg(*b) {
                    let mut gb = Vec::with_capacity(outer * b_inner);
                    for o in 0..*outer {
                        gb.extend_from_slice(&gy[o * w + a_inner..(o + 1) * w]);
                    }
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::MeanRows {
                x,
                groups,
                rows,
                cols,
            } => {
                let inv = 1.0 / *rows as f64;
                let mut gx = vec![0.0; groups * rows * cols];
                for g in 0..*groups {
                    for r in 0..*rows {
                        let base = (g * rows + r) * cols;
                        for c in 0..*cols {
                            gx[base + c] = gy[g * cols + c] * inv;
                        }
                    }
                }
                accumulate(&mut grads[x.0], &gx);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_check<F>(inputs: &[Tensor], build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        // loss = sum(w * out) with fixed pseudo-random weights
        let eval = |ins: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            let w: Vec<f64> = (0..g.value(out).len())
                .map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0)
                .collect();
            let loss = g.value(out).data().iter().zip(&w).map(|(a, b)| a * b).sum();
            let grads = g.backward(&[(out, &w)]).unwrap();
            let gs = vars
                .iter()
                .map(|v| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            (loss, gs)
        };
        let (_, analytic) = eval(inputs);
        let h = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[j] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = analytic[ti].get(j).copied().unwrap_or(0.0);
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {ti} elem {j}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn t(shape: Vec<usize>, seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| (((i as u64 + 1) * (seed * 2654435761 + 97)) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_shared_and_batched_gradients() {
        numeric_check(&[t(vec![2, 3, 4], 1), t(vec![4, 5], 2)], |g, v| {
            g.matmul(v[0], v[1], 1, 6, 4, 5, false, false, vec![2, 3, 5])
                .unwrap()
        });
        numeric_check(&[t(vec![2, 3, 4], 3), t(vec![2, 5, 4], 4)], |g, v| {
            g.matmul(v[0], v[1], 2, 3, 4, 5, true, true, vec![2, 3, 5])
                .unwrap()
        });
        numeric_check(&[t(vec![2, 3, 4], 5), t(vec![2, 4, 2], 6)], |g, v| {
            g.matmul(v[0], v[1], 2, 3, 4, 2, false, true, vec![2, 3, 2])
                .unwrap()
        });
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b, 1, 2, 2, 2, false, false, vec![2, 2]).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let ct = g.matmul(a, b, 1, 2, 2, 2, true, false, vec![2, 2]).unwrap();
        assert_eq!(g.value(ct).data(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn layer_norm_softmax_gelu_gradients() {
        numeric_check(&[t(vec![3, 4], 7), t(vec![4], 8), t(vec![4], 9)], |g, v| {
            g.layer_norm(v[0], v[1], v[2]).unwrap()
        });
        numeric_check(&[t(vec![3, 5], 10)], |g, v| g.softmax(v[0]));
        numeric_check(&[t(vec![7], 11)], |g, v| g.gelu(v[0]));
    }

    #[test]
    fn structural_op_gradients() {
        numeric_check(&[t(vec![2, 2, 3], 12), t(vec![2, 1, 3], 13)], |g, v| {
            g.concat_rows(v[1], v[0]).unwrap()
        });
        numeric_check(&[t(vec![2, 3, 2], 14)], |g, v| g.mean_rows(v[0]).unwrap());
        numeric_check(&[t(vec![6], 15), t(vec![3], 16)], |g, v| {
            let y = g.add_broadcast(v[0], v[1]).unwrap();
            let s = g.scale(y, -1.5);
            g.add(s, v[0]).unwrap()
        });
        numeric_check(&[t(vec![4], 17)], |g, v| {
            g.gather(v[0], Rc::new(vec![3, 0, 0, 2, 3]), vec![5]).unwrap()
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2, 3], 1));
        let w = g.param(t(vec![3, 2], 2));
        let y = g.linear(x, w, None).unwrap();
        let grads = g.backward(&[(y, &[1.0; 4])]).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().len(), 6);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.param(t(vec![2, 3], 1));
        let b = g.param(t(vec![2, 2], 2));
        assert!(g.add(a, b).is_err());
        assert!(g.linear(a, b, None).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
