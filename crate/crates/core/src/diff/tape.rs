//! Reverse-mode tape over dense f64 arrays.
//!
//! Every forward primitive records a node with its saved inputs; `backward`
//! replays the nodes in exact reverse order and accumulates gradients
//! additively, so fan-out nodes sum their downstream contributions. The tape
//! is single-use: a second `backward` without building a new tape is an
//! error.

use super::array::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Array};
use super::{DiffError, ParamStore};
use std::collections::HashMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// rhs is one trailing row (shape == lhs.shape[1..]); repeated down rows.
    Row,
    /// rhs is one column (shape [rows, 1]); repeated across each row.
    Col,
    /// rhs is a single scalar.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Relu,
    Neg,
}

enum Op {
    Leaf { param: Option<String> },
    Bin { kind: BinKind, a: Var, b: Var, bc: Broadcast },
    Un { kind: UnKind, a: Var },
    Scale { a: Var, c: f64 },
    AddConst { a: Var, c: f64 },
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, eps: f64 },
    SumAll { a: Var },
    MeanAll { a: Var },
    SumRows { a: Var },
    MaxRows { a: Var, argmax: Vec<usize> },
    Gather { a: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Reshape { a: Var },
}

struct Node {
    op: Op,
    value: Array,
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    // One node per parameter per tape, so repeated reads share gradients.
    param_cache: HashMap<String, Var>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of a recorded variable.
    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Array) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant input. Gradients stop here.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(Op::Leaf { param: None }, value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    /// Record a named parameter read from the store. Its gradient is
    /// accumulated back into the store by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, DiffError> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            value,
        );
        self.param_cache.insert(name.to_string(), v);
        Ok(v)
    }

    fn broadcast_of(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast, DiffError> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if self.value(b).numel() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if sa.len() >= 2 && sb == &sa[1..] {
            return Ok(Broadcast::Row);
        }
        if sa.len() == 2 && sb == [sa[0], 1] {
            return Ok(Broadcast::Col);
        }
        Err(DiffError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, DiffError> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let bc = self.broadcast_of(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols();
        let block = vb.numel();
        let bdat = vb.data();
        let mut out = Vec::with_capacity(va.numel());
        for (i, &x) in va.data().iter().enumerate() {
            let y = match bc {
                Broadcast::Same => bdat[i],
                Broadcast::Scalar => bdat[0],
                Broadcast::Row => bdat[i % block],
                Broadcast::Col => bdat[i / cols],
            };
            out.push(apply_bin(kind, x, y));
        }
        let shape = va.shape().to_vec();
        let arr = Array::new(shape, out)?;
        Ok(self.push(Op::Bin { kind, a, b, bc }, arr))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.bin(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| apply_un(kind, x))
            .collect();
        let arr = Array::new(self.value(a).shape().to_vec(), out).expect("same shape");
        self.push(Op::Un { kind, a }, arr)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnKind::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sqrt, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(UnKind::Cos, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnKind::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnKind::Relu, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnKind::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| x * c).collect();
        let arr = Array::new(self.value(a).shape().to_vec(), out).expect("same shape");
        self.push(Op::Scale { a, c }, arr)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| x + c).collect();
        let arr = Array::new(self.value(a).shape().to_vec(), out).expect("same shape");
        self.push(Op::AddConst { a, c }, arr)
    }

    /// 2D matrix product `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let arr = Array::matrix(m, n, out)?;
        Ok(self.push(Op::Matmul { a, b }, arr))
    }

    /// 2D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "transpose",
                lhs: sa.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let arr = Array::matrix(n, m, out)?;
        Ok(self.push(Op::Transpose { a }, arr))
    }

    /// Softmax along the last axis, with max-subtraction for stability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let last = v.last_dim();
        let mut out = Vec::with_capacity(v.numel());
        for group in v.data().chunks(last) {
            let mx = group.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            let exps: Vec<f64> = group
                .iter()
                .map(|&x| {
                    let e = (x - mx).exp();
                    sum += e;
                    e
                })
                .collect();
            out.extend(exps.into_iter().map(|e| e / sum));
        }
        let arr = Array::new(v.shape().to_vec(), out).expect("same shape");
        self.push(Op::Softmax { a }, arr)
    }

    /// Zero-mean unit-variance normalization along the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let last = v.last_dim();
        let mut out = Vec::with_capacity(v.numel());
        for group in v.data().chunks(last) {
            let n = group.len() as f64;
            let mean = group.iter().sum::<f64>() / n;
            let var = group.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let s = (var + eps).sqrt();
            out.extend(group.iter().map(|&x| (x - mean) / s));
        }
        let arr = Array::new(v.shape().to_vec(), out).expect("same shape");
        self.push(Op::LayerNorm { a, eps }, arr)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll { a }, Array::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::MeanAll { a }, Array::scalar(s))
    }

    /// Sum along the last axis: `[r, c] -> [r, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let last = v.last_dim();
        let groups = v.numel() / last;
        let out: Vec<f64> = v.data().chunks(last).map(|g| g.iter().sum()).collect();
        let arr = Array::matrix(groups, 1, out).expect("shape");
        self.push(Op::SumRows { a }, arr)
    }

    /// Max along the last axis: `[r, c] -> [r, 1]`. Ties break to the first
    /// index; the gradient routes entirely to the argmax element.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let last = v.last_dim();
        let groups = v.numel() / last;
        let mut out = Vec::with_capacity(groups);
        let mut argmax = Vec::with_capacity(groups);
        for g in v.data().chunks(last) {
            let (mut bi, mut bv) = (0usize, g[0]);
            for (i, &x) in g.iter().enumerate().skip(1) {
                if x > bv {
                    bv = x;
                    bi = i;
                }
            }
            out.push(bv);
            argmax.push(bi);
        }
        let arr = Array::matrix(groups, 1, out).expect("shape");
        self.push(Op::MaxRows { a, argmax }, arr)
    }

    /// Row gather: `out[i, :] = a[idx[i], :]`. Indices may repeat; the
    /// backward pass scatter-adds.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let v = self.value(a);
        let rows = v.rows();
        let cols = v.cols();
        for &i in idx {
            if i >= rows {
                return Err(DiffError::IndexOutOfBounds { idx: i, rows });
            }
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&v.data()[i * cols..(i + 1) * cols]);
        }
        let arr = Array::matrix(idx.len(), cols, out)?;
        Ok(self.push(
            Op::Gather {
                a,
                idx: idx.to_vec(),
            },
            arr,
        ))
    }

    /// Stack 2D blocks with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let arr = Array::matrix(rows, cols, out)?;
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            arr,
        ))
    }

    /// Concatenate 2D blocks with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        let arr = Array::matrix(rows, total, out)?;
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            arr,
        ))
    }

    /// Reinterpret the buffer under a new shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let v = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != v.numel() || shape.iter().any(|&d| d == 0) {
            return Err(DiffError::InvalidShape {
                shape: shape.to_vec(),
                len: v.numel(),
            });
        }
        let arr = Array::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.push(Op::Reshape { a }, arr))
    }

    /// Name-dispatched forward primitive, the generic entry point of the
    /// kernel contract. Structured methods above are the fast path.
    pub fn forward_primitive(&mut self, name: &str, inputs: &[Var]) -> Result<Var, DiffError> {
        match (name, inputs) {
            ("matmul", [a, b]) => self.matmul(*a, *b),
            ("add", [a, b]) => self.add(*a, *b),
            ("sub", [a, b]) => self.sub(*a, *b),
            ("mul", [a, b]) => self.mul(*a, *b),
            ("div", [a, b]) => self.div(*a, *b),
            ("exp", [a]) => Ok(self.exp(*a)),
            ("log", [a]) => Ok(self.log(*a)),
            ("sqrt", [a]) => Ok(self.sqrt(*a)),
            ("sin", [a]) => Ok(self.sin(*a)),
            ("cos", [a]) => Ok(self.cos(*a)),
            ("tanh", [a]) => Ok(self.tanh(*a)),
            ("relu", [a]) => Ok(self.relu(*a)),
            ("neg", [a]) => Ok(self.neg(*a)),
            ("softmax", [a]) => Ok(self.softmax(*a)),
            ("layer_norm", [a]) => Ok(self.layer_norm(*a, 1e-6)),
            ("sum", [a]) => Ok(self.sum_all(*a)),
            ("mean", [a]) => Ok(self.mean_all(*a)),
            ("sum_rows", [a]) => Ok(self.sum_rows(*a)),
            ("max_rows", [a]) => Ok(self.max_rows(*a)),
            ("transpose", [a]) => self.transpose(*a),
            ("concat", parts) if !parts.is_empty() => self.concat_cols(parts),
            _ => Err(DiffError::UnknownPrimitive(name.to_string())),
        }
    }

    /// Reverse pass from a scalar seed. Parameter gradients are accumulated
    /// additively into the store; everything else is discarded.
    pub fn backward(&mut self, seed: Var, store: &mut ParamStore) -> Result<(), DiffError> {
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        if !self.value(seed).is_scalar() {
            return Err(DiffError::NonScalarSeed {
                shape: self.value(seed).shape().to_vec(),
            });
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[seed.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            if let Op::Leaf { param: Some(name) } = &self.nodes[i].op {
                store.accumulate_grad(name, &g)?;
            }
        }
        Ok(())
    }

    fn grad_buf<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        var: Var,
        numel: usize,
    ) -> &'a mut Vec<f64> {
        grads[var.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Bin { kind, a, b, bc } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let out = node.value.data();
                let cols = va.cols();
                let block = vb.numel();
                // Left gradient is elementwise in every mode.
                {
                    let ga = Self::grad_buf(grads, *a, va.numel());
                    for (idx, &gv) in g.iter().enumerate() {
                        let bval = match bc {
                            Broadcast::Same => vb.data()[idx],
                            Broadcast::Scalar => vb.data()[0],
                            Broadcast::Row => vb.data()[idx % block],
                            Broadcast::Col => vb.data()[idx / cols],
                        };
                        ga[idx] += match kind {
                            BinKind::Add | BinKind::Sub => gv,
                            BinKind::Mul => gv * bval,
                            BinKind::Div => gv / bval,
                        };
                    }
                }
                // Right gradient reduces over the broadcast pattern.
                {
                    let gb = Self::grad_buf(grads, *b, vb.numel());
                    for (idx, &gv) in g.iter().enumerate() {
                        let bidx = match bc {
                            Broadcast::Same => idx,
                            Broadcast::Scalar => 0,
                            Broadcast::Row => idx % block,
                            Broadcast::Col => idx / cols,
                        };
                        gb[bidx] += match kind {
                            BinKind::Add => gv,
                            BinKind::Sub => -gv,
                            BinKind::Mul => gv * va.data()[idx],
                            // d(a/b)/db = -a/b^2 = -out/b
                            BinKind::Div => -gv * out[idx] / vb.data()[bidx],
                        };
                    }
                }
            }
            Op::Un { kind, a } => {
                let va = self.value(*a);
                let out = node.value.data();
                let ga = Self::grad_buf(grads, *a, va.numel());
                for (idx, &gv) in g.iter().enumerate() {
                    let x = va.data()[idx];
                    let y = out[idx];
                    ga[idx] += gv
                        * match kind {
                            UnKind::Exp => y,
                            UnKind::Log => 1.0 / x,
                            UnKind::Sqrt => 0.5 / y,
                            UnKind::Sin => x.cos(),
                            UnKind::Cos => -x.sin(),
                            UnKind::Tanh => 1.0 - y * y,
                            UnKind::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Neg => -1.0,
                        };
                }
            }
            Op::Scale { a, c } => {
                let ga = Self::grad_buf(grads, *a, g.len());
                for (idx, &gv) in g.iter().enumerate() {
                    ga[idx] += gv * c;
                }
            }
            Op::AddConst { a, .. } => {
                let ga = Self::grad_buf(grads, *a, g.len());
                for (idx, &gv) in g.iter().enumerate() {
                    ga[idx] += gv;
                }
            }
            Op::Matmul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                {
                    let ga = Self::grad_buf(grads, *a, m * k);
                    matmul_nt_acc(g, vb.data(), m, n, k, ga);
                }
                {
                    let gb = Self::grad_buf(grads, *b, k * n);
                    matmul_tn_acc(va.data(), g, m, k, n, gb);
                }
            }
            Op::Transpose { a } => {
                let va = self.value(*a);
                let (m, n) = (va.shape()[0], va.shape()[1]);
                let ga = Self::grad_buf(grads, *a, m * n);
                for i in 0..n {
                    for j in 0..m {
                        ga[j * n + i] += g[i * m + j];
                    }
                }
            }
            Op::Softmax { a } => {
                let last = node.value.last_dim();
                let y = node.value.data();
                let ga = Self::grad_buf(grads, *a, y.len());
                for (gi, (yg, gg)) in y.chunks(last).zip(g.chunks(last)).enumerate() {
                    let dot: f64 = yg.iter().zip(gg.iter()).map(|(&yv, &gv)| yv * gv).sum();
                    let base = gi * last;
                    for j in 0..last {
                        ga[base + j] += yg[j] * (gg[j] - dot);
                    }
                }
            }
            Op::LayerNorm { a, eps } => {
                let va = self.value(*a);
                let last = va.last_dim();
                let y = node.value.data();
                let ga = Self::grad_buf(grads, *a, va.numel());
                for (gi, (xg, (yg, gg))) in va
                    .data()
                    .chunks(last)
                    .zip(y.chunks(last).zip(g.chunks(last)))
                    .enumerate()
                {
                    let n = last as f64;
                    let mean = xg.iter().sum::<f64>() / n;
                    let var = xg.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
                    let s = (var + eps).sqrt();
                    let g_mean = gg.iter().sum::<f64>() / n;
                    let gy_dot = gg.iter().zip(yg.iter()).map(|(&gv, &yv)| gv * yv).sum::<f64>() / n;
                    let base = gi * last;
                    for j in 0..last {
                        ga[base + j] += (gg[j] - g_mean - yg[j] * gy_dot) / s;
                    }
                }
            }
            Op::SumAll { a } => {
                let numel = self.value(*a).numel();
                let ga = Self::grad_buf(grads, *a, numel);
                for v in ga.iter_mut() {
                    *v += g[0];
                }
            }
            Op::MeanAll { a } => {
                let numel = self.value(*a).numel();
                let ga = Self::grad_buf(grads, *a, numel);
                let gv = g[0] / numel as f64;
                for v in ga.iter_mut() {
                    *v += gv;
                }
            }
            Op::SumRows { a } => {
                let va = self.value(*a);
                let last = va.last_dim();
                let ga = Self::grad_buf(grads, *a, va.numel());
                for (row, &gv) in g.iter().enumerate() {
                    for j in 0..last {
                        ga[row * last + j] += gv;
                    }
                }
            }
            Op::MaxRows { a, argmax } => {
                let va = self.value(*a);
                let last = va.last_dim();
                let ga = Self::grad_buf(grads, *a, va.numel());
                for (row, (&gv, &am)) in g.iter().zip(argmax.iter()).enumerate() {
                    ga[row * last + am] += gv;
                }
            }
            Op::Gather { a, idx } => {
                let va = self.value(*a);
                let cols = va.cols();
                let ga = Self::grad_buf(grads, *a, va.numel());
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..cols {
                        ga[src * cols + j] += g[r * cols + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.value(p).numel();
                    let gp = Self::grad_buf(grads, p, numel);
                    for (dst, &src) in gp.iter_mut().zip(g[offset..offset + numel].iter()) {
                        *dst += src;
                    }
                    offset += numel;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
                let mut col_off = 0;
                for (&p, &w) in parts.iter().zip(widths.iter()) {
                    let numel = self.value(p).numel();
                    let gp = Self::grad_buf(grads, p, numel);
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + col_off + j];
                        }
                    }
                    col_off += w;
                }
            }
            Op::Reshape { a } => {
                let numel = self.value(*a).numel();
                let ga = Self::grad_buf(grads, *a, numel);
                for (dst, &src) in ga.iter_mut().zip(g.iter()) {
                    *dst += src;
                }
            }
        }
    }
}

fn apply_bin(kind: BinKind, x: f64, y: f64) -> f64 {
    match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    }
}

fn apply_un(kind: UnKind, x: f64) -> f64 {
    match kind {
        UnKind::Exp => x.exp(),
        UnKind::Log => x.ln(),
        UnKind::Sqrt => x.sqrt(),
        UnKind::Sin => x.sin(),
        UnKind::Cos => x.cos(),
        UnKind::Tanh => x.tanh(),
        UnKind::Relu => x.max(0.0),
        UnKind::Neg => -x,
    }
}
