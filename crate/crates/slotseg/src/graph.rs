//! Tape-based reverse-mode autodiff. Ops execute eagerly and record onto the
//! graph; `backward` replays the tape in reverse. Node indices are pushed in
//! topological order by construction, so reverse index order is a valid
//! reverse topological order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    /// a·b
    Matmul(Var, Var),
    /// a·bᵀ
    MatmulNT(Var, Var),
    /// aᵀ·b
    MatmulTN(Var, Var),
    /// x·w + b, optionally relu'd, in one node: (x, w, b, relu)
    Linear(Var, Var, Var, bool),
    /// rows of x plus bias vector
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    /// x minus a scalar node, broadcast
    SubScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Clamp(Var, S, S),
    /// axis 0: down columns; axis 1: along rows; rank-1 treated as one row
    Softmax(Var, usize),
    LayerNorm(Var, Var, Var),
    L1NormCols(Var),
    L2NormRows(Var),
    // Field documents the severed edge; backward never reads it.
    StopGrad(#[allow(dead_code)] Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    Dot(Var, Var),
    StackScalars(Vec<Var>),
    /// each row repeated `t` times consecutively
    RepeatRows(Var, usize),
    /// whole block repeated `t` times
    TileRows(Var, usize),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    /// one column, reinterpreted with a declared output shape
    TakeColumn(Var, usize),
    Transpose(Var),
    Reshape(Var),
    /// feats (K·N)×D mixed per position by weights K×N into N×D
    WeightedMix(Var, Var),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
    name: &'static str,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    check_finite: bool,
}

/// Gradients keyed by node id after a backward pass.
pub struct Grads<S: Scalar> {
    g: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.g.get(v.0).and_then(|o| o.as_deref())
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Disables the per-op NaN/Inf scan (the scan is the default).
    pub fn unchecked() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn insert(&mut self, t: Tensor<S>, requires_grad: bool) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: requires_grad,
            name: "leaf",
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: Tensor<S>) -> Result<Var> {
        self.insert(t, false)
    }

    pub fn param(&mut self, t: Tensor<S>) -> Result<Var> {
        self.insert(t, true)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, op_name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::StopGrad(_) => false,
            Op::Matmul(a, b)
            | Op::MatmulNT(a, b)
            | Op::MatmulTN(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::SubScalar(a, b)
            | Op::Dot(a, b) => self.ng(*a) || self.ng(*b),
            Op::LayerNorm(x, g, b) => self.ng(*x) || self.ng(*g) || self.ng(*b),
            Op::Linear(x, w, b, _) => self.ng(*x) || self.ng(*w) || self.ng(*b),
            Op::WeightedMix(a, b) => self.ng(*a) || self.ng(*b),
            Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Relu(x)
            | Op::Clamp(x, _, _)
            | Op::Softmax(x, _)
            | Op::L1NormCols(x)
            | Op::L2NormRows(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::SumAxis(x, _)
            | Op::RepeatRows(x, _)
            | Op::TileRows(x, _)
            | Op::SliceRows(x, _, _)
            | Op::SliceCols(x, _, _)
            | Op::TakeColumn(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x) => self.ng(*x),
            Op::StackScalars(vs) | Op::ConcatRows(vs) | Op::ConcatCols(vs) => {
                vs.iter().any(|v| self.ng(*v))
            }
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name: op_name,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// How many recorded nodes carry the given op name. Lets tests verify
    /// structurally how often a computation actually ran (e.g. one column
    /// normalization per aggregation step).
    pub fn count_op(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.name == name).count()
    }

    /// Piecewise region of every relu and clamp input entry, in graph order.
    /// Two evaluations of the same computation whose patterns differ straddle
    /// a kink, so a finite difference between them does not estimate a
    /// derivative and must be discarded.
    pub fn kink_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => {
                    for &v in &self.nodes[x.0].value.data {
                        out.push(u8::from(v >= S::ZERO));
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    for &v in &self.nodes[x.0].value.data {
                        out.push(if v < *lo {
                            0
                        } else if v > *hi {
                            2
                        } else {
                            1
                        });
                    }
                }
                // The pre-activation is not stored, but y = relu(u) puts
                // y > 0 exactly where u > 0, and a probe pair landing on
                // u = 0 straddles the kink in either convention.
                Op::Linear(_, _, _, true) => {
                    for &v in &n.value.data {
                        out.push(u8::from(v > S::ZERO));
                    }
                }
                _ => {}
            }
        }
        out
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(Error::shape("matmul", format!("{m}x{ka} by {kb}x{n}")));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        unsafe {
            S::gemm(
                m,
                ka,
                n,
                S::ONE,
                self.value(a).data.as_ptr(),
                ka as isize,
                1,
                self.value(b).data.as_ptr(),
                n as isize,
                1,
                S::ZERO,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        self.push(out, Op::Matmul(a, b), "matmul")
    }

    /// x·w + b with an optional relu, recorded as one node. The dense stack
    /// dominates a training step, and fusing it keeps the tape from holding
    /// (and later re-walking) two full-size intermediates per layer.
    pub fn linear(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Result<Var> {
        let (m, kx) = self.value(x).dims2("linear")?;
        let (kw, n) = self.value(w).dims2("linear")?;
        if kx != kw {
            return Err(Error::shape("linear", format!("{m}x{kx} by {kw}x{n}")));
        }
        if self.value(b).len() != n {
            return Err(Error::shape(
                "linear",
                format!("bias has {} entries for {n} outputs", self.value(b).len()),
            ));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        unsafe {
            S::gemm(
                m,
                kx,
                n,
                S::ONE,
                self.value(x).data.as_ptr(),
                kx as isize,
                1,
                self.value(w).data.as_ptr(),
                n as isize,
                1,
                S::ZERO,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let bias = &self.value(b).data;
        for row in out.data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias.iter()) {
                *o += bv;
            }
        }
        if relu {
            for o in &mut out.data {
                *o = o.max(S::ZERO);
            }
        }
        self.push(out, Op::Linear(x, w, b, relu), "linear")
    }

    /// a·bᵀ for a: m×k, b: n×k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2("matmul_nt")?;
        let (n, kb) = self.value(b).dims2("matmul_nt")?;
        if ka != kb {
            return Err(Error::shape("matmul_nt", format!("{m}x{ka} by ({n}x{kb})ᵀ")));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        unsafe {
            S::gemm(
                m,
                ka,
                n,
                S::ONE,
                self.value(a).data.as_ptr(),
                ka as isize,
                1,
                self.value(b).data.as_ptr(),
                1,
                kb as isize,
                S::ZERO,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        self.push(out, Op::MatmulNT(a, b), "matmul_nt")
    }

    /// aᵀ·b for a: r×m, b: r×n.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, m) = self.value(a).dims2("matmul_tn")?;
        let (rb, n) = self.value(b).dims2("matmul_tn")?;
        if ra != rb {
            return Err(Error::shape("matmul_tn", format!("({ra}x{m})ᵀ by {rb}x{n}")));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        unsafe {
            S::gemm(
                m,
                ra,
                n,
                S::ONE,
                self.value(a).data.as_ptr(),
                1,
                m as isize,
                self.value(b).data.as_ptr(),
                n as isize,
                1,
                S::ZERO,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        self.push(out, Op::MatmulTN(a, b), "matmul_tn")
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = Tensor {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(&x, &y)| x + y)
                .collect(),
        };
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = Tensor {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(&x, &y)| x - y)
                .collect(),
        };
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = Tensor {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(&x, &y)| x * y)
                .collect(),
        };
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|&v| v * c).collect(),
        };
        self.push(out, Op::Scale(x, c), "scale")
    }

    /// x − s with s a scalar node, broadcast over every element of x.
    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("sub_scalar", "subtrahend must be scalar"));
        }
        let sv = self.value(s).data[0];
        let out = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|&v| v - sv).collect(),
        };
        self.push(out, Op::SubScalar(x, s), "sub_scalar")
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2("add_bias")?;
        if self.value(b).len() != c {
            return Err(Error::shape(
                "add_bias",
                format!("bias len {} vs {} cols", self.value(b).len(), c),
            ));
        }
        let bv = &self.value(b).data;
        let out = Tensor {
            shape: self.value(x).shape.clone(),
            data: self
                .value(x)
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bv[i % c])
                .collect(),
        };
        self.push(out, Op::AddBias(x, b), "add_bias")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|&v| v.exp()).collect(),
        };
        self.push(out, Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|&v| v.ln()).collect(),
        };
        self.push(out, Op::Log(x), "log")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|&v| v.max(S::ZERO)).collect(),
        };
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        let out = Tensor {
            shape: self.value(x).shape.clone(),
            data: self
                .value(x)
                .data
                .iter()
                .map(|&v| v.max(lo).min(hi))
                .collect(),
        };
        self.push(out, Op::Clamp(x, lo, hi), "clamp")
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).clone();
        self.push(out, Op::StopGrad(x), "stop_gradient")
    }

    // ---- normalizations ----

    /// Rank-1 input normalizes the whole vector; rank-2 normalizes along the
    /// chosen axis with max-subtraction for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = match t.rank() {
            1 => (1usize, t.len()),
            2 => (t.shape[0], t.shape[1]),
            _ => return Err(Error::shape("softmax", format!("rank {}", t.rank()))),
        };
        if axis > 1 {
            return Err(Error::shape("softmax", format!("axis {axis}")));
        }
        let mut out = vec![S::ZERO; r * c];
        let (slices, len, stride, base_stride) = if axis == 1 || t.rank() == 1 {
            (r, c, 1usize, c)
        } else {
            (c, r, c, 1usize)
        };
        for s in 0..slices {
            let base = s * base_stride;
            let mut mx = t.data[base];
            for i in 1..len {
                mx = mx.max(t.data[base + i * stride]);
            }
            let mut sum = S::ZERO;
            for i in 0..len {
                let e = (t.data[base + i * stride] - mx).exp();
                out[base + i * stride] = e;
                sum += e;
            }
            for i in 0..len {
                out[base + i * stride] = out[base + i * stride] / sum;
            }
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        self.push(out, Op::Softmax(x, axis), "softmax")
    }

    /// Row-wise zero mean, unit variance (ε inside the square root), then a
    /// per-column affine map. Rank-1 input is one row.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, d) = match t.rank() {
            1 => (1usize, t.len()),
            2 => (t.shape[0], t.shape[1]),
            _ => return Err(Error::shape("layer_norm", format!("rank {}", t.rank()))),
        };
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", "gain/bias width mismatch"));
        }
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = vec![S::ZERO; r * d];
        let inv_d = S::from_f64(1.0 / d as f64);
        let eps = S::from_f64(LN_EPS);
        for row in 0..r {
            let xs = &t.data[row * d..(row + 1) * d];
            let mut mean = S::ZERO;
            for &v in xs {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = S::ZERO;
            for &v in xs {
                let dvi = v - mean;
                var += dvi * dvi;
            }
            var = var * inv_d;
            let inv_std = S::ONE / (var + eps).sqrt();
            for i in 0..d {
                out[row * d + i] = (xs[i] - mean) * inv_std * g[i] + b[i];
            }
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        self.push(out, Op::LayerNorm(x, gain, bias), "layer_norm")
    }

    /// Columns divided by (column sum + ε). Requires nonnegative entries;
    /// attention weights are the only intended input.
    pub fn l1_normalize_columns(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2("l1_normalize_columns")?;
        let t = &self.value(x).data;
        if t.iter().any(|v| *v < S::ZERO) {
            return Err(Error::domain("l1_normalize_columns", "negative entry"));
        }
        let eps = S::from_f64(NORM_EPS);
        let mut colsum = vec![S::ZERO; k];
        for row in 0..n {
            for col in 0..k {
                colsum[col] += t[row * k + col];
            }
        }
        let mut out = vec![S::ZERO; n * k];
        for row in 0..n {
            for col in 0..k {
                out[row * k + col] = t[row * k + col] / (colsum[col] + eps);
            }
        }
        let out = Tensor {
            shape: vec![n, k],
            data: out,
        };
        self.push(out, Op::L1NormCols(x), "l1_normalize_columns")
    }

    /// Each row divided by (‖row‖₂ + ε).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, d) = match t.rank() {
            1 => (1usize, t.len()),
            2 => (t.shape[0], t.shape[1]),
            _ => {
                return Err(Error::shape(
                    "l2_normalize_rows",
                    format!("rank {}", t.rank()),
                ))
            }
        };
        let eps = S::from_f64(NORM_EPS);
        let mut out = vec![S::ZERO; r * d];
        for row in 0..r {
            let xs = &t.data[row * d..(row + 1) * d];
            let mut sq = S::ZERO;
            for &v in xs {
                sq += v * v;
            }
            let denom = sq.sqrt() + eps;
            for i in 0..d {
                out[row * d + i] = xs[i] / denom;
            }
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        self.push(out, Op::L2NormRows(x), "l2_normalize_rows")
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut s = S::ZERO;
        for &v in &self.value(x).data {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let mut s = S::ZERO;
        for &v in &self.value(x).data {
            s += v;
        }
        let m = s * S::from_f64(1.0 / n as f64);
        self.push(Tensor::scalar(m), Op::MeanAll(x), "mean_all")
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("sum_axis")?;
        if axis > 1 {
            return Err(Error::shape("sum_axis", format!("axis {axis}")));
        }
        let t = &self.value(x).data;
        let out = if axis == 0 {
            let mut o = vec![S::ZERO; c];
            for row in 0..r {
                for col in 0..c {
                    o[col] += t[row * c + col];
                }
            }
            Tensor {
                shape: vec![c],
                data: o,
            }
        } else {
            let mut o = vec![S::ZERO; r];
            for row in 0..r {
                for col in 0..c {
                    o[row] += t[row * c + col];
                }
            }
            Tensor {
                shape: vec![r],
                data: o,
            }
        };
        self.push(out, Op::SumAxis(x, axis), "sum_axis")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape("dot", "length mismatch"));
        }
        let mut s = S::ZERO;
        for (&x, &y) in self.value(a).data.iter().zip(&self.value(b).data) {
            s += x * y;
        }
        self.push(Tensor::scalar(s), Op::Dot(a, b), "dot")
    }

    // ---- structure ----

    pub fn stack_scalars(&mut self, vs: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(vs.len());
        for &v in vs {
            if self.value(v).len() != 1 {
                return Err(Error::shape("stack_scalars", "non-scalar input"));
            }
            data.push(self.value(v).data[0]);
        }
        let out = Tensor {
            shape: vec![vs.len()],
            data,
        };
        self.push(out, Op::StackScalars(vs.to_vec()), "stack_scalars")
    }

    /// [r0; r1] with t=2 becomes [r0; r0; r1; r1].
    pub fn repeat_rows(&mut self, x: Var, t: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("repeat_rows")?;
        if t == 0 {
            return Err(Error::shape("repeat_rows", "zero repeat"));
        }
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(r * t * c);
        for row in 0..r {
            for _ in 0..t {
                data.extend_from_slice(&src[row * c..(row + 1) * c]);
            }
        }
        let out = Tensor {
            shape: vec![r * t, c],
            data,
        };
        self.push(out, Op::RepeatRows(x, t), "repeat_rows")
    }

    /// [r0; r1] with t=2 becomes [r0; r1; r0; r1].
    pub fn tile_rows(&mut self, x: Var, t: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("tile_rows")?;
        if t == 0 {
            return Err(Error::shape("tile_rows", "zero repeat"));
        }
        let src = self.value(x).data.clone();
        let mut data = Vec::with_capacity(r * t * c);
        for _ in 0..t {
            data.extend_from_slice(&src);
        }
        let out = Tensor {
            shape: vec![r * t, c],
            data,
        };
        self.push(out, Op::TileRows(x, t), "tile_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_rows")?;
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let data = self.value(x).data[start * c..(start + len) * c].to_vec();
        let out = Tensor {
            shape: vec![len, c],
            data,
        };
        self.push(out, Op::SliceRows(x, start, len), "slice_rows")
    }

    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let (_, c) = self.value(vs[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in vs {
            let (ri, ci) = self.value(v).dims2("concat_rows")?;
            if ci != c {
                return Err(Error::shape("concat_rows", "column mismatch"));
            }
            rows += ri;
            data.extend_from_slice(&self.value(v).data);
        }
        let out = Tensor {
            shape: vec![rows, c],
            data,
        };
        self.push(out, Op::ConcatRows(vs.to_vec()), "concat_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {c}", start + len),
            ));
        }
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let out = Tensor {
            shape: vec![r, len],
            data,
        };
        self.push(out, Op::SliceCols(x, start, len), "slice_cols")
    }

    pub fn concat_cols(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let (r, _) = self.value(vs[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(vs.len());
        for &v in vs {
            let (ri, ci) = self.value(v).dims2("concat_cols")?;
            if ri != r {
                return Err(Error::shape("concat_cols", "row mismatch"));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![S::ZERO; r * total];
        let mut off = 0;
        for (i, &v) in vs.iter().enumerate() {
            let w = widths[i];
            let src = &self.value(v).data;
            for row in 0..r {
                data[row * total + off..row * total + off + w]
                    .copy_from_slice(&src[row * w..(row + 1) * w]);
            }
            off += w;
        }
        let out = Tensor {
            shape: vec![r, total],
            data,
        };
        self.push(out, Op::ConcatCols(vs.to_vec()), "concat_cols")
    }

    /// Extracts column `col` of an R×C tensor as a length-R vector.
    pub fn take_column(&mut self, x: Var, col: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("take_column")?;
        if col >= c {
            return Err(Error::shape("take_column", format!("col {col} of {c}")));
        }
        let src = &self.value(x).data;
        let data: Vec<S> = (0..r).map(|row| src[row * c + col]).collect();
        let out = Tensor {
            shape: vec![r],
            data,
        };
        self.push(out, Op::TakeColumn(x, col), "take_column")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let src = &self.value(x).data;
        let mut data = vec![S::ZERO; r * c];
        for row in 0..r {
            for col in 0..c {
                data[col * r + row] = src[row * c + col];
            }
        }
        let out = Tensor {
            shape: vec![c, r],
            data,
        };
        self.push(out, Op::Transpose(x), "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.value(x).shape, shape),
            ));
        }
        let out = Tensor {
            shape,
            data: self.value(x).data.clone(),
        };
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Position-wise slot mixture: feats is (K·N)×D slot-major, w is K×N;
    /// output row n is Σ_k w[k,n]·feats[k·N+n].
    pub fn weighted_mix(&mut self, feats: Var, w: Var) -> Result<Var> {
        let (kn, d) = self.value(feats).dims2("weighted_mix")?;
        let (k, n) = self.value(w).dims2("weighted_mix")?;
        if k * n != kn {
            return Err(Error::shape(
                "weighted_mix",
                format!("weights {k}x{n} vs {kn} feature rows"),
            ));
        }
        let f = &self.value(feats).data;
        let wv = &self.value(w).data;
        let mut data = vec![S::ZERO; n * d];
        for ki in 0..k {
            for ni in 0..n {
                let wkn = wv[ki * n + ni];
                let frow = &f[(ki * n + ni) * d..(ki * n + ni + 1) * d];
                let orow = &mut data[ni * d..(ni + 1) * d];
                for i in 0..d {
                    orow[i] += wkn * frow[i];
                }
            }
        }
        let out = Tensor {
            shape: vec![n, d],
            data,
        };
        self.push(out, Op::WeightedMix(feats, w), "weighted_mix")
    }

    // ---- backward ----

    /// Reverse accumulation from a scalar root. Gradients sum across fan-out.
    pub fn backward(&self, root: Var) -> Result<Grads<S>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", "root must be scalar"));
        }
        let mut g: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(vec![S::ONE]);
        for id in (0..=root.0).rev() {
            if g[id].is_none() {
                continue;
            }
            let node = &self.nodes[id];
            // Leaves and stop_gradient keep their grad but propagate nothing.
            match &node.op {
                Op::Leaf | Op::StopGrad(_) => continue,
                _ => {}
            }
            let dy = g[id].take().unwrap();
            self.backprop_op(id, &dy, &mut g);
            g[id] = Some(dy);
        }
        Ok(Grads { g })
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc<'a>(g: &'a mut [Option<Vec<S>>], v: Var, len: usize) -> &'a mut [S] {
        g[v.0].get_or_insert_with(|| vec![S::ZERO; len])
    }

    fn backprop_op(&self, id: usize, dy: &[S], g: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[1];
                if self.want(*a) {
                    let bp = self.value(*b).data.as_ptr();
                    let da = Self::acc(g, *a, m * k);
                    unsafe {
                        S::gemm(
                            m, n, k, S::ONE,
                            dy.as_ptr(), n as isize, 1,
                            bp, 1, n as isize,
                            S::ONE,
                            da.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
                if self.want(*b) {
                    let ap = self.value(*a).data.as_ptr();
                    let db = Self::acc(g, *b, k * n);
                    unsafe {
                        S::gemm(
                            k, m, n, S::ONE,
                            ap, 1, k as isize,
                            dy.as_ptr(), n as isize, 1,
                            S::ONE,
                            db.as_mut_ptr(), n as isize, 1,
                        );
                    }
                }
            }
            Op::Linear(x, w, b, relu) => {
                let (m, n) = (node.value.shape[0], node.value.shape[1]);
                let k = self.value(*x).shape[1];
                // Gate the upstream gradient through the activation once;
                // all three inputs then see the same gated slice.
                let gated: Vec<S>;
                let dys: &[S] = if *relu {
                    let y = &node.value.data;
                    gated = dy
                        .iter()
                        .zip(y.iter())
                        .map(|(&d, &yv)| if yv > S::ZERO { d } else { S::ZERO })
                        .collect();
                    &gated
                } else {
                    dy
                };
                if self.want(*b) {
                    let db = Self::acc(g, *b, n);
                    for row in dys.chunks(n) {
                        for (o, &d) in db.iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                }
                if self.want(*x) {
                    let wp = self.value(*w).data.as_ptr();
                    let dx = Self::acc(g, *x, m * k);
                    unsafe {
                        S::gemm(
                            m, n, k, S::ONE,
                            dys.as_ptr(), n as isize, 1,
                            wp, 1, n as isize,
                            S::ONE,
                            dx.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
                if self.want(*w) {
                    let xp = self.value(*x).data.as_ptr();
                    let dw = Self::acc(g, *w, k * n);
                    unsafe {
                        S::gemm(
                            k, m, n, S::ONE,
                            xp, 1, k as isize,
                            dys.as_ptr(), n as isize, 1,
                            S::ONE,
                            dw.as_mut_ptr(), n as isize, 1,
                        );
                    }
                }
            }
            Op::MatmulNT(a, b) => {
                // C = A·Bᵀ with A m×k, B n×k.
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[0];
                if self.want(*a) {
                    let bp = self.value(*b).data.as_ptr();
                    let da = Self::acc(g, *a, m * k);
                    unsafe {
                        S::gemm(
                            m, n, k, S::ONE,
                            dy.as_ptr(), n as isize, 1,
                            bp, k as isize, 1,
                            S::ONE,
                            da.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
                if self.want(*b) {
                    let ap = self.value(*a).data.as_ptr();
                    let db = Self::acc(g, *b, n * k);
                    unsafe {
                        S::gemm(
                            n, m, k, S::ONE,
                            dy.as_ptr(), 1, n as isize,
                            ap, k as isize, 1,
                            S::ONE,
                            db.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
            }
            Op::MatmulTN(a, b) => {
                // C = Aᵀ·B with A r×m, B r×n.
                let (r, m) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[1];
                if self.want(*a) {
                    let bp = self.value(*b).data.as_ptr();
                    let da = Self::acc(g, *a, r * m);
                    unsafe {
                        S::gemm(
                            r, n, m, S::ONE,
                            bp, n as isize, 1,
                            dy.as_ptr(), 1, n as isize,
                            S::ONE,
                            da.as_mut_ptr(), m as isize, 1,
                        );
                    }
                }
                if self.want(*b) {
                    let ap = self.value(*a).data.as_ptr();
                    let db = Self::acc(g, *b, r * n);
                    unsafe {
                        S::gemm(
                            r, m, n, S::ONE,
                            ap, m as isize, 1,
                            dy.as_ptr(), n as isize, 1,
                            S::ONE,
                            db.as_mut_ptr(), n as isize, 1,
                        );
                    }
                }
            }
            Op::AddBias(x, b) => {
                let (r, c) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                if self.want(*x) {
                    let dx = Self::acc(g, *x, r * c);
                    for (o, &d) in dx.iter_mut().zip(dy) {
                        *o += d;
                    }
                }
                if self.want(*b) {
                    let db = Self::acc(g, *b, c);
                    for row in 0..r {
                        for col in 0..c {
                            db[col] += dy[row * c + col];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.want(v) {
                        let dv = Self::acc(g, v, dy.len());
                        for (o, &d) in dv.iter_mut().zip(dy) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.want(*a) {
                    let da = Self::acc(g, *a, dy.len());
                    for (o, &d) in da.iter_mut().zip(dy) {
                        *o += d;
                    }
                }
                if self.want(*b) {
                    let db = Self::acc(g, *b, dy.len());
                    for (o, &d) in db.iter_mut().zip(dy) {
                        *o += -d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.want(*a) {
                    let bd = &self.value(*b).data;
                    let da = Self::acc(g, *a, dy.len());
                    for i in 0..dy.len() {
                        da[i] += dy[i] * bd[i];
                    }
                }
                if self.want(*b) {
                    let ad = &self.value(*a).data;
                    let db = Self::acc(g, *b, dy.len());
                    for i in 0..dy.len() {
                        db[i] += dy[i] * ad[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.want(*x) {
                    let dx = Self::acc(g, *x, dy.len());
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * *c;
                    }
                }
            }
            Op::SubScalar(x, s) => {
                if self.want(*x) {
                    let dx = Self::acc(g, *x, dy.len());
                    for (o, &d) in dx.iter_mut().zip(dy) {
                        *o += d;
                    }
                }
                if self.want(*s) {
                    let mut sum = S::ZERO;
                    for &d in dy {
                        sum += d;
                    }
                    Self::acc(g, *s, 1)[0] += -sum;
                }
            }
            Op::Exp(x) => {
                if self.want(*x) {
                    let y = &node.value.data;
                    let dx = Self::acc(g, *x, dy.len());
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * y[i];
                    }
                }
            }
            Op::Log(x) => {
                if self.want(*x) {
                    let xv = &self.value(*x).data;
                    let dx = Self::acc(g, *x, dy.len());
                    for i in 0..dy.len() {
                        dx[i] += dy[i] / xv[i];
                    }
                }
            }
            Op::Relu(x) => {
                if self.want(*x) {
                    let xv = &self.value(*x).data;
                    let dx = Self::acc(g, *x, dy.len());
                    for i in 0..dy.len() {
                        if xv[i] > S::ZERO {
                            dx[i] += dy[i];
                        }
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                if self.want(*x) {
                    let xv = &self.value(*x).data;
                    let (lo, hi) = (*lo, *hi);
                    let dx = Self::acc(g, *x, dy.len());
                    for i in 0..dy.len() {
                        if xv[i] > lo && xv[i] < hi {
                            dx[i] += dy[i];
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                if self.want(*x) {
                    let y = &node.value;
                    let (r, c) = if y.rank() == 1 {
                        (1usize, y.len())
                    } else {
                        (y.shape[0], y.shape[1])
                    };
                    let (slices, len, stride, base_stride) = if *axis == 1 || y.rank() == 1 {
                        (r, c, 1usize, c)
                    } else {
                        (c, r, c, 1usize)
                    };
                    let yv = &y.data;
                    let dx = Self::acc(g, *x, dy.len());
                    for s in 0..slices {
                        let base = s * base_stride;
                        let mut dot = S::ZERO;
                        for i in 0..len {
                            let idx = base + i * stride;
                            dot += dy[idx] * yv[idx];
                        }
                        for i in 0..len {
                            let idx = base + i * stride;
                            dx[idx] += yv[idx] * (dy[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(x, gain, bias) => {
                let t = self.value(*x);
                let (r, d) = if t.rank() == 1 {
                    (1usize, t.len())
                } else {
                    (t.shape[0], t.shape[1])
                };
                let gv = &self.value(*gain).data;
                let inv_d = S::from_f64(1.0 / d as f64);
                let eps = S::from_f64(LN_EPS);
                // Recompute per-row normalized values; cheaper than caching.
                let mut xhat = vec![S::ZERO; r * d];
                let mut inv_std = vec![S::ZERO; r];
                for row in 0..r {
                    let xs = &t.data[row * d..(row + 1) * d];
                    let mut mean = S::ZERO;
                    for &v in xs {
                        mean += v;
                    }
                    mean = mean * inv_d;
                    let mut var = S::ZERO;
                    for &v in xs {
                        let dv = v - mean;
                        var += dv * dv;
                    }
                    var = var * inv_d;
                    inv_std[row] = S::ONE / (var + eps).sqrt();
                    for i in 0..d {
                        xhat[row * d + i] = (xs[i] - mean) * inv_std[row];
                    }
                }
                if self.want(*gain) {
                    let dg = Self::acc(g, *gain, d);
                    for row in 0..r {
                        for i in 0..d {
                            dg[i] += dy[row * d + i] * xhat[row * d + i];
                        }
                    }
                }
                if self.want(*bias) {
                    let db = Self::acc(g, *bias, d);
                    for row in 0..r {
                        for i in 0..d {
                            db[i] += dy[row * d + i];
                        }
                    }
                }
                if self.want(*x) {
                    let dx = Self::acc(g, *x, r * d);
                    for row in 0..r {
                        let mut mean_dxhat = S::ZERO;
                        let mut mean_dxhat_xhat = S::ZERO;
                        for i in 0..d {
                            let dxh = dy[row * d + i] * gv[i];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[row * d + i];
                        }
                        mean_dxhat = mean_dxhat * inv_d;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                        for i in 0..d {
                            let dxh = dy[row * d + i] * gv[i];
                            dx[row * d + i] += inv_std[row]
                                * (dxh - mean_dxhat - xhat[row * d + i] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::L1NormCols(x) => {
                if self.want(*x) {
                    let (n, k) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let xv = &self.value(*x).data;
                    let yv = &node.value.data;
                    let eps = S::from_f64(NORM_EPS);
                    let mut colsum = vec![S::ZERO; k];
                    for row in 0..n {
                        for col in 0..k {
                            colsum[col] += xv[row * k + col];
                        }
                    }
                    let mut coldot = vec![S::ZERO; k];
                    for row in 0..n {
                        for col in 0..k {
                            coldot[col] += dy[row * k + col] * yv[row * k + col];
                        }
                    }
                    let dx = Self::acc(g, *x, n * k);
                    for row in 0..n {
                        for col in 0..k {
                            dx[row * k + col] +=
                                (dy[row * k + col] - coldot[col]) / (colsum[col] + eps);
                        }
                    }
                }
            }
            Op::L2NormRows(x) => {
                if self.want(*x) {
                    let t = self.value(*x);
                    let (r, d) = if t.rank() == 1 {
                        (1usize, t.len())
                    } else {
                        (t.shape[0], t.shape[1])
                    };
                    let eps = S::from_f64(NORM_EPS);
                    let xv = &t.data;
                    let dx = Self::acc(g, *x, r * d);
                    for row in 0..r {
                        let xs = &xv[row * d..(row + 1) * d];
                        let mut sq = S::ZERO;
                        for &v in xs {
                            sq += v * v;
                        }
                        let norm = sq.sqrt();
                        let denom = norm + eps;
                        let mut dot = S::ZERO;
                        for i in 0..d {
                            dot += dy[row * d + i] * xs[i];
                        }
                        // d/dx_j [x/denom]: dY/denom − x·⟨dY,x⟩/(denom²·norm)
                        let coef = dot / (denom * denom * norm.max(S::from_f64(NORM_EPS)));
                        for i in 0..d {
                            dx[row * d + i] += dy[row * d + i] / denom - xs[i] * coef;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.want(*x) {
                    let n = self.value(*x).len();
                    let d = dy[0];
                    let dx = Self::acc(g, *x, n);
                    for o in dx.iter_mut() {
                        *o += d;
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.want(*x) {
                    let n = self.value(*x).len();
                    let d = dy[0] * S::from_f64(1.0 / n as f64);
                    let dx = Self::acc(g, *x, n);
                    for o in dx.iter_mut() {
                        *o += d;
                    }
                }
            }
            Op::SumAxis(x, axis) => {
                if self.want(*x) {
                    let (r, c) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let dx = Self::acc(g, *x, r * c);
                    if *axis == 0 {
                        for row in 0..r {
                            for col in 0..c {
                                dx[row * c + col] += dy[col];
                            }
                        }
                    } else {
                        for row in 0..r {
                            for col in 0..c {
                                dx[row * c + col] += dy[row];
                            }
                        }
                    }
                }
            }
            Op::Dot(a, b) => {
                let d = dy[0];
                if self.want(*a) {
                    let bv = &self.value(*b).data;
                    let da = Self::acc(g, *a, bv.len());
                    for i in 0..bv.len() {
                        da[i] += d * bv[i];
                    }
                }
                if self.want(*b) {
                    let av = &self.value(*a).data;
                    let db = Self::acc(g, *b, av.len());
                    for i in 0..av.len() {
                        db[i] += d * av[i];
                    }
                }
            }
            Op::StackScalars(vs) => {
                for (i, &v) in vs.iter().enumerate() {
                    if self.want(v) {
                        Self::acc(g, v, 1)[0] += dy[i];
                    }
                }
            }
            Op::RepeatRows(x, t) => {
                if self.want(*x) {
                    let (r, c) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let dx = Self::acc(g, *x, r * c);
                    for row in 0..r {
                        for rep in 0..*t {
                            let src = (row * t + rep) * c;
                            for i in 0..c {
                                dx[row * c + i] += dy[src + i];
                            }
                        }
                    }
                }
            }
            Op::TileRows(x, t) => {
                if self.want(*x) {
                    let (r, c) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let dx = Self::acc(g, *x, r * c);
                    for rep in 0..*t {
                        let base = rep * r * c;
                        for i in 0..r * c {
                            dx[i] += dy[base + i];
                        }
                    }
                }
            }
            Op::SliceRows(x, start, len) => {
                if self.want(*x) {
                    let (r, c) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let dx = Self::acc(g, *x, r * c);
                    for i in 0..len * c {
                        dx[start * c + i] += dy[i];
                    }
                }
            }
            Op::ConcatRows(vs) => {
                let mut off = 0;
                for &v in vs {
                    let n = self.value(v).len();
                    if self.want(v) {
                        let dv = Self::acc(g, v, n);
                        for i in 0..n {
                            dv[i] += dy[off + i];
                        }
                    }
                    off += n;
                }
            }
            Op::SliceCols(x, start, len) => {
                if self.want(*x) {
                    let (r, c) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let dx = Self::acc(g, *x, r * c);
                    for row in 0..r {
                        for i in 0..*len {
                            dx[row * c + start + i] += dy[row * len + i];
                        }
                    }
                }
            }
            Op::ConcatCols(vs) => {
                let total: usize = vs
                    .iter()
                    .map(|&v| self.value(v).shape[1])
                    .sum();
                let r = self.value(vs[0]).shape[0];
                let mut off = 0;
                for &v in vs {
                    let w = self.value(v).shape[1];
                    if self.want(v) {
                        let dv = Self::acc(g, v, r * w);
                        for row in 0..r {
                            for i in 0..w {
                                dv[row * w + i] += dy[row * total + off + i];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::TakeColumn(x, col) => {
                if self.want(*x) {
                    let (r, c) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let dx = Self::acc(g, *x, r * c);
                    for row in 0..r {
                        dx[row * c + col] += dy[row];
                    }
                }
            }
            Op::Transpose(x) => {
                if self.want(*x) {
                    let (r, c) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let dx = Self::acc(g, *x, r * c);
                    // dy has shape c×r.
                    for row in 0..r {
                        for col in 0..c {
                            dx[row * c + col] += dy[col * r + row];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.want(*x) {
                    let dx = Self::acc(g, *x, dy.len());
                    for (o, &d) in dx.iter_mut().zip(dy) {
                        *o += d;
                    }
                }
            }
            Op::WeightedMix(feats, w) => {
                let (k, n) = (self.value(*w).shape[0], self.value(*w).shape[1]);
                let d = self.value(*feats).shape[1];
                if self.want(*feats) {
                    let wv = &self.value(*w).data;
                    let df = Self::acc(g, *feats, k * n * d);
                    for ki in 0..k {
                        for ni in 0..n {
                            let wkn = wv[ki * n + ni];
                            let frow = &mut df[(ki * n + ni) * d..(ki * n + ni + 1) * d];
                            let dyrow = &dy[ni * d..(ni + 1) * d];
                            for i in 0..d {
                                frow[i] += wkn * dyrow[i];
                            }
                        }
                    }
                }
                if self.want(*w) {
                    let fv = &self.value(*feats).data;
                    let dw = Self::acc(g, *w, k * n);
                    for ki in 0..k {
                        for ni in 0..n {
                            let frow = &fv[(ki * n + ni) * d..(ki * n + ni + 1) * d];
                            let dyrow = &dy[ni * d..(ni + 1) * d];
                            let mut s = S::ZERO;
                            for i in 0..d {
                                s += frow[i] * dyrow[i];
                            }
                            dw[ki * n + ni] += s;
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Graph::new()
    }
}
