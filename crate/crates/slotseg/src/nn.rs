//! Parameter registry and the small layer vocabulary the model is built
//! from. Parameters live in a store as named master tensors; each forward
//! pass stages them into a fresh graph, so the tape never outlives a batch.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Inserts every parameter into the graph as a trainable leaf, in store
    /// order. Store order is fixed at construction, which keeps gradient
    /// accumulation and checkpoints deterministic.
    pub fn stage(&self, g: &mut Graph<S>) -> Result<Staged> {
        let mut vars = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            vars.push(g.param(t.clone())?);
        }
        Ok(Staged { vars })
    }

    pub fn map_to<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.map_to()).collect(),
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph handles for one staging of the store.
pub struct Staged {
    vars: Vec<Var>,
}

impl Staged {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn normal_tensor<S: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    std: f64,
) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            S::from_f64(v * std)
        })
        .collect();
    Tensor { shape, data }
}

/// Scale applied at init to the output layer of every residual branch.
/// The 1/√d_in weight init hands such a branch roughly unit-variance
/// entries, which across a d-wide row dwarfs the stream it is added to;
/// damping starts each block near the identity and lets training grow the
/// branch instead of first having to cancel it.
pub const RESIDUAL_DAMP: f64 = 0.1;

/// Scales a parameter in place (init-time use only).
pub fn damp<S: Scalar>(ps: &mut ParamStore<S>, id: ParamId, factor: f64) {
    let f = S::from_f64(factor);
    for v in &mut ps.tensor_mut(id).data {
        *v = *v * f;
    }
}

/// Linear map with bias. Weights N(0, 1/√d_in), bias zero.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<S: Scalar>(
        ps: &mut ParamStore<S>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = ps.add(format!("{prefix}.w"), normal_tensor(rng, vec![d_in, d_out], std));
        let b = ps.add(format!("{prefix}.b"), Tensor::zeros(vec![d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, st: &Staged, x: Var) -> Result<Var> {
        g.linear(x, st.var(self.w), st.var(self.b), false)
    }

    pub fn forward_relu<S: Scalar>(&self, g: &mut Graph<S>, st: &Staged, x: Var) -> Result<Var> {
        g.linear(x, st.var(self.w), st.var(self.b), true)
    }
}

/// Layer norm followed by a linear map: the q(·), k(·), v(·) projections.
pub struct LnLinear {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub lin: Linear,
}

impl LnLinear {
    pub fn init<S: Scalar>(
        ps: &mut ParamStore<S>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ln_g = ps.add(format!("{prefix}.ln_g"), Tensor::filled(vec![d_in], S::ONE));
        let ln_b = ps.add(format!("{prefix}.ln_b"), Tensor::zeros(vec![d_in]));
        let lin = Linear::init(ps, prefix, d_in, d_out, rng);
        LnLinear { ln_g, ln_b, lin }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, st: &Staged, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, st.var(self.ln_g), st.var(self.ln_b))?;
        self.lin.forward(g, st, n)
    }
}

/// linear→relu→…→linear over the given widths, optionally layer-norming the
/// input first. No activation after the last layer.
pub struct Mlp {
    pub ln: Option<(ParamId, ParamId)>,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init<S: Scalar>(
        ps: &mut ParamStore<S>,
        prefix: &str,
        widths: &[usize],
        with_ln: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(widths.len() >= 2);
        let ln = if with_ln {
            let g = ps.add(format!("{prefix}.ln_g"), Tensor::filled(vec![widths[0]], S::ONE));
            let b = ps.add(format!("{prefix}.ln_b"), Tensor::zeros(vec![widths[0]]));
            Some((g, b))
        } else {
            None
        };
        let layers = (0..widths.len() - 1)
            .map(|i| Linear::init(ps, &format!("{prefix}.fc{i}"), widths[i], widths[i + 1], rng))
            .collect();
        Mlp { ln, layers }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, st: &Staged, x: Var) -> Result<Var> {
        let mut h = match self.ln {
            Some((gain, bias)) => g.layer_norm(x, st.var(gain), st.var(bias))?,
            None => x,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            h = if i + 1 < self.layers.len() {
                layer.forward_relu(g, st, h)?
            } else {
                layer.forward(g, st, h)?
            };
        }
        Ok(h)
    }
}

/// Pre-norm multi-head self-attention block with a residual MLP. One weight
/// set; callers apply it to every slot group, which is the weight sharing
/// the interaction step requires.
pub struct SelfAttention {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub mlp: Mlp,
    pub heads: usize,
    pub d: usize,
}

impl SelfAttention {
    pub fn init<S: Scalar>(
        ps: &mut ParamStore<S>,
        prefix: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        let ln1_g = ps.add(format!("{prefix}.ln1_g"), Tensor::filled(vec![d], S::ONE));
        let ln1_b = ps.add(format!("{prefix}.ln1_b"), Tensor::zeros(vec![d]));
        let wq = Linear::init(ps, &format!("{prefix}.q"), d, d, rng);
        let wk = Linear::init(ps, &format!("{prefix}.k"), d, d, rng);
        let wv = Linear::init(ps, &format!("{prefix}.v"), d, d, rng);
        let wo = Linear::init(ps, &format!("{prefix}.o"), d, d, rng);
        let mlp = Mlp::init(ps, &format!("{prefix}.mlp"), &[d, d * mlp_ratio, d], true, rng);
        // Both residual branches (attention output, mlp) start damped so a
        // fresh block is near the identity.
        damp(ps, wo.w, RESIDUAL_DAMP);
        damp(ps, mlp.layers.last().expect("mlp has layers").w, RESIDUAL_DAMP);
        Ok(SelfAttention {
            ln1_g,
            ln1_b,
            wq,
            wk,
            wv,
            wo,
            mlp,
            heads,
            d,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, st: &Staged, x: Var) -> Result<Var> {
        let hd = self.d / self.heads;
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());
        let h = g.layer_norm(x, st.var(self.ln1_g), st.var(self.ln1_b))?;
        let q = self.wq.forward(g, st, h)?;
        let k = self.wk.forward(g, st, h)?;
        let v = self.wv.forward(g, st, h)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        for hi in 0..self.heads {
            let qh = g.slice_cols(q, hi * hd, hd)?;
            let kh = g.slice_cols(k, hi * hd, hd)?;
            let vh = g.slice_cols(v, hi * hd, hd)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            head_outs.push(g.matmul(attn, vh)?);
        }
        let cat = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            g.concat_cols(&head_outs)?
        };
        let proj = self.wo.forward(g, st, cat)?;
        let x1 = g.add(x, proj)?;
        let m = self.mlp.forward(g, st, x1)?;
        g.add(x1, m)
    }
}
