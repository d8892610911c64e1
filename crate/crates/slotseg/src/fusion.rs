//! Top-down fusion: the text feature queries the discovered entities through
//! one single-head cross-attention layer. Single-head on purpose: the
//! attention weights ARE the per-entity relevance distribution.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{damp, Linear, LnLinear, Mlp, ParamStore, Staged, RESIDUAL_DAMP};
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;

pub struct Fusion {
    pub d: usize,
    pub d_h: usize,
    pub q_proj: LnLinear,
    pub k_proj: LnLinear,
    pub v_proj: LnLinear,
    pub out: Linear,
    /// Optional residual MLP after the attention; `fusion_mlp = false` drops
    /// it for the minimal reading of the architecture.
    pub mlp: Option<Mlp>,
}

/// The fused embedding (unit row vector) and the relevance weights over
/// entities (a 1×K stochastic row).
pub struct CrossModalOutput {
    pub z: Var,
    pub a_fuse: Var,
}

impl Fusion {
    pub fn init<S: Scalar>(
        ps: &mut ParamStore<S>,
        d: usize,
        d_h: usize,
        with_mlp: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let f = Fusion {
            d,
            d_h,
            q_proj: LnLinear::init(ps, "fuse.q", d, d_h, rng),
            k_proj: LnLinear::init(ps, "fuse.k", d, d_h, rng),
            v_proj: LnLinear::init(ps, "fuse.v", d, d_h, rng),
            out: Linear::init(ps, "fuse.o", d_h, d, rng),
            mlp: with_mlp.then(|| Mlp::init(ps, "fuse.mlp", &[d, 4 * d, d], true, rng)),
        };
        // Tie the key projection to the query projection at init. For a
        // shared random W the product WᵀW concentrates on a multiple of the
        // identity, so the first attention pattern already ranks entities by
        // raw content similarity to the text instead of by projection noise.
        // The two matrices remain independent parameters afterwards.
        let qw = ps.tensor_mut(f.q_proj.lin.w).data.clone();
        ps.tensor_mut(f.k_proj.lin.w).data.copy_from_slice(&qw);
        // Both residual branches start damped so the fused vector begins
        // near the text feature instead of projection noise.
        damp(ps, f.out.w, RESIDUAL_DAMP);
        if let Some(m) = &f.mlp {
            let last = m.layers.last().expect("fusion mlp has layers");
            damp(ps, last.w, RESIDUAL_DAMP);
        }
        f
    }

    /// entities: K×D, x_t: 1×D. The text row is the query; the softmax runs
    /// over the K entities; the attended value rides a residual path back
    /// onto the text feature and is ℓ2-normalized.
    pub fn fuse<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        st: &Staged,
        entities: Var,
        x_t: Var,
    ) -> Result<CrossModalOutput> {
        let (k, d) = g.value(entities).dims2("fuse")?;
        if k == 0 {
            return Err(Error::shape("fuse", "zero entities"));
        }
        if d != self.d {
            return Err(Error::shape(
                "fuse",
                format!("entity dim {d} != {}", self.d),
            ));
        }
        let (rows, dt) = g.value(x_t).dims2("fuse")?;
        if rows != 1 || dt != self.d {
            return Err(Error::shape(
                "fuse",
                format!("text feature must be 1x{}, got {rows}x{dt}", self.d),
            ));
        }
        let q = self.q_proj.forward(g, st, x_t)?;
        let ke = self.k_proj.forward(g, st, entities)?;
        let ve = self.v_proj.forward(g, st, entities)?;
        let scores = g.matmul_nt(q, ke)?;
        let scaled = g.scale(scores, S::from_f64(1.0 / (self.d_h as f64).sqrt()))?;
        let a_fuse = g.softmax(scaled, 1)?;
        let attended = g.matmul(a_fuse, ve)?;
        let proj = self.out.forward(g, st, attended)?;
        let mut h = g.add(proj, x_t)?;
        if let Some(mlp) = &self.mlp {
            let m = mlp.forward(g, st, h)?;
            h = g.add(h, m)?;
        }
        let z = g.l2_normalize_rows(h)?;
        Ok(CrossModalOutput { z, a_fuse })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_tensor;
    use crate::tensor::Tensor;
    use crate::util::seeded_rng;

    fn setup(d: usize, d_h: usize, with_mlp: bool) -> (ParamStore<f64>, Fusion) {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(17);
        let f = Fusion::init(&mut ps, d, d_h, with_mlp, &mut rng);
        (ps, f)
    }

    fn run(
        ps: &ParamStore<f64>,
        f: &Fusion,
        ents: Tensor<f64>,
        text: Tensor<f64>,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let st = ps.stage(&mut g).unwrap();
        let e = g.leaf(ents).unwrap();
        let t = g.leaf(text).unwrap();
        let out = f.fuse(&mut g, &st, e, t).unwrap();
        (g.value(out.z).data.clone(), g.value(out.a_fuse).data.clone())
    }

    #[test]
    fn single_entity_takes_all_attention() {
        let (ps, f) = setup(8, 16, true);
        let mut rng = seeded_rng(1);
        let (_, a) = run(
            &ps,
            &f,
            normal_tensor(&mut rng, vec![1, 8], 1.0),
            normal_tensor(&mut rng, vec![1, 8], 1.0),
        );
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn identical_entities_share_attention_uniformly() {
        let (ps, f) = setup(8, 16, true);
        let mut rng = seeded_rng(2);
        let row: Tensor<f64> = normal_tensor(&mut rng, vec![1, 8], 1.0);
        let k = 6;
        let mut ents = Tensor::zeros(vec![k, 8]);
        for i in 0..k {
            ents.data[i * 8..(i + 1) * 8].copy_from_slice(&row.data);
        }
        let (_, a) = run(&ps, &f, ents, normal_tensor(&mut rng, vec![1, 8], 1.0));
        for v in &a {
            assert!((v - 1.0 / k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_entity_dominates() {
        let d = 16;
        let (mut ps, f) = setup(d, d, true);
        for proj in [&f.q_proj, &f.k_proj] {
            for v in ps.tensor_mut(proj.lin.b).data.iter_mut() {
                *v = 0.0;
            }
            let w = ps.tensor_mut(proj.lin.w);
            for i in 0..d {
                for j in 0..d {
                    w.data[i * d + j] = if i == j { 4.0 } else { 0.0 };
                }
            }
        }
        let mut rng = seeded_rng(3);
        let text: Tensor<f64> = normal_tensor(&mut rng, vec![1, d], 1.0);
        let mut ents: Tensor<f64> = normal_tensor(&mut rng, vec![5, d], 1.0);
        // Entity 2's key direction IS the text direction.
        ents.data[2 * d..3 * d].copy_from_slice(&text.data);
        let (_, a) = run(&ps, &f, ents, text);
        assert!(a[2] > 0.99, "got {a:?}");
    }

    #[test]
    fn output_is_unit_norm_and_a_fuse_stochastic() {
        for with_mlp in [false, true] {
            let (ps, f) = setup(12, 24, with_mlp);
            let mut rng = seeded_rng(4);
            let (z, a) = run(
                &ps,
                &f,
                normal_tensor(&mut rng, vec![7, 12], 1.0),
                normal_tensor(&mut rng, vec![1, 12], 1.0),
            );
            // The normalizer adds 1e-8 to the denominator, so the norm sits
            // just under 1; the contract is unit within 1e-6.
            let norm: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert_eq!(a.len(), 7);
            assert!(a.iter().all(|v| *v >= 0.0));
            let s: f64 = a.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_entities_permutes_attention_and_keeps_z() {
        let (ps, f) = setup(8, 16, true);
        let mut rng = seeded_rng(5);
        let ents: Tensor<f64> = normal_tensor(&mut rng, vec![4, 8], 1.0);
        let text: Tensor<f64> = normal_tensor(&mut rng, vec![1, 8], 1.0);
        // Rotate rows by one.
        let mut rot = Tensor::zeros(vec![4, 8]);
        for i in 0..4 {
            rot.data[i * 8..(i + 1) * 8].copy_from_slice(&ents.data[((i + 1) % 4) * 8..((i + 1) % 4 + 1) * 8]);
        }
        let (z1, a1) = run(&ps, &f, ents, text.clone());
        let (z2, a2) = run(&ps, &f, rot, text);
        for i in 0..4 {
            assert!((a2[i] - a1[(i + 1) % 4]).abs() < 1e-12);
        }
        for (x, y) in z1.iter().zip(&z2) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let (ps, f) = setup(8, 16, true);
        let mut g = Graph::new();
        let st = ps.stage(&mut g).unwrap();
        let empty = g.leaf(Tensor::zeros(vec![0, 8])).unwrap();
        let text = g.leaf(Tensor::zeros(vec![1, 8])).unwrap();
        assert!(f.fuse(&mut g, &st, empty, text).is_err());
        let ents = g.leaf(Tensor::zeros(vec![3, 8])).unwrap();
        let bad_text = g.leaf(Tensor::zeros(vec![2, 8])).unwrap();
        assert!(f.fuse(&mut g, &st, ents, bad_text).is_err());
    }
}
