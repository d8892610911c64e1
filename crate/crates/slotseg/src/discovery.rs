//! Bottom-up entity discovery: sample slots from learnable distributions,
//! then iterate competitive aggregation over patches and per-group slot
//! interaction. The final aggregation's attention map is the entity map.

use crate::config::SlotKind;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    damp, normal_tensor, Linear, LnLinear, Mlp, ParamId, ParamStore, SelfAttention, Staged,
    RESIDUAL_DAMP,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::seeded_rng;
use rand_chacha::ChaCha8Rng;

/// log σ is clamped to this range before exponentiation, so σ stays inside
/// [e^-6, e^2] no matter what the optimizer does.
pub const LOG_SIGMA_LO: f64 = -6.0;
pub const LOG_SIGMA_HI: f64 = 2.0;

/// Learnable slot initialization. Entity keeps one Gaussian per group,
/// Random one Gaussian for all slots, Query a fixed table row per slot.
pub enum SlotInit {
    Entity { mu: ParamId, log_sigma: ParamId },
    Random { mu: ParamId, log_sigma: ParamId },
    Query { table: ParamId },
}

/// Slots staged on a graph plus their group layout. Slot order is
/// group-major: rows [i·k_s, (i+1)·k_s) belong to group i.
pub struct SlotBank {
    pub slots: Var,
    pub k_g: usize,
    pub k_s: usize,
}

impl SlotBank {
    pub fn k(&self) -> usize {
        self.k_g * self.k_s
    }
}

/// Group index for each slot under group-major ordering.
pub fn group_of(k_g: usize, k_s: usize) -> Vec<usize> {
    (0..k_g * k_s).map(|k| k / k_s).collect()
}

pub struct Discovery {
    pub init: SlotInit,
    pub k_g: usize,
    pub k_s: usize,
    pub t_iters: usize,
    pub d: usize,
    pub d_h: usize,
    pub q_proj: LnLinear,
    pub k_proj: LnLinear,
    pub v_proj: LnLinear,
    pub w_o: Linear,
    pub refine: Mlp,
    /// One parameter set, applied to every group.
    pub interaction: SelfAttention,
}

impl Discovery {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        ps: &mut ParamStore<S>,
        kind: SlotKind,
        d: usize,
        d_h: usize,
        k_g: usize,
        k_s: usize,
        t_iters: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if k_g == 0 || k_s == 0 {
            return Err(Error::Config(format!(
                "k_g={k_g} k_s={k_s} must be positive"
            )));
        }
        if t_iters == 0 {
            return Err(Error::Config("t_iters must be at least 1".into()));
        }
        let mu_std = 1.0 / (d as f64).sqrt();
        // σ starts at μ's per-dimension scale, so a sampled slot is a
        // jittered copy of its mean rather than a noise vector that drowns
        // it (σ = 1 would give the noise a norm √d times the mean's).
        let ls0 = -0.5 * (d as f64).ln();
        let init = match kind {
            SlotKind::Entity => SlotInit::Entity {
                mu: ps.add("disc.mu", normal_tensor(rng, vec![k_g, d], mu_std)),
                log_sigma: ps.add(
                    "disc.log_sigma",
                    Tensor::filled(vec![k_g, d], S::from_f64(ls0)),
                ),
            },
            SlotKind::Random => SlotInit::Random {
                mu: ps.add("disc.mu", normal_tensor(rng, vec![1, d], mu_std)),
                log_sigma: ps.add(
                    "disc.log_sigma",
                    Tensor::filled(vec![1, d], S::from_f64(ls0)),
                ),
            },
            SlotKind::Query => SlotInit::Query {
                table: ps.add("disc.table", normal_tensor(rng, vec![k_g * k_s, d], mu_std)),
            },
        };
        let disc = Discovery {
            init,
            k_g,
            k_s,
            t_iters,
            d,
            d_h,
            q_proj: LnLinear::init(ps, "disc.q", d, d_h, rng),
            k_proj: LnLinear::init(ps, "disc.k", d, d_h, rng),
            v_proj: LnLinear::init(ps, "disc.v", d, d_h, rng),
            w_o: Linear::init(ps, "disc.o", d_h, d, rng),
            refine: Mlp::init(ps, "disc.refine", &[d, d, d], true, rng),
            interaction: SelfAttention::init(ps, "disc.inter", d, heads, 4, rng)?,
        };
        // Tie the patch keys to the slot queries at init: with a shared
        // random W the score WᵀW concentrates on a multiple of the identity,
        // so the first competition round already groups patches by content
        // similarity to the slots instead of by projection noise. The two
        // matrices remain independent parameters afterwards.
        let qw = ps.tensor(disc.q_proj.lin.w).data.clone();
        ps.tensor_mut(disc.k_proj.lin.w).data.copy_from_slice(&qw);
        // Residual branches (pooled update, refine mlp) start damped so an
        // aggregation round begins near the identity on the slots.
        damp(ps, disc.w_o.w, RESIDUAL_DAMP);
        damp(
            ps,
            disc.refine.layers.last().expect("refine has layers").w,
            RESIDUAL_DAMP,
        );
        Ok(disc)
    }

    /// Sample S⁰. Entity and Random reparameterize (μ + σ⊙η with η a
    /// gradient-free leaf), so dLoss/dμ and dLoss/dlog σ flow; Query copies
    /// the table. Deterministic for a fixed seed.
    pub fn init_slots<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        st: &Staged,
        rng_seed: u64,
    ) -> Result<SlotBank> {
        let k = self.k_g * self.k_s;
        let slots = match &self.init {
            SlotInit::Entity { mu, log_sigma } => {
                let mu_rep = g.repeat_rows(st.var(*mu), self.k_s)?;
                let ls_rep = g.repeat_rows(st.var(*log_sigma), self.k_s)?;
                self.sample(g, mu_rep, ls_rep, k, rng_seed)?
            }
            SlotInit::Random { mu, log_sigma } => {
                let mu_rep = g.repeat_rows(st.var(*mu), k)?;
                let ls_rep = g.repeat_rows(st.var(*log_sigma), k)?;
                self.sample(g, mu_rep, ls_rep, k, rng_seed)?
            }
            SlotInit::Query { table } => st.var(*table),
        };
        Ok(SlotBank {
            slots,
            k_g: self.k_g,
            k_s: self.k_s,
        })
    }

    fn sample<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        mu_rep: Var,
        ls_rep: Var,
        k: usize,
        rng_seed: u64,
    ) -> Result<Var> {
        let clamped = g.clamp(ls_rep, S::from_f64(LOG_SIGMA_LO), S::from_f64(LOG_SIGMA_HI))?;
        let sigma = g.exp(clamped)?;
        let mut rng = seeded_rng(rng_seed);
        let eta = g.leaf(normal_tensor(&mut rng, vec![k, self.d], 1.0))?;
        let noise = g.mul(sigma, eta)?;
        g.add(mu_rep, noise)
    }

    /// One competition step: patches distribute attention across slots, each
    /// slot pools the patches it won, and a residual MLP refines the result.
    /// Returns the updated bank and the patch-over-slot attention map.
    pub fn aggregation_block<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        st: &Staged,
        x_v: Var,
        bank: &SlotBank,
    ) -> Result<(SlotBank, Var)> {
        let kx = self.k_proj.forward(g, st, x_v)?;
        let vx = self.v_proj.forward(g, st, x_v)?;
        self.aggregation_with_kv(g, st, kx, vx, bank)
    }

    /// Same step with the patch keys/values precomputed; they do not depend
    /// on the slots, so the iteration loop hoists them.
    pub fn aggregation_with_kv<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        st: &Staged,
        kx: Var,
        vx: Var,
        bank: &SlotBank,
    ) -> Result<(SlotBank, Var)> {
        let (n, _) = g.value(kx).dims2("aggregation")?;
        if n == 0 {
            return Err(Error::shape("aggregation", "zero patches"));
        }
        let q = self.q_proj.forward(g, st, bank.slots)?;
        let scores = g.matmul_nt(kx, q)?;
        let scaled = g.scale(scores, S::from_f64(1.0 / (self.d_h as f64).sqrt()))?;
        // Each patch row is a distribution over slots: competition axis.
        let a_slot = g.softmax(scaled, 1)?;
        // Column normalization turns each slot's won attention into pooling
        // weights over patches.
        let w = g.l1_normalize_columns(a_slot)?;
        let pooled = g.matmul_tn(w, vx)?;
        let upd = self.w_o.forward(g, st, pooled)?;
        let s_hat = g.add(upd, bank.slots)?;
        let refined = self.refine.forward(g, st, s_hat)?;
        let slots = g.add(s_hat, refined)?;
        Ok((
            SlotBank {
                slots,
                k_g: bank.k_g,
                k_s: bank.k_s,
            },
            a_slot,
        ))
    }

    /// Run the shared self-attention layer over each group independently and
    /// reassemble in group-major order.
    pub fn interaction_block<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        st: &Staged,
        bank: &SlotBank,
    ) -> Result<SlotBank> {
        let slots = if bank.k_g == 1 {
            self.interaction.forward(g, st, bank.slots)?
        } else {
            let mut groups = Vec::with_capacity(bank.k_g);
            for i in 0..bank.k_g {
                let rows = g.slice_rows(bank.slots, i * bank.k_s, bank.k_s)?;
                groups.push(self.interaction.forward(g, st, rows)?);
            }
            g.concat_rows(&groups)?
        };
        Ok(SlotBank {
            slots,
            k_g: bank.k_g,
            k_s: bank.k_s,
        })
    }

    /// Full bottom-up pass: T rounds of aggregation + interaction from S⁰.
    /// Returns the final slots (the entity embeddings) and the attention map
    /// of the final aggregation. Gradients flow through every round.
    pub fn discover<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        st: &Staged,
        x_v: Var,
        rng_seed: u64,
    ) -> Result<(SlotBank, Var)> {
        let (n, d) = g.value(x_v).dims2("discover")?;
        if n == 0 {
            return Err(Error::shape("discover", "zero patches"));
        }
        if d != self.d {
            return Err(Error::shape(
                "discover",
                format!("feature dim {d} != {}", self.d),
            ));
        }
        let kx = self.k_proj.forward(g, st, x_v)?;
        let vx = self.v_proj.forward(g, st, x_v)?;
        let mut bank = self.init_slots(g, st, rng_seed)?;
        let mut a_slot = Var(0);
        for _ in 0..self.t_iters {
            let (updated, a) = self.aggregation_with_kv(g, st, kx, vx, &bank)?;
            bank = self.interaction_block(g, st, &updated)?;
            a_slot = a;
        }
        Ok((bank, a_slot))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    fn setup(
        kind: SlotKind,
        d: usize,
        d_h: usize,
        k_g: usize,
        k_s: usize,
        t: usize,
    ) -> (ParamStore<f64>, Discovery) {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(11);
        let disc = Discovery::init(&mut ps, kind, d, d_h, k_g, k_s, t, 4, &mut rng).unwrap();
        (ps, disc)
    }

    #[test]
    fn group_of_is_group_major() {
        assert_eq!(group_of(2, 3), vec![0, 0, 0, 1, 1, 1]);
        let g18 = group_of(18, 2);
        assert_eq!(g18.len(), 36);
        assert_eq!(&g18[..4], &[0, 0, 1, 1]);
        assert_eq!(&g18[34..], &[17, 17]);
    }

    #[test]
    fn zero_variance_slots_collapse_to_their_mean() {
        let (mut ps, disc) = setup(SlotKind::Entity, 16, 32, 3, 2, 1);
        // Drive log sigma to the lower clamp and give the means a norm well
        // above the residual noise floor sqrt(D)·e^-6.
        if let SlotInit::Entity { mu, log_sigma } = &disc.init {
            for v in ps.tensor_mut(*log_sigma).data.iter_mut() {
                *v = -20.0;
            }
            for v in ps.tensor_mut(*mu).data.iter_mut() {
                *v *= 40.0;
            }
        } else {
            unreachable!()
        }
        let mut g = Graph::new();
        let st = ps.stage(&mut g).unwrap();
        let bank = disc.init_slots(&mut g, &st, 5).unwrap();
        let slots = g.value(bank.slots).clone();
        let mu = match &disc.init {
            SlotInit::Entity { mu, .. } => ps.tensor(*mu).clone(),
            _ => unreachable!(),
        };
        for k in 0..6 {
            let grp = k / 2;
            let mu_row = &mu.data[grp * 16..(grp + 1) * 16];
            let s_row = &slots.data[k * 16..(k + 1) * 16];
            let mu_norm: f64 = mu_row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dist: f64 = mu_row
                .iter()
                .zip(s_row)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(
                dist <= 3e-3 * mu_norm,
                "slot {k} strayed {dist} from its mean (norm {mu_norm})"
            );
        }
    }

    #[test]
    fn slot_sampling_is_seed_deterministic() {
        let (ps, disc) = setup(SlotKind::Entity, 8, 16, 2, 2, 1);
        let draw = |seed: u64| {
            let mut g = Graph::new();
            let st = ps.stage(&mut g).unwrap();
            let bank = disc.init_slots(&mut g, &st, seed).unwrap();
            g.value(bank.slots).data.clone()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
        // Query initialization ignores the seed entirely.
        let (psq, discq) = setup(SlotKind::Query, 8, 16, 2, 2, 1);
        let drawq = |seed: u64| {
            let mut g = Graph::new();
            let st = psq.stage(&mut g).unwrap();
            let bank = discq.init_slots(&mut g, &st, seed).unwrap();
            g.value(bank.slots).data.clone()
        };
        assert_eq!(drawq(3), drawq(4));
    }

    #[test]
    fn random_kind_shares_one_distribution() {
        let (mut ps, disc) = setup(SlotKind::Random, 8, 16, 2, 2, 1);
        if let SlotInit::Random { mu, log_sigma } = &disc.init {
            assert_eq!(ps.tensor(*mu).shape, vec![1, 8]);
            for v in ps.tensor_mut(*log_sigma).data.iter_mut() {
                *v = -20.0;
            }
            for (i, v) in ps.tensor_mut(*mu).data.iter_mut().enumerate() {
                *v = 10.0 + i as f64;
            }
        } else {
            unreachable!()
        }
        let mut g = Graph::new();
        let st = ps.stage(&mut g).unwrap();
        let bank = disc.init_slots(&mut g, &st, 5).unwrap();
        let slots = g.value(bank.slots);
        // With sigma at the floor every slot hugs the single shared mean.
        for k in 0..4 {
            for j in 0..8 {
                let want = 10.0 + j as f64;
                assert!((slots.data[k * 8 + j] - want).abs() < 0.05);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (ps, disc) = setup(SlotKind::Entity, 16, 32, 3, 2, 1);
        let mut g = Graph::new();
        let st = ps.stage(&mut g).unwrap();
        let mut rng = seeded_rng(2);
        let x = g.leaf(normal_tensor(&mut rng, vec![10, 16], 1.0)).unwrap();
        let bank = disc.init_slots(&mut g, &st, 1).unwrap();
        let (_, a_slot) = disc.aggregation_block(&mut g, &st, x, &bank).unwrap();
        let a = g.value(a_slot);
        assert_eq!(a.shape, vec![10, 6]);
        for row in 0..10 {
            let s: f64 = a.data[row * 6..(row + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {row} sums to {s}");
        }
    }

    #[test]
    fn single_slot_reduces_to_mean_pooling() {
        let d = 8;
        let (mut ps, disc) = setup(SlotKind::Query, d, d, 1, 1, 1);
        // Identity output projection and a zeroed refine MLP leave the raw
        // update visible: slot = colmean(v(x)) + s0.
        for v in ps.tensor_mut(disc.w_o.b).data.iter_mut() {
            *v = 0.0;
        }
        {
            let w = ps.tensor_mut(disc.w_o.w);
            for i in 0..d {
                for j in 0..d {
                    w.data[i * d + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        for lin in &disc.refine.layers {
            for v in ps.tensor_mut(lin.w).data.iter_mut() {
                *v = 0.0;
            }
        }
        let mut g = Graph::new();
        let st = ps.stage(&mut g).unwrap();
        let mut rng = seeded_rng(9);
        let n = 7;
        let x = g.leaf(normal_tensor(&mut rng, vec![n, d], 1.0)).unwrap();
        let bank = disc.init_slots(&mut g, &st, 0).unwrap();
        let s0 = g.value(bank.slots).data.clone();
        let vx = disc.v_proj.forward(&mut g, &st, x).unwrap();
        let vx_val = g.value(vx).clone();
        let (updated, a_slot) = disc.aggregation_block(&mut g, &st, x, &bank).unwrap();

        let a = g.value(a_slot);
        assert_eq!(a.shape, vec![n, 1]);
        for v in &a.data {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let got = g.value(updated.slots);
        for j in 0..d {
            let mean: f64 = (0..n).map(|i| vx_val.data[i * d + j]).sum::<f64>() / n as f64;
            // The column normalizer adds 1e-8 to the denominator.
            let want = mean * (n as f64) / (n as f64 + 1e-8) + s0[j];
            assert!(
                (got.data[j] - want).abs() < 1e-9,
                "dim {j}: {} vs {want}",
                got.data[j]
            );
        }
    }

    #[test]
    fn dominant_key_alignment_wins_the_row() {
        let d = 16;
        let (mut ps, disc) = setup(SlotKind::Query, d, d, 6, 2, 1);
        // Make q and k near-identity with gain 4 so an exactly matching
        // direction scores c²·D/√D_h = 64 while random rows stay far below.
        for proj in [&disc.q_proj, &disc.k_proj] {
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
        let mut rng = seeded_rng(13);
        let x_t: Tensor<f64> = normal_tensor(&mut rng, vec![5, d], 1.0);
        // Slot 3 is patch 0's feature verbatim; every other slot is random.
        if let SlotInit::Query { table } = &disc.init {
            let tbl = ps.tensor_mut(*table);
            for j in 0..d {
                tbl.data[3 * d + j] = x_t.data[j];
            }
        } else {
            unreachable!()
        }
        let mut g = Graph::new();
        let st = ps.stage(&mut g).unwrap();
        let x = g.leaf(x_t).unwrap();
        let bank = disc.init_slots(&mut g, &st, 0).unwrap();
        let (_, a_slot) = disc.aggregation_block(&mut g, &st, x, &bank).unwrap();
        let a = g.value(a_slot);
        assert!(
            a.data[3] > 0.99,
            "patch 0 should lock onto slot 3, got {:?}",
            &a.data[..12]
        );
    }

    #[test]
    fn interaction_groups_do_not_mix() {
        let d = 8;
        let (ps, disc) = setup(SlotKind::Entity, d, 16, 3, 2, 1);
        let run = |slots: Tensor<f64>| {
            let mut g = Graph::new();
            let st = ps.stage(&mut g).unwrap();
            let sv = g.leaf(slots).unwrap();
            let bank = SlotBank {
                slots: sv,
                k_g: 3,
                k_s: 2,
            };
            let out = disc.interaction_block(&mut g, &st, &bank).unwrap();
            g.value(out.slots).data.clone()
        };
        let mut rng = seeded_rng(21);
        let base: Tensor<f64> = normal_tensor(&mut rng, vec![6, d], 1.0);
        let mut poked = base.clone();
        // Rewrite group 2 (rows 4..6) arbitrarily.
        for v in poked.data[4 * d..].iter_mut() {
            *v += 17.5;
        }
        let a = run(base);
        let b = run(poked);
        assert_eq!(&a[..4 * d], &b[..4 * d], "groups 0/1 must be untouched");
        assert_ne!(&a[4 * d..], &b[4 * d..]);
    }

    #[test]
    fn interaction_is_equivariant_within_a_group() {
        let d = 8;
        let (ps, disc) = setup(SlotKind::Entity, d, 16, 2, 2, 1);
        let mut rng = seeded_rng(23);
        let base: Tensor<f64> = normal_tensor(&mut rng, vec![4, d], 1.0);
        let mut swapped = base.clone();
        for j in 0..d {
            swapped.data.swap(j, d + j);
        }
        let run = |slots: Tensor<f64>| {
            let mut g = Graph::new();
            let st = ps.stage(&mut g).unwrap();
            let sv = g.leaf(slots).unwrap();
            let bank = SlotBank {
                slots: sv,
                k_g: 2,
                k_s: 2,
            };
            let out = disc.interaction_block(&mut g, &st, &bank).unwrap();
            g.value(out.slots).data.clone()
        };
        let a = run(base);
        let mut b = run(swapped);
        for j in 0..d {
            b.swap(j, d + j);
        }
        // The gemm kernel fuses one of the two products into an fma, so the
        // swapped-order sum can differ by an ulp; equivariance holds to that.
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn singleton_groups_match_row_by_row_attention() {
        let d = 8;
        let (ps, disc) = setup(SlotKind::Entity, d, 16, 2, 1, 1);
        let mut rng = seeded_rng(25);
        let rows: Tensor<f64> = normal_tensor(&mut rng, vec![2, d], 1.0);
        let mut g = Graph::new();
        let st = ps.stage(&mut g).unwrap();
        let sv = g.leaf(rows.clone()).unwrap();
        let bank = SlotBank {
            slots: sv,
            k_g: 2,
            k_s: 1,
        };
        let out = disc.interaction_block(&mut g, &st, &bank).unwrap();
        let grouped = g.value(out.slots).data.clone();
        // Each group holds one token, so the block must equal the shared
        // layer applied to each row alone.
        for i in 0..2 {
            let mut g2 = Graph::new();
            let st2 = ps.stage(&mut g2).unwrap();
            let row = Tensor::new(vec![1, d], rows.data[i * d..(i + 1) * d].to_vec()).unwrap();
            let rv = g2.leaf(row).unwrap();
            let solo = disc.interaction.forward(&mut g2, &st2, rv).unwrap();
            assert_eq!(&grouped[i * d..(i + 1) * d], &g2.value(solo).data[..]);
        }
    }

    #[test]
    fn discover_t1_is_one_aggregation_then_interaction() {
        let d = 8;
        let (ps, disc) = setup(SlotKind::Entity, d, 16, 2, 2, 1);
        let mut rng = seeded_rng(31);
        let x_t: Tensor<f64> = normal_tensor(&mut rng, vec![9, d], 1.0);

        let mut g = Graph::new();
        let st = ps.stage(&mut g).unwrap();
        let x = g.leaf(x_t.clone()).unwrap();
        let (bank, a) = disc.discover(&mut g, &st, x, 77).unwrap();
        let ent = g.value(bank.slots).data.clone();
        let a = g.value(a).data.clone();

        let mut g2 = Graph::new();
        let st2 = ps.stage(&mut g2).unwrap();
        let x2 = g2.leaf(x_t).unwrap();
        let s0 = disc.init_slots(&mut g2, &st2, 77).unwrap();
        let (s1, a2) = disc.aggregation_block(&mut g2, &st2, x2, &s0).unwrap();
        let s2 = disc.interaction_block(&mut g2, &st2, &s1).unwrap();
        assert_eq!(ent, g2.value(s2.slots).data);
        assert_eq!(a, g2.value(a2).data);
    }

    #[test]
    fn discover_rejects_bad_inputs() {
        let (ps, disc) = setup(SlotKind::Entity, 8, 16, 2, 2, 2);
        let mut g = Graph::new();
        let st = ps.stage(&mut g).unwrap();
        let empty = g.leaf(Tensor::zeros(vec![0, 8])).unwrap();
        assert!(disc.discover(&mut g, &st, empty, 0).is_err());
        let wrong = g.leaf(Tensor::zeros(vec![4, 9])).unwrap();
        assert!(disc.discover(&mut g, &st, wrong, 0).is_err());
    }

    #[test]
    fn reparameterized_sampling_carries_gradients() {
        let (ps, disc) = setup(SlotKind::Entity, 8, 16, 2, 2, 2);
        let mut g = Graph::new();
        let st = ps.stage(&mut g).unwrap();
        let mut rng = seeded_rng(41);
        let x = g.leaf(normal_tensor(&mut rng, vec![6, 8], 1.0)).unwrap();
        let (bank, _) = disc.discover(&mut g, &st, x, 3).unwrap();
        let loss = g.mean_all(bank.slots).unwrap();
        let grads = g.backward(loss).unwrap();
        if let SlotInit::Entity { mu, log_sigma } = &disc.init {
            let gmu = grads.get(st.var(*mu)).expect("mu gradient");
            let gls = grads.get(st.var(*log_sigma)).expect("log_sigma gradient");
            assert!(gmu.iter().any(|v| v.abs() > 1e-8));
            assert!(gls.iter().any(|v| v.abs() > 1e-8));
        } else {
            unreachable!()
        }
    }

    #[test]
    fn interaction_weights_exist_once_regardless_of_group_count() {
        let (ps2, _) = setup(SlotKind::Entity, 8, 16, 2, 2, 1);
        let (ps6, _) = setup(SlotKind::Entity, 8, 16, 6, 2, 1);
        let inter = |ps: &ParamStore<f64>| {
            ps.names()
                .iter()
                .filter(|n| n.starts_with("disc.inter."))
                .cloned()
                .collect::<Vec<_>>()
        };
        assert_eq!(inter(&ps2), inter(&ps6));
        assert!(!inter(&ps2).is_empty());
    }
}
