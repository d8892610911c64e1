//! Training objectives. The contrastive loss fuses every image's entities
//! with every text in the batch and asks each text to pick out its own
//! image; the reconstruction loss asks the slots to explain the patch
//! features through the broadcast decoder. Entity discovery runs once per
//! image and its outputs feed all fusions and the decoder.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{as_row, Model};
use crate::nn::Staged;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::derive_seed;

pub struct BatchPairs<S: Scalar> {
    pub visual: Vec<Tensor<S>>,
    pub textual: Vec<Tensor<S>>,
}

impl<S: Scalar> BatchPairs<S> {
    /// Index i in `visual` matches index i in `textual`; that diagonal is
    /// the contrastive ground truth.
    pub fn new(visual: Vec<Tensor<S>>, textual: Vec<Tensor<S>>) -> Result<Self> {
        if visual.is_empty() || visual.len() != textual.len() {
            return Err(Error::shape(
                "batch",
                format!("{} visual vs {} textual", visual.len(), textual.len()),
            ));
        }
        let (n, d) = visual[0].dims2("batch")?;
        for v in &visual[1..] {
            if v.dims2("batch")? != (n, d) {
                return Err(Error::shape("batch", "visual shapes differ"));
            }
        }
        for t in &textual {
            let r = as_row(t)?;
            if r.shape[1] != d {
                return Err(Error::shape("batch", "textual dim differs"));
            }
        }
        Ok(BatchPairs { visual, textual })
    }

    pub fn len(&self) -> usize {
        self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }
}

/// Batch items staged on a graph. Tests may stage these with gradients
/// enabled to probe the stop-gradient contract.
pub struct StagedBatch {
    pub visual: Vec<Var>,
    pub textual: Vec<Var>,
}

pub fn stage_batch<S: Scalar>(g: &mut Graph<S>, batch: &BatchPairs<S>) -> Result<StagedBatch> {
    let mut visual = Vec::with_capacity(batch.len());
    let mut textual = Vec::with_capacity(batch.len());
    for v in &batch.visual {
        visual.push(g.leaf(v.clone())?);
    }
    for t in &batch.textual {
        textual.push(g.leaf(as_row(t)?)?);
    }
    Ok(StagedBatch { visual, textual })
}

pub struct LossParts {
    pub total: Var,
    pub c3: Var,
    pub recon: Option<Var>,
    pub discover_calls: usize,
    pub fuse_calls: usize,
}

/// One entity-discovery pass per image; the banks are shared downstream.
fn discover_batch<S: Scalar>(
    g: &mut Graph<S>,
    st: &Staged,
    model: &Model<S>,
    sb: &StagedBatch,
    rng_seed: u64,
) -> Result<Vec<Var>> {
    let mut entities = Vec::with_capacity(sb.visual.len());
    for (i, &xv) in sb.visual.iter().enumerate() {
        let (bank, _) = model
            .disc
            .discover(g, st, xv, derive_seed(rng_seed, &[i as u64]))?;
        entities.push(bank.slots);
    }
    Ok(entities)
}

pub struct C3Loss {
    pub loss: Var,
    /// z[i][j]: image i's entities fused with text j.
    pub z: Vec<Vec<Var>>,
    pub fuse_calls: usize,
}

/// Contrastive part given the discovered entities. Text enters through a
/// stop gradient at both of its uses (fusion query and logit target), so
/// the text features receive exactly zero gradient.
fn c3_from_entities<S: Scalar>(
    g: &mut Graph<S>,
    st: &Staged,
    model: &Model<S>,
    entities: &[Var],
    textual: &[Var],
    temperature: f64,
) -> Result<C3Loss> {
    let b = entities.len();
    let mut sg_t = Vec::with_capacity(b);
    for &t in textual {
        sg_t.push(g.stop_gradient(t)?);
    }
    let mut z = vec![Vec::with_capacity(b); b];
    let mut logits = vec![vec![Var(0); b]; b];
    let mut fuse_calls = 0;
    for i in 0..b {
        for j in 0..b {
            let out = model.fusion.fuse(g, st, entities[i], sg_t[j])?;
            fuse_calls += 1;
            let mut l = g.dot(out.z, sg_t[j])?;
            if temperature != 1.0 {
                l = g.scale(l, S::from_f64(1.0 / temperature))?;
            }
            z[i].push(out.z);
            logits[i][j] = l;
        }
    }
    // Per text j: -log softmax over images at the matching image, written
    // as log-sum-exp of logits shifted by the diagonal. The shift makes a
    // lone pair exactly 0 and a fully collapsed batch exactly ln B.
    let mut per_text = Vec::with_capacity(b);
    for j in 0..b {
        let mut shifted = Vec::with_capacity(b);
        for i in 0..b {
            shifted.push(g.sub(logits[i][j], logits[j][j])?);
        }
        let row = g.stack_scalars(&shifted)?;
        let e = g.exp(row)?;
        let s = g.sum_all(e)?;
        per_text.push(g.log(s)?);
    }
    let stacked = g.stack_scalars(&per_text)?;
    let loss = g.mean_all(stacked)?;
    Ok(C3Loss {
        loss,
        z,
        fuse_calls,
    })
}

/// Reconstruction part given the discovered entities: mean over the batch
/// of the summed squared residual against the (gradient-severed) features.
fn recon_from_entities<S: Scalar>(
    g: &mut Graph<S>,
    st: &Staged,
    model: &Model<S>,
    entities: &[Var],
    visual: &[Var],
) -> Result<Var> {
    let dec = model
        .decoder
        .as_ref()
        .ok_or_else(|| Error::State("reconstruction requested without a decoder".into()))?;
    let pe = dec.stage_pe(g)?;
    let mut per_item = Vec::with_capacity(entities.len());
    for (&ent, &xv) in entities.iter().zip(visual) {
        let y = dec.decode(g, st, ent, pe)?;
        let target = g.stop_gradient(xv)?;
        let r = g.sub(target, y)?;
        per_item.push(g.dot(r, r)?);
    }
    let stacked = g.stack_scalars(&per_item)?;
    g.mean_all(stacked)
}

fn combine<S: Scalar>(
    g: &mut Graph<S>,
    c3: Var,
    recon: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    match recon {
        None => Ok(c3),
        Some(r) if lambda == 1.0 => g.add(c3, r),
        Some(r) => {
            let s = g.scale(r, S::from_f64(lambda))?;
            g.add(c3, s)
        }
    }
}

/// Contrastive loss alone: B discovery passes, B² fusions.
pub fn c3_loss<S: Scalar>(
    g: &mut Graph<S>,
    st: &Staged,
    model: &Model<S>,
    sb: &StagedBatch,
    rng_seed: u64,
) -> Result<LossParts> {
    let entities = discover_batch(g, st, model, sb, rng_seed)?;
    let c3 = c3_from_entities(g, st, model, &entities, &sb.textual, model.cfg.temperature)?;
    Ok(LossParts {
        total: c3.loss,
        c3: c3.loss,
        recon: None,
        discover_calls: entities.len(),
        fuse_calls: c3.fuse_calls,
    })
}

/// Reconstruction loss alone: B discovery passes, no fusion.
pub fn recon_loss<S: Scalar>(
    g: &mut Graph<S>,
    st: &Staged,
    model: &Model<S>,
    sb: &StagedBatch,
    rng_seed: u64,
) -> Result<LossParts> {
    let entities = discover_batch(g, st, model, sb, rng_seed)?;
    let r = recon_from_entities(g, st, model, &entities, &sb.visual)?;
    Ok(LossParts {
        total: r,
        c3: r,
        recon: Some(r),
        discover_calls: entities.len(),
        fuse_calls: 0,
    })
}

/// c3 + λ·recon with the discovery outputs shared by both terms. λ = 0
/// (equivalently a decoder-less model) reduces to the contrastive loss.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    st: &Staged,
    model: &Model<S>,
    sb: &StagedBatch,
    rng_seed: u64,
) -> Result<LossParts> {
    let lambda = model.cfg.lambda_recon;
    let entities = discover_batch(g, st, model, sb, rng_seed)?;
    let c3 = c3_from_entities(g, st, model, &entities, &sb.textual, model.cfg.temperature)?;
    let recon = if lambda > 0.0 && model.decoder.is_some() {
        Some(recon_from_entities(g, st, model, &entities, &sb.visual)?)
    } else {
        None
    };
    let total = combine(g, c3.loss, recon, lambda)?;
    Ok(LossParts {
        total,
        c3: c3.loss,
        recon,
        discover_calls: entities.len(),
        fuse_calls: c3.fuse_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::nn::{normal_tensor, ParamId};
    use crate::util::seeded_rng;

    fn tiny_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::synthetic_small(seed);
        cfg.d = 12;
        cfg.d_h = 16;
        cfg.k_g = 2;
        cfg.k_s = 2;
        cfg.t_iters = 2;
        cfg.data.synthetic.feature_dim = 12;
        cfg
    }

    fn tiny_model(seed: u64) -> Model<f64> {
        Model::init(tiny_cfg(seed), (3, 4)).unwrap()
    }

    fn random_batch(b: usize, n: usize, d: usize, seed: u64) -> BatchPairs<f64> {
        let mut rng = seeded_rng(seed);
        let visual = (0..b).map(|_| normal_tensor(&mut rng, vec![n, d], 1.0)).collect();
        let textual = (0..b).map(|_| normal_tensor(&mut rng, vec![d], 1.0)).collect();
        BatchPairs::new(visual, textual).unwrap()
    }

    /// The loss formula recomputed with plain f64 loops from the fused
    /// embeddings and text features.
    fn c3_oracle(z: &[Vec<Vec<f64>>], t: &[Vec<f64>], temp: f64) -> f64 {
        let b = t.len();
        let logit = |i: usize, j: usize| -> f64 {
            z[i][j].iter().zip(&t[j]).map(|(a, b)| a * b).sum::<f64>() / temp
        };
        let mut total = 0.0;
        for j in 0..b {
            let ljj = logit(j, j);
            let s: f64 = (0..b).map(|i| (logit(i, j) - ljj).exp()).sum();
            total += s.ln();
        }
        total / b as f64
    }

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        let model = tiny_model(1);
        let batch = random_batch(1, 12, 12, 2);
        let mut g = Graph::new();
        let st = model.ps.stage(&mut g).unwrap();
        let sb = stage_batch(&mut g, &batch).unwrap();
        let parts = c3_loss(&mut g, &st, &model, &sb, 0).unwrap();
        assert_eq!(g.value(parts.total).item(), 0.0);
    }

    #[test]
    fn collapsed_embeddings_cost_exactly_log_b() {
        // Identical visual items under the deterministic Query slots give
        // identical entities, hence identical z for every image.
        let mut cfg = tiny_cfg(3);
        cfg.slot_kind = crate::config::SlotKind::Query;
        let model: Model<f64> = Model::init(cfg, (3, 4)).unwrap();
        let mut rng = seeded_rng(5);
        let one = normal_tensor(&mut rng, vec![12, 12], 1.0);
        let b = 4;
        let visual = vec![one; b];
        let textual = (0..b).map(|_| normal_tensor(&mut rng, vec![12], 1.0)).collect();
        let batch = BatchPairs::new(visual, textual).unwrap();
        let mut g = Graph::new();
        let st = model.ps.stage(&mut g).unwrap();
        let sb = stage_batch(&mut g, &batch).unwrap();
        let parts = c3_loss(&mut g, &st, &model, &sb, 9).unwrap();
        assert_eq!(g.value(parts.total).item(), (b as f64).ln());
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        for seed in 0..5 {
            let model = tiny_model(seed);
            let batch = random_batch(4, 12, 12, 100 + seed);
            let mut g = Graph::new();
            let st = model.ps.stage(&mut g).unwrap();
            let sb = stage_batch(&mut g, &batch).unwrap();
            let entities = discover_batch(&mut g, &st, &model, &sb, seed).unwrap();
            let c3 =
                c3_from_entities(&mut g, &st, &model, &entities, &sb.textual, 1.0).unwrap();
            let z_vals: Vec<Vec<Vec<f64>>> = c3
                .z
                .iter()
                .map(|row| row.iter().map(|&v| g.value(v).data.clone()).collect())
                .collect();
            let t_vals: Vec<Vec<f64>> = batch.textual.iter().map(|t| t.data.clone()).collect();
            let want = c3_oracle(&z_vals, &t_vals, 1.0);
            let got = g.value(c3.loss).item();
            assert!((got - want).abs() < 1e-6, "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn temperature_divides_the_logits() {
        let model = tiny_model(8);
        let batch = random_batch(3, 12, 12, 200);
        let mut g = Graph::new();
        let st = model.ps.stage(&mut g).unwrap();
        let sb = stage_batch(&mut g, &batch).unwrap();
        let entities = discover_batch(&mut g, &st, &model, &sb, 4).unwrap();
        let c3 = c3_from_entities(&mut g, &st, &model, &entities, &sb.textual, 0.25).unwrap();
        let z_vals: Vec<Vec<Vec<f64>>> = c3
            .z
            .iter()
            .map(|row| row.iter().map(|&v| g.value(v).data.clone()).collect())
            .collect();
        let t_vals: Vec<Vec<f64>> = batch.textual.iter().map(|t| t.data.clone()).collect();
        let want = c3_oracle(&z_vals, &t_vals, 0.25);
        let got = g.value(c3.loss).item();
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn text_features_get_exactly_zero_gradient() {
        let model = tiny_model(11);
        let batch = random_batch(3, 12, 12, 300);
        let mut g = Graph::new();
        let st = model.ps.stage(&mut g).unwrap();
        // Stage by hand with gradients enabled on both modalities.
        let mut visual = Vec::new();
        let mut textual = Vec::new();
        for v in &batch.visual {
            visual.push(g.param(v.clone()).unwrap());
        }
        for t in &batch.textual {
            textual.push(g.param(as_row(t).unwrap()).unwrap());
        }
        let sb = StagedBatch { visual, textual };
        let parts = total_loss(&mut g, &st, &model, &sb, 7).unwrap();
        let grads = g.backward(parts.total).unwrap();
        for &t in &sb.textual {
            match grads.get(t) {
                None => {}
                Some(gs) => assert!(gs.iter().all(|v| *v == 0.0)),
            }
        }
        // The visual path must carry gradient (through discovery).
        let gv = grads.get(sb.visual[0]).expect("visual gradient");
        assert!(gv.iter().any(|v| v.abs() > 1e-12));
    }

    #[test]
    fn discovery_runs_once_per_image_and_fusion_b_squared_times() {
        let model = tiny_model(13);
        let b = 3;
        let batch = random_batch(b, 12, 12, 400);
        let mut g = Graph::new();
        let st = model.ps.stage(&mut g).unwrap();
        let sb = stage_batch(&mut g, &batch).unwrap();
        let parts = total_loss(&mut g, &st, &model, &sb, 2).unwrap();
        assert_eq!(parts.discover_calls, b);
        assert_eq!(parts.fuse_calls, b * b);
        // Structural check, independent of the self-reported counters:
        // column normalization appears once per aggregation step and the
        // row normalizer once per fusion, nowhere else.
        assert_eq!(
            g.count_op("l1_normalize_columns"),
            b * model.cfg.t_iters,
            "discovery pass count"
        );
        assert_eq!(g.count_op("l2_normalize_rows"), b * b, "fusion call count");
    }

    #[test]
    fn reconstruction_of_its_own_decode_is_zero() {
        let model = tiny_model(17);
        let dec = model.decoder.as_ref().unwrap();
        let mut g = Graph::new();
        let st = model.ps.stage(&mut g).unwrap();
        let mut rng = seeded_rng(6);
        let ents = g.leaf(normal_tensor(&mut rng, vec![4, 12], 1.0)).unwrap();
        let pe = dec.stage_pe(&mut g).unwrap();
        let y = dec.decode(&mut g, &st, ents, pe).unwrap();
        let y_val = g.value(y).clone();
        let target = g.leaf(y_val).unwrap();
        let sb = StagedBatch {
            visual: vec![target],
            textual: vec![],
        };
        let r = recon_from_entities(&mut g, &st, &model, &[ents], &sb.visual).unwrap();
        assert_eq!(g.value(r).item(), 0.0);
    }

    #[test]
    fn zeroed_decoder_head_reconstructs_nothing() {
        let mut model = tiny_model(19);
        let (w_id, b_id) = {
            let last = model.decoder.as_ref().unwrap().mlp.layers.last().unwrap();
            (last.w, last.b)
        };
        for v in model.ps.tensor_mut(w_id).data.iter_mut() {
            *v = 0.0;
        }
        for v in model.ps.tensor_mut(b_id).data.iter_mut() {
            *v = 0.0;
        }
        let batch = random_batch(2, 12, 12, 500);
        let mut g = Graph::new();
        let st = model.ps.stage(&mut g).unwrap();
        let sb = stage_batch(&mut g, &batch).unwrap();
        let parts = recon_loss(&mut g, &st, &model, &sb, 1).unwrap();
        let want: f64 = batch
            .visual
            .iter()
            .map(|v| v.data.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            / 2.0;
        let got = g.value(parts.total).item();
        assert!((got - want).abs() < 1e-9 * want.max(1.0));
    }

    #[test]
    fn lambda_zero_is_contrastive_only() {
        let mut cfg = tiny_cfg(23);
        cfg.lambda_recon = 0.0;
        let model: Model<f64> = Model::init(cfg, (3, 4)).unwrap();
        let batch = random_batch(2, 12, 12, 600);
        let mut g = Graph::new();
        let st = model.ps.stage(&mut g).unwrap();
        let sb = stage_batch(&mut g, &batch).unwrap();
        let parts = total_loss(&mut g, &st, &model, &sb, 3).unwrap();
        assert!(parts.recon.is_none());
        assert_eq!(parts.total, parts.c3);
        assert_eq!(g.count_op("weighted_mix"), 0, "no decoder work at all");
    }

    #[test]
    fn total_combines_the_two_terms_linearly() {
        let mut cfg = tiny_cfg(29);
        cfg.lambda_recon = 0.7;
        let model: Model<f64> = Model::init(cfg, (3, 4)).unwrap();
        let batch = random_batch(2, 12, 12, 700);
        let mut g = Graph::new();
        let st = model.ps.stage(&mut g).unwrap();
        let sb = stage_batch(&mut g, &batch).unwrap();
        let parts = total_loss(&mut g, &st, &model, &sb, 5).unwrap();
        let c3 = g.value(parts.c3).item();
        let r = g.value(parts.recon.unwrap()).item();
        let tot = g.value(parts.total).item();
        assert!((tot - (c3 + 0.7 * r)).abs() < 1e-12);
        assert!(r > 0.0);
        assert!(c3 > 0.0);

        // The stated combination on hand-set sub-losses: 2 + 1·3 = 5.
        let two = g.leaf(Tensor::scalar(2.0)).unwrap();
        let three = g.leaf(Tensor::scalar(3.0)).unwrap();
        let five = combine(&mut g, two, Some(three), 1.0).unwrap();
        assert_eq!(g.value(five).item(), 5.0);
    }

    #[test]
    fn one_gradient_step_reduces_the_loss() {
        for seed in 0..10 {
            let mut model = tiny_model(40 + seed);
            let batch = random_batch(3, 12, 12, 800 + seed);
            let eval = |m: &Model<f64>, with_grads: bool| {
                let mut g = Graph::new();
                let st = m.ps.stage(&mut g).unwrap();
                let sb = stage_batch(&mut g, &batch).unwrap();
                let parts = total_loss(&mut g, &st, m, &sb, 99).unwrap();
                let loss = g.value(parts.total).item();
                let grads = if with_grads {
                    let gr = g.backward(parts.total).unwrap();
                    (0..m.ps.len())
                        .map(|i| gr.get(st.var(ParamId(i))).map(|s| s.to_vec()))
                        .collect()
                } else {
                    Vec::new()
                };
                (loss, grads)
            };
            let (before, grads) = eval(&model, true);
            let step = 1e-3;
            for (i, gopt) in grads.iter().enumerate() {
                if let Some(gs) = gopt {
                    let t = model.ps.tensor_mut(ParamId(i));
                    for (w, g) in t.data.iter_mut().zip(gs) {
                        *w -= step * g;
                    }
                }
            }
            let (after, _) = eval(&model, false);
            assert!(
                after < before,
                "seed {seed}: {before} -> {after} did not decrease"
            );
        }
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let mut rng = seeded_rng(1);
        let v1: Tensor<f64> = normal_tensor(&mut rng, vec![6, 12], 1.0);
        let v2: Tensor<f64> = normal_tensor(&mut rng, vec![7, 12], 1.0);
        let t: Tensor<f64> = normal_tensor(&mut rng, vec![12], 1.0);
        assert!(BatchPairs::new(vec![v1.clone(), v2], vec![t.clone(), t.clone()]).is_err());
        assert!(BatchPairs::new(vec![v1], vec![]).is_err());
        assert!(BatchPairs::<f64>::new(vec![], vec![]).is_err());
    }
}
