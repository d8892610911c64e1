//! Central finite differences against the tape's analytic gradients. All
//! checks run at f64: f32 quantization is far too coarse for the 1e-5 gate.
//!
//! Inputs that would place a kink (relu, clamp) within the probe step are
//! resampled away from it; a finite difference straddling a nondifferentiable
//! point does not estimate the derivative there.

use crate::config::{RunConfig, SlotKind};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::nn::ParamId;
use crate::objectives::{c3_loss, recon_loss, stage_batch, total_loss, BatchPairs, StagedBatch};
use crate::tensor::Tensor;
use crate::util::{derive_seed, seeded_rng};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-5;

/// |a−b| relative to the larger magnitude, floored at 1 so near-zero
/// gradients are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central-difference gradient of a scalar function at x.
pub fn fd_gradient<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + step;
        let fp = f(&xs)?;
        xs[i] = orig - step;
        let fm = f(&xs)?;
        xs[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    Ok(grad)
}

pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}

/// Checks one differentiable input of a graph computation: `build` receives
/// the input leaf and must return a scalar root. Returns the worst relative
/// error across entries.
pub fn check_input<B>(x0: &Tensor<f64>, mut build: B) -> Result<f64>
where
    B: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let shape = x0.shape.clone();
    let mut eval = |xs: &[f64]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(shape.clone(), xs.to_vec())?)?;
        let root = build(&mut g, x)?;
        Ok(g.value(root).item())
    };
    let fd = fd_gradient(&mut eval, &x0.data, FD_STEP)?;

    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone())?;
    let root = build(&mut g, x)?;
    let grads = g.backward(root)?;
    let analytic = grads.get(x).unwrap_or(&[]);
    if analytic.is_empty() {
        // No gradient reached the input; compare FD against zeros.
        return Ok(fd.iter().map(|&v| rel_err(0.0, v)).fold(0.0, f64::max));
    }
    Ok(max_rel_err(analytic, &fd))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform in [−2,2] with a margin kept around the given kink points so ±step
/// probes stay on one side.
fn away_from(rng: &mut ChaCha8Rng, n: usize, kinks: &[f64], margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect()
}

/// Scalar root that weights every output entry differently, so gradient
/// errors cannot cancel inside a plain sum.
fn probe(g: &mut Graph<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let n = g.value(y).len();
    let shape = g.value(y).shape.clone();
    let r = g.leaf(Tensor::new(shape, uniform(rng, n, -1.0, 1.0))?)?;
    let yr = g.mul(y, r)?;
    g.sum_all(yr)
}

pub struct OpCheck {
    pub name: &'static str,
    pub max_err: f64,
}

/// Gradient checks for every differentiable graph op, `seeds` random draws
/// each. Returns per-op worst errors.
pub fn op_suite(seeds: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   f: &mut dyn FnMut(u64) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            worst = worst.max(f(derive_seed(0x9d5c, &[s]))?);
        }
        out.push(OpCheck {
            name,
            max_err: worst,
        });
        Ok(())
    };

    run("matmul", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let a = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -2.0, 2.0))?;
        let bdat = uniform(&mut rng, 20, -2.0, 2.0);
        let e = check_input(&a, |g, x| {
            let b = g.leaf(Tensor::new(vec![4, 5], bdat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.matmul(x, b)?;
            probe(g, y, &mut prng)
        })?;
        // Also the second operand.
        let b = Tensor::new(vec![4, 5], bdat)?;
        let adat = a.data.clone();
        let e2 = check_input(&b, |g, x| {
            let a = g.leaf(Tensor::new(vec![3, 4], adat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.matmul(a, x)?;
            probe(g, y, &mut prng)
        })?;
        Ok(e.max(e2))
    })?;

    run("matmul_nt", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let a = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -2.0, 2.0))?;
        let bdat = uniform(&mut rng, 20, -2.0, 2.0);
        let e = check_input(&a, |g, x| {
            let b = g.leaf(Tensor::new(vec![5, 4], bdat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.matmul_nt(x, b)?;
            probe(g, y, &mut prng)
        })?;
        let b = Tensor::new(vec![5, 4], bdat)?;
        let adat = a.data.clone();
        let e2 = check_input(&b, |g, x| {
            let a = g.leaf(Tensor::new(vec![3, 4], adat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.matmul_nt(a, x)?;
            probe(g, y, &mut prng)
        })?;
        Ok(e.max(e2))
    })?;

    run("matmul_tn", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let a = Tensor::new(vec![4, 3], uniform(&mut rng, 12, -2.0, 2.0))?;
        let bdat = uniform(&mut rng, 20, -2.0, 2.0);
        let e = check_input(&a, |g, x| {
            let b = g.leaf(Tensor::new(vec![4, 5], bdat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.matmul_tn(x, b)?;
            probe(g, y, &mut prng)
        })?;
        let b = Tensor::new(vec![4, 5], bdat)?;
        let adat = a.data.clone();
        let e2 = check_input(&b, |g, x| {
            let a = g.leaf(Tensor::new(vec![4, 3], adat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.matmul_tn(a, x)?;
            probe(g, y, &mut prng)
        })?;
        Ok(e.max(e2))
    })?;

    run("add_bias", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![4, 5], uniform(&mut rng, 20, -2.0, 2.0))?;
        let bdat = uniform(&mut rng, 5, -2.0, 2.0);
        let e = check_input(&x, |g, x| {
            let b = g.leaf(Tensor::new(vec![5], bdat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.add_bias(x, b)?;
            probe(g, y, &mut prng)
        })?;
        let b = Tensor::new(vec![5], bdat)?;
        let xdat = x.data.clone();
        let e2 = check_input(&b, |g, bv| {
            let x = g.leaf(Tensor::new(vec![4, 5], xdat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.add_bias(x, bv)?;
            probe(g, y, &mut prng)
        })?;
        Ok(e.max(e2))
    })?;

    run("linear", &mut |seed| {
        // Draw until every pre-activation clears the relu kink by a wide
        // margin, so the ±step probes of any single entry stay on one side.
        let (xdat, wdat, bdat) = {
            let mut sub = 0u64;
            loop {
                let mut rng = seeded_rng(derive_seed(seed, &[sub]));
                let xd = uniform(&mut rng, 12, -2.0, 2.0);
                let wd = uniform(&mut rng, 20, -2.0, 2.0);
                let bd = uniform(&mut rng, 5, -2.0, 2.0);
                let clear = (0..3).all(|r| {
                    (0..5).all(|c| {
                        let pre: f64 = (0..4).map(|k| xd[r * 4 + k] * wd[k * 5 + c]).sum::<f64>()
                            + bd[c];
                        pre.abs() > 1e-2
                    })
                });
                if clear {
                    break (xd, wd, bd);
                }
                sub += 1;
            }
        };
        let mut worst = 0.0f64;
        for relu in [false, true] {
            let x = Tensor::new(vec![3, 4], xdat.clone())?;
            let (wd, bd) = (wdat.clone(), bdat.clone());
            worst = worst.max(check_input(&x, |g, xv| {
                let w = g.leaf(Tensor::new(vec![4, 5], wd.clone())?)?;
                let b = g.leaf(Tensor::new(vec![5], bd.clone())?)?;
                let mut prng = seeded_rng(seed ^ 1);
                let y = g.linear(xv, w, b, relu)?;
                probe(g, y, &mut prng)
            })?);
            let w = Tensor::new(vec![4, 5], wdat.clone())?;
            let (xd, bd) = (xdat.clone(), bdat.clone());
            worst = worst.max(check_input(&w, |g, wv| {
                let x = g.leaf(Tensor::new(vec![3, 4], xd.clone())?)?;
                let b = g.leaf(Tensor::new(vec![5], bd.clone())?)?;
                let mut prng = seeded_rng(seed ^ 1);
                let y = g.linear(x, wv, b, relu)?;
                probe(g, y, &mut prng)
            })?);
            let b = Tensor::new(vec![5], bdat.clone())?;
            let (xd, wd) = (xdat.clone(), wdat.clone());
            worst = worst.max(check_input(&b, |g, bv| {
                let x = g.leaf(Tensor::new(vec![3, 4], xd.clone())?)?;
                let w = g.leaf(Tensor::new(vec![4, 5], wd.clone())?)?;
                let mut prng = seeded_rng(seed ^ 1);
                let y = g.linear(x, w, bv, relu)?;
                probe(g, y, &mut prng)
            })?);
        }
        Ok(worst)
    })?;

    run("add_sub_mul_scale", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -2.0, 2.0))?;
        let other = uniform(&mut rng, 12, -2.0, 2.0);
        check_input(&x, |g, x| {
            let o = g.leaf(Tensor::new(vec![3, 4], other.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let a = g.add(x, o)?;
            let s = g.sub(a, x)?;
            let m = g.mul(s, x)?;
            let sc = g.scale(m, 0.7)?;
            probe(g, sc, &mut prng)
        })
    })?;

    run("sub_scalar", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![6], uniform(&mut rng, 6, -2.0, 2.0))?;
        check_input(&x, |g, x| {
            let mut prng = seeded_rng(seed ^ 1);
            // Scalar comes from the same input so both paths are exercised.
            let m = g.mean_all(x)?;
            let y = g.sub_scalar(x, m)?;
            probe(g, y, &mut prng)
        })
    })?;

    run("exp", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -2.0, 2.0))?;
        check_input(&x, |g, x| {
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.exp(x)?;
            probe(g, y, &mut prng)
        })
    })?;

    run("log", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![3, 4], uniform(&mut rng, 12, 0.5, 2.5))?;
        check_input(&x, |g, x| {
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.log(x)?;
            probe(g, y, &mut prng)
        })
    })?;

    run("relu", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![3, 4], away_from(&mut rng, 12, &[0.0], 0.05))?;
        check_input(&x, |g, x| {
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.relu(x)?;
            probe(g, y, &mut prng)
        })
    })?;

    run("clamp", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![3, 4], away_from(&mut rng, 12, &[-1.5, 1.5], 0.05))?;
        check_input(&x, |g, x| {
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.clamp(x, -1.5, 1.5)?;
            probe(g, y, &mut prng)
        })
    })?;

    run("softmax_axis0", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![4, 3], uniform(&mut rng, 12, -2.0, 2.0))?;
        check_input(&x, |g, x| {
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.softmax(x, 0)?;
            probe(g, y, &mut prng)
        })
    })?;

    run("softmax_axis1", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![4, 3], uniform(&mut rng, 12, -2.0, 2.0))?;
        check_input(&x, |g, x| {
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.softmax(x, 1)?;
            probe(g, y, &mut prng)
        })
    })?;

    run("layer_norm", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![4, 6], uniform(&mut rng, 24, -2.0, 2.0))?;
        let gdat = uniform(&mut rng, 6, 0.5, 1.5);
        let bdat = uniform(&mut rng, 6, -0.5, 0.5);
        let e = check_input(&x, |g, x| {
            let gain = g.leaf(Tensor::new(vec![6], gdat.clone())?)?;
            let bias = g.leaf(Tensor::new(vec![6], bdat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.layer_norm(x, gain, bias)?;
            probe(g, y, &mut prng)
        })?;
        let xdat = x.data.clone();
        let gt = Tensor::new(vec![6], gdat)?;
        let e2 = check_input(&gt, |g, gain| {
            let x = g.leaf(Tensor::new(vec![4, 6], xdat.clone())?)?;
            let bias = g.leaf(Tensor::new(vec![6], bdat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.layer_norm(x, gain, bias)?;
            probe(g, y, &mut prng)
        })?;
        Ok(e.max(e2))
    })?;

    run("l1_normalize_columns", &mut |seed| {
        // Composed behind softmax, matching its use on attention columns.
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![5, 3], uniform(&mut rng, 15, -2.0, 2.0))?;
        check_input(&x, |g, x| {
            let mut prng = seeded_rng(seed ^ 1);
            let a = g.softmax(x, 1)?;
            let y = g.l1_normalize_columns(a)?;
            probe(g, y, &mut prng)
        })
    })?;

    run("l2_normalize_rows", &mut |seed| {
        let mut rng = seeded_rng(seed);
        // Rows bounded away from zero norm.
        let mut dat = uniform(&mut rng, 12, -2.0, 2.0);
        for r in 0..3 {
            let row = &mut dat[r * 4..(r + 1) * 4];
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 0.5 {
                for v in row.iter_mut() {
                    *v += 1.0;
                }
            }
        }
        let x = Tensor::new(vec![3, 4], dat)?;
        check_input(&x, |g, x| {
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.l2_normalize_rows(x)?;
            probe(g, y, &mut prng)
        })
    })?;

    run("reductions", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -2.0, 2.0))?;
        check_input(&x, |g, x| {
            let s0 = g.sum_axis(x, 0)?;
            let s1 = g.sum_axis(x, 1)?;
            let m = g.mean_all(x)?;
            let t = g.sum_all(s0)?;
            let u = g.sum_all(s1)?;
            let a = g.add(t, u)?;
            let b = g.add(a, m)?;
            // Make the reduction weights uneven.
            g.scale(b, 1.3)
        })
    })?;

    run("dot_stack", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![5], uniform(&mut rng, 5, -2.0, 2.0))?;
        let other = uniform(&mut rng, 5, -2.0, 2.0);
        check_input(&x, |g, x| {
            let o = g.leaf(Tensor::new(vec![5], other.clone())?)?;
            let d1 = g.dot(x, o)?;
            let d2 = g.dot(x, x)?;
            let st = g.stack_scalars(&[d1, d2])?;
            let mut prng = seeded_rng(seed ^ 1);
            probe(g, st, &mut prng)
        })
    })?;

    run("row_structure", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -2.0, 2.0))?;
        check_input(&x, |g, x| {
            let rep = g.repeat_rows(x, 2)?;
            let til = g.tile_rows(x, 2)?;
            let cat = g.concat_rows(&[rep, til])?;
            let sl = g.slice_rows(cat, 2, 7)?;
            let mut prng = seeded_rng(seed ^ 1);
            probe(g, sl, &mut prng)
        })
    })?;

    run("col_structure", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![3, 6], uniform(&mut rng, 18, -2.0, 2.0))?;
        check_input(&x, |g, x| {
            let a = g.slice_cols(x, 0, 2)?;
            let b = g.slice_cols(x, 2, 4)?;
            let cat = g.concat_cols(&[b, a])?;
            let col = g.take_column(cat, 1)?;
            let mut prng = seeded_rng(seed ^ 1);
            let p1 = probe(g, cat, &mut prng)?;
            let p2 = probe(g, col, &mut prng)?;
            g.add(p1, p2)
        })
    })?;

    run("transpose_reshape", &mut |seed| {
        let mut rng = seeded_rng(seed);
        let x = Tensor::new(vec![3, 4], uniform(&mut rng, 12, -2.0, 2.0))?;
        check_input(&x, |g, x| {
            let t = g.transpose(x)?;
            let r = g.reshape(t, vec![2, 6])?;
            let mut prng = seeded_rng(seed ^ 1);
            probe(g, r, &mut prng)
        })
    })?;

    run("weighted_mix", &mut |seed| {
        let mut rng = seeded_rng(seed);
        // K=3 slots, N=4 positions, D=2.
        let feats = Tensor::new(vec![12, 2], uniform(&mut rng, 24, -2.0, 2.0))?;
        let wdat = uniform(&mut rng, 12, -2.0, 2.0);
        let e = check_input(&feats, |g, f| {
            let w = g.leaf(Tensor::new(vec![3, 4], wdat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.weighted_mix(f, w)?;
            probe(g, y, &mut prng)
        })?;
        let fdat = feats.data.clone();
        let w = Tensor::new(vec![3, 4], wdat)?;
        let e2 = check_input(&w, |g, w| {
            let f = g.leaf(Tensor::new(vec![12, 2], fdat.clone())?)?;
            let mut prng = seeded_rng(seed ^ 1);
            let y = g.weighted_mix(f, w)?;
            probe(g, y, &mut prng)
        })?;
        Ok(e.max(e2))
    })?;

    Ok(out)
}

// ---- end-to-end losses ----

#[derive(Clone, Copy)]
pub enum LossKind {
    Contrastive,
    Reconstruction,
    Combined,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Contrastive => "contrastive",
            LossKind::Reconstruction => "reconstruction",
            LossKind::Combined => "combined",
        }
    }
}

pub struct LossCheck {
    pub name: &'static str,
    pub max_err: f64,
    /// Probes whose finite difference was compared against the tape.
    pub compared: usize,
    /// Probes discarded because the ±step evaluations landed on different
    /// sides of a relu or clamp kink.
    pub skipped: usize,
}

/// Small but structurally complete setup: grouped stochastic slots, two
/// refinement iterations, fusion MLP on, and a reconstruction branch with a
/// non-unit weight so the combined loss exercises the weighting.
fn tiny_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        d: 8,
        d_h: 8,
        t_iters: 2,
        k_g: 2,
        k_s: 2,
        slot_kind: SlotKind::Entity,
        interaction_heads: 2,
        fusion_mlp: true,
        lambda_recon: 0.5,
        temperature: 0.7,
        seed,
        ..RunConfig::default()
    };
    cfg.data.synthetic.feature_dim = 8;
    cfg
}

fn eval_loss(
    model: &Model<f64>,
    batch: &BatchPairs<f64>,
    kind: LossKind,
    slot_seed: u64,
) -> Result<(f64, Vec<u8>)> {
    let mut g = Graph::new();
    let st = model.ps.stage(&mut g)?;
    let sb = stage_batch(&mut g, batch)?;
    let parts = match kind {
        LossKind::Contrastive => c3_loss(&mut g, &st, model, &sb, slot_seed)?,
        LossKind::Reconstruction => recon_loss(&mut g, &st, model, &sb, slot_seed)?,
        LossKind::Combined => total_loss(&mut g, &st, model, &sb, slot_seed)?,
    };
    Ok((g.value(parts.total).item(), g.kink_pattern()))
}

/// One full loss check at the given seed: analytic gradients for every
/// parameter (and, for the contrastive loss, the visual inputs) against
/// central differences. Probes that straddle a relu or clamp kink are
/// discarded, since a finite difference there does not estimate a derivative.
///
/// Textual inputs are never probed: they enter only through stop_gradient,
/// so the tape's zero is intentionally not the derivative of the evaluated
/// function. Visual inputs are probed only for the contrastive loss; the
/// reconstruction target is also held behind stop_gradient.
pub fn loss_check(seed: u64, kind: LossKind) -> Result<LossCheck> {
    let cfg = tiny_cfg(seed);
    let grid = (2usize, 3usize);
    let n = grid.0 * grid.1;
    let d = cfg.d;
    let b = 2usize;
    let slot_seed = derive_seed(seed, &[9]);

    let mut model = Model::<f64>::init(cfg, grid)?;
    let mut rng = seeded_rng(derive_seed(seed, &[11]));
    let mut visual = Vec::with_capacity(b);
    let mut textual = Vec::with_capacity(b);
    for _ in 0..b {
        visual.push(Tensor::new(vec![n, d], uniform(&mut rng, n * d, -1.5, 1.5))?);
        textual.push(Tensor::new(vec![1, d], uniform(&mut rng, d, -1.5, 1.5))?);
    }
    let mut batch = BatchPairs::new(visual, textual)?;

    // Analytic pass: parameters staged as usual, visual inputs staged as
    // gradient-carrying leaves so their gradients are recorded too.
    let mut g = Graph::new();
    let st = model.ps.stage(&mut g)?;
    let mut vis_vars = Vec::with_capacity(b);
    let mut txt_vars = Vec::with_capacity(b);
    for v in &batch.visual {
        vis_vars.push(g.param(v.clone())?);
    }
    for t in &batch.textual {
        txt_vars.push(g.leaf(t.clone())?);
    }
    let sb = StagedBatch {
        visual: vis_vars.clone(),
        textual: txt_vars,
    };
    let parts = match kind {
        LossKind::Contrastive => c3_loss(&mut g, &st, &model, &sb, slot_seed)?,
        LossKind::Reconstruction => recon_loss(&mut g, &st, &model, &sb, slot_seed)?,
        LossKind::Combined => total_loss(&mut g, &st, &model, &sb, slot_seed)?,
    };
    let grads = g.backward(parts.total)?;
    let analytic_at = |pid: ParamId, j: usize| -> f64 {
        grads.get(st.var(pid)).map_or(0.0, |gs| gs[j])
    };

    // Probe set: the slot distribution parameters in full (the sampling path
    // has the most bespoke backward), a strided sample of everything else,
    // and a strided sample of the visual inputs where valid.
    let mut probes: Vec<(ParamId, usize)> = Vec::new();
    let mut global = 0usize;
    let stride = (model.ps.total_values() / 56).max(1);
    let offset = (seed as usize) % stride;
    for p in 0..model.ps.len() {
        let pid = ParamId(p);
        let full = model.ps.name(pid).starts_with("disc.mu")
            || model.ps.name(pid).starts_with("disc.log_sigma");
        for j in 0..model.ps.tensor(pid).len() {
            if full || global % stride == offset {
                probes.push((pid, j));
            }
            global += 1;
        }
    }

    let mut worst = 0.0f64;
    let mut compared = 0usize;
    let mut skipped = 0usize;
    for &(pid, j) in &probes {
        let orig = model.ps.tensor(pid).data[j];
        model.ps.tensor_mut(pid).data[j] = orig + FD_STEP;
        let (fp, kp) = eval_loss(&model, &batch, kind, slot_seed)?;
        model.ps.tensor_mut(pid).data[j] = orig - FD_STEP;
        let (fm, km) = eval_loss(&model, &batch, kind, slot_seed)?;
        model.ps.tensor_mut(pid).data[j] = orig;
        if kp != km {
            skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic_at(pid, j), fd));
        compared += 1;
    }

    if matches!(kind, LossKind::Contrastive) {
        for i in 0..b {
            let vgrads = grads.get(vis_vars[i]);
            for j in (0..n * d).step_by(4) {
                let orig = batch.visual[i].data[j];
                batch.visual[i].data[j] = orig + FD_STEP;
                let (fp, kp) = eval_loss(&model, &batch, kind, slot_seed)?;
                batch.visual[i].data[j] = orig - FD_STEP;
                let (fm, km) = eval_loss(&model, &batch, kind, slot_seed)?;
                batch.visual[i].data[j] = orig;
                if kp != km {
                    skipped += 1;
                    continue;
                }
                let fd = (fp - fm) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(vgrads.map_or(0.0, |gs| gs[j]), fd));
                compared += 1;
            }
        }
    }

    Ok(LossCheck {
        name: kind.name(),
        max_err: worst,
        compared,
        skipped,
    })
}

/// Gradient checks for every end-to-end loss, `seeds` random draws each.
pub fn loss_suite(seeds: u64) -> Result<Vec<LossCheck>> {
    let kinds = [
        LossKind::Contrastive,
        LossKind::Reconstruction,
        LossKind::Combined,
    ];
    let mut out = Vec::new();
    for kind in kinds {
        let mut agg = LossCheck {
            name: kind.name(),
            max_err: 0.0,
            compared: 0,
            skipped: 0,
        };
        for s in 0..seeds {
            let c = loss_check(derive_seed(0x5eed, &[s]), kind)?;
            agg.max_err = agg.max_err.max(c.max_err);
            agg.compared += c.compared;
            agg.skipped += c.skipped;
        }
        out.push(agg);
    }
    Ok(out)
}
