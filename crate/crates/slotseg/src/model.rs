//! The full model: discovery, fusion, and (when reconstruction is on) the
//! decoder, all registered in one parameter store in a fixed order so that
//! checkpoints and optimizer state align by index across runs.

use crate::config::{PosEncoding, RunConfig};
use crate::decoder::Decoder;
use crate::discovery::Discovery;
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::graph::Graph;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::{derive_seed, seeded_rng, seeds};

pub struct Model<S: Scalar> {
    pub cfg: RunConfig,
    pub grid: (usize, usize),
    pub n: usize,
    pub ps: ParamStore<S>,
    pub disc: Discovery,
    pub fusion: Fusion,
    /// Present only when lambda_recon > 0; the reconstruction branch does
    /// not exist otherwise, in parameters or in compute.
    pub decoder: Option<Decoder>,
}

/// Plain-tensor outputs of a single-item forward pass.
pub struct InferOutput<S: Scalar> {
    /// N×K patch-over-slot attention from the final aggregation.
    pub a_slot: Tensor<S>,
    /// Length-K relevance weights.
    pub a_fuse: Tensor<S>,
    /// K×D final slots.
    pub entities: Tensor<S>,
    /// 1×D fused embedding.
    pub z: Tensor<S>,
}

/// Text features arrive as either a length-D vector or a 1×D row; fusion
/// wants the row form.
pub fn as_row<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    match t.rank() {
        1 => Ok(Tensor {
            shape: vec![1, t.len()],
            data: t.data.clone(),
        }),
        2 if t.shape[0] == 1 => Ok(t.clone()),
        _ => Err(Error::shape(
            "as_row",
            format!("expected vector, got {:?}", t.shape),
        )),
    }
}

impl<S: Scalar> Model<S> {
    pub fn init(cfg: RunConfig, grid: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        if grid.0 == 0 || grid.1 == 0 {
            return Err(Error::Config(format!("empty grid {}x{}", grid.0, grid.1)));
        }
        let n = grid.0 * grid.1;
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(derive_seed(cfg.seed, &[seeds::INIT]));
        let disc = Discovery::init(
            &mut ps,
            cfg.slot_kind,
            cfg.d,
            cfg.d_h,
            cfg.k_g,
            cfg.k_s,
            cfg.t_iters,
            cfg.interaction_heads,
            &mut rng,
        )?;
        let fusion = Fusion::init(&mut ps, cfg.d, cfg.d_h, cfg.fusion_mlp, &mut rng);
        let decoder = if cfg.lambda_recon > 0.0 {
            let pe_grid = match cfg.decoder_pe {
                PosEncoding::TwoD => Some(grid),
                PosEncoding::OneD => None,
            };
            Some(Decoder::init(&mut ps, cfg.d, n, pe_grid, &mut rng)?)
        } else {
            None
        };
        Ok(Model {
            cfg,
            grid,
            n,
            ps,
            disc,
            fusion,
            decoder,
        })
    }

    /// Discover → fuse for one item, values only. `slot_seed` fixes the slot
    /// sample, so identical calls return identical outputs.
    pub fn infer(&self, x_v: &Tensor<S>, x_t: &Tensor<S>, slot_seed: u64) -> Result<InferOutput<S>> {
        let mut g = Graph::new();
        let st = self.ps.stage(&mut g)?;
        let xv = g.leaf(x_v.clone())?;
        let xt = g.leaf(as_row(x_t)?)?;
        let (bank, a_slot) = self.disc.discover(&mut g, &st, xv, slot_seed)?;
        let fused = self.fusion.fuse(&mut g, &st, bank.slots, xt)?;
        let a_fuse = Tensor {
            shape: vec![g.value(fused.a_fuse).len()],
            data: g.value(fused.a_fuse).data.clone(),
        };
        Ok(InferOutput {
            a_slot: g.value(a_slot).clone(),
            a_fuse,
            entities: g.value(bank.slots).clone(),
            z: g.value(fused.z).clone(),
        })
    }
}
