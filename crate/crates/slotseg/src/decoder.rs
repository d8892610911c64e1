//! Spatial broadcast decoder for feature-space reconstruction: every slot is
//! broadcast over all N positions, tagged with a fixed sinusoidal position
//! code, pushed through a shared MLP emitting D feature channels plus one
//! mixing logit, and the per-position mixture (softmax across slots) of the
//! decoded features reconstructs the patch features.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{damp, Mlp, ParamStore, Staged, RESIDUAL_DAMP};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// 1-D sinusoidal code over positions 0..n with the classic 10000^(2i/d)
/// frequency ladder; rows are positions.
pub fn sinusoid_table(n: usize, d: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![n, d]);
    for pos in 0..n {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            t.data[pos * d + 2 * i] = angle.sin();
            t.data[pos * d + 2 * i + 1] = angle.cos();
        }
        if d % 2 == 1 {
            let freq = 1.0 / 10000f64.powf((d - 1) as f64 / d as f64);
            t.data[pos * d + d - 1] = (pos as f64 * freq).sin();
        }
    }
    t
}

/// 2-D variant: the first d/2 channels encode the grid row, the rest the
/// grid column.
pub fn sinusoid_table_2d(h: usize, w: usize, d: usize) -> Result<Tensor<f64>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "2-d position code needs an even feature dim, got {d}"
        )));
    }
    let half = d / 2;
    let rows = sinusoid_table(h, half);
    let cols = sinusoid_table(w, half);
    let mut t = Tensor::zeros(vec![h * w, d]);
    for r in 0..h {
        for c in 0..w {
            let pos = r * w + c;
            t.data[pos * d..pos * d + half].copy_from_slice(&rows.data[r * half..(r + 1) * half]);
            t.data[pos * d + half..(pos + 1) * d]
                .copy_from_slice(&cols.data[c * half..(c + 1) * half]);
        }
    }
    Ok(t)
}

pub struct Decoder {
    pub d: usize,
    pub n: usize,
    pub mlp: Mlp,
    /// Fixed position code, N×D; not a learnable parameter.
    table: Tensor<f64>,
}

impl Decoder {
    /// `grid = Some((h, w))` selects the 2-D code (h·w must equal n);
    /// `None` numbers positions 0..n linearly.
    pub fn init<S: Scalar>(
        ps: &mut ParamStore<S>,
        d: usize,
        n: usize,
        grid: Option<(usize, usize)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("decoder needs at least one position".into()));
        }
        let table = match grid {
            Some((h, w)) => {
                if h * w != n {
                    return Err(Error::Config(format!("grid {h}x{w} != {n} positions")));
                }
                sinusoid_table_2d(h, w, d)?
            }
            None => sinusoid_table(n, d),
        };
        let mlp = Mlp::init(ps, "dec", &[d, 2 * d, 2 * d, 2 * d, d + 1], false, rng);
        // Damp the final layer so the initial reconstruction starts near
        // zero instead of dwarfing the feature scale: the position code
        // contributes O(1) per channel, which the default 1/√d_in init
        // amplifies into residuals far larger than the targets.
        damp(ps, mlp.layers.last().expect("decoder has layers").w, RESIDUAL_DAMP);
        Ok(Decoder { d, n, mlp, table })
    }

    /// Put the position table on a graph once; reuse the Var across decodes.
    pub fn stage_pe<S: Scalar>(&self, g: &mut Graph<S>) -> Result<Var> {
        g.leaf(self.table.map_to::<S>())
    }

    pub fn decode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        st: &Staged,
        slots: Var,
        pe: Var,
    ) -> Result<Var> {
        Ok(self.decode_parts(g, st, slots, pe)?.0)
    }

    /// Returns (reconstruction N×D, mixing weights K×N).
    pub fn decode_parts<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        st: &Staged,
        slots: Var,
        pe: Var,
    ) -> Result<(Var, Var)> {
        let (k, d) = g.value(slots).dims2("decode")?;
        if d != self.d {
            return Err(Error::shape(
                "decode",
                format!("slot dim {d} != {}", self.d),
            ));
        }
        let (pn, pd) = g.value(pe).dims2("decode")?;
        if pn != self.n || pd != self.d {
            return Err(Error::shape(
                "decode",
                format!("position table {pn}x{pd} != {}x{}", self.n, self.d),
            ));
        }
        let broad = g.repeat_rows(slots, self.n)?;
        let coded = {
            let tiled = g.tile_rows(pe, k)?;
            g.add(broad, tiled)?
        };
        let out = self.mlp.forward(g, st, coded)?;
        let feats = g.slice_cols(out, 0, self.d)?;
        let logit = g.take_column(out, self.d)?;
        let logit_kn = g.reshape(logit, vec![k, self.n])?;
        let weights = g.softmax(logit_kn, 0)?;
        let y = g.weighted_mix(feats, weights)?;
        Ok((y, weights))
    }
}
