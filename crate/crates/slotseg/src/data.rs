//! Planted-entity scenes: rectangular regions on a patch grid, each carrying
//! one group's prototype direction plus an instance offset, under isotropic
//! noise. The query vector names a subset of the instances; their union is
//! the ground truth. Everything is a pure function of the spec's seed.

use crate::config::SyntheticSpec;
use crate::error::{Error, Result};
use crate::inference::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::{derive_seed, seeded_rng, seeds};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const PLACEMENT_RETRIES: usize = 100;

#[derive(Clone, Debug)]
pub struct Instance {
    pub group: usize,
    /// (top, left, height, width) in patch cells.
    pub rect: (usize, usize, usize, usize),
    pub referred: bool,
}

impl Instance {
    pub fn mask(&self, grid_h: usize, grid_w: usize) -> Result<Mask> {
        let (top, left, h, w) = self.rect;
        let mut bits = vec![0u8; grid_h * grid_w];
        for y in top..top + h {
            for x in left..left + w {
                bits[y * grid_w + x] = 1;
            }
        }
        Mask::new(grid_h, grid_w, bits)
    }
}

/// One referring-segmentation example. File-loaded data leaves `instances`
/// empty; only the synthetic generator knows the planted layout.
#[derive(Clone, Debug)]
pub struct DataItem<S: Scalar> {
    /// N×D patch features.
    pub visual: Tensor<S>,
    /// 1×D query feature.
    pub textual: Tensor<S>,
    /// Patch-level referent mask (grid_h×grid_w).
    pub gt: Mask,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug)]
pub struct Dataset<S: Scalar> {
    pub grid: (usize, usize),
    pub feature_dim: usize,
    pub items: Vec<DataItem<S>>,
    /// (num_groups+1)×D orthonormal rows, background last. Kept in f64 for
    /// oracle checks regardless of the training precision.
    pub prototypes: Vec<Vec<f64>>,
}

fn normal_row(rng: &mut ChaCha8Rng, d: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite");
    (0..d).map(|_| dist.sample(rng)).collect()
}

/// Gram-Schmidt over Gaussian rows. Random Gaussian matrices are almost
/// surely full rank; a degenerate draw is rejected rather than patched.
fn orthonormal_rows(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = normal_row(rng, d, 1.0);
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= dot * pi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::State("degenerate prototype draw".into()));
        }
        for vi in &mut v {
            *vi /= norm;
        }
        rows.push(v);
    }
    Ok(rows)
}

fn rects_overlap(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    let (at, al, ah, aw) = a;
    let (bt, bl, bh, bw) = b;
    at < bt + bh && bt < at + ah && al < bl + bw && bl < al + aw
}

/// Places up to `want` non-overlapping rectangles. Later rectangles that do
/// not fit after bounded retries are dropped; an image that cannot hold even
/// one is a generation error.
fn place_instances(
    rng: &mut ChaCha8Rng,
    grid_h: usize,
    grid_w: usize,
    want: usize,
) -> Result<Vec<(usize, usize, usize, usize)>> {
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..want {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let h = rng.gen_range(1..=grid_h);
            let w = rng.gen_range(1..=grid_w);
            let top = rng.gen_range(0..=grid_h - h);
            let left = rng.gen_range(0..=grid_w - w);
            let cand = (top, left, h, w);
            if rects.iter().all(|&r| !rects_overlap(r, cand)) {
                rects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed && rects.is_empty() {
            return Err(Error::State(format!(
                "no instance placeable on a {grid_h}x{grid_w} grid after {PLACEMENT_RETRIES} tries"
            )));
        }
    }
    Ok(rects)
}

fn generate_item<S: Scalar>(
    spec: &SyntheticSpec,
    prototypes: &[Vec<f64>],
    item_seed: u64,
) -> Result<DataItem<S>> {
    let (gh, gw, d) = (spec.grid_h, spec.grid_w, spec.feature_dim);
    let g = spec.num_groups;
    let mut rng = seeded_rng(item_seed);

    let want = rng.gen_range(1..=spec.max_instances.max(1));
    let rects = place_instances(&mut rng, gh, gw, want)?;
    let groups: Vec<usize> = (0..rects.len()).map(|_| rng.gen_range(0..g)).collect();
    let offsets: Vec<Vec<f64>> = (0..rects.len())
        .map(|_| normal_row(&mut rng, d, spec.offset_std))
        .collect();

    // Which instance owns each patch; background is None.
    let mut owner: Vec<Option<usize>> = vec![None; gh * gw];
    for (i, &(top, left, h, w)) in rects.iter().enumerate() {
        for y in top..top + h {
            for x in left..left + w {
                owner[y * gw + x] = Some(i);
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("std is finite");
    let mut visual = Vec::with_capacity(gh * gw * d);
    for cell in &owner {
        let base: Vec<f64> = match cell {
            Some(i) => (0..d)
                .map(|j| prototypes[groups[*i]][j] + offsets[*i][j])
                .collect(),
            None => prototypes[g].clone(),
        };
        for b in &base {
            let x = if spec.noise_std > 0.0 {
                b + noise.sample(&mut rng)
            } else {
                *b
            };
            visual.push(S::from_f64(x));
        }
    }

    // Referred subset: a seeded shuffle's prefix, arity clamped to what was
    // actually placed.
    let arity = spec.referent_arity.max(1).min(rects.len());
    let mut order: Vec<usize> = (0..rects.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let referred: Vec<usize> = order[..arity].to_vec();

    let mut textual = vec![0.0f64; d];
    for &i in &referred {
        for (j, t) in textual.iter_mut().enumerate() {
            *t += (prototypes[groups[i]][j] + offsets[i][j]) / arity as f64;
        }
    }

    let mut gt_bits = vec![0u8; gh * gw];
    for (cell, bit) in owner.iter().zip(&mut gt_bits) {
        if let Some(i) = cell {
            if referred.contains(i) {
                *bit = 1;
            }
        }
    }

    let instances = rects
        .iter()
        .zip(&groups)
        .enumerate()
        .map(|(i, (&rect, &group))| Instance {
            group,
            rect,
            referred: referred.contains(&i),
        })
        .collect();

    Ok(DataItem {
        visual: Tensor::new(vec![gh * gw, d], visual)?,
        textual: Tensor::new(vec![1, d], textual.into_iter().map(S::from_f64).collect())?,
        gt: Mask::new(gh, gw, gt_bits)?,
        instances,
    })
}

/// Deterministic scene sampler: item i depends only on (rng_seed, i), so a
/// prefix of a larger dataset equals the smaller dataset.
pub fn generate_synthetic<S: Scalar>(spec: &SyntheticSpec, count: usize) -> Result<Dataset<S>> {
    if count == 0 {
        return Err(Error::domain("generate_synthetic", "zero items"));
    }
    if spec.grid_h == 0 || spec.grid_w == 0 || spec.feature_dim == 0 || spec.num_groups == 0 {
        return Err(Error::Config("empty synthetic extent".into()));
    }
    if spec.num_groups + 1 > spec.feature_dim {
        return Err(Error::Config(format!(
            "{} groups plus background need feature_dim > {}, got {}",
            spec.num_groups, spec.num_groups, spec.feature_dim
        )));
    }
    let mut proto_rng = seeded_rng(derive_seed(spec.rng_seed, &[seeds::DATA, 0]));
    let prototypes = orthonormal_rows(&mut proto_rng, spec.num_groups + 1, spec.feature_dim)?;
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let item_seed = derive_seed(spec.rng_seed, &[seeds::DATA, 1, i as u64]);
        items.push(generate_item(spec, &prototypes, item_seed)?);
    }
    Ok(Dataset {
        grid: (spec.grid_h, spec.grid_w),
        feature_dim: spec.feature_dim,
        items,
        prototypes,
    })
}

/// Deterministic 80/20 split by seeded shuffle; both sides nonempty when
/// n ≥ 2 and together they cover 0..n exactly once.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(derive_seed(seed, &[seeds::SHUFFLE]));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let cut = ((n * 4) / 5).clamp(usize::from(n > 1), n);
    let eval = order.split_off(cut);
    (order, eval)
}
