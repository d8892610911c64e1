//! Separates the failure modes a low mIoU can hide. Trains briefly, then
//! reports, per eval item: whether the slots carve the grid into the planted
//! instances at all (bottom-up ceiling), whether the text's relevance weights
//! land on the slot that owns the referent (top-down pointing), and the
//! batch retrieval accuracy of the contrastive logits.
//!
//! Usage: diag [items] [epochs] [seed] [offset_std]

use slotseg::data::{generate_synthetic, split_indices, Dataset};
use slotseg::graph::Graph;
use slotseg::inference::{predict_mask, Mask};
use slotseg::matching::match_masks;
use slotseg::metrics::EvalRecord;
use slotseg::model::Model;
use slotseg::scalar::Scalar;
use slotseg::tensor::Tensor;
use slotseg::train::{evaluate, train_with};
use slotseg::util::{derive_seed, retain_freed_memory, seeds};

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T {
    std::env::args()
        .nth(n)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

/// One mask per slot: the positions where that slot wins the row argmax.
fn slot_masks<S: Scalar>(a_slot: &Tensor<S>, gh: usize, gw: usize) -> Vec<Mask> {
    let (n, k) = (a_slot.shape[0], a_slot.shape[1]);
    let mut bits = vec![vec![0u8; n]; k];
    for pos in 0..n {
        let row = &a_slot.data[pos * k..(pos + 1) * k];
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        bits[best][pos] = 1;
    }
    bits.into_iter()
        .map(|b| Mask::new(gh, gw, b).expect("grid-sized mask"))
        .collect()
}

fn retrieval_accuracy<S: Scalar>(
    model: &Model<S>,
    data: &Dataset<S>,
    indices: &[usize],
    seed: u64,
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (bno, chunk) in indices.chunks(32).take(4).enumerate() {
        let b = chunk.len();
        let mut g = Graph::<S>::unchecked();
        let st = model.ps.stage(&mut g).unwrap();
        let xs: Vec<_> = chunk
            .iter()
            .map(|&i| g.leaf(data.items[i].visual.clone()).unwrap())
            .collect();
        let ts: Vec<_> = chunk
            .iter()
            .map(|&i| g.leaf(data.items[i].textual.clone()).unwrap())
            .collect();
        let ents: Vec<_> = xs
            .iter()
            .enumerate()
            .map(|(i, &xv)| {
                let (bank, _) = model
                    .disc
                    .discover(&mut g, &st, xv, derive_seed(seed, &[bno as u64, i as u64]))
                    .unwrap();
                bank.slots
            })
            .collect();
        let mut logits = vec![vec![0.0f64; b]; b];
        for i in 0..b {
            for (j, &tj) in ts.iter().enumerate() {
                let out = model.fusion.fuse(&mut g, &st, ents[i], tj).unwrap();
                let l = g.dot(out.z, tj).unwrap();
                logits[i][j] = g.value(l).item().to_f64();
            }
        }
        for j in 0..b {
            let mut best = 0usize;
            for i in 0..b {
                if logits[i][j] > logits[best][j] {
                    best = i;
                }
            }
            hits += usize::from(best == j);
            total += 1;
        }
    }
    hits as f64 / total.max(1) as f64
}

fn main() {
    retain_freed_memory();
    let items: usize = arg(1, 500);
    let epochs: usize = arg(2, 30);
    let seed: u64 = arg(3, 0);
    let offset_std: f64 = arg(4, 0.1);

    let mut cfg = slotseg::config::RunConfig::synthetic_small(seed);
    cfg.epochs = epochs;
    cfg.data.train_items = items * 4 / 5;
    cfg.data.eval_items = items - items * 4 / 5;
    cfg.data.synthetic.rng_seed = seed;
    cfg.data.synthetic.offset_std = offset_std;
    cfg.eval_every = 5;

    let data = generate_synthetic::<f32>(&cfg.data.synthetic, items).unwrap();
    let (_, eval_idx) = split_indices(data.items.len(), cfg.seed);
    let eval_seed = derive_seed(cfg.seed, &[seeds::EVAL]);

    let untrained = Model::<f32>::init(cfg.clone(), data.grid).unwrap();
    let base = evaluate(&untrained, &cfg, &data, &eval_idx, eval_seed).unwrap();
    eprintln!(
        "untrained: miou {:.4} ciou {:.4}",
        base.metrics.miou, base.metrics.ciou
    );

    let start = std::time::Instant::now();
    let result = train_with(&cfg, &data, |log| {
        let ev = log
            .eval
            .as_ref()
            .map(|m| format!("  miou {:.4} ciou {:.4}", m.miou, m.ciou))
            .unwrap_or_default();
        eprintln!(
            "epoch {:3}: loss {:.4} (c3 {:.4} recon {:.4}){ev}",
            log.epoch, log.loss, log.contrastive, log.reconstruction
        );
    })
    .unwrap();
    eprintln!("trained in {:.1}s", start.elapsed().as_secs_f64());
    let model = result.model;

    let acc = retrieval_accuracy(&model, &data, &eval_idx, derive_seed(seed, &[99]));
    eprintln!("retrieval accuracy (eval batches): {:.4}", acc);

    // Bottom-up ceiling and top-down pointing, from the same forwards the
    // evaluator runs.
    let (gh, gw) = data.grid;
    let mut matched_iou_all = 0.0;
    let mut n_inst = 0usize;
    let mut matched_iou_ref = 0.0;
    let mut n_ref = 0usize;
    let mut point_hits = 0usize;
    let mut point_mass = 0.0;
    let mut onehot_rec = EvalRecord::new();
    for &idx in &eval_idx {
        let item = &data.items[idx];
        let out = model
            .infer(&item.visual, &item.textual, derive_seed(eval_seed, &[idx as u64]))
            .unwrap();
        let cands = slot_masks(&out.a_slot, gh, gw);
        let refs: Vec<Mask> = item
            .instances
            .iter()
            .map(|inst| inst.mask(gh, gw).unwrap())
            .collect();
        let (assign, scores) = match_masks(&cands, &refs).unwrap();
        for (r, inst) in item.instances.iter().enumerate() {
            let iou = assign.score_of(&scores, r);
            matched_iou_all += iou;
            n_inst += 1;
            if inst.referred {
                matched_iou_ref += iou;
                n_ref += 1;
                if let Some(slot) = assign.of_reference[r] {
                    let af = &out.a_fuse.data;
                    let mut top = 0usize;
                    for (i, v) in af.iter().enumerate() {
                        if *v > af[top] {
                            top = i;
                        }
                    }
                    point_hits += usize::from(top == slot);
                    point_mass += af[slot].to_f64();

                    // Mask the referent would get if the relevance weights
                    // were a one-hot on its own best slot.
                    let k = af.len();
                    let mut onehot = vec![0.0f32; k];
                    onehot[slot] = 1.0;
                    let pred = predict_mask(
                        &out.a_slot,
                        &Tensor::new(vec![k], onehot).unwrap(),
                        gh,
                        gw,
                        gh * cfg.upsample,
                        gw * cfg.upsample,
                        cfg.tau,
                        cfg.scheme,
                    )
                    .unwrap();
                    let gt = item.gt.upscale_blocks(cfg.upsample).unwrap();
                    onehot_rec.accumulate(&pred, &gt).unwrap();
                }
            }
        }
    }
    eprintln!(
        "discovery: matched IoU {:.4} over {} instances, {:.4} over {} referents",
        matched_iou_all / n_inst as f64,
        n_inst,
        matched_iou_ref / n_ref as f64,
        n_ref
    );
    eprintln!(
        "pointing: top relevance weight on the referent's slot {:.4}, mean mass there {:.4}",
        point_hits as f64 / n_ref as f64,
        point_mass / n_ref as f64
    );
    if onehot_rec.count() > 0 {
        let m = onehot_rec.finalize().unwrap();
        eprintln!(
            "one-hot relevance oracle: miou {:.4} ciou {:.4}",
            m.miou, m.ciou
        );
    }
}
