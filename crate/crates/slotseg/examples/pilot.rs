//! Timing and convergence pilot at the synthetic-benchmark shape. Not part
//! of the test suite; run with --release and optional args:
//!   pilot [items] [epochs] [eval_every] [seed]

use std::time::Instant;

use slotseg::config::RunConfig;
use slotseg::data::{generate_synthetic, split_indices};
use slotseg::model::Model;
use slotseg::train::{evaluate, train_with};
use slotseg::util::{derive_seed, seeds};

fn main() {
    slotseg::util::retain_freed_memory();
    let args: Vec<String> = std::env::args().collect();
    let items: usize = args.get(1).map_or(250, |s| s.parse().unwrap());
    let epochs: usize = args.get(2).map_or(3, |s| s.parse().unwrap());
    let eval_every: usize = args.get(3).map_or(1, |s| s.parse().unwrap());
    let seed: u64 = args.get(4).map_or(0, |s| s.parse().unwrap());

    let mut cfg = RunConfig::synthetic_small(seed);
    cfg.epochs = epochs;
    cfg.eval_every = eval_every;
    cfg.data.train_items = items * 4 / 5;
    cfg.data.eval_items = items - items * 4 / 5;

    eprintln!(
        "pilot: {} items, {} epochs, d={} d_h={} k={} t={}",
        items,
        epochs,
        cfg.d,
        cfg.d_h,
        cfg.k(),
        cfg.t_iters
    );
    let t0 = Instant::now();
    let data = generate_synthetic::<f32>(&cfg.data.synthetic, items).unwrap();
    eprintln!("gen: {:.1}s", t0.elapsed().as_secs_f64());

    let untrained = Model::<f32>::init(cfg.clone(), data.grid).unwrap();
    let (_, eval_idx) = split_indices(data.items.len(), cfg.seed);
    let base = evaluate(
        &untrained,
        &cfg,
        &data,
        &eval_idx,
        derive_seed(cfg.seed, &[seeds::EVAL]),
    )
    .unwrap();
    eprintln!(
        "untrained: miou {:.4} ciou {:.4}",
        base.metrics.miou, base.metrics.ciou
    );

    let mut last = Instant::now();
    let r = train_with(&cfg, &data, |log| {
        let dt = last.elapsed().as_secs_f64();
        last = Instant::now();
        match &log.eval {
            Some(m) => eprintln!(
                "epoch {:>3}: loss {:.4} (c3 {:.4} recon {:.4})  miou {:.4} ciou {:.4}  [{:.1}s]",
                log.epoch, log.loss, log.contrastive, log.reconstruction, m.miou, m.ciou, dt
            ),
            None => eprintln!(
                "epoch {:>3}: loss {:.4} (c3 {:.4} recon {:.4})  [{:.1}s]",
                log.epoch, log.loss, log.contrastive, log.reconstruction, dt
            ),
        }
    })
    .unwrap();
    eprintln!(
        "total {:.1}s, final loss {:.4}",
        t0.elapsed().as_secs_f64(),
        r.log.last().unwrap().loss
    );
}
