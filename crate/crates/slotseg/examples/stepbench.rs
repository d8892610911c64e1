//! Where does a training step spend its time? Raw gemm rate at the decoder
//! shapes, then full steps with checked vs unchecked graphs.

use std::time::Instant;

use slotseg::config::RunConfig;
use slotseg::data::generate_synthetic;
use slotseg::graph::Graph;
use slotseg::model::Model;
use slotseg::nn::ParamId;
use slotseg::objectives::{stage_batch, total_loss, BatchPairs};
use slotseg::optim::AdamW;
use slotseg::tensor::Tensor;

fn raw_gemm(m: usize, k: usize, n: usize, reps: usize) -> f64 {
    let a = vec![1.0f32; m * k];
    let b = vec![1.0f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t = Instant::now();
    for _ in 0..reps {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / secs / 1e9
}

fn main() {
    slotseg::util::retain_freed_memory();
    for (m, k, n) in [(6912, 64, 128), (6912, 128, 128), (6912, 128, 65), (221184, 128, 128)] {
        let reps = (200_000_000 / (m * k * n)).max(1);
        println!("sgemm {m}x{k}x{n}: {:.1} GFLOP/s", raw_gemm(m, k, n, reps));
    }

    let cfg = RunConfig::synthetic_small(0);
    let data = generate_synthetic::<f32>(&cfg.data.synthetic, 64).unwrap();
    let model = Model::<f32>::init(cfg.clone(), data.grid).unwrap();
    let mut opt = AdamW::new(&model.ps, cfg.weight_decay);
    let mut model = model;

    for unchecked in [false, true] {
        let visual: Vec<Tensor<f32>> =
            (0..32).map(|i| data.items[i].visual.clone()).collect();
        let textual: Vec<Tensor<f32>> =
            (0..32).map(|i| data.items[i].textual.clone()).collect();
        let batch = BatchPairs::new(visual, textual).unwrap();
        let t = Instant::now();
        let mut g = if unchecked {
            Graph::<f32>::unchecked()
        } else {
            Graph::<f32>::new()
        };
        let st = model.ps.stage(&mut g).unwrap();
        let sb = stage_batch(&mut g, &batch).unwrap();
        let parts = total_loss(&mut g, &st, &model, &sb, 7).unwrap();
        let fwd = t.elapsed().as_secs_f64();
        let grads = g.backward(parts.total).unwrap();
        let bwd = t.elapsed().as_secs_f64() - fwd;
        let slices: Vec<Option<&[f32]>> = (0..model.ps.len())
            .map(|p| grads.get(st.var(ParamId(p))))
            .collect();
        opt.apply(&mut model.ps, &slices, 1e-4);
        println!(
            "step unchecked={unchecked}: fwd {fwd:.2}s bwd {bwd:.2}s total {:.2}s ({} nodes)",
            t.elapsed().as_secs_f64(),
            g.count_op("leaf") // rough scale marker only
        );
    }
}
