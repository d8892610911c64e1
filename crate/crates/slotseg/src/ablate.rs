//! Sweep one configuration axis and score every variant. Axes that only
//! change how masks are read out (tau, scheme) train a single model and
//! re-score it; axes that change the model or objective train per variant.

use std::path::Path;

use crate::config::{RunConfig, Scheme, SlotKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::scalar::Scalar;
use crate::train::{evaluate, train};
use crate::util::{derive_seed, seeds};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    SlotKind,
    KgKs,
    TIters,
    Tau,
    Scheme,
    Loss,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Axis> {
        Ok(match s {
            "slot_kind" => Axis::SlotKind,
            "kgks" => Axis::KgKs,
            "t_iters" => Axis::TIters,
            "tau" => Axis::Tau,
            "scheme" => Axis::Scheme,
            "loss" => Axis::Loss,
            other => {
                return Err(Error::Config(format!(
                    "unknown axis {other:?}; expected slot_kind|kgks|t_iters|tau|scheme|loss"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::SlotKind => "slot_kind",
            Axis::KgKs => "kgks",
            Axis::TIters => "t_iters",
            Axis::Tau => "tau",
            Axis::Scheme => "scheme",
            Axis::Loss => "loss",
        }
    }

    /// Variants that only change mask readout reuse one trained model.
    pub fn eval_only(self) -> bool {
        matches!(self, Axis::Tau | Axis::Scheme)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: Metrics,
}

/// Slot-count splits at fixed K: every k_s in {1,2,3,4,6} that divides K.
/// At K=36 this is exactly 36x1, 18x2, 12x3, 9x4, 6x6.
fn kgks_variants(k: usize) -> Vec<(usize, usize)> {
    [1usize, 2, 3, 4, 6]
        .iter()
        .filter(|&&ks| k % ks == 0)
        .map(|&ks| (k / ks, ks))
        .collect()
}

fn variant_cfgs(axis: Axis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    let mut push = |name: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        out.push((name, c));
    };
    match axis {
        Axis::SlotKind => {
            for (name, kind) in [
                ("entity", SlotKind::Entity),
                ("random", SlotKind::Random),
                ("query", SlotKind::Query),
            ] {
                push(name.into(), &|c| c.slot_kind = kind);
            }
        }
        Axis::KgKs => {
            for (kg, ks) in kgks_variants(base.k()) {
                push(format!("{kg}x{ks}"), &|c| {
                    c.k_g = kg;
                    c.k_s = ks;
                });
            }
        }
        Axis::TIters => {
            for t in [1usize, 2, 4, 6, 8] {
                push(t.to_string(), &|c| c.t_iters = t);
            }
        }
        Axis::Tau => {
            for tau in [0.3, 0.4, 0.5, 0.6, 0.7] {
                push(format!("{tau:.1}"), &|c| c.tau = tau);
            }
        }
        Axis::Scheme => {
            for (name, s) in [
                ("compose", Scheme::Compose),
                ("avg", Scheme::Avg),
                ("max", Scheme::Max),
                ("min", Scheme::Min),
            ] {
                push(name.into(), &|c| c.scheme = s);
            }
        }
        Axis::Loss => {
            push("full".into(), &|_| {});
            push("wo_recon".into(), &|c| c.lambda_recon = 0.0);
        }
    }
    out
}

pub fn ablate<S: Scalar>(
    axis: Axis,
    cfg: &RunConfig,
    data: &Dataset<S>,
) -> Result<Vec<AblationRow>> {
    ablate_with(axis, cfg, data, |_, _| {})
}

/// Like `ablate`, reporting each finished row to `on_row`.
pub fn ablate_with<S: Scalar>(
    axis: Axis,
    cfg: &RunConfig,
    data: &Dataset<S>,
    mut on_row: impl FnMut(usize, &AblationRow),
) -> Result<Vec<AblationRow>> {
    let variants = variant_cfgs(axis, cfg);
    let mut rows = Vec::with_capacity(variants.len());
    let eval_seed = derive_seed(cfg.seed, &[seeds::EVAL]);
    if axis.eval_only() {
        let base = train(cfg, data)?;
        for (i, (variant, vcfg)) in variants.into_iter().enumerate() {
            let out = evaluate(&base.model, &vcfg, data, &base.eval_indices, eval_seed)?;
            let row = AblationRow { variant, metrics: out.metrics };
            on_row(i, &row);
            rows.push(row);
        }
    } else {
        for (i, (variant, vcfg)) in variants.into_iter().enumerate() {
            let trained = train(&vcfg, data)?;
            let out = evaluate(&trained.model, &vcfg, data, &trained.eval_indices, eval_seed)?;
            let row = AblationRow { variant, metrics: out.metrics };
            on_row(i, &row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Header `variant,ciou,miou,acc@0.3,acc@0.5,acc@0.7`, metrics at full
/// precision so the reader reproduces them exactly.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::State(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::State(format!("{}: {e}", path.display()));
    w.write_record(["variant", "ciou", "miou", "acc@0.3", "acc@0.5", "acc@0.7"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            format!("{:?}", r.metrics.ciou),
            format!("{:?}", r.metrics.miou),
            format!("{:?}", r.metrics.acc[0]),
            format!("{:?}", r.metrics.acc[1]),
            format!("{:?}", r.metrics.acc[2]),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::State(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::State(format!("{}: {e}", path.display()));
    let head = r.headers().map_err(io)?.clone();
    let want = ["variant", "ciou", "miou", "acc@0.3", "acc@0.5", "acc@0.7"];
    if head.iter().ne(want) {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: format!("header {head:?}, expected {want:?}"),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(io)?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format {
                    path: path.display().to_string(),
                    offset: 0,
                    detail: format!("bad numeric field {i} in {rec:?}"),
                })
        };
        rows.push(AblationRow {
            variant: rec.get(0).unwrap_or_default().to_string(),
            metrics: Metrics {
                ciou: num(1)?,
                miou: num(2)?,
                acc: [num(3)?, num(4)?, num(5)?],
            },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn tiny_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::synthetic_small(seed);
        cfg.d = 16;
        cfg.d_h = 24;
        cfg.k_g = 6;
        cfg.k_s = 2;
        cfg.t_iters = 2;
        cfg.interaction_heads = 2;
        cfg.epochs = 1;
        cfg.batch = 8;
        cfg.eval_every = 0;
        cfg.upsample = 2;
        cfg.data.train_items = 12;
        cfg.data.eval_items = 4;
        cfg.data.synthetic = crate::config::SyntheticSpec {
            grid_h: 5,
            grid_w: 5,
            num_groups: 3,
            max_instances: 2,
            feature_dim: 16,
            noise_std: 0.05,
            offset_std: 0.1,
            referent_arity: 1,
            rng_seed: seed,
        };
        cfg
    }

    #[test]
    fn axis_parsing_round_trips_and_rejects_junk() {
        for a in [
            Axis::SlotKind,
            Axis::KgKs,
            Axis::TIters,
            Axis::Tau,
            Axis::Scheme,
            Axis::Loss,
        ] {
            assert_eq!(Axis::parse(a.name()).unwrap(), a);
        }
        assert!(Axis::parse("kg").is_err());
    }

    #[test]
    fn paper_scale_k_splits_exactly() {
        assert_eq!(
            kgks_variants(36),
            vec![(36, 1), (18, 2), (12, 3), (9, 4), (6, 6)]
        );
        assert_eq!(kgks_variants(12), vec![(12, 1), (6, 2), (4, 3), (3, 4), (2, 6)]);
    }

    #[test]
    fn row_counts_match_the_table_shapes() {
        let cfg = tiny_cfg(11);
        let data = generate_synthetic::<f32>(&cfg.data.synthetic, 16).unwrap();
        let expect = [
            (Axis::SlotKind, 3),
            (Axis::KgKs, 5),
            (Axis::TIters, 5),
            (Axis::Tau, 5),
            (Axis::Scheme, 4),
            (Axis::Loss, 2),
        ];
        for (axis, n) in expect {
            let rows = ablate(axis, &cfg, &data).unwrap();
            assert_eq!(rows.len(), n, "{}", axis.name());
            for r in &rows {
                assert!(r.metrics.miou.is_finite());
            }
        }
    }

    #[test]
    fn eval_only_axes_share_the_trained_model() {
        // The tau=0.5 rows of the tau sweep and the compose row of the
        // scheme sweep both equal the base config's own evaluation.
        let cfg = tiny_cfg(12);
        let data = generate_synthetic::<f32>(&cfg.data.synthetic, 16).unwrap();
        let base = train(&cfg, &data).unwrap();
        let out = evaluate(
            &base.model,
            &cfg,
            &data,
            &base.eval_indices,
            derive_seed(cfg.seed, &[seeds::EVAL]),
        )
        .unwrap();
        let taus = ablate(Axis::Tau, &cfg, &data).unwrap();
        assert_eq!(taus[2].variant, "0.5");
        assert_eq!(taus[2].metrics, out.metrics);
        let schemes = ablate(Axis::Scheme, &cfg, &data).unwrap();
        assert_eq!(schemes[0].variant, "compose");
        assert_eq!(schemes[0].metrics, out.metrics);
    }

    #[test]
    fn csv_round_trips_exactly() {
        let rows = vec![
            AblationRow {
                variant: "entity".into(),
                metrics: Metrics {
                    ciou: 1.0 / 3.0,
                    miou: 0.25,
                    acc: [1.0, 2.0 / 7.0, 0.0],
                },
            },
            AblationRow {
                variant: "6x6".into(),
                metrics: Metrics {
                    ciou: 0.0,
                    miou: 1.0,
                    acc: [0.125, 0.5, 1e-12],
                },
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        write_ablation_csv(&path, &rows).unwrap();
        assert_eq!(read_ablation_csv(&path).unwrap(), rows);
        assert!(read_ablation_csv(&dir.path().join("missing.csv")).is_err());
    }
}
