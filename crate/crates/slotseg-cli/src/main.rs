//! Command-line front end: generate synthetic data, train, score, sweep, and
//! export masks. One TOML config file carries every setting; flags override
//! single fields; the only environment variable is SLOTSEG_OUT for the
//! output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use slotseg::ablate::{ablate_with, write_ablation_csv, Axis};
use slotseg::checkpoint::{checkpoint_precision, load_checkpoint, save_checkpoint};
use slotseg::config::{DataSource, Precision, RunConfig, Scheme, SlotKind};
use slotseg::data::{generate_synthetic, split_indices, Dataset};
use slotseg::error::{Error, Result};
use slotseg::features::{load_dataset, write_dataset};
use slotseg::metrics::{metrics_json, write_metrics};
use slotseg::scalar::Scalar;
use slotseg::train::{evaluate, export_masks, train_with, EpochLog};
use slotseg::util::{derive_seed, retain_freed_memory, seeds};

#[derive(Parser)]
#[command(name = "slotseg", version, about = "Referring segmentation on precomputed features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as feature/mask files.
    Gen(CommonArgs),
    /// Train a model and write checkpoint, log, and metrics.
    Train(CommonArgs),
    /// Score a checkpoint on the eval split.
    Eval(EvalArgs),
    /// Sweep one axis and write a CSV of metrics rows.
    Ablate(AblateArgs),
    /// Write predicted/ground-truth mask PGMs for the eval split.
    ExportMasks(EvalArgs),
}

fn parse_slot_kind(s: &str) -> std::result::Result<SlotKind, String> {
    match s {
        "entity" => Ok(SlotKind::Entity),
        "random" => Ok(SlotKind::Random),
        "query" => Ok(SlotKind::Query),
        _ => Err(format!("{s:?} is not entity|random|query")),
    }
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    match s {
        "compose" => Ok(Scheme::Compose),
        "avg" => Ok(Scheme::Avg),
        "max" => Ok(Scheme::Max),
        "min" => Ok(Scheme::Min),
        _ => Err(format!("{s:?} is not compose|avg|max|min")),
    }
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("{s:?} is not f32|f64")),
    }
}

fn parse_axis(s: &str) -> std::result::Result<Axis, String> {
    Axis::parse(s).map_err(|e| e.to_string())
}

/// Settings shared by every subcommand. Defaults come from the library,
/// the config file overrides them, and flags override single fields.
#[derive(Args)]
struct CommonArgs {
    /// TOML config file; missing fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_slot_kind)]
    slot_kind: Option<SlotKind>,
    #[arg(long)]
    kg: Option<usize>,
    #[arg(long)]
    ks: Option<usize>,
    #[arg(long)]
    t_iters: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    #[arg(long)]
    lambda_recon: Option<f64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Output directory; falls back to $SLOTSEG_OUT, then the working
    /// directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score; its embedded config is the baseline.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_parser = parse_axis)]
    axis: Axis,
    #[command(flatten)]
    common: CommonArgs,
}

impl CommonArgs {
    /// defaults < config file < flags.
    fn effective(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                RunConfig::from_toml(&text)?
            }
            None => base,
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.slot_kind {
            cfg.slot_kind = v;
        }
        if let Some(v) = self.kg {
            cfg.k_g = v;
        }
        if let Some(v) = self.ks {
            cfg.k_s = v;
        }
        if let Some(v) = self.t_iters {
            cfg.t_iters = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.scheme {
            cfg.scheme = v;
        }
        if let Some(v) = self.lambda_recon {
            cfg.lambda_recon = v;
        }
        if let Some(v) = self.precision {
            cfg.precision = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("SLOTSEG_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

fn build_dataset<S: Scalar>(cfg: &RunConfig) -> Result<Dataset<S>> {
    match cfg.data.source {
        DataSource::Synthetic => generate_synthetic(
            &cfg.data.synthetic,
            cfg.data.train_items + cfg.data.eval_items,
        ),
        // File-backed runs declare their grid in [data.synthetic] too; the
        // loader checks every item against it.
        DataSource::Files => load_dataset(
            Path::new(&cfg.data.dir),
            (cfg.data.synthetic.grid_h, cfg.data.synthetic.grid_w),
        ),
    }
}

fn print_epoch(log: &EpochLog) {
    let ev = log
        .eval
        .as_ref()
        .map(|m| format!("  miou {:.4} ciou {:.4}", m.miou, m.ciou))
        .unwrap_or_default();
    eprintln!(
        "epoch {:3}: loss {:.4} (c3 {:.4} recon {:.4}){ev}",
        log.epoch, log.loss, log.contrastive, log.reconstruction
    );
}

fn log_json(log: &[EpochLog], wall_secs: f64) -> String {
    let mut out = String::from("{\"epochs\":[");
    for (i, e) in log.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!(
            "{{\"epoch\":{},\"loss\":{:.6},\"c3\":{:.6},\"recon\":{:.6}",
            e.epoch, e.loss, e.contrastive, e.reconstruction
        ));
        if let Some(m) = &e.eval {
            out.push_str(&format!(",\"miou\":{:.4},\"ciou\":{:.4}", m.miou, m.ciou));
        }
        out.push('}');
    }
    out.push_str(&format!("],\"wall_secs\":{wall_secs:.1}}}\n"));
    out
}

fn run_train<S: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = build_dataset::<S>(cfg)?;
    let start = Instant::now();
    let result = train_with(cfg, &data, print_epoch)?;
    let wall = start.elapsed().as_secs_f64();
    fs::create_dir_all(out)?;
    save_checkpoint(&out.join("checkpoint.bin"), &result.model, &result.opt)?;
    fs::write(out.join("log.json"), log_json(&result.log, wall))?;
    let eval_seed = derive_seed(cfg.seed, &[seeds::EVAL]);
    let scored = evaluate(&result.model, cfg, &data, &result.eval_indices, eval_seed)?;
    write_metrics(&out.join("metrics.json"), &scored.metrics)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!("{}", metrics_json(&scored.metrics));
    eprintln!(
        "wrote checkpoint.bin, log.json, metrics.json, config.toml to {}",
        out.display()
    );
    Ok(())
}

fn run_eval<S: Scalar>(path: &Path, args: &EvalArgs, masks: bool) -> Result<()> {
    let (model, _) = load_checkpoint::<S>(path)?;
    let cfg = args.common.effective(model.cfg.clone())?;
    let data = build_dataset::<S>(&cfg)?;
    let (_, eval_idx) = split_indices(data.items.len(), cfg.seed);
    let eval_seed = derive_seed(cfg.seed, &[seeds::EVAL]);
    let out = args.common.out_dir();
    fs::create_dir_all(&out)?;
    if masks {
        let dir = out.join("masks");
        export_masks(&model, &cfg, &data, &eval_idx, eval_seed, &dir)?;
        eprintln!("wrote {} mask pairs to {}", eval_idx.len(), dir.display());
    } else {
        let scored = evaluate(&model, &cfg, &data, &eval_idx, eval_seed)?;
        write_metrics(&out.join("metrics.json"), &scored.metrics)?;
        println!("{}", metrics_json(&scored.metrics));
    }
    Ok(())
}

fn run_ablate<S: Scalar>(axis: Axis, cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = build_dataset::<S>(cfg)?;
    let rows = ablate_with(axis, cfg, &data, |_, row| {
        eprintln!("{}={}: {}", axis.name(), row.variant, metrics_json(&row.metrics));
    })?;
    fs::create_dir_all(out)?;
    let path = out.join(format!("ablation_{}.csv", axis.name()));
    write_ablation_csv(&path, &rows)?;
    eprintln!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen(common) => {
            let cfg = common.effective(RunConfig::default())?;
            if cfg.data.source != DataSource::Synthetic {
                return Err(Error::Config(
                    "gen needs data.source = \"synthetic\"".into(),
                ));
            }
            let count = cfg.data.train_items + cfg.data.eval_items;
            let out = common.out_dir();
            match cfg.precision {
                Precision::F32 => {
                    write_dataset(&out, &generate_synthetic::<f32>(&cfg.data.synthetic, count)?)?
                }
                Precision::F64 => {
                    write_dataset(&out, &generate_synthetic::<f64>(&cfg.data.synthetic, count)?)?
                }
            }
            eprintln!("wrote {count} items to {}", out.display());
            Ok(())
        }
        Command::Train(common) => {
            let cfg = common.effective(RunConfig::default())?;
            let out = common.out_dir();
            match cfg.precision {
                Precision::F32 => run_train::<f32>(&cfg, &out),
                Precision::F64 => run_train::<f64>(&cfg, &out),
            }
        }
        Command::Eval(args) => match checkpoint_precision(&args.checkpoint)? {
            Precision::F32 => run_eval::<f32>(&args.checkpoint, args, false),
            Precision::F64 => run_eval::<f64>(&args.checkpoint, args, false),
        },
        Command::ExportMasks(args) => match checkpoint_precision(&args.checkpoint)? {
            Precision::F32 => run_eval::<f32>(&args.checkpoint, args, true),
            Precision::F64 => run_eval::<f64>(&args.checkpoint, args, true),
        },
        Command::Ablate(args) => {
            let cfg = args.common.effective(RunConfig::default())?;
            let out = args.common.out_dir();
            match cfg.precision {
                Precision::F32 => run_ablate::<f32>(args.axis, &cfg, &out),
                Precision::F64 => run_ablate::<f64>(args.axis, &cfg, &out),
            }
        }
    }
}

fn main() {
    retain_freed_memory();
    if let Err(e) = real_main() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
