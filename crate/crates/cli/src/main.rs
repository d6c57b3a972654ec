use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tag_head::checkpoint;
use tag_head::config::{DataConfig, Precision, RunConfig};
use tag_head::harness::{self, BenchConfig};
use tag_head::model::{Fault, Stage, TagHead};
use tag_head::synth::{generate_dataset, load_dataset, save_dataset, Split};
use tag_head::Scalar;

#[derive(Parser)]
#[command(name = "taghead", version, about = "Spatio-temporal graph head experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `<output_dir>/<run_id>` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let cfg = RunConfig::load(&self.config).with_context(|| format!("reading config {}", self.config.display()))?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.join(&cfg.run_id));
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Train and evaluate the five ablation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train one model per MLP width.
    SweepFfn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        widths: Vec<usize>,
    },
    /// Learnable parameter counts per module.
    Params {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient check of the full pipeline.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Negate the gradient through the graph stage (negative control).
        #[arg(long)]
        fault: bool,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Dense versus structured propagation timings.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Pooled per-clip features at one stage.
    DumpFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "graph")]
        stage: Stage,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Write the configured synthetic dataset to disk.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s}; expected train, val or test")),
    }
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn train_cmd<S: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = harness::load_data(cfg)?;
    let outcome = harness::train_with::<S>(cfg, &data, out, |r| {
        eprintln!(
            "epoch {} {:<5} loss {:.4} top1 {:.4} mca {:.4} lr {:.3e}",
            r.epoch,
            r.split.name(),
            r.report.loss.unwrap_or(f64::NAN),
            r.report.top1,
            r.report.mca,
            r.lr
        );
    })?;
    println!("best_epoch {}", outcome.best_epoch);
    if let Some(r) = outcome.test {
        print!("{}", r.to_kv());
    }
    Ok(())
}

fn eval_cmd<S: Scalar>(cfg: &RunConfig, out: &Path, ckpt: &Path, split: Split) -> Result<()> {
    let data = harness::load_data(cfg)?;
    let report = harness::evaluate_checkpoint::<S>(ckpt, &data, split)?;
    create_out(out)?;
    fs::write(out.join(harness::REPORT_FILE), report.to_kv())?;
    print!("{}", report.to_kv());
    Ok(())
}

fn ablate_cmd<S: Scalar>(cfg: &RunConfig, out: &Path, seeds: &[u64]) -> Result<()> {
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let data = harness::load_data(cfg)?;
    let results = harness::ablate::<S>(cfg, &data, &seeds, out)?;
    for row in tag_head::config::AblationRow::ALL {
        let top1: Vec<f64> = results.iter().filter(|r| r.row == row).map(|r| r.report.top1).collect();
        let mca: Vec<f64> = results.iter().filter(|r| r.row == row).map(|r| r.report.mca).collect();
        println!(
            "{:<11} median_top1 {:.4} median_mca {:.4}",
            row.label(),
            harness::median(&top1),
            harness::median(&mca)
        );
    }
    Ok(())
}

fn sweep_cmd<S: Scalar>(cfg: &RunConfig, out: &Path, widths: &[usize]) -> Result<()> {
    let data = harness::load_data(cfg)?;
    for r in harness::sweep_ffn::<S>(cfg, &data, widths, out)? {
        println!(
            "ffn {:<5} encoder_params {:<8} top1 {:.4} mca {:.4}",
            r.ffn_dim, r.encoder_params, r.report.top1, r.report.mca
        );
    }
    Ok(())
}

fn params_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (classes, shape) = match &cfg.data {
        DataConfig::Synthetic(s) => (s.num_classes, s.clip_shape()),
        DataConfig::Path(dir) => {
            let ds = load_dataset(dir)?;
            let shape = ds.clip_shape().context("dataset has no clips")?;
            (ds.num_classes(), shape.try_into().map_err(|_| anyhow::anyhow!("clips must be 4-D"))?)
        }
    };
    let model_cfg = cfg.resolve_model(classes, shape)?;
    let report = harness::param_report(&model_cfg);
    let enumerated = harness::enumerate_params(&TagHead::<f64>::init(model_cfg, cfg.seed)?);
    if report != enumerated {
        bail!("closed-form counts {report:?} disagree with enumeration {enumerated:?}");
    }
    create_out(out)?;
    fs::write(out.join("params.txt"), report.to_kv())?;
    print!("{}", report.to_kv());
    Ok(())
}

fn gradcheck_cmd(cfg: &RunConfig, out: &Path, fault: bool, tol: f64) -> Result<()> {
    let report = harness::gradcheck_cmd(cfg, fault.then_some(Fault::FlipGraphAdjoint), 1e-6)?;
    let mut text = String::new();
    for p in &report.params {
        let (idx, a, n) = p.worst;
        text.push_str(&format!(
            "{} max_rel {:.3e} at {idx} analytic {a:.6e} numeric {n:.6e}\n",
            p.name, p.max_rel_error
        ));
    }
    text.push_str(&format!("max_rel_error {:.3e}\n", report.max_rel_error));
    create_out(out)?;
    fs::write(out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if !report.passes(tol) {
        bail!("gradient check failed: {:.3e} >= {tol:.1e}", report.max_rel_error);
    }
    println!("PASS");
    Ok(())
}

fn bench_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let bc = BenchConfig {
        propagation: cfg.model.propagation,
        ..BenchConfig::default()
    };
    let report = harness::bench(&bc)?;
    create_out(out)?;
    fs::write(out.join("bench.csv"), report.to_csv())?;
    print!("{}", report.to_csv());
    println!(
        "dense_exponent {:.3}\nstructured_exponent {:.3}\nlarge_speedup {:.2}",
        report.dense_exponent,
        report.structured_exponent,
        report.large.speedup()
    );
    Ok(())
}

fn dump_cmd<S: Scalar>(cfg: &RunConfig, out: &Path, ckpt: &Path, stage: Stage, split: Split) -> Result<()> {
    let model: TagHead<S> = checkpoint::load(ckpt)?;
    let data = harness::load_data(cfg)?;
    let rows = harness::dump_features(&model, data.split(split), stage)?;
    create_out(out)?;
    let path = out.join(format!("features_{}_{}.csv", split.name(), stage_name(stage)));
    harness::write_features_csv(&rows, &path)?;
    println!("rows {}", rows.len());
    println!("centroid_separation {:.6}", harness::centroid_separation(&rows));
    println!("written {}", path.display());
    Ok(())
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Backbone => "backbone",
        Stage::Encoder => "encoder",
        Stage::Graph => "graph",
    }
}

fn gen_data_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let DataConfig::Synthetic(s) = &cfg.data else {
        bail!("gen-data needs a synthetic data section");
    };
    let ds = generate_dataset(s)?;
    save_dataset(&ds, out)?;
    println!(
        "train {} val {} test {} written to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let (cfg, out) = common.load()?;
            with_precision!(cfg, train_cmd(&cfg, &out))
        }
        Command::Eval { common, checkpoint, split } => {
            let (cfg, out) = common.load()?;
            with_precision!(cfg, eval_cmd(&cfg, &out, &checkpoint, split))
        }
        Command::Ablate { common, seeds } => {
            let (cfg, out) = common.load()?;
            with_precision!(cfg, ablate_cmd(&cfg, &out, &seeds))
        }
        Command::SweepFfn { common, widths } => {
            let (cfg, out) = common.load()?;
            with_precision!(cfg, sweep_cmd(&cfg, &out, &widths))
        }
        Command::Params { common } => {
            let (cfg, out) = common.load()?;
            params_cmd(&cfg, &out)
        }
        Command::Gradcheck { common, fault, tol } => {
            let (cfg, out) = common.load()?;
            gradcheck_cmd(&cfg, &out, fault, tol)
        }
        Command::Bench { common } => {
            let (cfg, out) = common.load()?;
            bench_cmd(&cfg, &out)
        }
        Command::DumpFeatures {
            common,
            checkpoint,
            stage,
            split,
        } => {
            let (cfg, out) = common.load()?;
            with_precision!(cfg, dump_cmd(&cfg, &out, &checkpoint, stage, split))
        }
        Command::GenData { common } => {
            let (cfg, out) = common.load()?;
            gen_data_cmd(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
