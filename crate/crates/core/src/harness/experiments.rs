use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::config::{AblationRow, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{csv_row, EvalReport};
use crate::scalar::Scalar;
use crate::synth::Dataset;

use super::inspect::param_report;
use super::train::{train, TrainOutcome};

pub const ABLATION_HEADER: &str = "run_id,epoch,split,loss,top1,mca,lr,config_row";
pub const SWEEP_HEADER: &str = "run_id,epoch,split,loss,top1,mca,lr,ffn_dim,encoder_params";

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub row: AblationRow,
    pub seed: u64,
    pub run_id: String,
    pub best_epoch: usize,
    pub lr: f64,
    pub report: EvalReport,
}

fn test_report<S>(out: &TrainOutcome<S>) -> Result<(EvalReport, f64)> {
    let lr = out
        .history
        .iter()
        .find(|r| r.epoch == out.best_epoch)
        .map_or(0.0, |r| r.lr);
    out.test
        .clone()
        .map(|r| (r, lr))
        .ok_or_else(|| Error::Dataset("ablation needs a non-empty test split and at least one epoch".into()))
}

/// Trains every ablation row for every seed on the same data. Each run lives
/// in `out/<row>-s<seed>`; `ablation.csv` gets one test row per run.
pub fn ablate<S: Scalar>(cfg: &RunConfig, data: &Dataset, seeds: &[u64], out: &Path) -> Result<Vec<AblationResult>> {
    ablate_rows::<S>(cfg, data, seeds, &AblationRow::ALL, out)
}

pub(crate) fn ablate_rows<S: Scalar>(
    cfg: &RunConfig,
    data: &Dataset,
    seeds: &[u64],
    rows: &[AblationRow],
    out: &Path,
) -> Result<Vec<AblationResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    fs::create_dir_all(out)?;
    let mut csv = fs::File::create(out.join("ablation.csv"))?;
    writeln!(csv, "{ABLATION_HEADER}")?;
    let mut results = Vec::new();
    for &seed in seeds {
        for &row in rows {
            let mut run = cfg.with_row(row).with_seed(seed);
            run.run_id = format!("{}-s{seed}", run.run_id);
            let dir = out.join(format!("{}-s{seed}", row.slug()));
            let outcome = train::<S>(&run, data, &dir)?;
            let (report, lr) = test_report(&outcome)?;
            writeln!(
                csv,
                "{},{}",
                csv_row(&run.run_id, outcome.best_epoch, "test", &report, lr),
                row.label()
            )?;
            results.push(AblationResult {
                row,
                seed,
                run_id: run.run_id,
                best_epoch: outcome.best_epoch,
                lr,
                report,
            });
        }
    }
    Ok(results)
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub ffn_dim: usize,
    pub encoder_params: usize,
    pub run_id: String,
    pub report: EvalReport,
}

/// One training run per MLP width with shared data and seed.
pub fn sweep_ffn<S: Scalar>(cfg: &RunConfig, data: &Dataset, widths: &[usize], out: &Path) -> Result<Vec<SweepResult>> {
    if widths.is_empty() {
        return Err(Error::Config("sweep needs at least one width".into()));
    }
    if widths.contains(&0) {
        return Err(Error::Config("ffn width 0 is not allowed".into()));
    }
    fs::create_dir_all(out)?;
    let mut csv = fs::File::create(out.join("sweep_ffn.csv"))?;
    writeln!(csv, "{SWEEP_HEADER}")?;
    let mut results = Vec::new();
    for &w in widths {
        let mut run = cfg.clone();
        run.model.encoder.ffn_dim = w;
        run.run_id = format!("{}-ffn{w}", cfg.run_id);
        let outcome = train::<S>(&run, data, &out.join(format!("ffn{w}")))?;
        let (report, lr) = test_report(&outcome)?;
        let encoder_params = param_report(&outcome.model.config).count("encoder");
        writeln!(
            csv,
            "{},{w},{encoder_params}",
            csv_row(&run.run_id, outcome.best_epoch, "test", &report, lr)
        )?;
        results.push(SweepResult {
            ffn_dim: w,
            encoder_params,
            run_id: run.run_id,
            report,
        });
    }
    Ok(results)
}

/// Median of a nonempty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
