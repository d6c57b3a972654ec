use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{appnp_dense_with, appnp_structured, build_graph, normalized_adjacency_dense, PropagationConfig};
use crate::rng::stream;
use crate::params::Init;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Frames and channels of the scaling sweep.
    pub t_frames: usize,
    pub channels: usize,
    /// Sites per frame in the scaling sweep.
    pub sites: Vec<usize>,
    /// `(T, P, C)` of the single large comparison point.
    pub large: (usize, usize, usize),
    pub propagation: PropagationConfig,
    /// Each timing repeats until at least this much wall time has passed.
    pub min_seconds: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            t_frames: 8,
            channels: 32,
            sites: vec![16, 32, 64, 128],
            large: (64, 49, 256),
            propagation: PropagationConfig::default(),
            min_seconds: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub t_frames: usize,
    pub sites: usize,
    pub channels: usize,
    /// Seconds per propagation step.
    pub dense_step: f64,
    pub structured_step: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.dense_step / self.structured_step
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub sweep: Vec<BenchRow>,
    pub large: BenchRow,
    pub dense_exponent: f64,
    pub structured_exponent: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_frames,sites,channels,dense_step_s,structured_step_s,speedup\n");
        for r in self.sweep.iter().chain(std::iter::once(&self.large)) {
            let _ = writeln!(
                s,
                "{},{},{},{:.6e},{:.6e},{:.2}",
                r.t_frames,
                r.sites,
                r.channels,
                r.dense_step,
                r.structured_step,
                r.speedup()
            );
        }
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Median seconds per call over batches that each last `min_seconds / 5`.
fn time_per_call(min_seconds: f64, mut f: impl FnMut()) -> f64 {
    let start = Instant::now();
    f();
    let once = start.elapsed().as_secs_f64().max(1e-9);
    let reps = ((min_seconds / 5.0) / once).ceil().max(1.0) as usize;
    let mut samples = Vec::with_capacity(5);
    for _ in 0..5 {
        let t = Instant::now();
        for _ in 0..reps {
            f();
        }
        samples.push(t.elapsed().as_secs_f64() / reps as f64);
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    samples[2]
}

fn measure(t: usize, p: usize, c: usize, cfg: &BenchConfig) -> Result<BenchRow> {
    let prop = cfg.propagation;
    let g = build_graph(t, p, &prop)?;
    let h0: Tensor<f64> = Init::Normal { std: 1.0 }.sample(vec![t * p, c], &mut stream(0, "bench", 0))?;
    let a = normalized_adjacency_dense::<f64>(&g);
    let k = prop.k_prop.max(1) as f64;
    let dense = time_per_call(cfg.min_seconds, || {
        black_box(appnp_dense_with(&a, &h0, c, &prop).expect("dense propagation"));
    });
    let structured = time_per_call(cfg.min_seconds, || {
        black_box(appnp_structured(&h0, &g, &prop).expect("structured propagation"));
    });
    Ok(BenchRow {
        t_frames: t,
        sites: p,
        channels: c,
        dense_step: dense / k,
        structured_step: structured / k,
    })
}

/// Dense versus structured propagation over the site sweep and the large point.
pub fn bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut sweep = Vec::new();
    for &p in &cfg.sites {
        sweep.push(measure(cfg.t_frames, p, cfg.channels, cfg)?);
    }
    let ps: Vec<f64> = sweep.iter().map(|r| r.sites as f64).collect();
    let dense: Vec<f64> = sweep.iter().map(|r| r.dense_step).collect();
    let structured: Vec<f64> = sweep.iter().map(|r| r.structured_step).collect();
    let (t, p, c) = cfg.large;
    Ok(BenchReport {
        dense_exponent: fit_exponent(&ps, &dense),
        structured_exponent: fit_exponent(&ps, &structured),
        large: measure(t, p, c, cfg)?,
        sweep,
    })
}
