use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckReport;
use crate::model::{Fault, ModelConfig, Stage, TagHead};
use crate::scalar::{to_f64, Scalar};
use crate::synth::LabeledClip;

use super::train::load_data;

/// Learnable parameter counts per pipeline module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamReport {
    pub fn count(&self, module: &str) -> usize {
        self.modules.iter().find(|(m, _)| m == module).map_or(0, |(_, n)| *n)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (m, n) in &self.modules {
            let _ = writeln!(s, "{m} {n}");
        }
        let _ = writeln!(s, "total {}", self.total);
        s
    }
}

/// Closed-form counts from the config alone.
pub fn param_report(cfg: &ModelConfig) -> ParamReport {
    let c = cfg.dim;
    let (t, p, d) = cfg.grid();
    let f = cfg.encoder.ffn_dim;
    let backbone = d * c + c + cfg.backbone.depth * (c * c + c);
    let pe = if cfg.encoder.positional_encoding { t * p * c } else { 0 };
    // W_Q, W_K, W_V over all heads, W_o, the MLP, two LayerNorms
    let per_layer = 3 * c * c + c * c + (c * f + f + f * c + c) + 2 * (c + c);
    let encoder = cfg.encoder.layers * per_layer;
    let head = cfg.num_classes * c + cfg.num_classes;
    let modules = vec![
        ("backbone".to_string(), backbone),
        ("positional_encoding".to_string(), pe),
        ("encoder".to_string(), encoder),
        ("graph".to_string(), 0),
        ("head".to_string(), head),
    ];
    let total = modules.iter().map(|(_, n)| n).sum();
    ParamReport { modules, total }
}

/// Counts from the instantiated tensors of `model`, grouped by name prefix.
pub fn enumerate_params<S: Scalar>(model: &TagHead<S>) -> ParamReport {
    let p = &model.params;
    let modules = vec![
        ("backbone".to_string(), p.numel_with_prefix("backbone.")),
        ("positional_encoding".to_string(), p.numel_with_prefix("pe.")),
        ("encoder".to_string(), p.numel_with_prefix("encoder.")),
        ("graph".to_string(), p.numel_with_prefix("graph.")),
        ("head".to_string(), p.numel_with_prefix("head.")),
    ];
    ParamReport {
        modules,
        total: p.numel(),
    }
}

pub const GRADCHECK_MAX_TOKENS: usize = 32;
pub const GRADCHECK_MAX_CHANNELS: usize = 8;

/// Finite-difference check of the full pipeline loss on the first training
/// clip, in double precision.
pub fn gradcheck_cmd(cfg: &RunConfig, fault: Option<Fault>, eps: f64) -> Result<GradCheckReport> {
    let data = load_data(cfg)?;
    let clip = data
        .train
        .first()
        .or_else(|| data.test.first())
        .ok_or_else(|| Error::Dataset("gradcheck needs at least one clip".into()))?;
    let shape: [usize; 4] = clip
        .clip
        .shape()
        .try_into()
        .map_err(|_| Error::Dataset("clips must be [T, H, W, ch]".into()))?;
    let model_cfg = cfg.resolve_model(data.num_classes(), shape)?;
    if model_cfg.num_tokens() > GRADCHECK_MAX_TOKENS || model_cfg.dim > GRADCHECK_MAX_CHANNELS {
        return Err(Error::Config(format!(
            "gradcheck needs N <= {GRADCHECK_MAX_TOKENS} and C <= {GRADCHECK_MAX_CHANNELS}, got N = {} and C = {}",
            model_cfg.num_tokens(),
            model_cfg.dim
        )));
    }
    let mut model = TagHead::<f64>::init(model_cfg, cfg.seed)?;
    model.fault = fault;
    model.grad_check(&clip.clip, clip.label, eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub label: usize,
    pub features: Vec<f64>,
}

/// Pooled features after `stage`, one row per clip.
pub fn dump_features<S: Scalar>(model: &TagHead<S>, clips: &[LabeledClip], stage: Stage) -> Result<Vec<FeatureRow>> {
    clips
        .iter()
        .map(|c| {
            let x = model.prepare(&c.clip)?;
            Ok(FeatureRow {
                label: c.label,
                features: model.features(&x, stage)?.into_iter().map(to_f64).collect(),
            })
        })
        .collect()
}

pub fn write_features_csv(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut s = String::from("label");
    for i in 0..dim {
        let _ = write!(s, ",f{i}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}", r.label);
        for v in &r.features {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Mean Euclidean distance between all pairs of class centroids.
pub fn centroid_separation(rows: &[FeatureRow]) -> f64 {
    let k = rows.iter().map(|r| r.label + 1).max().unwrap_or(0);
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for r in rows {
        for (s, v) in sums[r.label].iter_mut().zip(&r.features) {
            *s += v;
        }
        counts[r.label] += 1;
    }
    let cents: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..cents.len() {
        for j in i + 1..cents.len() {
            total += cents[i].iter().zip(&cents[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}
