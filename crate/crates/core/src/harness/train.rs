use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::head::argmax;
use crate::metrics::{csv_row, evaluate, EvalReport, METRICS_HEADER};
use crate::model::TagHead;
use crate::optim::{adam_step, cosine_lr, AdamConfig, OptimizerState};
use crate::rng::stream;
use crate::scalar::{lit, Scalar};
use crate::synth::{generate_dataset, load_dataset, Dataset, LabeledClip, Split};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.txt";

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        DataConfig::Synthetic(s) => generate_dataset(s),
        DataConfig::Path(dir) => load_dataset(dir),
    }
}

/// Patch matrices and labels of one split, ready for the model.
pub struct Prepared<S> {
    pub patches: Vec<Tensor<S>>,
    pub labels: Vec<usize>,
}

impl<S> Prepared<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn prepare_split<S: Scalar>(model: &TagHead<S>, clips: &[LabeledClip]) -> Result<Prepared<S>> {
    let k = model.config.num_classes;
    let mut out = Prepared {
        patches: Vec::with_capacity(clips.len()),
        labels: Vec::with_capacity(clips.len()),
    };
    for c in clips {
        if c.label >= k {
            return Err(Error::Dataset(format!("label {} for a {k}-class model", c.label)));
        }
        out.patches.push(model.prepare(&c.clip)?);
        out.labels.push(c.label);
    }
    Ok(out)
}

/// Single-view evaluation with the mean cross-entropy attached.
pub fn evaluate_model<S: Scalar>(model: &TagHead<S>, data: &Prepared<S>) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let mut preds = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for (x, &y) in data.patches.iter().zip(&data.labels) {
        let (p, l) = model.predict(x, y)?;
        preds.push(p);
        loss += l;
    }
    Ok(evaluate(&preds, &data.labels, model.config.num_classes)?.with_loss(loss / data.len() as f64))
}

/// Loads a checkpoint and scores it on one split of `data`.
pub fn evaluate_checkpoint<S: Scalar>(path: &Path, data: &Dataset, split: Split) -> Result<EvalReport> {
    let model: TagHead<S> = checkpoint::load(path)?;
    if let Some(shape) = data.clip_shape() {
        if shape != model.config.clip_shape {
            return Err(Error::Config(format!(
                "checkpoint expects clips {:?}, data has {shape:?}",
                model.config.clip_shape
            )));
        }
    }
    if data.num_classes() > model.config.num_classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, data has {}",
            model.config.num_classes,
            data.num_classes()
        )));
    }
    let prepared = prepare_split(&model, data.split(split))?;
    evaluate_model(&model, &prepared)
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub report: EvalReport,
    pub lr: f64,
}

pub struct TrainOutcome<S> {
    /// Parameters from the epoch with the best validation top-1 (the last
    /// epoch when there is no validation split).
    pub model: TagHead<S>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub test: Option<EvalReport>,
    pub run_dir: PathBuf,
}

pub fn train<S: Scalar>(cfg: &RunConfig, data: &Dataset, run_dir: &Path) -> Result<TrainOutcome<S>> {
    train_with(cfg, data, run_dir, |_| {})
}

/// Trains from scratch, writing the resolved config, metrics CSV, best
/// checkpoint and test report into `run_dir`. `on_epoch` sees every metrics row.
pub fn train_with<S: Scalar>(
    cfg: &RunConfig,
    data: &Dataset,
    run_dir: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let clip_shape: [usize; 4] = data
        .clip_shape()
        .ok_or_else(|| Error::Dataset("dataset has no clips".into()))?
        .try_into()
        .map_err(|_| Error::Dataset("clips must be [T, H, W, ch]".into()))?;
    let model_cfg = cfg.resolve_model(data.num_classes(), clip_shape)?;
    let mut model = TagHead::<S>::init(model_cfg, cfg.seed)?;
    let train_set = prepare_split(&model, &data.train)?;
    let val_set = prepare_split(&model, &data.val)?;
    let test_set = prepare_split(&model, &data.test)?;
    if train_set.is_empty() && cfg.optim.epochs > 0 {
        return Err(Error::Dataset("training split is empty".into()));
    }

    fs::create_dir_all(run_dir)?;
    cfg.save(&run_dir.join(CONFIG_FILE))?;
    fs::write(
        run_dir.join(MODEL_FILE),
        serde_json::to_string_pretty(&model.config)?,
    )?;
    let mut csv = fs::File::create(run_dir.join(METRICS_FILE))?;
    writeln!(csv, "{METRICS_HEADER}")?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&model, &ckpt_path)?;

    let o = &cfg.optim;
    let mut state = OptimizerState::new(
        model.params.tensors(),
        AdamConfig {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        },
    );
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, 0.0f64);
    let mut best_model = model.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut sample_counter = 0u64;

    for epoch in 1..=o.epochs {
        let lr = cosine_lr(epoch - 1, o.epochs, o.lr_max, o.lr_min)?;
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, "shuffle", epoch as u64));
        let mut preds = Vec::with_capacity(order.len());
        let mut truths = Vec::with_capacity(order.len());
        let mut loss_sum = 0.0;
        for batch in order.chunks(o.batch_size) {
            let mut acc: Vec<Vec<S>> = model.params.tensors().iter().map(|t| vec![S::zero(); t.numel()]).collect();
            for &i in batch {
                let mut rng = stream(cfg.seed, "dropout", sample_counter);
                sample_counter += 1;
                let mut dropout = model.dropout(&mut rng);
                let out = model.loss_and_grads(&train_set.patches[i], train_set.labels[i], dropout.as_mut())?;
                if !out.loss.is_finite() {
                    return Err(Error::State(format!("non-finite loss in epoch {epoch}")));
                }
                loss_sum += out.loss;
                preds.push(argmax(&out.logits));
                truths.push(train_set.labels[i]);
                for (a, g) in acc.iter_mut().zip(&out.grads) {
                    for (x, &y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            let inv: S = lit(1.0 / batch.len() as f64);
            for a in acc.iter_mut() {
                for x in a.iter_mut() {
                    *x *= inv;
                }
            }
            adam_step(model.params.tensors_mut(), &acc, &mut state, lr)?;
        }
        let train_report = evaluate(&preds, &truths, model.config.num_classes)?.with_loss(loss_sum / preds.len() as f64);
        let mut records = vec![EpochRecord {
            epoch,
            split: Split::Train,
            report: train_report,
            lr,
        }];
        let score = if val_set.is_empty() {
            f64::INFINITY
        } else {
            let r = evaluate_model(&model, &val_set)?;
            let top1 = r.top1;
            records.push(EpochRecord {
                epoch,
                split: Split::Val,
                report: r,
                lr,
            });
            top1
        };
        for r in &records {
            writeln!(csv, "{}", csv_row(&cfg.run_id, r.epoch, r.split.name(), &r.report, r.lr))?;
            on_epoch(r);
        }
        history.extend(records);
        if score > best.0 || val_set.is_empty() {
            best = (score, epoch, lr);
            best_model = model.clone();
            checkpoint::save(&best_model, &ckpt_path)?;
        }
    }

    let test = if test_set.is_empty() || o.epochs == 0 {
        None
    } else {
        let r = evaluate_model(&best_model, &test_set)?;
        let rec = EpochRecord {
            epoch: best.1,
            split: Split::Test,
            report: r.clone(),
            lr: best.2,
        };
        writeln!(csv, "{}", csv_row(&cfg.run_id, rec.epoch, "test", &rec.report, rec.lr))?;
        on_epoch(&rec);
        fs::write(run_dir.join(REPORT_FILE), r.to_kv())?;
        Some(r)
    };
    csv.flush()?;
    Ok(TrainOutcome {
        model: best_model,
        best_epoch: best.1,
        history,
        test,
        run_dir: run_dir.to_path_buf(),
    })
}
