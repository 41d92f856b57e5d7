//! Training loop, metrics persistence and run-level diagnostics.

pub mod config;
pub mod data;
pub mod optim;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

pub use config::{DataConfig, DataFormat, Precision, RunConfig, SyntheticSpec, ZigzagConfig};
pub use data::{augment, load_dataset, AugmentDraw, DataSplits, Dataset};
pub use optim::{adam_step, make_optimizer, Adam, LrSchedule, Optimizer, OptimizerKind, Sgd};

use crate::convergence::{
    dense_input_coherence, sign_coherence_many, symmetric_row_coherence, FeedKind, SignCoherenceReport,
    SymmetricCoherence,
};
use crate::error::{Error, Result};
use crate::layers::{softmax_cross_entropy, Mode};
use crate::resnet::ResNet;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "model.ickpt";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Excluded from `metrics.csv` so that file is reproducible byte for byte.
    #[serde(skip)]
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Mean loss of every training batch of the first epoch, in order.
    pub first_epoch_losses: Vec<f64>,
    pub parameter_count: usize,
    pub stability: Option<f64>,
    pub output_dir: PathBuf,
}

/// Mean over sliding windows of the population standard deviation of test
/// accuracy; lower means a steadier curve.
pub fn stability_metric(records: &[EpochRecord], window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::Parameter("window must be >= 1".into()));
    }
    if records.len() < window {
        return Err(Error::Precondition(format!(
            "stability window {window} needs at least {window} epochs, got {}",
            records.len()
        )));
    }
    let acc: Vec<f64> = records.iter().map(|r| r.test_acc).collect();
    let stds: Vec<f64> = acc
        .windows(window)
        .map(|w| {
            let mean = w.iter().sum::<f64>() / window as f64;
            (w.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / window as f64).sqrt()
        })
        .collect();
    Ok(stds.iter().sum::<f64>() / stds.len() as f64)
}

struct Streams {
    init: Rng,
    shuffle: Rng,
    augment: Rng,
    dropout: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let root = Rng::new(seed);
        Self {
            init: root.child(10),
            shuffle: root.child(11),
            augment: root.child(12),
            dropout: root.child(13),
        }
    }
}

fn evaluate<E: Element>(net: &mut ResNet<E>, data: &Dataset, batch: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch) {
        let (x, labels) = data.batch::<E>(chunk)?;
        let logits = net.forward(&x, Mode::Eval, rng)?;
        let (l, _) = softmax_cross_entropy(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        correct += logits.argmax_rows()?.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

fn layer_norms<E: Element>(net: &ResNet<E>) -> Vec<(String, f64)> {
    net.named_params().into_iter().map(|(n, p)| (n, p.value.norm())).collect()
}

fn run<E: Element>(
    cfg: &RunConfig,
    data: &DataSplits,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(ResNet<E>, Vec<EpochRecord>, Vec<f64>)> {
    let mut spec = cfg.net.clone();
    spec.in_channels = data.train.image_shape()[0];
    let mut s = Streams::new(cfg.seed);
    let mut net = ResNet::<E>::build(&spec, &mut s.init)?;
    let schedule = LrSchedule::new(cfg.schedule.base, cfg.schedule.milestones.clone())?;
    let mut opt = make_optimizer::<E>(cfg.optimizer);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut first_epoch_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = schedule.lr(epoch);
        s.shuffle.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        // A trailing batch of one sample cannot be batch-normalized; it is skipped.
        for (b, chunk) in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let (mut x, labels) = data.train.batch::<E>(chunk)?;
            if cfg.data.augment {
                x = augment(&x, &mut s.augment)?;
            }
            let logits = net.forward(&x, Mode::Train, &mut s.dropout)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() || !logits.all_finite() {
                let norms = layer_norms(&net);
                fs::create_dir_all(&cfg.output_dir)?;
                let dump = json!({ "epoch": epoch, "batch": b, "loss": loss.to_string(), "layer_norms": norms });
                fs::write(cfg.output_dir.join(NAN_DUMP_FILE), serde_json::to_string_pretty(&dump)?)?;
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    layer_norms: norms,
                });
            }
            net.backward(&grad)?;
            opt.step(&mut net.params_mut(), lr)?;
            loss_sum += loss * chunk.len() as f64;
            correct += logits.argmax_rows()?.iter().zip(&labels).filter(|(p, y)| p == y).count();
            seen += chunk.len();
            if epoch == 0 {
                first_epoch_losses.push(loss);
            }
        }
        let (test_loss, test_acc) = evaluate(&mut net, &data.test, cfg.batch_size, &mut s.dropout)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_loss,
            test_acc,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok((net, records, first_epoch_losses))
}

/// Writes `metrics.csv` (no timing), `timing.csv`, `report.json` and
/// `config.cfg` into `dir`.
pub fn write_metrics(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(METRICS_FILE))?;
    for r in &outcome.records {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut t = csv::Writer::from_path(dir.join(TIMING_FILE))?;
    t.write_record(["epoch", "wall_ms"])?;
    for r in &outcome.records {
        t.write_record([r.epoch.to_string(), r.wall_ms.to_string()])?;
    }
    t.flush()?;
    let last = outcome.records.last();
    let report = json!({
        "command": "train",
        "seed": cfg.seed,
        "net": cfg.net,
        "optimizer": cfg.optimizer,
        "schedule": cfg.schedule,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "data": cfg.data,
        "precision": cfg.precision,
        "parameter_count": outcome.parameter_count,
        "weighted_layers": cfg.net.weighted_depth(),
        "final_test_acc": last.map(|r| r.test_acc),
        "final_train_acc": last.map(|r| r.train_acc),
        "stability_window": cfg.stability_window,
        "stability_metric": outcome.stability,
        "records": outcome.records,
    });
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut saved = cfg.clone();
    saved.output_dir = PathBuf::from(".");
    fs::write(dir.join("config.cfg"), saved.serialize())?;
    Ok(())
}

/// Trains on already-loaded data, writing every output file and the final
/// checkpoint into `cfg.output_dir`.
pub fn train_on(cfg: &RunConfig, data: &DataSplits, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let (records, first, params, ck_bytes) = match cfg.precision {
        Precision::F32 => {
            let (net, r, f) = run::<f32>(cfg, data, on_epoch)?;
            (r, f, net.parameter_count(), net.to_checkpoint().to_bytes()?)
        }
        Precision::F64 => {
            let (net, r, f) = run::<f64>(cfg, data, on_epoch)?;
            (r, f, net.parameter_count(), net.to_checkpoint().to_bytes()?)
        }
    };
    fs::write(cfg.output_dir.join(CHECKPOINT_FILE), ck_bytes)?;
    let stability = stability_metric(&records, cfg.stability_window).ok();
    let outcome = TrainOutcome {
        records,
        first_epoch_losses: first,
        parameter_count: params,
        stability,
        output_dir: cfg.output_dir.clone(),
    };
    write_metrics(&cfg.output_dir, cfg, &outcome)?;
    Ok(outcome)
}

/// Loads the configured data and trains.
pub fn train(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data, cfg.net.num_classes, cfg.seed)?;
    train_on(cfg, &data, on_epoch)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZigzagReport {
    pub relu_fed: SignCoherenceReport,
    pub ic_fed: SignCoherenceReport,
    pub symmetric: SymmetricCoherence,
    /// Head-layer coherence of the configured network on one training batch.
    pub network_head: SignCoherenceReport,
    pub relu_exact: bool,
    pub ic_below_half: bool,
    pub symmetric_within_3_sigma: bool,
    pub pass: bool,
}

/// Sign-coherence diagnostics: random ReLU- and IC-fed dense layers, the
/// sign-symmetric row law, and the head of the configured network.
pub fn diagnose_zigzag(cfg: &RunConfig) -> Result<ZigzagReport> {
    cfg.validate()?;
    let z = &cfg.zigzag;
    let p_keep = 1.0 - cfg.net.drop_rate;
    let root = Rng::new(cfg.seed);
    let relu_fed = dense_input_coherence(&mut root.child(20), FeedKind::Relu, z.trials, z.inputs, z.outputs, p_keep)?;
    let ic_fed = dense_input_coherence(&mut root.child(21), FeedKind::Ic, z.trials, z.inputs, z.outputs, p_keep)?;
    let symmetric = symmetric_row_coherence(&mut root.child(22), z.inputs, 10_000)?;

    let data = load_dataset(&cfg.data, cfg.net.num_classes, cfg.seed)?;
    let mut spec = cfg.net.clone();
    spec.in_channels = data.train.image_shape()[0];
    let mut s = Streams::new(cfg.seed);
    let mut net = ResNet::<f64>::build(&spec, &mut s.init)?;
    let take: Vec<usize> = (0..cfg.batch_size.min(data.train.len())).collect();
    let (x, labels) = data.train.batch::<f64>(&take)?;
    let logits = net.forward(&x, Mode::Train, &mut s.dropout)?;
    let (_, grad) = softmax_cross_entropy(&logits, &labels)?;
    let per_sample: Vec<Tensor> = net.head.per_sample_weight_grads(&grad)?;
    let network_head = sign_coherence_many(&per_sample)?;

    let relu_exact = relu_fed.coherent_fraction == 1.0;
    let ic_below_half = z.inputs < 4 || ic_fed.coherent_fraction < 0.5;
    let symmetric_within_3_sigma = (symmetric.measured - symmetric.expected).abs() <= 3.0 * symmetric.sigma;
    Ok(ZigzagReport {
        relu_fed,
        ic_fed,
        symmetric,
        network_head,
        relu_exact,
        ic_below_half,
        symmetric_within_3_sigma,
        pass: relu_exact && ic_below_half && symmetric_within_3_sigma,
    })
}
