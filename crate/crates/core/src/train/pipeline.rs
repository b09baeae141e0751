//! Epoch loop, evaluation and the chained three-stage run.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::metrics::{accuracy, cross_entropy};
use super::model::{Activity, ExecPlan, Net, Params, Prepared, RunOpts};
use super::optim::{cosine_lr, Sgd, SgdConfig};
use super::Stage;
use crate::checkpoint::Checkpoint;
use crate::crossbar::{AdcModel, Mapping};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::netspec::NetworkSpec;

fn d_epochs() -> usize {
    10
}
fn d_batch() -> usize {
    16
}
fn d_lr() -> f64 {
    0.05
}
fn d_momentum() -> f64 {
    0.9
}
fn d_neuron_lr() -> f64 {
    0.1
}
fn d_gain() -> f64 {
    1.0
}
fn d_clip() -> Option<f64> {
    Some(1.0)
}
fn d_true() -> bool {
    true
}

fn ser_adc<S: Serializer>(v: &Option<AdcModel>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(a) => s.serialize_some(&a.to_string()),
        None => s.serialize_none(),
    }
}

fn de_adc<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<AdcModel>, D::Error> {
    let v: Option<String> = Option::deserialize(d)?;
    v.map(|s| s.parse().map_err(serde::de::Error::custom)).transpose()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Floor of the cosine schedule.
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_clip")]
    pub grad_clip: Option<f64>,
    /// Learning-rate multiplier for thresholds and leaks.
    #[serde(default = "d_neuron_lr")]
    pub neuron_lr: f64,
    /// Overrides the spec's spike surrogate width.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Overrides the spec's sequence length.
    #[serde(default)]
    pub time_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Multiplier of the uniform initialization bound (first stage only).
    #[serde(default = "d_gain")]
    pub init_gain: f64,
    /// Array size for the sense-amplifier stage; defaults to the spec's.
    #[serde(default)]
    pub xbar: Option<usize>,
    #[serde(default)]
    pub mapping: Option<Mapping>,
    /// Replaces every layer's readout in the sense-amplifier stage.
    #[serde(default, serialize_with = "ser_adc", deserialize_with = "de_adc")]
    pub adc: Option<AdcModel>,
    /// Uses only the first `n` training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default = "d_true")]
    pub dropout: bool,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        toml::from_str(&format!("stage = \"{stage}\"")).expect("defaults parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Format { kind: "train config", msg: e.to_string() })?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr.is_finite()) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if matches!(self.alpha, Some(a) if !(a > 0.0)) {
            return bad("alpha must be positive");
        }
        if matches!(self.time_steps, Some(0)) || matches!(self.xbar, Some(0)) {
            return bad("time_steps and xbar must be positive");
        }
        Ok(())
    }

    /// The spec with this config's overrides applied.
    pub fn apply(&self, spec: &NetworkSpec) -> NetworkSpec {
        let mut s = spec.clone();
        if let Some(a) = self.alpha {
            s.alpha = a;
        }
        if let Some(t) = self.time_steps {
            s.time_steps = t;
        }
        s
    }

    pub fn xbar_for(&self, spec: &NetworkSpec) -> usize {
        self.xbar.unwrap_or(spec.crossbar.xbar)
    }

    pub fn mapping_for(&self, spec: &NetworkSpec) -> Mapping {
        self.mapping.unwrap_or(spec.crossbar.mapping)
    }

    pub fn plan(&self, net: &Net) -> ExecPlan {
        ExecPlan::for_stage(net, self.stage, self.xbar_for(&net.spec), self.mapping_for(&net.spec), self.adc)
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            neuron_lr: self.neuron_lr,
            ..SgdConfig::default()
        }
    }
}

/// Parameters a stage starts from. The first stage initializes randomly;
/// later stages require the checkpoint of the stage before them.
pub fn initial_params(net: &Net, cfg: &TrainConfig, upstream: Option<&Checkpoint>) -> Result<Params> {
    match (cfg.stage.upstream(), upstream) {
        (None, None) => Ok(net.init_params(cfg.seed, cfg.init_gain)),
        (None, Some(c)) => {
            c.check_spec(&net.spec)?;
            Ok(c.params.clone())
        }
        (Some(need), Some(c)) if c.stage == need => {
            c.check_spec(&net.spec)?;
            Ok(c.params.clone())
        }
        (Some(need), got) => Err(Error::Validation(format!(
            "stage {} must be initialized from a {need} checkpoint{}",
            cfg.stage,
            match got {
                Some(c) => format!(", got a {} checkpoint", c.stage),
                None => String::new(),
            }
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub avg_spikes: f64,
}

pub const EPOCH_HEADER: &str = "epoch,loss,train_acc,val_acc,avg_spikes";

impl EpochRow {
    pub fn csv(&self) -> String {
        format!("{},{:.6},{:.4},{:.4},{:.4}", self.epoch, self.loss, self.train_acc, self.val_acc, self.avg_spikes)
    }
}

pub fn write_epochs<W: Write>(mut w: W, rows: &[EpochRow]) -> Result<()> {
    writeln!(w, "{EPOCH_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub activity: Activity,
    pub logits: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn avg_spikes(&self) -> f64 {
        self.activity.avg_spikes().unwrap_or(0.0)
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn evaluate_prepared(net: &Net, params: &Params, prep: &[Prepared], data: &[Sample]) -> Result<Evaluation> {
    let mut activity = Activity::default();
    let mut logits = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for s in data {
        let pass = net.run(params, prep, s, RunOpts::default())?;
        loss += cross_entropy(&pass.logits, s.label as usize).0;
        activity.merge(&pass.activity);
        logits.push(pass.logits);
    }
    let labels: Vec<usize> = data.iter().map(|s| s.label as usize).collect();
    let n = data.len().max(1) as f64;
    Ok(Evaluation { loss: loss / n, accuracy: accuracy(&logits, &labels), activity, logits })
}

pub fn evaluate(net: &Net, params: &Params, plan: &ExecPlan, data: &[Sample]) -> Result<Evaluation> {
    let prep = net.prepare(params, plan)?;
    evaluate_prepared(net, params, &prep, data)
}

/// Loss and gradient of one batch, reduced in batch order.
pub struct BatchGrad {
    pub loss: f64,
    pub correct: usize,
    pub grads: Params,
    pub activity: Activity,
}

/// `batch` pairs each sample with its dropout seed.
pub fn batch_gradient(net: &Net, params: &Params, plan: &ExecPlan, batch: &[(Option<u64>, &Sample)]) -> Result<BatchGrad> {
    let prep = net.prepare(params, plan)?;
    let mut grads = params.zeros_like();
    let mut activity = Activity::default();
    let mut loss = 0.0;
    let mut correct = 0;
    let k = 1.0 / batch.len() as f64;
    for &(seed, s) in batch {
        let opts = RunOpts { dropout_seed: seed, smooth: None };
        let pass = net.run(params, &prep, s, opts)?;
        let (l, mut g) = cross_entropy(&pass.logits, s.label as usize);
        if !l.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {l} on a sample of class {}", s.label)));
        }
        loss += l;
        correct += (super::metrics::argmax(&pass.logits) == s.label as usize) as usize;
        g.iter_mut().for_each(|v| *v *= k);
        net.backward(&pass, &prep, &g, &mut grads)?;
        activity.merge(&pass.activity);
    }
    if grads.flat().iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    Ok(BatchGrad { loss: loss * k, correct, grads, activity })
}

/// Runs `steps` optimizer steps on one fixed batch and returns the batch loss before each.
pub fn fit_batch(net: &Net, params: &mut Params, cfg: &TrainConfig, batch: &[Sample], steps: usize) -> Result<Vec<f64>> {
    let plan = cfg.plan(net);
    let mut opt = Sgd::new(cfg.sgd(), params);
    let seeded: Vec<(Option<u64>, &Sample)> =
        batch.iter().enumerate().map(|(i, s)| (cfg.dropout.then(|| mix(cfg.seed, i as u64)), s)).collect();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let bg = batch_gradient(net, params, &plan, &seeded)?;
        losses.push(bg.loss);
        opt.step(params, &bg.grads, cfg.lr);
    }
    Ok(losses)
}

pub struct StageOutcome {
    pub params: Params,
    pub rows: Vec<EpochRow>,
}

/// Trains one stage. `log` sees each epoch as it finishes.
pub fn train_stage(
    net: &Net,
    init: Params,
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    mut log: impl FnMut(&EpochRow),
) -> Result<StageOutcome> {
    cfg.validate()?;
    net.check_params(&init)?;
    let train = &train[..cfg.train_limit.unwrap_or(train.len()).min(train.len())];
    if train.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }
    let plan = cfg.plan(net);
    let mut params = init;
    let mut opt = Sgd::new(cfg.sgd(), &params);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));
        let mut loss = 0.0;
        let mut correct = 0;
        let mut activity = Activity::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Option<u64>, &Sample)> = chunk
                .iter()
                .map(|&i| (cfg.dropout.then(|| mix(mix(cfg.seed, epoch as u64), i as u64)), &train[i]))
                .collect();
            let bg = batch_gradient(net, &params, &plan, &batch)?;
            loss += bg.loss * chunk.len() as f64;
            correct += bg.correct;
            activity.merge(&bg.activity);
            opt.step(&mut params, &bg.grads, cosine_lr(cfg.lr, cfg.lr_min, step, total));
            step += 1;
        }
        let val_eval = if val.is_empty() { None } else { Some(evaluate(net, &params, &plan, val)?) };
        let row = EpochRow {
            epoch: epoch + 1,
            loss: loss / train.len() as f64,
            train_acc: correct as f64 * 100.0 / train.len() as f64,
            val_acc: val_eval.as_ref().map_or(0.0, |e| e.accuracy),
            avg_spikes: val_eval.as_ref().map_or_else(|| activity.avg_spikes().unwrap_or(0.0), |e| e.avg_spikes()),
        };
        log(&row);
        rows.push(row);
    }
    Ok(StageOutcome { params, rows })
}

/// Summary line of one finished stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: usize,
    pub final_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub avg_spikes: f64,
}

pub const REPORT_HEADER: &str = "stage,epochs,final_loss,val_acc,test_acc,avg_spikes";

impl StageReport {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.4},{:.4},{:.4}",
            self.stage, self.epochs, self.final_loss, self.val_acc, self.test_acc, self.avg_spikes
        )
    }
}

pub fn write_report<W: Write>(mut w: W, rows: &[StageReport]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

pub struct StageRun {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRow>,
    pub report: StageReport,
}

/// Trains one stage from its upstream checkpoint and scores it on `test`.
pub fn run_stage(
    net: &Net,
    cfg: &TrainConfig,
    upstream: Option<&Checkpoint>,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    log: impl FnMut(&EpochRow),
) -> Result<StageRun> {
    let init = initial_params(net, cfg, upstream)?;
    let out = train_stage(net, init, cfg, train, val, log)?;
    let eval = evaluate(net, &out.params, &cfg.plan(net), test)?;
    let last = out.rows.last();
    let report = StageReport {
        stage: cfg.stage,
        epochs: cfg.epochs,
        final_loss: last.map_or(eval.loss, |r| r.loss),
        val_acc: last.map_or(0.0, |r| r.val_acc),
        test_acc: eval.accuracy,
        avg_spikes: eval.avg_spikes(),
    };
    let checkpoint = Checkpoint::new(cfg.stage, net, out.params, cfg.xbar_for(&net.spec), cfg.mapping_for(&net.spec))?;
    Ok(StageRun { checkpoint, epochs: out.rows, report })
}

/// Full-precision, quantization-aware and sense-amplifier stages in order,
/// each initialized from the previous one's checkpoint.
pub fn run_pipeline(
    net: &Net,
    cfgs: &[TrainConfig],
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    mut log: impl FnMut(Stage, &EpochRow),
) -> Result<Vec<StageRun>> {
    let stages: Vec<Stage> = cfgs.iter().map(|c| c.stage).collect();
    if stages != Stage::ALL {
        return Err(Error::Validation(format!("pipeline needs configs for fp, qat, adcless in order, got {stages:?}")));
    }
    let mut runs: Vec<StageRun> = Vec::with_capacity(3);
    for cfg in cfgs {
        let up = runs.last().map(|r| &r.checkpoint);
        let run = run_stage(net, cfg, up, train, val, test, |r| log(cfg.stage, r))?;
        runs.push(run);
    }
    Ok(runs)
}
