//! Training loops: input-space mixing pretraining per modality, then the
//! alternating cross-modal manifold cutmix stages.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::contrastive::{imix_loss, MoCoQueue};
use crate::encoder::{
    load_checkpoint, save_checkpoint, ArchSpec, EncoderStack, Optimizer, OptimizerKind,
};
use crate::error::{Error, Result};
use crate::mixing::{cmmc_mix_with, sample_layer_pair, LambdaSource, Operator};
use crate::rng::{derive_seed, SeededRng};
use crate::synthdata::{AugmentConfig, PairedSet, ViewTransform};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "stage,epoch,loss,pretext_acc,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs_mixup: usize,
    pub epochs_cmmc: usize,
    pub batch_size: usize,
    /// Input-space operator used by the pretraining stages.
    pub operator: Operator,
    pub alpha: f64,
    pub tau: f64,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub optimizer: OptimizerName,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs_mixup: 30,
            epochs_cmmc: 10,
            batch_size: 16,
            operator: Operator::Mixup,
            alpha: 1.0,
            tau: 0.07,
            momentum: 0.99,
            queue_capacity: 256,
            optimizer: OptimizerName::Adam,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn optimizer(&self) -> Optimizer {
        let kind = match self.optimizer {
            OptimizerName::Adam => OptimizerKind::adam(),
            OptimizerName::Sgd => OptimizerKind::sgd(0.9),
        };
        Optimizer::new(kind, self.learning_rate, self.weight_decay)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Parameter(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum {} outside [0, 1]",
                self.momentum
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Parameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter(
                "learning_rate and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    MixupPretrain,
    Cmmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: StageKind,
    /// 1 (RGB) or 2 (motion).
    pub trained: usize,
    pub frozen: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub operator: Operator,
    pub alpha: f64,
    pub seed: u64,
}

impl StageConfig {
    pub fn pretrain(modality: usize, cfg: &TrainerConfig, seed: u64) -> Self {
        Self {
            kind: StageKind::MixupPretrain,
            trained: modality,
            frozen: None,
            epochs: cfg.epochs_mixup,
            batch_size: cfg.batch_size,
            operator: cfg.operator,
            alpha: cfg.alpha,
            seed,
        }
    }

    pub fn cmmc(trained: usize, cfg: &TrainerConfig, seed: u64) -> Self {
        Self {
            kind: StageKind::Cmmc,
            trained,
            frozen: Some(3 - trained),
            epochs: cfg.epochs_cmmc,
            batch_size: cfg.batch_size,
            operator: Operator::None,
            alpha: cfg.alpha,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.trained) {
            return Err(Error::Parameter(format!(
                "trained modality must be 1 or 2, got {}",
                self.trained
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Parameter(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        match (self.kind, self.frozen) {
            (StageKind::Cmmc, Some(f)) if f != self.trained && (1..=2).contains(&f) => Ok(()),
            (StageKind::Cmmc, _) => Err(Error::Parameter(
                "a cmmc stage needs one trained and one distinct frozen modality".into(),
            )),
            (StageKind::MixupPretrain, None) => Ok(()),
            (StageKind::MixupPretrain, Some(_)) => {
                Err(Error::Parameter("pretraining stages freeze nothing".into()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stages: Vec<StageConfig>,
}

impl TrainSchedule {
    /// Pretrain both modalities, then four cmmc stages training 1, 2, 1, 2.
    pub fn standard(cfg: &TrainerConfig, master_seed: u64) -> Self {
        let seed = |i: u64| derive_seed(&[master_seed, i]);
        let mut stages = vec![
            StageConfig::pretrain(1, cfg, seed(1)),
            StageConfig::pretrain(2, cfg, seed(2)),
        ];
        for (i, m) in [1, 2, 1, 2].into_iter().enumerate() {
            stages.push(StageConfig::cmmc(m, cfg, seed(3 + i as u64)));
        }
        Self { stages }
    }

    /// Pretraining of a single modality only.
    pub fn pretrain_only(modality: usize, cfg: &TrainerConfig, master_seed: u64) -> Self {
        Self {
            stages: vec![StageConfig::pretrain(
                modality,
                cfg,
                derive_seed(&[master_seed, 1]),
            )],
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based position in the schedule.
    pub stage: usize,
    /// 1-based within the stage.
    pub epoch: usize,
    pub loss: f64,
    pub pretext_acc: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.stage, self.epoch, self.loss, self.pretext_acc, self.seconds
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed metrics row {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            stage: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
            pretext_acc: f[3].parse().map_err(|_| bad())?,
            seconds: f[4].parse().map_err(|_| bad())?,
        })
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!(
            "{} lacks the metrics header",
            path.display()
        )));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(MetricsRecord::parse_csv_line)
        .collect()
}

/// Query and momentum-key encoders for both modalities.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub encoders: [EncoderStack; 2],
    pub keys: [EncoderStack; 2],
}

impl TrainState {
    /// Fresh encoders for `(3, T, H, W)` RGB and `(2, T, H, W)` motion clips.
    pub fn init(input_size: [usize; 3], master_seed: u64) -> Result<Self> {
        let build = |channels: usize, name: &str, m: u64| {
            let mut rng = SeededRng::new(derive_seed(&[master_seed, 0x1417, m]));
            EncoderStack::build(ArchSpec::video(channels, input_size), name, &mut rng)
        };
        let f1 = build(3, "rgb", 1)?;
        let f2 = build(2, "motion", 2)?;
        Ok(Self {
            keys: [f1.clone(), f2.clone()],
            encoders: [f1, f2],
        })
    }

    pub fn encoder(&self, modality: usize) -> &EncoderStack {
        &self.encoders[modality - 1]
    }

    pub fn save(&self, dir: &Path, master_seed: u64, stage: usize) -> Result<()> {
        let seeds: std::collections::BTreeMap<String, u64> =
            [("master".to_string(), master_seed)].into();
        for (m, name) in [(0, "f1"), (1, "f2")] {
            save_checkpoint(
                &self.encoders[m],
                &dir.join(name),
                seeds.clone(),
                Some(stage),
            )?;
        }
        for (m, name) in [(0, "key1"), (1, "key2")] {
            save_checkpoint(&self.keys[m], &dir.join(name), seeds.clone(), Some(stage))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| load_checkpoint(&dir.join(name)).map(|(s, _)| s);
        Ok(Self {
            encoders: [load("f1")?, load("f2")?],
            keys: [load("key1")?, load("key2")?],
        })
    }
}

/// Test and diagnostic overrides of the stochastic mixing choices.
#[derive(Debug, Clone, Default)]
pub struct Hooks {
    /// Replaces every Beta draw of the mixing coefficient.
    pub force_lambda: Option<f64>,
    /// Fixes the cmmc mixing sites `(k, l)`.
    pub force_layers: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub pretext_acc: f64,
    /// Batch-level coefficient reported by the mixing operator.
    pub lambda: f64,
    /// Coefficient(s) passed to the loss.
    pub loss_lambdas: Vec<f64>,
    pub layers: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub records: Vec<MetricsRecord>,
    pub batches: Vec<BatchTrace>,
    /// Batches whose key or frozen branches were checked for zero gradient.
    pub detach_checks: usize,
}

/// Result of one forward/backward pass; gradients are left in the query encoder.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub pretext_accuracy: f64,
    pub lambda: f64,
    pub loss_lambdas: Vec<f64>,
}

/// Mix `x` in input space, embed, score against `z_key` and the queue, backprop into `f`.
#[allow(clippy::too_many_arguments)]
pub fn input_mix_step(
    f: &mut EncoderStack,
    x: &Tensor,
    z_key: &Tensor,
    queue: &MoCoQueue,
    tau: f64,
    operator: Operator,
    lambda: LambdaSource,
    rng: &mut SeededRng,
) -> Result<StepOutcome> {
    let mix = operator.apply(x, lambda, rng)?;
    let z = f.forward(&mix.mixed)?;
    let r = imix_loss(&z, z_key, queue, tau, &mix.partner, &mix.sample_lambdas)?;
    f.backward(&r.grad_query, 0)?;
    Ok(StepOutcome {
        loss: r.loss,
        pretext_accuracy: r.pretext_accuracy,
        lambda: mix.lambda,
        loss_lambdas: mix.sample_lambdas,
    })
}

/// One cmmc pass: hidden activations of `f1` at block `k` receive a box
/// from the frozen `f2` at block `l`; only `f1` gets gradients.
#[allow(clippy::too_many_arguments)]
pub fn cmmc_step(
    f1: &mut EncoderStack,
    f2: &mut EncoderStack,
    x1: &Tensor,
    x2: &Tensor,
    z_key: &Tensor,
    queue: &MoCoQueue,
    tau: f64,
    (k, l): (usize, usize),
    lambda: LambdaSource,
    rng: &mut SeededRng,
) -> Result<StepOutcome> {
    if x1.rows() != x2.rows() {
        return Err(Error::Data(format!(
            "modality batches of {} and {} clips are not paired",
            x1.rows(),
            x2.rows()
        )));
    }
    let depth = f1.depth();
    let g1 = f1.partial_forward(x1, 0, k)?;
    let g2 = f2.partial_forward(x2, 0, l)?;
    f2.clear_caches();
    let mix = cmmc_mix_with(&g1, &g2, lambda, rng)?;
    let z = f1.partial_forward(&mix.mixed, k, depth)?;
    let r = imix_loss(&z, z_key, queue, tau, &mix.partner, &mix.sample_lambdas)?;
    let g_k = f1.backward_range(&r.grad_query, k, depth)?;
    f1.backward_range(&mix.primary_grad(&g_k)?, 0, k)?;
    Ok(StepOutcome {
        loss: r.loss,
        pretext_accuracy: r.pretext_accuracy,
        lambda: mix.lambda,
        loss_lambdas: mix.sample_lambdas,
    })
}

fn view(modality: usize, tf: &ViewTransform, clip: &Tensor) -> Result<Tensor> {
    if modality == 1 {
        tf.apply_rgb(clip)
    } else {
        tf.apply_motion(clip)
    }
}

/// Augmented views of `idx` for one modality, drawn in clip order from `rng`.
fn views(
    clips: &[Tensor],
    modality: usize,
    idx: &[usize],
    aug: &AugmentConfig,
    count: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Tensor>> {
    let mut out: Vec<Vec<Tensor>> = vec![Vec::with_capacity(idx.len()); count];
    for &i in idx {
        let clip = &clips[i];
        let (h, w) = (clip.shape()[2], clip.shape()[3]);
        for v in out.iter_mut() {
            let tf = ViewTransform::sample(aug, h, w, rng)?;
            v.push(view(modality, &tf, clip)?);
        }
    }
    out.into_iter().map(|v| Tensor::stack(&v)).collect()
}

/// Batches of one epoch; a trailing batch smaller than 2 is dropped.
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    stage_seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let order = SeededRng::new(derive_seed(&[stage_seed, epoch as u64])).permutation(n);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn batch_rng(stage_seed: u64, epoch: usize, batch: usize, stream: u64) -> SeededRng {
    SeededRng::new(derive_seed(&[
        stage_seed,
        epoch as u64,
        batch as u64,
        stream,
    ]))
}

/// Runs one stage in place on `state`. The queue and the optimizer start
/// fresh; in cmmc stages the other modality is frozen and must come out
/// bitwise unchanged.
pub fn run_stage(
    state: &mut TrainState,
    stage_number: usize,
    stage: &StageConfig,
    cfg: &TrainerConfig,
    data: &PairedSet,
    hooks: &Hooks,
) -> Result<StageReport> {
    stage.validate()?;
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Data("training set needs at least two clips".into()));
    }
    let m = stage.trained;
    let [e1, e2] = &mut state.encoders;
    let (enc, other) = if m == 1 { (e1, e2) } else { (e2, e1) };
    let key = &mut state.keys[m - 1];
    let clips = data.modality(m)?;
    let other_clips = data.modality(3 - m)?;
    // Gradients left over from earlier stages would defeat the detach check.
    enc.zero_grad();
    other.zero_grad();
    key.zero_grad();

    let frozen_snapshot = match stage.kind {
        StageKind::Cmmc => {
            other.set_frozen(true);
            Some(other.snapshot())
        }
        StageKind::MixupPretrain => None,
    };
    let mut queue = MoCoQueue::new(cfg.queue_capacity);
    let mut opt = cfg.optimizer();
    let lambda = match hooks.force_lambda {
        Some(l) => LambdaSource::Fixed(l),
        None => LambdaSource::Beta(stage.alpha),
    };

    let mut report = StageReport {
        records: Vec::with_capacity(stage.epochs),
        batches: Vec::new(),
        detach_checks: 0,
    };
    let result = (|| -> Result<()> {
        for epoch in 1..=stage.epochs {
            let started = Instant::now();
            let (mut loss_sum, mut acc_sum, mut n_batches) = (0.0, 0.0, 0usize);
            for (b, idx) in epoch_batches(data.len(), stage.batch_size, stage.seed, epoch)
                .iter()
                .enumerate()
            {
                let mut aug = batch_rng(stage.seed, epoch, b, 1);
                let mut mix_rng = batch_rng(stage.seed, epoch, b, 3);
                let mut v = views(clips, m, idx, &cfg.augment, 2, &mut aug)?;
                let (xk, xq) = (v.pop().unwrap(), v.pop().unwrap());
                let z_key = key.forward(&xk)?;
                key.clear_caches();

                enc.zero_grad();
                let (out, layers) = match stage.kind {
                    StageKind::MixupPretrain => (
                        input_mix_step(
                            enc,
                            &xq,
                            &z_key,
                            &queue,
                            cfg.tau,
                            stage.operator,
                            lambda,
                            &mut mix_rng,
                        )?,
                        None,
                    ),
                    StageKind::Cmmc => {
                        let mut aug2 = batch_rng(stage.seed, epoch, b, 2);
                        let x2 =
                            views(other_clips, 3 - m, idx, &cfg.augment, 1, &mut aug2)?.remove(0);
                        let kl = match hooks.force_layers {
                            Some(kl) => kl,
                            None => sample_layer_pair(
                                enc.mixable_layers(),
                                other.mixable_layers(),
                                &mut mix_rng,
                            )?,
                        };
                        let out = cmmc_step(
                            enc,
                            other,
                            &xq,
                            &x2,
                            &z_key,
                            &queue,
                            cfg.tau,
                            kl,
                            lambda,
                            &mut mix_rng,
                        )?;
                        (out, Some(kl))
                    }
                };
                if !out.loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "stage {stage_number} epoch {epoch} batch {b}: loss {}",
                        out.loss
                    )));
                }
                // The key branch and the frozen encoder never see a backward pass.
                if key.grad_sq_norm() != 0.0
                    || (stage.kind == StageKind::Cmmc && other.grad_sq_norm() != 0.0)
                {
                    return Err(Error::Contract(format!(
                        "stage {stage_number}: gradient reached a detached branch"
                    )));
                }
                report.detach_checks += 1;
                opt.step_stack(enc)?;
                enc.clear_caches();
                key.ema_update(enc, cfg.momentum)?;
                queue.enqueue(&z_key)?;

                loss_sum += out.loss;
                acc_sum += out.pretext_accuracy;
                n_batches += 1;
                report.batches.push(BatchTrace {
                    epoch,
                    batch: b,
                    loss: out.loss,
                    pretext_acc: out.pretext_accuracy,
                    lambda: out.lambda,
                    loss_lambdas: out.loss_lambdas,
                    layers,
                });
            }
            report.records.push(MetricsRecord {
                stage: stage_number,
                epoch,
                loss: loss_sum / n_batches as f64,
                pretext_acc: acc_sum / n_batches as f64,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        Ok(())
    })();

    if let Some(snapshot) = frozen_snapshot {
        other.set_frozen(false);
        if !other.matches_snapshot(&snapshot) {
            return Err(Error::Contract(format!(
                "stage {stage_number}: frozen {} encoder changed",
                other.modality()
            )));
        }
    }
    result.map(|_| report)
}

#[derive(Debug, Clone, Default)]
pub struct ScheduleOptions {
    /// Stage checkpoints go to `dir/stage{n}`, the running trace to `dir/metrics.csv`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Skip stages `1..=n`, restoring state and metrics from `stage{n}`.
    pub resume_after: Option<usize>,
    pub hooks: Hooks,
}

#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
    pub reports: Vec<StageReport>,
}

pub fn stage_dir(root: &Path, stage_number: usize) -> PathBuf {
    root.join(format!("stage{stage_number}"))
}

pub fn run_schedule(
    schedule: &TrainSchedule,
    cfg: &TrainerConfig,
    data: &PairedSet,
    mut state: TrainState,
    master_seed: u64,
    opts: &ScheduleOptions,
) -> Result<ScheduleOutcome> {
    for s in &schedule.stages {
        s.validate()?;
    }
    let mut records = Vec::new();
    let mut first = 1;
    if let Some(done) = opts.resume_after {
        let root = opts.checkpoint_dir.as_ref().ok_or_else(|| {
            Error::State("resume requested without a checkpoint directory".into())
        })?;
        let dir = stage_dir(root, done);
        if !dir.join("f1").join("manifest.json").exists() {
            return Err(Error::State(format!(
                "no checkpoint for stage {done} at {}",
                dir.display()
            )));
        }
        state = TrainState::load(&dir)?;
        records = read_metrics(&dir.join("metrics.csv"))?;
        first = done + 1;
    }
    let mut reports = Vec::new();
    for (i, stage) in schedule.stages.iter().enumerate().skip(first - 1) {
        let n = i + 1;
        match run_stage(&mut state, n, stage, cfg, data, &opts.hooks) {
            Ok(report) => {
                records.extend(report.records.iter().cloned());
                reports.push(report);
            }
            Err(e) => {
                if let Some(root) = &opts.checkpoint_dir {
                    let dir = root.join("aborted");
                    state.save(&dir, master_seed, n)?;
                    write_metrics(&dir.join("metrics.csv"), &records)?;
                }
                return Err(e);
            }
        }
        if let Some(root) = &opts.checkpoint_dir {
            let dir = stage_dir(root, n);
            state.save(&dir, master_seed, n)?;
            write_metrics(&dir.join("metrics.csv"), &records)?;
            write_metrics(&root.join("metrics.csv"), &records)?;
        }
    }
    Ok(ScheduleOutcome {
        state,
        records,
        reports,
    })
}
