//! Multi-run experiments: the input-space operator comparison and the
//! cross-modal versus single-modality pretraining comparison.

use serde::Serialize;

use crate::config::RunConfig;
use crate::encoder::EncoderStack;
use crate::error::{Error, Result};
use crate::evalkit::{
    extract_features, linear_probe, standard_retrieval, ProbeConfig, RetrievalReport,
};
use crate::mixing::Operator;
use crate::synthdata::{generate_corpus, PairedSet};
use crate::trainer::{run_schedule, ScheduleOptions, TrainSchedule, TrainState, TrainerConfig};

pub const OPERATOR_CSV_HEADER: &str = "operator,seed,probe_acc,r1,split_hash";

/// Train and test clips of one corpus with both modalities.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: PairedSet,
    pub test: PairedSet,
    pub split_hash: u64,
}

impl Splits {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let corpus = generate_corpus(&cfg.data)?;
        Ok(Self {
            train: PairedSet::from_clips(&corpus.train)?,
            test: PairedSet::from_clips(&corpus.test)?,
            split_hash: corpus.split_hash(),
        })
    }

    pub fn input_size(&self) -> [usize; 3] {
        let s = self.train.rgb[0].shape();
        [s[1], s[2], s[3]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub probe_acc: f64,
    pub retrieval: RetrievalReport,
}

impl Evaluation {
    pub fn r1(&self) -> f64 {
        self.retrieval.at(1).unwrap_or(0.0)
    }
}

/// Linear probe and retrieval (test queries against the train gallery) for one modality.
pub fn evaluate(
    enc: &EncoderStack,
    modality: usize,
    splits: &Splits,
    probe: &ProbeConfig,
) -> Result<Evaluation> {
    let (tr, te) = (&splits.train, &splits.test);
    let ftr = extract_features(enc, tr.modality(modality)?, &tr.labels, &tr.clip_ids)?;
    let fte = extract_features(enc, te.modality(modality)?, &te.labels, &te.clip_ids)?;
    Ok(Evaluation {
        probe_acc: linear_probe(&ftr, &fte, probe)?.accuracy,
        retrieval: standard_retrieval(&ftr, &fte)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorRow {
    pub operator: Operator,
    pub seed: u64,
    pub probe_acc: f64,
    pub r1: f64,
    pub split_hash: u64,
}

impl OperatorRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:016x}",
            self.operator, self.seed, self.probe_acc, self.r1, self.split_hash
        )
    }
}

/// Pretrains one modality with `operator` and evaluates it.
pub fn pretrain_and_evaluate(
    cfg: &RunConfig,
    splits: &Splits,
    operator: Operator,
    seed: u64,
) -> Result<Evaluation> {
    let m = cfg.experiment.modality;
    let trainer = TrainerConfig {
        operator,
        ..cfg.trainer.clone()
    };
    let schedule = TrainSchedule::pretrain_only(m, &trainer, seed);
    let state = TrainState::init(splits.input_size(), seed)?;
    let out = run_schedule(
        &schedule,
        &trainer,
        &splits.train,
        state,
        seed,
        &ScheduleOptions::default(),
    )?;
    evaluate(out.state.encoder(m), m, splits, &cfg.probe)
}

/// Every configured operator under every seed, on one shared corpus.
/// `on_row` sees each row as soon as it is computed.
pub fn compare_operators(
    cfg: &RunConfig,
    mut on_row: impl FnMut(&OperatorRow) -> Result<()>,
) -> Result<Vec<OperatorRow>> {
    if cfg.experiment.seeds.is_empty() || cfg.experiment.operators.is_empty() {
        return Err(Error::Config(
            "experiment needs at least one seed and one operator".into(),
        ));
    }
    let splits = Splits::generate(cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.experiment.seeds {
        for &op in &cfg.experiment.operators {
            let e = pretrain_and_evaluate(cfg, &splits, op, seed)?;
            let row = OperatorRow {
                operator: op,
                seed,
                probe_acc: e.probe_acc,
                r1: e.r1(),
                split_hash: splits.split_hash,
            };
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median probe accuracy per operator, in first-seen order.
pub fn median_by_operator(rows: &[OperatorRow]) -> Vec<(Operator, f64)> {
    let mut ops: Vec<Operator> = Vec::new();
    for r in rows {
        if !ops.contains(&r.operator) {
            ops.push(r.operator);
        }
    }
    ops.into_iter()
        .map(|op| {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| r.operator == op)
                .map(|r| r.probe_acc)
                .collect();
            (op, median(&accs))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossModalRow {
    pub seed: u64,
    /// Modality-1 encoder after pretraining plus the four cmmc stages.
    pub cmmc: Evaluation,
    /// Modality-1 encoder pretrained with the same number of modality-1 epochs, no cross-modal stages.
    pub mixup_only: Evaluation,
}

/// Standard schedule versus input-space pretraining alone, matched on the
/// number of epochs spent training the modality-1 encoder.
pub fn compare_cross_modal(cfg: &RunConfig, splits: &Splits, seed: u64) -> Result<CrossModalRow> {
    let trainer = &cfg.trainer;
    let full = TrainSchedule::standard(trainer, seed);
    let state = TrainState::init(splits.input_size(), seed)?;
    let out = run_schedule(
        &full,
        trainer,
        &splits.train,
        state,
        seed,
        &ScheduleOptions::default(),
    )?;
    let cmmc = evaluate(out.state.encoder(1), 1, splits, &cfg.probe)?;

    let budget: usize = full
        .stages
        .iter()
        .filter(|s| s.trained == 1)
        .map(|s| s.epochs)
        .sum();
    let single = TrainerConfig {
        epochs_mixup: budget,
        ..trainer.clone()
    };
    let schedule = TrainSchedule::pretrain_only(1, &single, seed);
    let state = TrainState::init(splits.input_size(), seed)?;
    let out = run_schedule(
        &schedule,
        &single,
        &splits.train,
        state,
        seed,
        &ScheduleOptions::default(),
    )?;
    let mixup_only = evaluate(out.state.encoder(1), 1, splits, &cfg.probe)?;
    Ok(CrossModalRow {
        seed,
        cmmc,
        mixup_only,
    })
}
