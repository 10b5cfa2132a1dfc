use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use stcmix_core::config::{RunConfig, SEED_ENV};
use stcmix_core::encoder::load_checkpoint;
use stcmix_core::evalkit::{
    extract_features, finetune, linear_probe, standard_retrieval, EvalReport, LabeledClips,
};
use stcmix_core::experiments::{
    compare_operators, median_by_operator, Splits, OPERATOR_CSV_HEADER,
};
use stcmix_core::gradcheck::run_gradcheck;
use stcmix_core::synthdata::{export_corpus, generate_corpus, import_corpus, PairedSet};
use stcmix_core::trainer::{run_schedule, ScheduleOptions, StageConfig, TrainSchedule, TrainState};

const BUILD_ID: &str = env!("STCMIX_BUILD_ID");

#[derive(Parser)]
#[command(
    name = "stcmix",
    version,
    about = "Video mixing for self-supervised representation learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON config; a run manifest also works.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `trainer.epochs_mixup=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root for all relative input and output paths.
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Exported corpus directory; generated from `data.*` when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and export it.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Input-space mixing pretraining of one modality encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 1)]
        modality: usize,
        #[arg(long, default_value = "pretrain")]
        out: PathBuf,
    },
    /// One cross-modal stage training `--trained` against the frozen other encoder.
    Cmmc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint directory holding f1, f2, key1, key2.
        #[arg(long)]
        from: PathBuf,
        #[arg(long, default_value_t = 1)]
        trained: usize,
        #[arg(long, default_value = "cmmc")]
        out: PathBuf,
    },
    /// The full six-stage schedule.
    Schedule {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Resume from the checkpoint written after this stage.
        #[arg(long)]
        resume_after: Option<usize>,
        #[arg(long, default_value = "schedule")]
        out: PathBuf,
    },
    /// Linear probe (and optional fine-tune) plus retrieval of a checkpointed encoder.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Encoder checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        modality: usize,
        #[arg(long)]
        finetune: bool,
        #[arg(long, default_value = "probe")]
        out: PathBuf,
    },
    /// Nearest-neighbour retrieval of test clips against the train set.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        modality: usize,
        #[arg(long, default_value = "retrieve")]
        out: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "gradcheck")]
        out: PathBuf,
    },
    /// Pretrain and evaluate every mixing operator under every seed.
    CompareOperators {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "compare_operators")]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Cmmc { .. } => "cmmc",
            Command::Schedule { .. } => "schedule",
            Command::Probe { .. } => "probe",
            Command::Retrieve { .. } => "retrieve",
            Command::Gradcheck { .. } => "gradcheck",
            Command::CompareOperators { .. } => "compare-operators",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Cmmc { common, .. }
            | Command::Schedule { common, .. }
            | Command::Probe { common, .. }
            | Command::Retrieve { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::CompareOperators { common, .. } => common,
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    workdir: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    /// Creates the output directory and writes its manifest.
    fn output_dir(&self, command: &str, out: &Path) -> Result<PathBuf> {
        let dir = self.path(out);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let flat: Value = serde_json::from_str(&self.cfg.to_json()?)?;
        let manifest = json!({
            "build_id": BUILD_ID,
            "command": command,
            "seed": self.cfg.seed,
            "config": flat,
        });
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(dir)
    }

    fn splits(&self, data: &DataArg) -> Result<Splits> {
        match &data.data {
            None => Ok(Splits::generate(&self.cfg)?),
            Some(dir) => {
                let corpus = import_corpus(&self.path(dir))?;
                Ok(Splits {
                    train: PairedSet::from_clips(&corpus.train)?,
                    test: PairedSet::from_clips(&corpus.test)?,
                    split_hash: corpus.split_hash(),
                })
            }
        }
    }
}

fn check_modality(m: usize) -> Result<()> {
    if !(1..=2).contains(&m) {
        bail!("modality must be 1 or 2, got {m}");
    }
    Ok(())
}

fn train(
    ctx: &Ctx,
    splits: &Splits,
    schedule: &TrainSchedule,
    state: TrainState,
    dir: PathBuf,
    resume_after: Option<usize>,
) -> Result<()> {
    let opts = ScheduleOptions {
        checkpoint_dir: Some(dir.clone()),
        resume_after,
        ..ScheduleOptions::default()
    };
    let out = run_schedule(
        schedule,
        &ctx.cfg.trainer,
        &splits.train,
        state,
        ctx.cfg.seed,
        &opts,
    )?;
    let last = out.records.last();
    println!(
        "{} stages, {} epochs recorded, final loss {}; metrics at {}",
        schedule.stages.len(),
        out.records.len(),
        last.map_or(f64::NAN, |r| r.loss),
        dir.join("metrics.csv").display()
    );
    Ok(())
}

fn evaluate(
    ctx: &Ctx,
    data: &DataArg,
    checkpoint: &Path,
    modality: usize,
    with_finetune: bool,
) -> Result<EvalReport> {
    check_modality(modality)?;
    let splits = ctx.splits(data)?;
    let (enc, _) = load_checkpoint(&ctx.path(checkpoint))?;
    let (tr, te) = (&splits.train, &splits.test);
    let ftr = extract_features(&enc, tr.modality(modality)?, &tr.labels, &tr.clip_ids)?;
    let fte = extract_features(&enc, te.modality(modality)?, &te.labels, &te.clip_ids)?;
    let probe = linear_probe(&ftr, &fte, &ctx.cfg.probe)?;
    let ft = if with_finetune {
        let train = LabeledClips {
            clips: tr.modality(modality)?,
            labels: &tr.labels,
        };
        let test = LabeledClips {
            clips: te.modality(modality)?,
            labels: &te.labels,
        };
        Some(finetune(&enc, train, test, &ctx.cfg.finetune)?.accuracy)
    } else {
        None
    };
    Ok(EvalReport::new(
        probe.accuracy,
        ft,
        &standard_retrieval(&ftr, &fte)?,
    ))
}

fn run(command: Command) -> Result<ExitCode> {
    let common = command.common().clone();
    let seed_env = std::env::var(SEED_ENV).ok();
    let config_path = common.config.as_ref().map(|p| common.workdir.join(p));
    let cfg = RunConfig::resolve(
        config_path.as_deref(),
        &common.overrides,
        seed_env.as_deref(),
    )?;
    let ctx = Ctx {
        cfg,
        workdir: common.workdir,
    };
    let name = command.name();
    match command {
        Command::GenData { out, .. } => {
            let dir = ctx.output_dir(name, &out)?;
            let corpus = generate_corpus(&ctx.cfg.data)?;
            export_corpus(&corpus, &dir)?;
            println!(
                "{} train / {} test clips, split hash {:016x}, written to {}",
                corpus.train.len(),
                corpus.test.len(),
                corpus.split_hash(),
                dir.display()
            );
        }
        Command::Pretrain {
            data,
            modality,
            out,
            ..
        } => {
            check_modality(modality)?;
            let splits = ctx.splits(&data)?;
            let dir = ctx.output_dir(name, &out)?;
            let schedule = TrainSchedule::pretrain_only(modality, &ctx.cfg.trainer, ctx.cfg.seed);
            let state = TrainState::init(splits.input_size(), ctx.cfg.seed)?;
            train(&ctx, &splits, &schedule, state, dir, None)?;
        }
        Command::Cmmc {
            data,
            from,
            trained,
            out,
            ..
        } => {
            check_modality(trained)?;
            let splits = ctx.splits(&data)?;
            let state = TrainState::load(&ctx.path(&from))?;
            let dir = ctx.output_dir(name, &out)?;
            let stage_seed = stcmix_core::rng::derive_seed(&[ctx.cfg.seed, 0xc33c, trained as u64]);
            let schedule = TrainSchedule {
                stages: vec![StageConfig::cmmc(trained, &ctx.cfg.trainer, stage_seed)],
            };
            train(&ctx, &splits, &schedule, state, dir, None)?;
        }
        Command::Schedule {
            data,
            resume_after,
            out,
            ..
        } => {
            let splits = ctx.splits(&data)?;
            let dir = ctx.output_dir(name, &out)?;
            let schedule = TrainSchedule::standard(&ctx.cfg.trainer, ctx.cfg.seed);
            let state = TrainState::init(splits.input_size(), ctx.cfg.seed)?;
            train(&ctx, &splits, &schedule, state, dir, resume_after)?;
        }
        Command::Probe {
            data,
            checkpoint,
            modality,
            finetune,
            out,
            ..
        } => {
            let report = evaluate(&ctx, &data, &checkpoint, modality, finetune)?;
            let dir = ctx.output_dir(name, &out)?;
            let text = report.to_json()?;
            fs::write(dir.join("report.json"), text.clone() + "\n")?;
            println!("{text}");
        }
        Command::Retrieve {
            data,
            checkpoint,
            modality,
            out,
            ..
        } => {
            check_modality(modality)?;
            let splits = ctx.splits(&data)?;
            let (enc, _) = load_checkpoint(&ctx.path(&checkpoint))?;
            let (tr, te) = (&splits.train, &splits.test);
            let ftr = extract_features(&enc, tr.modality(modality)?, &tr.labels, &tr.clip_ids)?;
            let fte = extract_features(&enc, te.modality(modality)?, &te.labels, &te.clip_ids)?;
            let report = standard_retrieval(&ftr, &fte)?;
            let dir = ctx.output_dir(name, &out)?;
            let text = serde_json::to_string_pretty(&report.to_map())?;
            fs::write(dir.join("report.json"), text.clone() + "\n")?;
            println!("{text}");
        }
        Command::Gradcheck { out, .. } => {
            let dir = ctx.output_dir(name, &out)?;
            let report = run_gradcheck(&ctx.cfg.gradcheck)?;
            fs::write(
                dir.join("report.json"),
                serde_json::to_string_pretty(&report)? + "\n",
            )?;
            for c in &report.components {
                let verdict = if c.passed { "ok" } else { "FAIL" };
                println!("{:<16} {:.3e}  {verdict}", c.component, c.max_rel_error);
            }
            if !report.passed() {
                eprintln!("gradcheck failed: {}", report.failures().join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::CompareOperators { data, out, .. } => {
            if data.data.is_some() {
                bail!("compare-operators generates its own corpus from data.*; --data is not supported");
            }
            let dir = ctx.output_dir(name, &out)?;
            let csv_path = dir.join("results.csv");
            let mut csv = File::create(&csv_path)
                .with_context(|| format!("creating {}", csv_path.display()))?;
            writeln!(csv, "{OPERATOR_CSV_HEADER}")?;
            csv.flush()?;
            let rows = compare_operators(&ctx.cfg, |row| {
                writeln!(csv, "{}", row.csv_line())
                    .and_then(|_| csv.flush())
                    .map_err(|e| {
                        stcmix_core::Error::Data(format!("writing {}: {e}", csv_path.display()))
                    })?;
                println!("{}", row.csv_line());
                Ok(())
            })?;
            for (op, med) in median_by_operator(&rows) {
                println!("median probe accuracy {op}: {med:.4}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
