//! Command-line surface: dataset generation, teacher pretraining, robust
//! training, evaluation, the ablation ladder, the invariance statistic, and
//! the degradation golden-hash check.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{self, SceneConfig, SplitCounts};
use crate::degrade;
use crate::error::{Error, Result};
use crate::model::TeacherParams;
use crate::robust::RobustParams;

use super::config::TrainConfig;
use super::evaluate::{ablation_run, evaluate, invariance_report, EvalModel, PromptPolicy};
use super::train::{load_run_checkpoint, pretrain_teacher, train_robust, Logger};

#[derive(Parser)]
#[command(
    name = "promptseg",
    about = "Degradation-robust promptable segmentation testbed",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed for generation / training / evaluation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional key=value config file overriding the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural dataset (train/val/test with degradation
    /// fan-out on val/test).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Pretrain the clear-image teacher and freeze it.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Dataset root (directory holding manifest.jsonl).
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the robust path against a frozen teacher.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint (.rstn).
        #[arg(long)]
        teacher: PathBuf,
        /// Resume from a run checkpoint (.rstn).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a materialized split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Robust run checkpoint; omit to evaluate the teacher baseline.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Prompt policy: "points:N" or "box".
        #[arg(long, default_value = "points:1")]
        prompts: String,
    },
    /// Train and evaluate the five-variant ablation ladder.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Comma-separated seed list shared by every variant.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Silhouette-based feature-invariance comparison.
    Invariance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        robust: PathBuf,
        /// Checkpoint of the no-consistency ablation.
        #[arg(long)]
        no_consistency: PathBuf,
        #[arg(long, default_value_t = 20)]
        images: usize,
    },
    /// Verify the committed degradation golden-hash table.
    GoldenHash,
}

pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // Usage problems exit 1 on the error stream; --help/--version
            // print on stdout and exit 0.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_cfg(common: &Common) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &common.config {
        cfg.load_overrides(path)?;
    }
    cfg.seed = common.seed;
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::contract("--out <dir> is required for this command"))
}

fn write_out(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn parse_prompt_policy(s: &str) -> Result<PromptPolicy> {
    if s == "box" {
        return Ok(PromptPolicy::Box);
    }
    if let Some(n) = s.strip_prefix("points:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::contract(format!("bad prompt policy '{s}'")))?;
        if !(1..=10).contains(&n) {
            return Err(Error::contract("prompt point count must be 1..=10"));
        }
        return Ok(PromptPolicy::Points(n));
    }
    Err(Error::contract(format!(
        "bad prompt policy '{s}' (expected 'points:N' or 'box')"
    )))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, train, val, test } => {
            let cfg = load_cfg(&common)?;
            let out = require_out(&common)?;
            let counts = SplitCounts {
                train: train.unwrap_or(cfg.train_scenes),
                val: val.unwrap_or(cfg.val_scenes),
                test: test.unwrap_or(cfg.test_scenes),
            };
            let manifest = dataset::build_dataset(out, cfg.seed, counts, &SceneConfig::default())?;
            println!(
                "generated {} entries under {} (train {}, val {}, test {})",
                manifest.entries.len(),
                out.display(),
                counts.train,
                counts.val,
                counts.test
            );
            Ok(())
        }
        Command::PretrainTeacher { common, data } => {
            let cfg = load_cfg(&common)?;
            let out = require_out(&common)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let mut log = Logger::new(Some(&out.join("teacher.log")), true)?;
            let teacher = pretrain_teacher(&data, &cfg, &mut log)?;
            let path = out.join("teacher.rstn");
            teacher.save(&path)?;
            println!("teacher saved to {} (val mIoU {:.4})", path.display(), teacher.val_miou);
            Ok(())
        }
        Command::Train { common, data, teacher, resume } => {
            let cfg = load_cfg(&common)?;
            let out = require_out(&common)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let teacher = TeacherParams::load(&teacher)?;
            let resume_state = match resume {
                Some(path) => Some(load_run_checkpoint(&path, &teacher, &cfg)?),
                None => None,
            };
            let mut log = Logger::new(Some(&out.join("train.log")), true)?;
            let (state, _) = train_robust(&data, &teacher, &cfg, Some(out), resume_state, &mut log)?;
            println!(
                "trained {} epochs; final checkpoint {}",
                state.epoch_done,
                super::train::checkpoint_path(out, state.epoch_done).display()
            );
            Ok(())
        }
        Command::Eval { common, data, teacher, checkpoint, split, prompts } => {
            let cfg = load_cfg(&common)?;
            let out = require_out(&common)?;
            let policy = parse_prompt_policy(&prompts)?;
            let teacher = TeacherParams::load(&teacher)?;
            let manifest = dataset::Manifest::load(&data)?;
            let report = match &checkpoint {
                Some(path) => {
                    let state = load_run_checkpoint(path, &teacher, &cfg)?;
                    let raw = std::fs::read_to_string(path.with_extension("json"))
                        .map_err(|e| Error::io(path.with_extension("json"), e))?;
                    let sidecar: super::train::RunSidecar = serde_json::from_str(&raw)
                        .map_err(|e| Error::Format(format!("sidecar: {e}")))?;
                    let model = EvalModel::Robust {
                        teacher: &teacher,
                        robust: &state.robust,
                        flags: sidecar.flags,
                    };
                    evaluate(&model, &data, &manifest, &split, policy, cfg.seed)?
                }
                None => evaluate(
                    &EvalModel::Teacher(&teacher),
                    &data,
                    &manifest,
                    &split,
                    policy,
                    cfg.seed,
                )?,
            };
            write_out(&out.join(format!("report-{split}.csv")), &report.to_csv())?;
            write_out(&out.join(format!("report-{split}.json")), &report.to_json()?)?;
            println!(
                "{split}: degraded-mean iou {:.4}, clear iou {:.4}, average iou {:.4}",
                super::evaluate::degraded_means(&report).0,
                report.clear.iou,
                report.average.iou
            );
            Ok(())
        }
        Command::Ablate { common, data, teacher, seeds } => {
            let cfg = load_cfg(&common)?;
            let out = require_out(&common)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let teacher = TeacherParams::load(&teacher)?;
            let seeds: Result<Vec<u64>> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::contract(format!("bad seed '{s}'")))
                })
                .collect();
            let mut log = Logger::new(Some(&out.join("ablate.log")), true)?;
            let table = ablation_run(&data, &teacher, &cfg, &seeds?, &mut log)?;
            write_out(&out.join("ablation.csv"), &table.to_csv())?;
            let json = serde_json::to_string_pretty(&table)
                .map_err(|e| Error::Format(format!("ablation json: {e}")))?;
            write_out(&out.join("ablation.json"), &json)?;
            print!("{}", table.to_csv());
            Ok(())
        }
        Command::Invariance { common, data, teacher, robust, no_consistency, images } => {
            let cfg = load_cfg(&common)?;
            let out = require_out(&common)?;
            let teacher = TeacherParams::load(&teacher)?;
            let robust_state = load_run_checkpoint(&robust, &teacher, &cfg)?;
            let nc_state = load_run_checkpoint(&no_consistency, &teacher, &cfg)?;
            let manifest = dataset::Manifest::load(&data)?;
            let report = invariance_report(
                &data,
                &manifest,
                &teacher,
                &robust_state.robust,
                &nc_state.robust,
                images,
                cfg.seed,
            )?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(format!("invariance json: {e}")))?;
            write_out(&out.join("invariance.json"), &json)?;
            println!(
                "silhouette teacher {:.4} | robust {:.4} | no-consistency {:.4}",
                report.silhouette_teacher, report.silhouette_robust, report.silhouette_no_consistency
            );
            Ok(())
        }
        Command::GoldenHash => {
            let results = degrade::verify_golden_table()?;
            let mut all_ok = true;
            for (token, ok) in &results {
                println!("{token}: {}", if *ok { "ok" } else { "MISMATCH" });
                all_ok &= ok;
            }
            if !all_ok {
                return Err(Error::contract("golden-hash table mismatch"));
            }
            Ok(())
        }
    }
}

/// Helper used by `RobustParams`-only flows.
pub fn load_robust_only(path: &Path, teacher: &TeacherParams) -> Result<RobustParams> {
    let cfg = TrainConfig::default();
    Ok(load_run_checkpoint(path, teacher, &cfg)?.robust)
}
