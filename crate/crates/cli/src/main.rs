//! Command-line driver for data generation, the two training stages,
//! anymodal evaluation, ablations and the gradient oracle.
//!
//! Every command prints one JSON object to stdout on success (CSV for `eval`
//! and `ablate`). Failures print `{"kind": ..., "message": ...}` to stderr
//! and exit with status 1 (2 for usage errors).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyseg::data::{generate_dataset, read_dataset, write_dataset, Dataset};
use anyseg::harness::{
    evaluate_anymodal, load_model, read_metrics, run_ablation, run_gradient_suite, train_student, train_teacher,
    AblationVariant, ExperimentConfig, LossToggles, MetricRecord, STUDENT_CHECKPOINT, TEACHER_CHECKPOINT,
};
use anyseg::AnysegError;
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "anyseg", version, about = "Anymodal segmentation: teacher training, distillation and evaluation")]
struct Cli {
    /// Experiment config (TOML). Defaults to the desk-scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override: data seed for `gen-data`, suite seed for `gradcheck`,
    /// training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the training and evaluation datasets at the configured paths.
    GenData,
    /// Train the multimodal teacher on all modalities and write it frozen.
    TrainTeacher,
    /// Distill an anymodal student from a frozen teacher.
    TrainStudent {
        /// Teacher checkpoint [default: <out>/teacher.ckpt]
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Enabled loss terms, e.g. `sup,mad,umd,cmd`.
        #[arg(long)]
        toggles: Option<LossToggles>,
    },
    /// Evaluate a checkpoint on every non-empty modality subset.
    Eval {
        /// Checkpoint to evaluate [default: <out>/student.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one student per loss combination and compare them.
    Ablate {
        /// Teacher checkpoint [default: <out>/teacher.ckpt]
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// One variant per occurrence [default: the standard five].
        #[arg(long)]
        toggles: Vec<LossToggles>,
    },
    /// Check analytic gradients of every operation and loss against
    /// central differences.
    Gradcheck {
        /// Random inputs per operation.
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

/// A failure reported as a JSON record.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<AnysegError> for Failure {
    fn from(e: AnysegError) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::GenData => cfg.seeds.data = seed,
            _ => cfg.seeds.train = seed,
        }
    }
    Ok(cfg)
}

fn read_data(path: &Path, what: &str) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(Failure {
            kind: "io",
            message: format!("{what} dataset {} not found; run `anyseg gen-data` first", path.display()),
        });
    }
    Ok(read_dataset(path)?)
}

fn save_config(cfg: &ExperimentConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Failure {
        kind: "io",
        message: format!("{}: {e}", cfg.out_dir.display()),
    })?;
    Ok(cfg.save(&cfg.out_dir.join("config.toml"))?)
}

fn final_train_miou(metrics: &Path) -> CliResult<Option<f64>> {
    Ok(read_metrics(metrics)?.iter().rev().find_map(|r| match r {
        MetricRecord::Epoch { train_miou, .. } => Some(*train_miou),
        _ => None,
    }))
}

fn run(cli: &Cli) -> CliResult<String> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let scene = cfg.data.scene_config();
            let mut written = Vec::new();
            for (path, count, seed) in [
                (&cfg.data.train_path, cfg.data.train_samples, cfg.seeds.data),
                (&cfg.data.eval_path, cfg.data.eval_samples, cfg.seeds.eval_data),
            ] {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Failure {
                        kind: "io",
                        message: format!("{}: {e}", dir.display()),
                    })?;
                }
                let ds = generate_dataset(&scene, count, seed)?;
                write_dataset(&ds, path)?;
                written.push(json!({"path": path, "samples": count, "seed": seed}));
            }
            Ok(json!({"command": "gen-data", "train": written[0], "eval": written[1]}).to_string())
        }
        Command::TrainTeacher => {
            let train = read_data(&cfg.data.train_path, "training")?;
            save_config(&cfg)?;
            let run = train_teacher(&cfg, &train, &cfg.out_dir)?;
            Ok(json!({
                "command": "train-teacher",
                "checkpoint": run.checkpoint,
                "metrics": run.metrics,
                "train_miou": final_train_miou(&run.metrics)?,
            })
            .to_string())
        }
        Command::TrainStudent { teacher, toggles } => {
            if let Some(t) = toggles {
                cfg.toggles = *t;
            }
            let teacher = teacher.clone().unwrap_or_else(|| cfg.out_dir.join(TEACHER_CHECKPOINT));
            let train = read_data(&cfg.data.train_path, "training")?;
            save_config(&cfg)?;
            let out = train_student(&cfg, &train, &teacher, &cfg.out_dir)?;
            Ok(json!({
                "command": "train-student",
                "toggles": cfg.toggles.to_string(),
                "checkpoint": out.run.checkpoint,
                "metrics": out.run.metrics,
                "teacher_checksum": format!("{:#018x}", out.teacher_checksum_after),
                "train_miou": final_train_miou(&out.run.metrics)?,
            })
            .to_string())
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(STUDENT_CHECKPOINT));
            let params = load_model(&cfg, &path)?;
            let eval = read_data(&cfg.data.eval_path, "evaluation")?;
            let table = evaluate_anymodal(&params, &eval)?;
            save_config(&cfg)?;
            table.write_csv(&cfg.out_dir.join("eval.csv"))?;
            Ok(table.to_csv().trim_end().to_string())
        }
        Command::Ablate { teacher, toggles } => {
            let teacher = teacher.clone().unwrap_or_else(|| cfg.out_dir.join(TEACHER_CHECKPOINT));
            let variants = if toggles.is_empty() {
                AblationVariant::standard()
            } else {
                toggles.iter().copied().map(AblationVariant::new).collect()
            };
            let train = read_data(&cfg.data.train_path, "training")?;
            let eval = read_data(&cfg.data.eval_path, "evaluation")?;
            save_config(&cfg)?;
            let table = run_ablation(&cfg, &train, &eval, &teacher, &variants, &cfg.out_dir.join("ablation"))?;
            Ok(table.to_csv().trim_end().to_string())
        }
        Command::Gradcheck { trials } => {
            let suite = run_gradient_suite(cli.seed.unwrap_or(0), *trials)?;
            eprint!("{}", suite.summary());
            if !suite.passed() {
                let names: Vec<&str> = suite.failures().iter().map(|c| c.name.as_str()).collect();
                return Err(Failure {
                    kind: "gradcheck",
                    message: format!(
                        "relative error at or above {:e} for: {}",
                        suite.tolerance,
                        names.join(", ")
                    ),
                });
            }
            Ok(json!({"command": "gradcheck", "passed": true, "tolerance": suite.tolerance, "cases": suite.cases})
                .to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let record = json!({"kind": "usage", "message": e.to_string().trim_end()});
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", json!({"kind": f.kind, "message": f.message}));
            ExitCode::FAILURE
        }
    }
}
