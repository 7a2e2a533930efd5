//! `lab` — command-line front end for the corpus, pretraining, downstream
//! tasks, statistics and full ablation runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mammolab::corpus::{save_manifest, Task};
use mammolab::encoders::{load_checkpoint, save_checkpoint};
use mammolab::evalstats::{bootstrap_ci, bootstrap_ci_grouped, rank_models};
use mammolab::harness::{
    self, emit_report, load_corpus, parse_results_csv, parse_values_csv, rank_files, run_experiment_with,
    run_single_task, seeds, ExperimentConfig, HarnessError, Splits, TaskSpec,
};
use mammolab::preprocess::{generate_corpus, CorpusSpec};
use mammolab::pretrain::{train_stage1, train_stage2};

#[derive(Parser)]
#[command(name = "lab", version, about = "Hybrid pretraining and downstream benchmark on phantom mammograms")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Phantom corpus tools.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Stage 1 (ViT teacher) or Stage 2 (distilled student) pretraining.
    Pretrain {
        #[arg(value_enum)]
        stage: Stage,
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Output checkpoint; the loss curve goes next to it.
        #[arg(long)]
        out: PathBuf,
        /// Teacher checkpoint (stage2 only).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train and evaluate one downstream head on a checkpoint.
    Task {
        #[arg(value_enum)]
        kind: TaskKind,
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Label task (classify).
        #[arg(long)]
        task: Option<String>,
        /// Label task (retrieve).
        #[arg(long)]
        label_task: Option<String>,
        /// Comma-separated k values (retrieve).
        #[arg(long)]
        k: Option<String>,
        /// Fine-tune the encoder with the probe (classify).
        #[arg(long)]
        finetune: bool,
        #[arg(long)]
        by_patient: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ranking and bootstrap statistics.
    Stats {
        #[command(subcommand)]
        cmd: StatsCmd,
    },
    /// Full experiment: every variant × every task, then the report.
    Run {
        #[command(flatten)]
        common: ConfigArgs,
        /// Output root (overrides `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit the report of a run directory.
    Report { run_dir: PathBuf },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Extra key=value overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Generate a phantom corpus (PGM images + manifest).
    Gen {
        #[arg(long, default_value_t = 100)]
        patients: usize,
        #[arg(long, default_value_t = 4)]
        per_patient: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Stage1,
    Stage2,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKind {
    Detect,
    Segment,
    Classify,
    Vqa,
    Retrieve,
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Rank models across tasks (results CSV: model,<task…>, higher is better).
    Rank {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the CD value, significance pairs and CD-diagram CSV.
        #[arg(long)]
        cd: bool,
    },
    /// Bootstrap CI of the mean of a column of values (or group,value rows).
    Ci {
        #[arg(long)]
        values: PathBuf,
        #[arg(long = "B", default_value_t = 1000)]
        b: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Resample whole groups (first column) instead of rows.
        #[arg(long)]
        by_patient: bool,
    },
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn parent_dir(path: &Path) -> Result<(), Box<dyn std::error::Error>> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

fn task_name(kind: TaskKind, task: &Option<String>, label_task: &Option<String>) -> Result<TaskSpec, HarnessError> {
    let need = |t: &Option<String>, flag: &str| {
        let name = t.clone().ok_or_else(|| HarnessError::Invalid(format!("{flag} is required")))?;
        Task::from_name(&name).map_err(HarnessError::from)
    };
    Ok(match kind {
        TaskKind::Detect => TaskSpec::Detect,
        TaskKind::Segment => TaskSpec::Segment,
        TaskKind::Vqa => TaskSpec::Vqa,
        TaskKind::Classify => TaskSpec::Classify(need(task, "--task")?),
        TaskKind::Retrieve => TaskSpec::Retrieve(need(if label_task.is_some() { label_task } else { task }, "--label-task")?),
    })
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Corpus {
            cmd:
                CorpusCmd::Gen {
                    patients,
                    per_patient,
                    image_size,
                    out,
                    seed,
                },
        } => {
            let m = generate_corpus(&CorpusSpec {
                patients,
                images_per_patient: per_patient,
                image_size,
                seed,
                ..Default::default()
            })?;
            let path = save_manifest(&m, &out)?;
            println!("wrote {} images, manifest {}", m.len(), path.display());
        }
        Cmd::Pretrain {
            stage,
            common,
            corpus,
            out,
            teacher,
        } => {
            let cfg = common.load()?;
            let manifest = load_corpus(&corpus)?;
            let splits = Splits::new(&manifest, cfg.split_ratios, cfg.split_seed)?;
            parent_dir(&out)?;
            let curve = match stage {
                Stage::Stage1 => {
                    let o = train_stage1(&splits.train, &cfg.stage1, seeds::stage1(cfg.seed))?;
                    save_checkpoint(&o.teacher, &out)?;
                    o.curve
                }
                Stage::Stage2 => {
                    let t = teacher.ok_or_else(|| HarnessError::Invalid("--teacher is required for stage2".into()))?;
                    let t = load_checkpoint(&t)?;
                    let o = train_stage2(&splits.train, &t, &cfg.stage2, seeds::stage2(cfg.seed))?;
                    save_checkpoint(&o.student, &out)?;
                    o.curve
                }
            };
            let csv = sibling(&out, "_loss.csv");
            std::fs::write(&csv, curve.to_csv())?;
            let totals = curve.totals();
            println!(
                "{} steps, total loss {:.4} -> {:.4}; checkpoint {}, curve {}",
                totals.len(),
                totals.first().copied().unwrap_or(f64::NAN),
                totals.last().copied().unwrap_or(f64::NAN),
                out.display(),
                csv.display()
            );
        }
        Cmd::Task {
            kind,
            common,
            encoder,
            corpus,
            task,
            label_task,
            k,
            finetune,
            by_patient,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(k) = k {
                cfg.set("retrieval.k", &k)?;
            }
            cfg.classify.finetune |= finetune;
            cfg.bootstrap_by_patient |= by_patient;
            let spec = task_name(kind, &task, &label_task)?;
            let metrics = run_single_task(&encoder, &corpus, spec, &cfg, &out)?;
            print!("{}", harness::metrics_csv(&metrics));
        }
        Cmd::Stats {
            cmd: StatsCmd::Rank { results, out, cd },
        } => {
            let (models, tasks, values) = parse_results_csv(&std::fs::read_to_string(&results)?)?;
            let table = rank_models(&values, &vec![true; tasks.len()])?;
            let files = rank_files(&models, &tasks, &table);
            parent_dir(&out)?;
            std::fs::write(&out, &files.ranks)?;
            print!("{}", files.ranks);
            if cd {
                std::fs::write(sibling(&out, "_cd.csv"), &files.cd)?;
                std::fs::write(sibling(&out, "_significance.csv"), &files.significance)?;
                std::fs::write(sibling(&out, "_cd_diagram.csv"), &files.cd_diagram)?;
                print!("{}{}", files.cd, files.significance);
            }
        }
        Cmd::Stats {
            cmd:
                StatsCmd::Ci {
                    values,
                    b,
                    seed,
                    alpha,
                    by_patient,
                },
        } => {
            let (vals, groups) = parse_values_csv(&std::fs::read_to_string(&values)?)?;
            let m = match (by_patient, groups) {
                (true, Some(g)) => bootstrap_ci_grouped("mean", &vals, &g, b, alpha, seed)?,
                (true, None) => return Err(HarnessError::Invalid("--by-patient needs group,value rows".into()).into()),
                (false, _) => bootstrap_ci("mean", &vals, b, alpha, seed)?,
            };
            print!("{}", harness::metrics_csv(&[m]));
        }
        Cmd::Run { common, out } => {
            let mut cfg = common.load()?;
            if let Some(o) = out {
                cfg.out = o;
            }
            let summary = run_experiment_with(&cfg, &mut |m| eprintln!("{m}"))?;
            if let Some(r) = &summary.report {
                print!("{}", r.files.ranks);
            }
            if !summary.all_completed() {
                eprintln!("some variants failed; see {}/report/status.csv", summary.dir.display());
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Report { run_dir } => {
            let r = emit_report(&run_dir)?;
            print!("{}", r.files.ranks);
            if r.models.len() < ExperimentConfig::from_file(&run_dir.join("config.txt"))?.variants.len() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
