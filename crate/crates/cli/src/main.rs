//! `rlzero`: generate datasets, train, run ablations and evaluate.
//!
//! Every command writes `manifest.json` into its `--out` directory before
//! doing anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rlzero::eval::{compare_runs, dynamics, evaluate_snapshot, EvalReport};
use rlzero::policy::PolicySnapshot;
use rlzero::taskgen::{
    make_splits, read_dataset, write_dataset, Category, Dataset, Question, Vocabulary,
};
use rlzero::trainer::{
    read_evals, read_metrics, run_ablation, train_grpo, train_sft, Ablation, Manifest,
    RunArtifacts, RunConfig, TrainData,
};

#[derive(Parser)]
#[command(
    name = "rlzero",
    version,
    about = "GRPO with rule-based rewards on synthetic spatial questions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train / eval dataset files from the config's split settings.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with GRPO.
    Train(TrainArgs),
    /// Supervised fine-tuning on gold traces.
    Sft(TrainArgs),
    /// GRPO with one of: length_reward, freeze_encoder, freeze_head, warm_start_rl.
    Ablate {
        name: String,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Evaluate a snapshot on the config's eval set.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sampling temperature (default: the config's eval temperature).
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Length / accuracy dynamics of a training run directory.
    Dynamics {
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare eval reports; the first one is the baseline. Each input is a
    /// run directory or report file, optionally labelled as NAME=PATH.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Initial policy snapshot (required by warm_start_rl).
    #[arg(long)]
    snapshot: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.steps {
            cfg.steps = n;
        }
        if let Some(p) = &self.snapshot {
            cfg.init_snapshot = Some(p.clone());
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out } => gen(&config, &out),
        Command::Train(args) => {
            let cfg = args.resolve()?;
            Manifest::new("train", Some(&cfg), json!(null)).write(&args.out)?;
            let data = TrainData::load(&cfg.data)?;
            report_run(&train_grpo(&cfg, &data, &args.out)?)
        }
        Command::Sft(args) => {
            let cfg = args.resolve()?;
            Manifest::new("sft", Some(&cfg), json!(null)).write(&args.out)?;
            let data = TrainData::load(&cfg.data)?;
            report_run(&train_sft(&cfg, &data, &args.out)?)
        }
        Command::Ablate { name, args } => {
            let base = args.resolve()?;
            let ablation: Ablation = name.parse()?;
            let cfg = ablation.apply(&base)?;
            Manifest::new(&format!("ablate {ablation}"), Some(&cfg), json!(null))
                .write(&args.out)?;
            let data = TrainData::load(&base.data)?;
            report_run(&run_ablation(&name, &base, &data, &args.out)?)
        }
        Command::Eval {
            config,
            snapshot,
            out,
            temperature,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            let args = json!({ "snapshot": snapshot, "temperature": temperature, "seed": seed });
            Manifest::new("eval", Some(&cfg), args).write(&out)?;
            let mut decoding = cfg.decoding();
            if let Some(t) = temperature {
                decoding.temperature = t;
            }
            if let Some(s) = seed {
                decoding.seed = s;
            }
            let dataset = eval_dataset(&cfg)?;
            let snap = PolicySnapshot::read(&snapshot)?;
            let report = evaluate_snapshot(&snap, &dataset, &decoding)?;
            write_json(&out.join("eval_report.json"), &report)?;
            print_report(&report);
            Ok(())
        }
        Command::Dynamics { run, out } => {
            Manifest::new("dynamics", None, json!({ "run": run })).write(&out)?;
            let metrics = read_metrics(&run.join("metrics.jsonl"))?;
            let evals: Vec<(usize, EvalReport)> = read_evals(&run.join("evals.jsonl"))?
                .into_iter()
                .map(|e| (e.step, e.report))
                .collect();
            let d = dynamics(&metrics, &evals)?;
            write_json(&out.join("dynamics.json"), &d)?;
            let csv = out.join("dynamics.csv");
            std::fs::write(&csv, d.to_csv()).with_context(|| csv.display().to_string())?;
            print!("{}", d.to_csv());
            println!(
                "pearson(length, accuracy) = {:.4} over {} checkpoints",
                d.correlation.value, d.correlation.n
            );
            match (d.format_converged_at, d.converged_correlation) {
                (Some(step), Some(c)) => println!(
                    "after format convergence (step {step}): {:.4} over {} checkpoints",
                    c.value, c.n
                ),
                (Some(step), None) => {
                    println!("format converged at step {step}; too few later checkpoints")
                }
                (None, _) => println!("format never converged"),
            }
            Ok(())
        }
        Command::Compare { reports, out } => {
            Manifest::new("compare", None, json!({ "reports": reports })).write(&out)?;
            let named = reports
                .iter()
                .map(|spec| load_report(spec))
                .collect::<Result<Vec<_>>>()?;
            let table = compare_runs(&named)?;
            write_json(&out.join("comparison.json"), &table)?;
            let csv = out.join("comparison.csv");
            std::fs::write(&csv, table.to_csv()).with_context(|| csv.display().to_string())?;
            print!("{}", table.to_text());
            Ok(())
        }
    }
}

fn gen(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    Manifest::new("gen", Some(&cfg), json!(null)).write(out)?;
    let splits = make_splits(&cfg.data.split)?;
    let mut files = vec![("train", splits.train), ("eval", splits.eval)];
    if let Some(ood) = splits.ood {
        files.push(("ood", ood));
    }
    for (name, questions) in &files {
        let path = out.join(format!("{name}.jsonl"));
        write_dataset(&path, name, questions)?;
        println!(
            "{name}: {} questions ({})",
            questions.len(),
            per_category(questions)
        );
    }
    Ok(())
}

fn per_category(qs: &[Question]) -> String {
    Category::ALL
        .iter()
        .map(|c| format!("{c} {}", qs.iter().filter(|q| q.category == *c).count()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn eval_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Ok(match &cfg.data.eval {
        Some(path) => read_dataset(path)?,
        None => Dataset {
            split: "eval".into(),
            vocabulary: Vocabulary::standard().fingerprint(),
            questions: make_splits(&cfg.data.split)?.eval,
        },
    })
}

fn load_report(spec: &str) -> Result<(String, EvalReport)> {
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let name = p
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (name, p)
        }
    };
    let file = if path.is_dir() {
        path.join("final_eval.json")
    } else {
        path.clone()
    };
    if !file.exists() {
        bail!("{}: no such report", file.display());
    }
    let text = std::fs::read_to_string(&file).with_context(|| file.display().to_string())?;
    let report = serde_json::from_str(&text)
        .with_context(|| format!("{}: not an eval report", file.display()))?;
    Ok((name, report))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| path.display().to_string())
}

fn print_report(r: &EvalReport) {
    println!(
        "accuracy {:.4} (count {:.3}, relation {:.3}, depth {:.3}, distance {:.3}) over {} questions",
        r.total_accuracy,
        r.count.accuracy,
        r.relation.accuracy,
        r.depth.accuracy,
        r.distance.accuracy,
        r.n
    );
    println!(
        "well-formed {:.3}, reflection {:.3}, mean length {:.2} (p50 {}, p90 {})",
        r.well_formed_rate, r.reflection_rate, r.mean_length, r.p50_length, r.p90_length
    );
}

fn report_run(a: &RunArtifacts) -> Result<()> {
    println!("{} steps written to {}", a.metrics.len(), a.dir.display());
    print_report(&a.final_eval);
    Ok(())
}
