use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unlearn_corrupt::attack::{AttackConfig, BaselineKind};
use unlearn_corrupt::graph::{load_dataset, CandidateConfig, Graph};
use unlearn_corrupt::harness::{
    mean_of, render_report, run_sweep, run_transfer, run_trials, write_csv, write_report, AttackKind, ExperimentConfig,
    ExperimentReport, ReportFormat, TrialSeeds,
};
use unlearn_corrupt::models::Arch;
use unlearn_corrupt::unlearning::{UnlearnConfig, UnlearnMethod};
use unlearn_corrupt::{Error, Result};

#[derive(Parser)]
#[command(name = "unlearn-corrupt", version, about = "Node-injection attacks that break GNNs after unlearning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (or several trials of it).
    Attack(RunArgs),
    /// Grid over edge budgets and injection ratios; writes CSV.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        budgets: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.05")]
        ratios: Vec<f64>,
    },
    /// Build one plan and evaluate it against several victim architectures.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "gcn,sgc", value_parser = parse::<Arch>)]
        victims: Vec<Arch>,
    },
    /// Validate a dataset directory.
    IngestCheck {
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "optim", value_parser = parse::<AttackKind>)]
    attack: AttackKind,
    #[arg(long, default_value = "gcn", value_parser = parse::<Arch>)]
    victim: Arch,
    #[arg(long, default_value = "ga_multi", value_parser = parse::<UnlearnMethod>)]
    unlearn_method: UnlearnMethod,
    #[arg(long, default_value_t = 10)]
    unlearn_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    unlearn_lr: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 5)]
    budget: usize,
    #[arg(long, default_value_t = 0.05)]
    inject_frac: f64,
    #[arg(long = "steps-T", default_value_t = 200)]
    steps_t: usize,
    #[arg(long, default_value_t = 0.5)]
    eta_a: f64,
    #[arg(long, default_value_t = 5e-4)]
    eta_x: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Baseline used to initialize the optimizer.
    #[arg(long, default_value = "random", value_parser = parse::<BaselineKind>)]
    init: BaselineKind,
    #[arg(long, default_value_t = 0.9)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed_split: u64,
    #[arg(long, default_value_t = 0)]
    seed_attack: u64,
    #[arg(long, default_value_t = 0)]
    seed_victim: u64,
    /// Trials use consecutive attack and victim seeds.
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json", value_parser = parse::<ReportFormat>)]
    format: ReportFormat,
    /// Restrict injected edges to k-hop neighborhoods of sampled test nodes.
    #[arg(long)]
    candidate_khop: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    candidate_frac: f64,
    #[arg(long)]
    candidate_per_target: Option<usize>,
    #[arg(long)]
    fix_intra: bool,
    #[arg(long)]
    normalize_features: bool,
    /// Record wall-clock timings in the report.
    #[arg(long)]
    timing: bool,
}

impl RunArgs {
    fn config(&self) -> ExperimentConfig {
        let unlearn = UnlearnConfig {
            method: self.unlearn_method,
            gamma: self.gamma,
            lr: self.unlearn_lr,
            steps: self.unlearn_steps,
            ..UnlearnConfig::default()
        };
        let attack = AttackConfig {
            steps: self.steps_t,
            eta_x: self.eta_x,
            eta_a: self.eta_a,
            lambda: self.lambda,
            budget: self.budget,
            m_fraction: self.inject_frac,
            init: self.init,
            candidates: self.candidate_khop.map(|k| CandidateConfig {
                k,
                target_fraction: self.candidate_frac,
                neighbors_per_target: self.candidate_per_target,
            }),
            fix_intra: self.fix_intra,
            gamma: self.gamma,
            eta_un: self.unlearn_lr,
            ..AttackConfig::default()
        };
        ExperimentConfig {
            train_fraction: self.train_frac,
            seeds: self.seeds()[0],
            attack_kind: self.attack,
            attack,
            victim: self.victim.default_spec(),
            unlearn,
            benign_unlearn: unlearn,
            normalize_features: self.normalize_features,
            record_timing: self.timing,
            ..ExperimentConfig::default()
        }
    }

    fn seeds(&self) -> Vec<TrialSeeds> {
        TrialSeeds::trials(self.seed_split, self.seed_attack, self.seed_victim, self.trials.max(1))
    }

    fn graph(&self) -> Result<Graph> {
        load_dataset(&self.dataset).map_err(|e| Error::Stage { stage: "load", source: Box::new(e) })
    }
}

fn emit(reports: &[ExperimentReport], out: Option<&Path>, format: ReportFormat) -> Result<()> {
    match out {
        Some(path) => write_report(reports, path, format),
        None => std::io::stdout()
            .write_all(render_report(reports, format)?.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn summarize(reports: &[ExperimentReport]) {
    eprintln!(
        "{} trial(s): original {:.4}  unlearned {:.4}  delta {:+.4}  benign F1 {:.4}",
        reports.len(),
        mean_of(reports, |r| r.original_accuracy),
        mean_of(reports, |r| r.unlearned_accuracy),
        mean_of(reports, |r| r.delta_acc),
        mean_of(reports, |r| r.benign_f1),
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Attack(args) => {
            let graph = args.graph()?;
            let reports = run_trials(&graph, &args.config(), &args.seeds()).into_iter().collect::<Result<Vec<_>>>()?;
            summarize(&reports);
            emit(&reports, args.out.as_deref(), args.format)
        }
        Command::Sweep { run, budgets, ratios } => {
            let graph = run.graph()?;
            let rows = run_sweep(&graph, &run.config(), &budgets, &ratios, &run.seeds())?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            match &run.out {
                Some(path) => {
                    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
                    write_csv(&rows, file)?;
                }
                None => write_csv(&rows, std::io::stdout())?,
            }
            if failed > 0 {
                eprintln!("{failed} of {} sweep cells failed; see the error column", rows.len());
            }
            Ok(())
        }
        Command::Transfer { run, victims } => {
            let graph = run.graph()?;
            let specs: Vec<_> = victims.iter().map(|a| a.default_spec()).collect();
            let mut reports = Vec::new();
            for (spec, result) in run_transfer(&graph, &run.config(), &specs)? {
                match result {
                    Ok(r) => reports.push(r),
                    Err(e) => return Err(Error::invalid(format!("victim {}: {e}", spec.arch()))),
                }
            }
            for r in &reports {
                eprintln!(
                    "{}: original {:.4}  unlearned {:.4}  delta {:+.4}",
                    r.victim.arch(),
                    r.original_accuracy,
                    r.unlearned_accuracy,
                    r.delta_acc
                );
            }
            emit(&reports, run.out.as_deref(), run.format)
        }
        Command::IngestCheck { dataset } => {
            let g = load_dataset(&dataset).map_err(|e| Error::Stage { stage: "load", source: Box::new(e) })?;
            let mut counts = vec![0usize; g.c()];
            g.labels().iter().for_each(|&y| counts[y] += 1);
            println!("{}: {} nodes, {} features, {} classes, {} edges", g.name(), g.n(), g.d(), g.c(), g.edges().len());
            println!("class sizes: {counts:?}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
