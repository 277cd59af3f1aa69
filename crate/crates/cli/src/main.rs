//! Command-line front end: run experiments, sweep ablations, inspect and
//! compare reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kiflab_core::fusion::FusionVariant;
use kiflab_core::importance::write_snapshot_csv;
use kiflab_core::model::Classifier;
use kiflab_core::numkit::{RealVec, Rng};
use kiflab_core::report::{
    compare_runs, read_report, write_matrix_csv, write_report, RunReport,
};
use kiflab_core::tasks::TaskSequence;
use kiflab_core::trainer::{train_sequence_with_sinks, Method, RunSinks, TrainConfig};
use kiflab_core::{Error, Result};

use config::{load_config, parse_override_args, ExperimentConfig};

#[derive(Parser)]
#[command(name = "kiflab", version, about = "Continual-learning lab runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (all configured orders and seeds).
    Run(RunArgs),
    /// Run the Cartesian product of the config's sweep axes and compare.
    Ablate(AblateArgs),
    /// Print or export parts of a stored report.
    Inspect(InspectArgs),
    /// Aggregate several reports into a comparison table.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory for reports and CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Also write one CSV of fusion masks per run (large).
    #[arg(long)]
    dump_masks: bool,
    /// Also dump the final replay-buffer contents per run.
    #[arg(long)]
    dump_buffer: bool,
    /// Save a parameter checkpoint after each task boundary per run.
    #[arg(long)]
    save_checkpoints: bool,
    /// Dotted-path config overrides: `--train.method seq`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct InspectArgs {
    /// Path to a .report.json file.
    report: PathBuf,
    /// What to show: summary, matrix, overlap, importance.
    #[arg(long, default_value = "summary")]
    what: String,
    /// Cycle index for `--what importance`.
    #[arg(long)]
    cycle: Option<u64>,
    /// Write CSV output here instead of printing a rendering.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Report files to aggregate.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write the comparison as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Failure plus which exit code it maps to.
struct CliFailure {
    code: u8,
    error: Error,
}

impl CliFailure {
    fn usage(error: Error) -> Self {
        CliFailure { code: 2, error }
    }

    fn runtime(error: Error) -> Self {
        CliFailure { code: 1, error }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}

fn load(args_config: &Path, raw_overrides: &[String]) -> std::result::Result<ExperimentConfig, CliFailure> {
    let overrides = parse_override_args(raw_overrides).map_err(CliFailure::usage)?;
    load_config(args_config, &overrides).map_err(CliFailure::usage)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn run_label(cfg: &TrainConfig) -> String {
    cfg.method_label().replace(['(', ')'], "-").trim_end_matches('-').to_string()
}

/// Execute every (order, seed) run of one resolved config, writing reports
/// and matrix CSVs under `out/<label>/`.
fn execute_runs(
    cfg: &ExperimentConfig,
    sequences: &[TaskSequence],
    out: &Path,
    dump_masks: bool,
    dump_buffer: bool,
    save_checkpoints: bool,
) -> Result<Vec<RunReport>> {
    let label = run_label(&cfg.train);
    let dir = out.join(&label);
    ensure_dir(&dir)?;
    let mut reports = Vec::new();
    for seq in sequences {
        for &seed in &cfg.seeds {
            let stem = format!("{}_seed{}", seq.descriptor.order_id, seed);
            let mut mask_file = if dump_masks {
                let path = dir.join(format!("{stem}.masks.csv"));
                Some(std::io::BufWriter::new(
                    std::fs::File::create(&path)
                        .map_err(|e| Error::io(path.display().to_string(), e))?,
                ))
            } else {
                None
            };
            let mut buffer_file = if dump_buffer {
                let path = dir.join(format!("{stem}.buffer.csv"));
                Some(std::io::BufWriter::new(
                    std::fs::File::create(&path)
                        .map_err(|e| Error::io(path.display().to_string(), e))?,
                ))
            } else {
                None
            };
            let ckpt_dir = if save_checkpoints {
                let dir = dir.join(format!("{stem}.checkpoints"));
                ensure_dir(&dir)?;
                Some(dir)
            } else {
                None
            };
            let sinks = RunSinks {
                mask_csv: mask_file.as_mut().map(|w| w as &mut dyn std::io::Write),
                buffer_csv: buffer_file.as_mut().map(|w| w as &mut dyn std::io::Write),
                checkpoint_dir: ckpt_dir.as_deref(),
            };
            let report = train_sequence_with_sinks(seq, &cfg.model, &cfg.train, seed, sinks)?;

            write_report(&report, &dir.join(format!("{stem}.report.json")))?;
            let csv_path = dir.join(format!("{stem}.matrix.csv"));
            let mut csv = Vec::new();
            write_matrix_csv(&report.matrix, &mut csv)?;
            std::fs::write(&csv_path, csv)
                .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
            println!(
                "{label} {stem}: OP {:.2}% BWT {:+.2}%",
                100.0 * report.op,
                100.0 * report.bwt
            );
            reports.push(report);
        }
    }
    Ok(reports)
}

fn summarize(reports: &[RunReport]) -> Result<()> {
    let refs: Vec<&RunReport> = reports.iter().collect();
    let table = compare_runs(&refs)?;
    print!("{}", table.render_text());
    Ok(())
}

fn cmd_run(args: RunArgs) -> std::result::Result<(), CliFailure> {
    let cfg = load(&args.config, &args.overrides)?;
    let sequences = cfg.stream.build_sequences().map_err(CliFailure::usage)?;
    ensure_dir(&args.out).map_err(CliFailure::runtime)?;
    let reports = execute_runs(
        &cfg,
        &sequences,
        &args.out,
        args.dump_masks,
        args.dump_buffer,
        args.save_checkpoints,
    )
    .map_err(CliFailure::runtime)?;
    summarize(&reports).map_err(CliFailure::runtime)
}

/// Expand the sweep axes into resolved configs, tagging each with the axis
/// values that name its output directory.
fn sweep_grid(cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let some_or_default = |list: &[f64], current: f64| -> Vec<f64> {
        if list.is_empty() {
            vec![current]
        } else {
            list.to_vec()
        }
    };
    let methods: Vec<Method> = if cfg.sweep.methods.is_empty() {
        vec![cfg.train.method]
    } else {
        cfg.sweep.methods.clone()
    };
    let policies: Vec<FusionVariant> = if cfg.sweep.policies.is_empty() {
        vec![cfg.train.policy.variant]
    } else {
        cfg.sweep.policies.clone()
    };
    let q_values: Vec<usize> = if cfg.sweep.q_values.is_empty() {
        vec![cfg.train.inner_steps]
    } else {
        cfg.sweep.q_values.clone()
    };
    let keeps = some_or_default(&cfg.sweep.keep_fractions, cfg.train.policy.keep_fraction);
    let alphas = some_or_default(&cfg.sweep.alphas, cfg.train.alpha1);
    let capacities = some_or_default(&cfg.sweep.capacity_fractions, cfg.train.capacity_fraction);

    let mut grid = Vec::new();
    for &method in &methods {
        for &variant in &policies {
            // Fusion variants only matter for cycle-based methods; skip the
            // redundant combinations for the plain baselines.
            if !matches!(method, Method::Kif | Method::StaticImportance)
                && variant != cfg.train.policy.variant
            {
                continue;
            }
            for &q in &q_values {
                for &kf in &keeps {
                    for &alpha in &alphas {
                        for &capacity in &capacities {
                            let mut resolved = cfg.clone();
                            resolved.train.method = method;
                            resolved.train.policy.variant = variant;
                            resolved.train.inner_steps = q;
                            resolved.train.policy.keep_fraction = kf;
                            resolved.train.alpha1 = alpha;
                            resolved.train.alpha2 = alpha;
                            resolved.train.capacity_fraction = capacity;
                            let mut tag = run_label(&resolved.train);
                            if cfg.sweep.q_values.len() > 1 {
                                tag.push_str(&format!("_q{q}"));
                            }
                            if cfg.sweep.keep_fractions.len() > 1 {
                                tag.push_str(&format!("_kf{kf}"));
                            }
                            if cfg.sweep.alphas.len() > 1 {
                                tag.push_str(&format!("_a{alpha}"));
                            }
                            if cfg.sweep.capacity_fractions.len() > 1 {
                                tag.push_str(&format!("_m{capacity}"));
                            }
                            grid.push((tag, resolved));
                        }
                    }
                }
            }
        }
    }
    grid
}

fn cmd_ablate(args: AblateArgs) -> std::result::Result<(), CliFailure> {
    let cfg = load(&args.config, &args.overrides)?;
    let sequences = cfg.stream.build_sequences().map_err(CliFailure::usage)?;
    ensure_dir(&args.out).map_err(CliFailure::runtime)?;
    let grid = sweep_grid(&cfg);
    let mut all_reports = Vec::new();
    for (tag, resolved) in &grid {
        let n_prime = resolved.train.epochs * cfg.stream.n_train.div_ceil(resolved.train.batch_inner);
        println!(
            "--- {tag} (Q={} fusions/task={})",
            resolved.train.inner_steps,
            n_prime / resolved.train.inner_steps
        );
        let out = args.out.join(tag);
        ensure_dir(&out).map_err(CliFailure::runtime)?;
        let mut reports = execute_runs(resolved, &sequences, &out, false, false, false)
            .map_err(CliFailure::runtime)?;
        all_reports.append(&mut reports);
    }
    let refs: Vec<&RunReport> = all_reports.iter().collect();
    let table = compare_runs(&refs).map_err(CliFailure::runtime)?;
    print!("{}", table.render_text());
    let csv_path = args.out.join("comparison.csv");
    let mut buf = Vec::new();
    table.write_csv(&mut buf).map_err(CliFailure::runtime)?;
    std::fs::write(&csv_path, buf)
        .map_err(|e| CliFailure::runtime(Error::io(csv_path.display().to_string(), e)))?;
    println!("comparison written to {}", csv_path.display());
    Ok(())
}

fn render_matrix(report: &RunReport) -> String {
    let k = report.matrix.k();
    let mut out = String::from("task");
    for j in 0..k {
        out.push_str(&format!("  after_t{j}"));
    }
    out.push('\n');
    for i in 0..k {
        out.push_str(&format!("t{i}  "));
        for j in 0..k {
            match report.matrix.get(i, j) {
                Some(v) => out.push_str(&format!("  {:6.2}%", 100.0 * v)),
                None => out.push_str("       —"),
            }
        }
        out.push('\n');
    }
    out
}

fn cmd_inspect(args: InspectArgs) -> std::result::Result<(), CliFailure> {
    let report = read_report(&args.report).map_err(CliFailure::usage)?;
    match args.what.as_str() {
        "summary" => {
            println!("method         {}", report.method_label());
            println!("order          {}", report.config.stream.order_id);
            println!("seed           {}", report.seed);
            println!("OP             {:.2}%", 100.0 * report.op);
            if report.bwt_defined {
                println!("BWT            {:+.2}%", 100.0 * report.bwt);
            } else {
                println!("BWT            0.00% (not defined for this run)");
            }
            println!("gradient steps {}", report.update_counter);
            Ok(())
        }
        "matrix" => {
            print!("{}", render_matrix(&report));
            Ok(())
        }
        "overlap" => {
            println!("cycle,task,shared,in_only,out_only");
            for log in &report.cycles {
                if let Some(o) = log.overlap {
                    println!(
                        "{},{},{},{},{}",
                        log.cycle, log.task, o.shared, o.in_only, o.out_only
                    );
                }
            }
            Ok(())
        }
        "importance" => {
            let cycle = args.cycle.ok_or_else(|| {
                CliFailure::usage(Error::InvalidParameter {
                    name: "cycle",
                    message: "--cycle is required for --what importance".into(),
                })
            })?;
            let snap = report
                .snapshots
                .iter()
                .find(|s| s.cycle == cycle)
                .ok_or_else(|| {
                    let available: Vec<u64> =
                        report.snapshots.iter().map(|s| s.cycle).collect();
                    CliFailure::usage(Error::InvalidParameter {
                        name: "cycle",
                        message: format!(
                            "no snapshot at cycle {cycle}; available: {available:?}"
                        ),
                    })
                })?;
            // The layout is reproducible from the run's own config echo.
            let (model, _) = Classifier::init(
                &report.config.model,
                &Rng::new(report.seed).split("model"),
            )
            .map_err(CliFailure::runtime)?;
            let inner = RealVec::from_vec(snap.inner.clone()).map_err(CliFailure::runtime)?;
            let outer = RealVec::from_vec(snap.outer.clone()).map_err(CliFailure::runtime)?;
            let mut buf = Vec::new();
            write_snapshot_csv(model.layout(), &inner, &outer, &mut buf)
                .map_err(CliFailure::runtime)?;
            match &args.out_csv {
                Some(path) => {
                    std::fs::write(path, buf).map_err(|e| {
                        CliFailure::runtime(Error::io(path.display().to_string(), e))
                    })?;
                    println!("importance snapshot written to {}", path.display());
                }
                None => print!("{}", String::from_utf8_lossy(&buf)),
            }
            Ok(())
        }
        other => Err(CliFailure::usage(Error::InvalidParameter {
            name: "what",
            message: format!(
                "unknown inspection {other:?}; expected summary, matrix, overlap or importance"
            ),
        })),
    }
}

fn cmd_compare(args: CompareArgs) -> std::result::Result<(), CliFailure> {
    let mut reports = Vec::new();
    for path in &args.reports {
        reports.push(read_report(path).map_err(CliFailure::usage)?);
    }
    let refs: Vec<&RunReport> = reports.iter().collect();
    let table = compare_runs(&refs).map_err(CliFailure::runtime)?;
    print!("{}", table.render_text());
    if let Some(path) = &args.csv {
        let mut buf = Vec::new();
        table.write_csv(&mut buf).map_err(CliFailure::runtime)?;
        std::fs::write(path, buf)
            .map_err(|e| CliFailure::runtime(Error::io(path.display().to_string(), e)))?;
    }
    Ok(())
}
