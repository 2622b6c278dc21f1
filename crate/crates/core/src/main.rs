use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use structadapt::autodiff::OpKind;
use structadapt::checkpoint;
use structadapt::experiment::gradcheck::{run_suite, SuiteOptions};
use structadapt::experiment::report::{aggregate, render, write_csv};
use structadapt::experiment::results::{read_records, write_records};
use structadapt::experiment::runner::{records_for, run_cells, sweep_cells, Cell, CellOutcome, SweepParam};
use structadapt::experiment::ExperimentConfig;
use structadapt::Error;

#[derive(Parser)]
#[command(name = "structadapt", version, about = "Structure-learnable adapter experiments")]
struct Cli {
    /// TOML run description; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeds to run, comma-separated (overrides the config).
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Results file to write.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Lambda,
    Noise,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write its metrics.
    Train {
        /// Save each seed's trained model as `seed<N>.ckpt` here.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Train every (value, seed) cell of a one-parameter sweep.
    Sweep {
        #[arg(long, value_enum)]
        param: ParamArg,
        /// Comma-separated values; a default grid is used when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Summarize a results file.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every op and composite block.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Only cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    GradCheck,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let is_config = err
            .chain()
            .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Config(_) | Error::Spec(_))));
        if is_config {
            Failure::Config(err)
        } else {
            Failure::Runtime(err)
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let base = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(Failure::Config)?;
            ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.set)?;
    if let Some(seeds) = &cli.seed {
        cfg.seeds = seeds.clone();
        cfg.validate()?;
    }
    Ok(cfg)
}

fn out_path(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("results.tsv"))
}

fn write_results(path: &Path, cells: &[Cell], outcomes: &[structadapt::Result<CellOutcome>]) -> anyhow::Result<()> {
    let records: Vec<_> = cells
        .iter()
        .zip(outcomes)
        .flat_map(|(c, o)| records_for(&c.config, c.seed, o))
        .collect();
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_records(&records, BufWriter::new(file))?;
    Ok(())
}

fn print_outcome(cell: &Cell, outcome: &CellOutcome) {
    let s = &outcome.structure;
    let acc: Vec<String> = outcome
        .report
        .last()
        .val_accuracy
        .iter()
        .zip(&outcome.test_accuracy)
        .enumerate()
        .map(|(t, (v, te))| format!("task{t} val={v:.4} test={te:.4}"))
        .collect();
    println!(
        "seed {} [{}]: {} | trainable {}/{} (ratio {:.6}) | active adapters {}",
        cell.seed,
        cell.config.coordinate(),
        acc.join(", "),
        s.trainable,
        s.total,
        s.ratio,
        s.active.len()
    );
    for g in &s.gates {
        let rows: Vec<String> = g
            .values
            .chunks(g.cols)
            .map(|r| r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "))
            .collect();
        println!("  gates task{}: [{}]", g.task, rows.join(" | "));
    }
    for w in &outcome.warnings {
        eprintln!("warning: seed {}: {w}", cell.seed);
    }
}

/// Reports failed cells; returns whether any failed.
fn report_failures(cells: &[Cell], outcomes: &[structadapt::Result<CellOutcome>]) -> bool {
    let mut failed = false;
    for (c, o) in cells.iter().zip(outcomes) {
        if let Err(e) = o {
            eprintln!("error: seed {} [{}]: {e}", c.seed, c.config.coordinate());
            failed = true;
        }
    }
    failed
}

fn cmd_train(cli: &Cli, checkpoint_dir: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let cells: Vec<Cell> = cfg
        .seeds
        .iter()
        .map(|&seed| Cell {
            config: cfg.clone(),
            seed,
        })
        .collect();
    let outcomes = run_cells(&cells, cfg.workers)?;
    let out = out_path(cli);
    write_results(&out, &cells, &outcomes)?;
    for (c, o) in cells.iter().zip(&outcomes) {
        if let Ok(o) = o {
            print_outcome(c, o);
            if let Some(dir) = checkpoint_dir {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                let path = dir.join(format!("seed{}.ckpt", c.seed));
                let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                checkpoint::save(&o.model.store, BufWriter::new(file))?;
            }
        }
    }
    println!("results written to {}", out.display());
    if report_failures(&cells, &outcomes) {
        return Err(Failure::Runtime(anyhow!("one or more seeds failed")));
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, param: ParamArg, values: Option<&[f64]>) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let param = match param {
        ParamArg::Lambda => SweepParam::Lambda,
        ParamArg::Noise => SweepParam::Noise,
    };
    let grid = values.map(<[f64]>::to_vec).unwrap_or_else(|| param.default_grid());
    let cells = sweep_cells(&cfg, param, &grid)?;
    let outcomes = run_cells(&cells, cfg.workers)?;
    let out = out_path(cli);
    write_results(&out, &cells, &outcomes)?;
    for (c, o) in cells.iter().zip(&outcomes) {
        if let Ok(o) = o {
            print_outcome(c, o);
        }
    }
    println!("{} sweep over {} values written to {}", param.name(), grid.len(), out.display());
    if report_failures(&cells, &outcomes) {
        return Err(Failure::Runtime(anyhow!("one or more sweep cells failed")));
    }
    Ok(())
}

fn cmd_report(input: &Path, csv: Option<&Path>) -> Result<(), Failure> {
    let file = File::open(input)
        .with_context(|| format!("opening {}", input.display()))
        .map_err(Failure::Runtime)?;
    let records = read_records(BufReader::new(file)).with_context(|| format!("reading {}", input.display()))?;
    let agg = aggregate(&records);
    print!("{}", render(&agg));
    if let Some(path) = csv {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_csv(&agg, BufWriter::new(file))?;
    }
    Ok(())
}

fn cmd_gradcheck(opts: SuiteOptions) -> Result<(), Failure> {
    if !(opts.tolerance > 0.0) {
        return Err(Failure::Config(anyhow!("tolerance must be positive")));
    }
    let results = run_suite(&opts)?;
    if results.is_empty() {
        return Err(Failure::Config(anyhow!("no gradient-check case matches the filter")));
    }
    let mut failed = false;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        print!("{status} {:<22} max_rel_err={:.3e}", r.name, r.max_rel_error);
        if !r.passed {
            failed = true;
            if let Some((param, index)) = r.worst {
                print!(" param={param} index={index}");
            }
        }
        println!();
    }
    if failed {
        let names: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        eprintln!("gradient check failed for: {}", names.join(", "));
        return Err(Failure::GradCheck);
    }
    println!("all {} cases passed (epsilon {}, tolerance {})", results.len(), opts.epsilon, opts.tolerance);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train { checkpoint_dir } => cmd_train(cli, checkpoint_dir.as_deref()),
        Command::Sweep { param, values } => cmd_sweep(cli, *param, values.as_deref()),
        Command::Report { input, csv } => cmd_report(input, csv.as_deref()),
        Command::Gradcheck {
            epsilon,
            tolerance,
            instances,
            filter,
            corrupt_op,
        } => {
            let fault = match corrupt_op {
                Some(name) => Some(
                    OpKind::from_name(name).ok_or_else(|| Failure::Config(anyhow!("unknown op `{name}`")))?,
                ),
                None => None,
            };
            cmd_gradcheck(SuiteOptions {
                epsilon: *epsilon,
                tolerance: *tolerance,
                instances: *instances,
                filter: filter.clone(),
                fault,
                ..SuiteOptions::default()
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::GradCheck) => ExitCode::from(3),
    }
}
