//! `socialk`: generate data, build kernels and run evaluations.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use social_kernels::dataset::SyntheticParams;
use social_kernels::eval::{export_report, run_cross_validation_with, EvaluationReport};
use social_kernels::kernels::{write_kernel, KernelBank, KernelLabel};
use social_kernels::Error;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "socialk",
    version,
    about = "Social-theory kernels for rating prediction"
)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as four CSV files.
    Synth(SynthArgs),
    /// Build and validate all kernels, writing them to the cache directory.
    Kernels(RunArgs),
    /// Cross-validate the requested methods and write the report files.
    Evaluate(RunArgs),
    /// Print the summary tables of an existing report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file of generator parameters; missing fields take defaults.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with ratings.csv, friendships.csv, demographics.csv and
    /// claims.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    kernel_cache: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Clamp SVR predictions to the rating scale.
    #[arg(long, overrides_with = "no_clamp")]
    clamp: bool,
    #[arg(long)]
    no_clamp: bool,
    #[arg(long)]
    strict_leakage: bool,
    #[arg(long)]
    shared_eta: bool,
    #[arg(long)]
    normalize_mni: bool,
    /// Validate the configuration and print the plan without computing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json written by `evaluate`.
    input: PathBuf,
    /// Re-export the CSV tables into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit code: 2 for usage errors, 1 otherwise.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }

    fn run(e: impl std::fmt::Display) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Kernels(a) => kernels(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn synth(a: SynthArgs) -> Outcome {
    let mut params = match &a.params {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<SyntheticParams>(&text)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => SyntheticParams::default(),
    };
    if let Some(n) = a.n_users {
        params.n_users = n;
    }
    if let Some(n) = a.n_items {
        params.n_items = n;
    }
    if let Some(s) = a.seed {
        params.seed = s;
    }
    params.validate().map_err(Failure::usage)?;
    let dataset = social_kernels::dataset::generate_synthetic(&params).map_err(Failure::run)?;
    let rows = dataset.write_csv(&a.out).map_err(Failure::run)?;
    println!(
        "wrote {}: {} ratings, {} friendships, {} demographic rows, {} claims",
        a.out.display(),
        rows.ratings,
        rows.friendships,
        rows.demographics,
        rows.claims
    );
    Ok(())
}

/// Reads the configuration, applies the flags and validates; every failure
/// here is a usage error.
fn prepare(a: &RunArgs) -> std::result::Result<RunConfig, Failure> {
    let mut config = match &a.config {
        Some(path) => RunConfig::from_file(path).map_err(Failure::usage)?,
        None => RunConfig::default(),
    };
    config.apply(&Overrides {
        data: a.data.clone(),
        methods: a.methods.clone(),
        folds: a.folds,
        repetitions: a.reps,
        seed: a.seed,
        out: a.out.clone(),
        kernel_cache: a.kernel_cache.clone(),
        threads: a.threads,
        clamp: if a.no_clamp {
            Some(false)
        } else if a.clamp {
            Some(true)
        } else {
            None
        },
        strict_leakage: a.strict_leakage,
        shared_eta: a.shared_eta,
        normalize_mni: a.normalize_mni,
    });
    config.validate().map_err(Failure::usage)?;
    if let Some(n) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::run)?;
    }
    Ok(config)
}

fn kernels(a: RunArgs) -> Outcome {
    let config = prepare(&a)?;
    let cache = config
        .eval
        .kernel_cache
        .clone()
        .unwrap_or_else(|| config.out.join("kernels"));
    if a.dry_run {
        println!("data:   {}", config.data.describe());
        println!("build:  {} kernels", KernelLabel::BANK.len());
        println!("cache:  {}", cache.display());
        return Ok(());
    }
    let dataset = config.data.load().map_err(Failure::run)?;
    let bank = KernelBank::build_with_cache(&dataset, &config.eval.kernel, None, Some(&cache))
        .map_err(Failure::run)?;
    let fp = dataset.fingerprint();
    // ID and CT are already stored under their parameter-keyed cache names.
    for k in bank
        .kernels()
        .iter()
        .filter(|k| !matches!(k.label, KernelLabel::Id | KernelLabel::Ct))
    {
        let path = cache.join(format!("{}-{fp}.kern", k.label.as_str().to_lowercase()));
        write_kernel(&path, k).map_err(Failure::run)?;
    }
    bank.communities()
        .write_csv(&cache.join("communities.csv"), dataset.users())
        .map_err(Failure::run)?;
    println!(
        "{:<6} {:>14} {:>14}  status",
        "kernel", "min eig", "max eig"
    );
    let mut failed = Vec::new();
    for (label, r) in bank.validate(1e-8).map_err(Failure::run)? {
        println!(
            "{:<6} {:>14.6e} {:>14.6e}  {}",
            label.as_str(),
            r.min_eig,
            r.max_eig,
            if r.pass { "ok" } else { "FAIL" }
        );
        if !r.pass {
            failed.push(label.as_str());
        }
    }
    println!(
        "{} users, {} communities, sigma {:.4}; kernels in {}",
        bank.dim(),
        bank.communities().community_count,
        bank.sigma(),
        cache.display()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::run(format!(
            "PSD validation failed for {}",
            failed.join(", ")
        )))
    }
}

fn partial_path(out: &Path) -> PathBuf {
    out.join("report.json.partial")
}

fn write_json(path: &Path, report: &EvaluationReport) -> std::result::Result<(), Error> {
    let json = serde_json::to_string_pretty(report)?;
    fs::write(path, json + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn evaluate(a: RunArgs) -> Outcome {
    let config = prepare(&a)?;
    let methods = config.methods().map_err(Failure::usage)?;
    if a.dry_run {
        print_plan(&config, &methods);
        return Ok(());
    }
    let dataset = config.data.load().map_err(Failure::run)?;
    log::info!(
        "{} users, {} items, {} ratings, {} friendships",
        dataset.user_count(),
        dataset.item_count(),
        dataset.ratings().len(),
        dataset.graph().edge_count()
    );
    fs::create_dir_all(&config.out)
        .map_err(|e| Failure::run(format!("{}: {e}", config.out.display())))?;
    let snapshot = serde_json::to_value(&config).map_err(Failure::run)?;
    let partial = partial_path(&config.out);
    let mut partial_error = None;

    let result = run_cross_validation_with(
        &dataset,
        &methods,
        config.folds,
        config.repetitions,
        config.seed,
        &config.eval,
        |ev| {
            let mut r = ev.report.clone();
            r.config = snapshot.clone();
            if let Err(e) = write_json(&partial, &r) {
                partial_error = Some(e);
            }
        },
    );
    if let Some(e) = partial_error {
        log::warn!("could not write partial report: {e}");
    }
    let mut ev = result.map_err(|e| {
        if partial.exists() {
            eprintln!("partial results kept in {}", partial.display());
        }
        Failure::run(e)
    })?;
    ev.report.config = snapshot;
    export_report(&ev.report, &config.out).map_err(Failure::run)?;
    if partial.exists() {
        fs::remove_file(&partial)
            .map_err(|e| Failure::run(format!("{}: {e}", partial.display())))?;
    }
    print_summary(&ev.report);
    println!("report written to {}", config.out.display());
    Ok(())
}

fn print_plan(config: &RunConfig, methods: &[social_kernels::eval::Method]) {
    let t = &config.eval.tuning;
    println!("data:        {}", config.data.describe());
    println!(
        "methods:     {}",
        methods
            .iter()
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!(
        "protocol:    {} repetitions of {}-fold user cross-validation, seed {}",
        config.repetitions, config.folds, config.seed
    );
    if t.enabled {
        println!(
            "tuning:      {:.0}% holdout; {} alpha x {} sigma x {} C x {} epsilon",
            t.holdout_fraction * 100.0,
            t.alpha_grid.len(),
            t.sigma_scales.len(),
            t.c_grid.len(),
            t.epsilon_grid.len()
        );
    } else {
        println!("tuning:      off");
    }
    println!(
        "flags:       clamp={} strict_leakage={} shared_eta={} normalize_mni={}",
        config.eval.svr.clamp,
        config.eval.strict_leakage,
        config.eval.shared_eta,
        config.eval.baseline.normalize_mni
    );
    println!(
        "output:      {}/{{report.json,table3.csv,table4.csv,fig4.csv}}",
        config.out.display()
    );
}

fn print_summary(report: &EvaluationReport) {
    let mut rows: Vec<_> = report.methods.iter().collect();
    rows.sort_by(|a, b| a.rmse_mean.total_cmp(&b.rmse_mean));
    println!(
        "{:<20} {:>8} {:>8} {:>9} {:>9}",
        "method", "RMSE", "std", "coverage", "seconds"
    );
    for m in rows {
        println!(
            "{:<20} {:>8.4} {:>8.4} {:>9.3} {:>9.1}",
            m.name, m.rmse_mean, m.rmse_std, m.coverage, m.seconds
        );
    }
    if !report.eta_average.is_empty() {
        println!();
        println!("{:<8} {:>8}", "kernel", "eta");
        for (l, e) in report.eta_labels.iter().zip(&report.eta_average) {
            println!("{:<8} {:>8.4}", l.as_str(), e);
        }
    }
}

fn report(a: ReportArgs) -> Outcome {
    let text = fs::read_to_string(&a.input)
        .map_err(|e| Failure::usage(format!("{}: {e}", a.input.display())))?;
    let report: EvaluationReport = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("{}: {e}", a.input.display())))?;
    print_summary(&report);
    println!();
    print!("{:<6}", "bin");
    for m in &report.bins.methods {
        print!(" {m:>12.12}");
    }
    println!();
    for row in &report.bins.rows {
        print!("{:<6}", row.bin.label());
        for r in &row.rmse {
            match r {
                Some(v) => print!(" {v:>12.4}"),
                None => print!(" {:>12}", "-"),
            }
        }
        println!();
    }
    if let Some(out) = &a.out {
        export_report(&report, out).map_err(Failure::run)?;
        println!("tables written to {}", out.display());
    }
    Ok(())
}
