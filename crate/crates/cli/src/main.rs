use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use valrecon::config::RunConfig;
use valrecon::dataio::{synthesize, write_generation_csv, write_price_csv};
use valrecon::evaluate::{
    average_profit_aggregated, average_profit_independent, hierarchical_rmse, provenance_line,
    run_sweep, write_sweep_reports,
};
use valrecon::experiment::{load_raw, prepare_data, run_case, write_forecasters, Case, PreparedData};
use valrecon::reconcile::{train_quality, train_value, ReconKind, ReconModel, TrainStatus};
use valrecon::verify::{faulty_allocate, run_all, summary_line, write_report, AllocateFn, VerifyOptions};
use valrecon::Error;

/// Value-oriented forecast reconciliation experiments.
#[derive(Debug, Parser)]
#[command(name = "valrecon", version, about)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweep cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory; falls back to the config, then $OUTPUT_DIR, then ./output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic generation and price CSVs.
    Synth,
    /// Fit the base forecasters and write their coefficients and forecasts.
    Fit,
    /// Train one reconciliation model at the configured weight.
    Train {
        #[arg(long, default_value = "value_learned")]
        kind: ReconKind,
    },
    /// Run the configured strategies over the weight grid.
    Sweep,
    /// Run one of the experiment protocols.
    Case {
        #[arg(long)]
        case: Case,
    },
    /// Run the randomized property suites.
    Verify,
}

enum Outcome {
    Success,
    PropertyFailure,
    TotalFailure,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::PropertyFailure) => ExitCode::from(1),
        Ok(Outcome::TotalFailure) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.sweep.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os("OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("output"))
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let cfg = resolve_config(&cli)?;
    let out = output_dir(&cli, &cfg);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let hash = cfg.hash()?;
    let provenance = provenance_line(&hash, cfg.seed);
    println!("{provenance}");
    match cli.command {
        Command::Synth => synth(&cfg, &out, &hash),
        Command::Fit => fit(&cfg, &out, &provenance),
        Command::Train { kind } => train(&cfg, kind, &out, &provenance),
        Command::Sweep => sweep(&cfg, &out, &hash),
        Command::Case { case } => {
            let outcome = run_case(&cfg, case, &out)?;
            println!("{case}: {}/{} cells completed", outcome.completed, outcome.total);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            Ok(if outcome.completed == 0 {
                Outcome::TotalFailure
            } else {
                Outcome::Success
            })
        }
        Command::Verify => verify(&cfg, &out, &provenance),
    }
}

fn synth(cfg: &RunConfig, out: &Path, hash: &str) -> anyhow::Result<Outcome> {
    let raw = synthesize(&cfg.synthetic.spec(cfg.seed))?;
    let comment = format!("config_hash={hash} seed={}", cfg.seed);
    let gen = out.join("generation.csv");
    let price = out.join("price.csv");
    write_generation_csv(&raw, &gen, Some(&comment))?;
    write_price_csv(&raw, &price, Some(&comment))?;
    println!("wrote {} ({} hours, {} leaves)", gen.display(), raw.len(), raw.m());
    println!("wrote {}", price.display());
    Ok(Outcome::Success)
}

fn prepare(cfg: &RunConfig) -> anyhow::Result<PreparedData> {
    let raw = load_raw(cfg)?;
    Ok(prepare_data(cfg, &raw, cfg.forecast.case, &cfg.context.spec(false))?)
}

fn fit(cfg: &RunConfig, out: &Path, provenance: &str) -> anyhow::Result<Outcome> {
    let data = prepare(cfg)?;
    let ds = &data.dataset;
    let path = out.join("forecasters.csv");
    write_forecasters(&data.forecasters, &path, provenance)?;
    println!("wrote {}", path.display());

    let path = out.join("base_forecasts.csv");
    let mut f = BufWriter::new(File::create(&path)?);
    writeln!(f, "{provenance}")?;
    let n = ds.hierarchy.n();
    let mut header = vec!["t".to_string(), "split".to_string()];
    header.extend((0..n).map(|j| format!("base_{j}")));
    header.extend((0..n).map(|j| format!("actual_{j}")));
    writeln!(f, "{}", header.join(","))?;
    for (k, r) in ds.records.iter().enumerate() {
        let split = if k < ds.train_end { "train" } else { "test" };
        let values: Vec<String> = r.base.0.iter().chain(&r.actual.0).map(|v| v.to_string()).collect();
        writeln!(f, "{},{split},{}", r.t, values.join(","))?;
    }
    f.flush()?;
    println!("wrote {}", path.display());
    if let Some(level) = data.level {
        println!("quantile level {level}");
    }
    println!("test-set hierarchical rmse {:.6}", hierarchical_rmse(ds.test(), None)?);
    Ok(Outcome::Success)
}

fn train(cfg: &RunConfig, kind: ReconKind, out: &Path, provenance: &str) -> anyhow::Result<Outcome> {
    let data = prepare(cfg)?;
    let ds = &data.dataset;
    let value_cfg = cfg.value_train_config();
    let mut status = TrainStatus::Ok;
    let model = match kind {
        ReconKind::BottomUp => ReconModel::bottom_up(ds.hierarchy.clone()),
        ReconKind::QualityLearned | ReconKind::QualityLinear => {
            train_quality(kind, &ds.hierarchy, ds.train(), &ds.capacities, &cfg.quality_train_config())?.0
        }
        ReconKind::ValueLearned | ReconKind::ValueLinear => {
            let (model, _, report) = train_value(kind, &ds.hierarchy, ds.train(), &ds.capacities, &value_cfg)?;
            let path = out.join(format!("training_{kind}.csv"));
            let mut f = BufWriter::new(File::create(&path)?);
            writeln!(f, "{provenance}")?;
            report.write_csv(&mut f)?;
            f.flush()?;
            println!("wrote {}", path.display());
            status = report.status;
            model
        }
    };
    let path = out.join(format!("model_{kind}.txt"));
    let mut f = BufWriter::new(File::create(&path)?);
    writeln!(f, "{provenance}")?;
    model.write_to(&mut f)?;
    f.flush()?;
    println!("wrote {}", path.display());

    let m = ds.hierarchy.m();
    let policy = value_cfg.policy()?;
    let independent = average_profit_independent(ds.test(), m)?;
    let aggregated = average_profit_aggregated(ds.test(), &model, &policy)?;
    let path = out.join(format!("evaluation_{kind}.csv"));
    let mut f = BufWriter::new(File::create(&path)?);
    writeln!(f, "{provenance}")?;
    writeln!(f, "producer,w,ap_independent,ap,ap_change")?;
    for i in 0..m {
        writeln!(
            f,
            "{},{},{},{},{}",
            i + 1,
            policy.w(),
            independent[i],
            aggregated[i],
            aggregated[i] - independent[i]
        )?;
        println!(
            "producer {}: AP {:.4} (independent {:.4})",
            i + 1,
            aggregated[i],
            independent[i]
        );
    }
    f.flush()?;
    println!("wrote {}", path.display());
    println!("test-set hierarchical rmse {:.6}", hierarchical_rmse(ds.test(), Some(&model))?);
    match status {
        TrainStatus::Ok => Ok(Outcome::Success),
        TrainStatus::ConstraintFailure { producers } => {
            let ids: Vec<String> = producers.iter().map(|i| (i + 1).to_string()).collect();
            eprintln!("bargaining constraints violated on training data for producers {}", ids.join(", "));
            Ok(Outcome::PropertyFailure)
        }
    }
}

fn sweep(cfg: &RunConfig, out: &Path, hash: &str) -> anyhow::Result<Outcome> {
    let data = prepare(cfg)?;
    let report = run_sweep(
        &data.dataset,
        &cfg.strategies()?,
        &cfg.sweep.w_grid,
        &cfg.sweep_config(),
        cfg.seed,
        hash,
    )?;
    write_sweep_reports(&report, out)?;
    println!("sweep: {}/{} cells completed", report.completed(), report.cells.len());
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(if report.completed() == 0 {
        Outcome::TotalFailure
    } else {
        Outcome::Success
    })
}

fn verify(cfg: &RunConfig, out: &Path, provenance: &str) -> anyhow::Result<Outcome> {
    let opts = VerifyOptions {
        seed: cfg.seed,
        instances: cfg.verify.instances,
        gradient_instances: cfg.verify.gradient_instances,
    };
    let alloc: AllocateFn = if cfg!(feature = "inject-fault") {
        faulty_allocate
    } else {
        valrecon::allocation::allocate
    };
    let results = run_all(&opts, alloc);
    for r in &results {
        println!("{}", summary_line(r));
        if let Some(c) = &r.counterexample {
            println!("  counterexample: {c}");
        }
    }
    write_report(&results, out, provenance)?;
    println!("wrote {}", out.join("verify.csv").display());
    Ok(if results.iter().all(|r| r.passed()) {
        Outcome::Success
    } else {
        Outcome::PropertyFailure
    })
}
