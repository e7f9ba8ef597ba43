//! Operator entry point. Exit codes: 0 success, 1 usage or configuration
//! mistakes, 2 unreadable or malformed data, 3 numeric failures during
//! training or checking.

mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::ConfigBag;
use iosda_core::datahub::{gen_synthetic, save_features, FeatureFormat, SynthSpec};
use iosda_core::{evalkit, gradsuite, timeline, Error};

#[derive(Parser)]
#[command(
    name = "iosda",
    version,
    about = "Incremental open-set domain adaptation over feature streams",
    long_about = "Drives feature-replay training over a stream of domains: the first domain \
                  arrives labeled, later ones are adapted to without labels, and past domains \
                  survive only inside a conditional generator. Runs are reproducible from the \
                  config snapshot each run directory keeps."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic domain stream as feature files, one per domain
    GenSynth(GenSynthArgs),
    /// Execute a full incremental run and write its artifacts
    Run(RunArgs),
    /// Summarize a finished run directory as an accuracy/forgetting table
    Eval(EvalArgs),
    /// Check every training gradient against finite differences
    GradCheck(GradCheckArgs),
    /// Copy a run's per-timestamp embedding table for external plotting
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Directory for the generated files (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Number of domains in the stream
    #[arg(long, default_value_t = 3)]
    domains: usize,
    #[arg(long, default_value_t = 16)]
    feat_dim: usize,
    /// Classes shared by every domain
    #[arg(long, default_value_t = 4)]
    known_classes: usize,
    /// Extra never-labeled classes appearing in each domain after the first
    #[arg(long, default_value_t = 2)]
    open_per_domain: usize,
    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    /// Distance between domain cluster centers
    #[arg(long, default_value_t = 1.0)]
    shift_mag: f64,
    #[arg(long, default_value_t = 0.5)]
    cluster_std: f64,
    /// Generation seed; falls back to IOSDA_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
    /// File format: csv keeps full f64 precision, binary stores f32
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct RunArgs {
    /// key=value config file; omitted keys use the documented defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set osda.epochs=50 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed; wins over the config file, falls back to IOSDA_SEED
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to runs/seed{seed}
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// A directory written by `iosda run`
    run_dir: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Seed for the sampled nets and batches; falls back to IOSDA_SEED
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    /// A directory written by `iosda run`
    run_dir: PathBuf,
    /// Which timestamp's embeddings to export
    #[arg(long)]
    timestamp: usize,
    /// Destination file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Data { .. } | Error::Format(_) | Error::Io { .. } => 2,
        Error::Dim { .. } | Error::Contract { .. } => 2,
        Error::Numeric { .. } => 3,
    }
}

/// Seed precedence: explicit flag, then the IOSDA_SEED environment variable.
/// Returns None when neither is present so config files can still decide.
fn seed_fallback(flag: Option<u64>) -> Result<Option<u64>, Error> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("IOSDA_SEED") {
        Err(_) => Ok(None),
        Ok(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("IOSDA_SEED: cannot parse {raw:?} as a seed"))),
    }
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<(), Error> {
    let format = match args.format.as_str() {
        "csv" => FeatureFormat::Csv,
        "binary" => FeatureFormat::Binary,
        other => return Err(Error::Config(format!("unknown format {other:?}, use csv or binary"))),
    };
    let spec = SynthSpec {
        feat_dim: args.feat_dim,
        known_classes: args.known_classes,
        open_per_domain: args.open_per_domain,
        samples_per_class: args.samples_per_class,
        shift_mag: args.shift_mag,
        cluster_std: args.cluster_std,
        seed: seed_fallback(args.seed)?.unwrap_or(0),
    };
    let stream = gen_synthetic(&spec, args.domains)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let ext = match format {
        FeatureFormat::Csv => "csv",
        FeatureFormat::Binary => "features",
    };
    for ds in &stream {
        let path = args.out.join(format!("domain_{}.{ext}", ds.domain_id()));
        save_features(&path, ds, format)?;
        println!("wrote {} ({} samples)", path.display(), ds.len());
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let mut bag = match &args.config {
        Some(path) => ConfigBag::from_file(path)?,
        None => ConfigBag::default(),
    };
    for pair in &args.sets {
        bag.set_pair(pair)?;
    }
    if let Some(seed) = seed_fallback(args.seed)? {
        bag.set("seed", &seed.to_string());
    }
    let cfg = bag.into_timeline_config()?;
    let out_dir = args.out.unwrap_or_else(|| PathBuf::from(format!("runs/seed{}", cfg.seed)));

    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let snapshot = out_dir.join("config.txt");
    std::fs::write(&snapshot, config::render(&cfg)).map_err(|e| Error::io(&snapshot, e))?;

    let output = timeline::run(&cfg, Some(&out_dir))?;
    for s in &output.summaries {
        println!(
            "t{}: {} head{}, pseudo-labels {} accepted / {} rejected",
            s.timestamp,
            s.head_count,
            if s.head_count == 1 { "" } else { "s" },
            s.pseudo_accepted,
            s.pseudo_rejected
        );
    }
    println!();
    print!("{}", evalkit::forgetting_table(&evalkit::summarize(&output.records)?));
    println!("\nartifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let records = evalkit::load_metrics(&args.run_dir.join("metrics.csv"))?;
    let report = evalkit::summarize(&records)?;
    println!("{} evaluations across {} domains", records.len(), report.domains.len());
    println!();
    print!("{}", evalkit::forgetting_table(&report));
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<(), Error> {
    let seed = seed_fallback(args.seed)?.unwrap_or(0);
    let checks = gradsuite::run_gradient_suite(seed)?;
    let mut failures = 0;
    for c in &checks {
        if c.passed {
            println!("ok   {:32} {:>4} params  max rel err {:.3e}", c.name, c.param_count, c.max_rel_err);
        } else {
            failures += 1;
            println!("FAIL {:32} {:>4} params  max rel err {:.3e}  ({})", c.name, c.param_count, c.max_rel_err, c.detail);
        }
    }
    if failures > 0 {
        return Err(Error::numeric("grad-check", format!("{failures} of {} checks failed", checks.len())));
    }
    println!("all {} gradient checks passed (seed {seed})", checks.len());
    Ok(())
}

fn cmd_export_embeddings(args: ExportArgs) -> Result<(), Error> {
    let src = args.run_dir.join(format!("embeddings_t{}.csv", args.timestamp));
    let text = std::fs::read_to_string(&src).map_err(|e| Error::io(&src, e))?;
    match args.out {
        Some(dest) => {
            std::fs::write(&dest, text).map_err(|e| Error::io(&dest, e))?;
            println!("wrote {}", dest.display());
        }
        None => {
            // Tables get piped into head and friends; a consumer closing
            // early is normal, not a crash.
            use std::io::Write;
            if let Err(e) = std::io::stdout().write_all(text.as_bytes()) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(Error::io("stdout", e));
                }
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::ExportEmbeddings(args) => cmd_export_embeddings(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
