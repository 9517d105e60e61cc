use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alforge::datagen::container::{write_dataset, Manifest};
use alforge::experiment::plotdata::write_plot_data;
use alforge::experiment::report::{build_report, default_criteria, format_table, load_runs, write_report};
use alforge::experiment::{run_experiment, ExperimentConfig, Generator, Preset};
use alforge::{Error, Strategy};

/// Pool-based active learning experiments on synthetic LiDAR-style data.
#[derive(Parser, Debug)]
#[command(name = "alforge", version)]
struct Cli {
    /// Experiment config (TOML); command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (input directory for report and plot-data).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a train/test dataset container.
    GenData(DataArgs),
    /// Run the query loop for each strategy and repetition.
    Run(RunArgs),
    /// Label-savings tables against the baseline.
    Report(ReportArgs),
    /// Plot-ready CSVs.
    PlotData(PlotArgs),
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long, value_parser = parse_generator)]
    generator: Option<Generator>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    sparsity: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Strategies to run (comma-separated or repeated).
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<Strategy>,
    /// Dataset container root with train/ and test/; generated from the config otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    gen: DataArgs,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    query: Option<usize>,
    #[arg(long)]
    seed_per_class: Option<usize>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    baseline: Option<Strategy>,
    #[arg(long)]
    dump_predictions: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Strategy compared against; defaults to the one in config.echo, else random.
    #[arg(long)]
    baseline: Option<Strategy>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    baseline: Option<Strategy>,
    /// Steps for calibration and error-curve snapshots (default: first and last).
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
    /// Where to write the tables (default: the run directory).
    #[arg(long)]
    dest: Option<PathBuf>,
}

fn parse_kebab<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(s)).map_err(|e| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    parse_kebab(s)
}

fn parse_generator(s: &str) -> Result<Generator, String> {
    parse_kebab(s)
}

/// Failures that are the caller's fault exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text, &p.display().to_string())?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut ExperimentConfig, a: &DataArgs) {
    let d = &mut cfg.data;
    if let Some(v) = a.preset {
        d.preset = v;
    }
    if let Some(v) = a.generator {
        d.generator = v;
    }
    if let Some(v) = a.n_train {
        d.n_train = v;
    }
    if let Some(v) = a.n_test {
        d.n_test = v;
    }
    if let Some(v) = a.feature_dim {
        d.feature_dim = v;
    }
    if let Some(v) = a.separation {
        d.separation = v;
    }
    if let Some(v) = a.patch_size {
        d.patch_size = v;
    }
    if let Some(v) = a.sparsity {
        d.sparsity = v;
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    cfg.out
        .clone()
        .ok_or_else(|| Failure::Usage("--out is required (or `out` in the config file)".into()))
}

fn gen_data(mut cfg: ExperimentConfig, a: &DataArgs) -> Result<(), Failure> {
    apply_data(&mut cfg, a);
    let out = out_dir(&cfg)?;
    cfg.data.path = None;
    let pair = cfg.data.materialize(cfg.seed)?;
    let seed = Some(cfg.data.seed.unwrap_or(cfg.seed));
    for (name, d) in [("train", &pair.train), ("test", &pair.test)] {
        let m = Manifest::for_dataset(d, pair.caps, seed, cfg.data.generator_table());
        write_dataset(&out.join(name), d, &m)?;
    }
    for (name, d) in [("train", &pair.train), ("test", &pair.test)] {
        let counts: Vec<String> = d
            .class_names()
            .iter()
            .zip(d.class_counts())
            .map(|(c, k)| format!("{c}={k}"))
            .collect();
        println!("{name}: {} samples; {}", d.len(), counts.join(", "));
    }
    Ok(())
}

fn run(mut cfg: ExperimentConfig, a: &RunArgs) -> Result<(), Failure> {
    apply_data(&mut cfg, &a.gen);
    if a.data.is_some() {
        cfg.data.path = a.data.clone();
    }
    if !a.strategy.is_empty() {
        cfg.strategies = a.strategy.clone();
    }
    let p = &mut cfg.protocol;
    for (dst, src) in [
        (&mut p.max_steps, a.steps),
        (&mut p.query_size, a.query),
        (&mut p.seed_per_class, a.seed_per_class),
        (&mut p.passes, a.passes),
        (&mut p.ensemble, a.ensemble),
    ] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    if a.dump_predictions {
        p.dump_predictions = true;
    }
    if let Some(v) = a.reps {
        cfg.repetitions = v;
    }
    if let Some(v) = a.epochs {
        cfg.network.epochs = Some(v);
    }
    if let Some(v) = a.baseline {
        cfg.baseline = v;
    }
    let out = out_dir(&cfg)?;
    let summary = run_experiment(&cfg, &out)?;
    for j in &summary.jobs {
        let last = j.labeled.last().copied().unwrap_or(0);
        println!(
            "{} rep {}: {} steps, {} labeled at the end",
            j.strategy,
            j.rep,
            j.labeled.len().saturating_sub(1),
            last
        );
    }
    println!("config {} -> {}", summary.hash, out.display());
    Ok(())
}

/// Baseline from the flag, else the run's config echo, else random.
fn baseline_for(dir: &Path, flag: Option<Strategy>) -> Result<Strategy, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    let echo = dir.join("config.echo");
    match std::fs::read_to_string(&echo) {
        Ok(text) => Ok(ExperimentConfig::from_toml(&text, &echo.display().to_string())?.baseline),
        Err(_) => Ok(Strategy::Random),
    }
}

fn report(cfg: ExperimentConfig, a: &ReportArgs) -> Result<(), Failure> {
    let dir = out_dir(&cfg)?;
    let baseline = baseline_for(&dir, a.baseline)?;
    let runs = load_runs(&dir)?;
    let rep = build_report(&runs, baseline.name(), &default_criteria())?;
    write_report(&dir, &rep)?;
    print!("{}", format_table(&rep));
    Ok(())
}

fn plot_data(cfg: ExperimentConfig, a: &PlotArgs) -> Result<(), Failure> {
    let dir = out_dir(&cfg)?;
    let baseline = baseline_for(&dir, a.baseline)?;
    let dest = a.dest.clone().unwrap_or_else(|| dir.clone());
    let steps = (!a.steps.is_empty()).then_some(a.steps.as_slice());
    for p in write_plot_data(&dir, &dest, baseline.name(), steps)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("ALFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("ALFORGE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = init_threads().and_then(|_| {
        let cfg = load_config(&cli)?;
        match &cli.cmd {
            Command::GenData(a) => gen_data(cfg, a),
            Command::Run(a) => run(cfg, a),
            Command::Report(a) => report(cfg, a),
            Command::PlotData(a) => plot_data(cfg, a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
