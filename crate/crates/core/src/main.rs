use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use multires::harness::{
    compare_runs, emit, run_experiment, ExperimentConfig, HarnessError, RunReport,
};

#[derive(Parser)]
#[command(
    name = "multires",
    version,
    about = "Multiresilient FT-GMRES experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run an experiment and write its report.
    Run(RunArgs),
    /// Compare standalone and combined resilience runs.
    Compare(CompareArgs),
}

/// Every flag overrides the key of the same name in `--config`.
#[derive(Args)]
struct RunArgs {
    /// Key-value config file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `poisson3d` or `mtx:PATH`.
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    nx: Option<String>,
    #[arg(long)]
    ny: Option<String>,
    #[arg(long)]
    nz: Option<String>,
    #[arg(long)]
    ranks: Option<String>,
    #[arg(long)]
    spares: Option<String>,
    #[arg(long)]
    inner: Option<String>,
    #[arg(long)]
    outer: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    /// `none`, `bounded` or `monotonicity`.
    #[arg(long)]
    detector: Option<String>,
    #[arg(long)]
    bound_slack: Option<String>,
    #[arg(long)]
    mono_interval: Option<String>,
    /// `on`, `off` or `auto` (on iff failures are planned).
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    checkpoint_basis: Option<String>,
    #[arg(long)]
    inner_early_exit: Option<String>,
    #[arg(long)]
    max_inner_restarts: Option<String>,
    /// Inner SpMVs between injections, or `none`.
    #[arg(long)]
    sdc_interval: Option<String>,
    /// Last inner SpMV index eligible for injection, or `none`.
    #[arg(long)]
    sdc_until: Option<String>,
    /// `bitflip`, `bitflip:BIT` or `scale:F`.
    #[arg(long)]
    sdc_model: Option<String>,
    /// `none`, `auto:MEAN:COUNT` or `list:R@T,...` with T one of `K`,
    /// `iter:N`, `spmv:N`, `ckpt:E`.
    #[arg(long)]
    failures: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// `json` or `csv`.
    #[arg(long)]
    format: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("problem", &self.problem),
            ("nx", &self.nx),
            ("ny", &self.ny),
            ("nz", &self.nz),
            ("ranks", &self.ranks),
            ("spares", &self.spares),
            ("inner", &self.inner),
            ("outer", &self.outer),
            ("tol", &self.tol),
            ("detector", &self.detector),
            ("bound-slack", &self.bound_slack),
            ("mono-interval", &self.mono_interval),
            ("checkpoint", &self.checkpoint),
            ("checkpoint-basis", &self.checkpoint_basis),
            ("inner-early-exit", &self.inner_early_exit),
            ("max-inner-restarts", &self.max_inner_restarts),
            ("sdc-interval", &self.sdc_interval),
            ("sdc-until", &self.sdc_until),
            ("sdc-model", &self.sdc_model),
            ("failures", &self.failures),
            ("seed", &self.seed),
            ("reps", &self.reps),
            ("out", &self.out),
            ("format", &self.format),
        ]
    }

    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
            cfg.apply_kv(&text)?;
        }
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    se: PathBuf,
    #[arg(long)]
    pf: PathBuf,
    #[arg(long)]
    multi: PathBuf,
    /// Output JSON path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(path: &PathBuf) -> Result<RunReport, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
    RunReport::from_json(&text).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))
}

fn run(args: &RunArgs) -> Result<i32, HarnessError> {
    let cfg = args.resolve()?;
    let report = run_experiment(&cfg)?;
    for r in &report.reps {
        eprintln!(
            "rep {} seed {}: {} (residual {:e}, spmv {}, n_extra {})",
            r.rep,
            r.seed,
            r.status,
            r.metrics.final_relative_residual,
            r.metrics.spmv_count,
            r.metrics.n_extra
        );
    }
    match &cfg.out {
        Some(path) => emit(&report, cfg.format, path)?,
        None => match cfg.format {
            multires::harness::Format::Json => println!("{}", report.to_json()?),
            multires::harness::Format::Csv => print!("{}", report.to_csv()?),
        },
    }
    Ok(report.exit_code())
}

fn compare(args: &CompareArgs) -> Result<i32, HarnessError> {
    let cmp = compare_runs(
        &load(&args.baseline)?,
        &load(&args.se)?,
        &load(&args.pf)?,
        &load(&args.multi)?,
    )?;
    let text = serde_json::to_string_pretty(&cmp)?;
    match &args.out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?,
        None => println!("{text}"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
