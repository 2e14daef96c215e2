use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use canvas_fss::backend_gateway::{open_backend, protocol_check, BackendError};
use canvas_fss::canvas_geometry::render_overlay;
use canvas_fss::eval_runner::{
    ablate, compose_episode, parse_override, prepare, report_files, run, write_report,
    ReportTemplate, RunConfig, RunError, SweepSpec,
};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

const BACKEND_ENV: &str = "CANVAS_FSS_BACKEND";

#[derive(Parser, Debug)]
#[command(name = "canvas-fss", version, about = "Few-shot segmentation on a composed canvas")]
struct Cli {
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set fold_index=1` or
    /// `--set negative_scenario.cap=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Segmenter: `mock:perfect`, `mock:suppress`, `mock:attenuate[:px]` or
    /// an http(s) endpoint. Falls back to CANVAS_FSS_BACKEND when the config
    /// file names none.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compose one episode and write the canvas with prompts drawn on it.
    Compose {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        episode: u64,
        /// Output PNG; geometry goes to the same path with a .json extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run (or resume) an evaluation.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory, replacing `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a table from finished runs.
    Report {
        #[arg(long, default_value = "main_table")]
        template: ReportTemplate,
        /// Row the delta columns are taken against.
        #[arg(long)]
        baseline: Option<String>,
        /// Writes `<out>.txt` and `<out>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run directories or results files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run a sweep of config variants and report them together.
    Ablate {
        /// Sweep specification (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        backend: Option<String>,
        /// Root directory for the sweep's runs, replacing the base `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that a segmenter endpoint speaks the wire protocol.
    ProtocolCheck {
        #[arg(long, env = BACKEND_ENV)]
        backend: String,
        /// Per-request timeout in seconds.
        #[arg(long, default_value_t = 60)]
        timeout: u64,
    },
}

/// Exit status plus the message for stderr.
struct Failure {
    code: u8,
    message: String,
}

const EXIT_USAGE: u8 = 1;
const EXIT_RUN: u8 = 2;
const EXIT_UNREACHABLE: u8 = 3;

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::Config(_) => EXIT_USAGE,
            RunError::Backend(BackendError::Transport(_)) => EXIT_UNREACHABLE,
            _ => EXIT_RUN,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn json_string(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

fn load_config(args: &ConfigArgs, out: Option<&Path>) -> Result<RunConfig, Failure> {
    let raw = std::fs::read(&args.config)
        .map_err(|e| usage(format!("{}: {e}", args.config.display())))?;
    let mut file: Value = serde_json::from_slice(&raw)
        .map_err(|e| usage(format!("{}: {e}", args.config.display())))?;
    if let (Some(obj), Ok(env)) = (file.as_object_mut(), std::env::var(BACKEND_ENV)) {
        obj.entry("backend").or_insert(Value::String(env));
    }
    let base = RunConfig::from_json(file.to_string().as_bytes())?;

    let mut overrides = Vec::new();
    for s in &args.overrides {
        overrides.push(parse_override(s)?);
    }
    if let Some(b) = &args.backend {
        overrides.push(("backend".into(), json_string(b)));
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = out {
        overrides.push(("output_dir".into(), json_string(&out.to_string_lossy())));
    }
    let cfg = base.with_overrides(&overrides)?;
    cfg.validate()?;
    // effective config, one line, so it can be fed back verbatim
    println!("{}", serde_json::to_string(&cfg).expect("config serializes"));
    Ok(cfg)
}

fn cmd_compose(args: &ConfigArgs, episode_id: u64, out: &Path) -> Result<(), Failure> {
    let mut cfg = load_config(args, None)?;
    // only enough episodes to reach the requested one
    cfg.n_episodes = cfg.n_episodes.max(episode_id as usize + 1);
    let prep = prepare(&cfg)?;
    let episode = prep
        .episodes
        .iter()
        .find(|e| e.episode_id == episode_id)
        .ok_or_else(|| usage(format!("no episode {episode_id}")))?;
    let backend = open_backend(&cfg.backend, 1).map_err(RunError::from)?;
    let composed = compose_episode(&prep, episode, backend.as_ref())?;
    let bundle = &composed.prompts.bundle;
    let pos: Vec<_> = bundle.positives.iter().map(|p| p.rect).collect();
    let neg: Vec<_> = bundle.negatives.iter().map(|p| p.rect).collect();
    let overlay = render_overlay(&composed.canvas, &pos, &neg);
    overlay
        .save(out)
        .map_err(|e| Failure { code: EXIT_RUN, message: format!("{}: {e}", out.display()) })?;
    let sidecar = out.with_extension("json");
    let geometry = json!({
        "episode": episode,
        "plan": composed.plan(),
        "prompts": bundle,
        "warnings": composed.prompts.warnings,
    });
    let body = serde_json::to_string_pretty(&geometry).expect("geometry serializes") + "\n";
    std::fs::write(&sidecar, body)
        .map_err(|e| Failure { code: EXIT_RUN, message: format!("{}: {e}", sidecar.display()) })?;
    log::info!("wrote {} and {}", out.display(), sidecar.display());
    Ok(())
}

fn cmd_run(args: &ConfigArgs, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(args, out)?;
    let outcome = run(&cfg)?;
    let s = &outcome.summary;
    let pct = |v: Option<f64>| v.map_or("--".to_string(), |x| format!("{:.1}", x * 100.0));
    println!(
        "episodes {} failed {} mIoU {} FB-IoU {}",
        s.completed,
        s.failed,
        pct(s.miou),
        pct(s.fb_iou)
    );
    println!("results {}", outcome.results_path.display());
    Ok(())
}

fn cmd_report(
    template: ReportTemplate,
    baseline: Option<&str>,
    out: Option<&Path>,
    inputs: &[PathBuf],
) -> Result<(), Failure> {
    let table = report_files(inputs, template, baseline)?;
    print!("{}", table.render_text());
    if let Some(prefix) = out {
        write_report(&table, prefix)?;
    }
    Ok(())
}

fn cmd_ablate(path: &Path, backend: Option<&str>, out: Option<&Path>) -> Result<(), Failure> {
    let mut spec = SweepSpec::load(path)?;
    if let Some(b) = backend {
        spec.base.backend = b.to_string();
    }
    if let Some(o) = out {
        spec.base.output_dir = o.to_path_buf();
    }
    let outcome = ablate(&spec)?;
    print!("{}", outcome.table.render_text());
    write_report(&outcome.table, &spec.base.output_dir.join("report"))?;
    Ok(())
}

fn cmd_protocol_check(endpoint: &str, timeout: u64) -> Result<(), Failure> {
    let report = protocol_check(endpoint, Duration::from_secs(timeout)).map_err(|e| Failure {
        code: EXIT_UNREACHABLE,
        message: format!("{endpoint} unreachable: {e}"),
    })?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure { code: EXIT_RUN, message: "protocol check failed".into() })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match &cli.command {
        Command::Compose { cfg, episode, out } => cmd_compose(cfg, *episode, out),
        Command::Run { cfg, out } => cmd_run(cfg, out.as_deref()),
        Command::Report { template, baseline, out, inputs } => {
            cmd_report(*template, baseline.as_deref(), out.as_deref(), inputs)
        }
        Command::Ablate { config, backend, out } => {
            cmd_ablate(config, backend.as_deref(), out.as_deref())
        }
        Command::ProtocolCheck { backend, timeout } => cmd_protocol_check(backend, *timeout),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
