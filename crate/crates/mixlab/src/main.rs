use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use mixlab::analysis::{default_thresholds, group_by_session, run_study_report, summary, write_report};
use mixlab::engine::{Engine, EngineConfig, DEFAULT_GENERATOR_SEED};
use mixlab::generator::Backend;
use mixlab::imaging::encode_png;
use mixlab::service::{GeneratorChoice, Server, ServiceConfig, ServiceError};
use mixlab::sim::{simulate_cohort, CohortConfig, PolicyKind, SimError};
use mixlab::telemetry::{read_csv, TelemetryEvent, TelemetryStore};
use mixlab_core::{blend, source_latents, BlendError, BlendWeights, Renderer};

const USAGE: u8 = 1;
const DATA: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "mixlab", version, about = "Image-blending game server and study tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP server.
    Serve(ServeArgs),
    /// Play simulated full-protocol sessions into a telemetry directory.
    Simulate(SimulateArgs),
    /// Build the study report from a telemetry directory or CSV export.
    Analyze(AnalyzeArgs),
    /// Blend seeded sources and write one rendered PNG.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GeneratorKind {
    Procedural,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ChallengePolicy {
    Greedy,
    Explorative,
}

#[derive(Debug, clap::Args)]
struct RenderGeometry {
    /// Latent dimension.
    #[arg(long, env = "LATENT_DIM", default_value_t = mixlab_core::DEFAULT_LATENT_DIM)]
    latent_dim: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = mixlab_core::DEFAULT_IMAGE_SIZE)]
    image_size: u32,
    /// Seed of the renderer's wave table.
    #[arg(long, default_value_t = DEFAULT_GENERATOR_SEED)]
    generator_seed: u64,
}

impl RenderGeometry {
    fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            latent_dim: self.latent_dim,
            width: self.image_size,
            height: self.image_size,
            generator_seed: self.generator_seed,
        }
    }
}

#[derive(Debug, clap::Args)]
struct ServeArgs {
    #[arg(long, env = "PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, env = "GENERATOR", value_enum, default_value_t = GeneratorKind::Procedural)]
    generator: GeneratorKind,
    #[arg(long, env = "REMOTE_URL")]
    remote_url: Option<String>,
    #[arg(long, env = "MASTER_SEED", default_value_t = 0)]
    master_seed: u64,
    #[command(flatten)]
    geometry: RenderGeometry,
}

#[derive(Debug, clap::Args)]
struct SimulateArgs {
    /// Number of sessions.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Telemetry output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ChallengePolicy::Greedy)]
    challenge_policy: ChallengePolicy,
    /// Largest total slider move per challenge generation.
    #[arg(long, default_value_t = 0.05)]
    challenge_step_cap: f64,
    /// Largest total slider move per free-play generation.
    #[arg(long, default_value_t = 1.0)]
    free_step_cap: f64,
    /// Most consecutive worsening moves an explorative player makes.
    #[arg(long, default_value_t = 2)]
    worsening_bound: u32,
    #[command(flatten)]
    geometry: RenderGeometry,
}

#[derive(Debug, clap::Args)]
struct AnalyzeArgs {
    /// Telemetry directory or CSV export.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory; the report lands in `<out>/<report-name>/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "report")]
    report_name: String,
    /// Comma-separated step-size thresholds for the CDF.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
}

#[derive(Debug, clap::Args)]
struct RenderArgs {
    /// Comma-separated weights, one per source (3 to 6).
    #[arg(long, value_delimiter = ',', required = true)]
    weights: Vec<f64>,
    /// Seed of the source latents.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    geometry: RenderGeometry,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Serve(args) => cmd_serve(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Render(args) => cmd_render(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = Result<(), (u8, String)>;

fn usage(message: impl Into<String>) -> (u8, String) {
    (USAGE, message.into())
}

fn data(message: impl Into<String>) -> (u8, String) {
    (DATA, message.into())
}

fn cmd_serve(args: ServeArgs) -> CmdResult {
    let generator = match (args.generator, args.remote_url) {
        (GeneratorKind::Procedural, _) => GeneratorChoice::Procedural,
        (GeneratorKind::Remote, Some(url)) => GeneratorChoice::Remote(url),
        (GeneratorKind::Remote, None) => {
            return Err(usage("--generator remote requires --remote-url"))
        }
    };
    let config = ServiceConfig {
        port: args.port,
        data_dir: args.data_dir,
        engine: args.geometry.engine_config(),
        generator,
        master_seed: args.master_seed,
        ..ServiceConfig::new("")
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| usage(e.to_string()))?;
    runtime.block_on(async move {
        let server = Server::bind(&config).await.map_err(|e| match e {
            ServiceError::Io(e) => usage(format!("cannot bind: {e}")),
            other => usage(other.to_string()),
        })?;
        let addr = server.local_addr().map_err(|e| usage(e.to_string()))?;
        println!("listening on http://{addr}");
        println!("port {}", addr.port());
        let _ = std::io::stdout().flush();
        server.run(shutdown_signal()).await.map_err(|e| data(e.to_string()))
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    if args.n == 0 {
        return Err(usage("--n must be at least 1\n\nUsage: mixlab simulate --n <N> --out <OUT> [--seed <SEED>]"));
    }
    let cfg = CohortConfig {
        sessions: args.n,
        seed: args.seed,
        challenge_policy: match args.challenge_policy {
            ChallengePolicy::Greedy => PolicyKind::Greedy,
            ChallengePolicy::Explorative => PolicyKind::Explorative,
        },
        challenge_step_cap: args.challenge_step_cap,
        free_step_cap: args.free_step_cap,
        worsening_bound: args.worsening_bound,
        ..CohortConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let store = TelemetryStore::open(&args.out).map_err(|e| data(e.to_string()))?;
    let engine = Engine::new(Arc::new(store), args.geometry.engine_config(), Backend::Procedural);
    let ids = simulate_cohort(&engine, &cfg).map_err(|e| match e {
        SimError::BadPolicy(m) => usage(m),
        other => data(other.to_string()),
    })?;
    println!("simulated {} sessions into {}", ids.len(), args.out.display());
    for id in ids {
        println!("{id}");
    }
    Ok(())
}

fn load_cohort(input: &Path) -> Result<Vec<Vec<TelemetryEvent>>, (u8, String)> {
    if input.is_file() {
        let file = std::fs::File::open(input).map_err(|e| data(e.to_string()))?;
        let events = read_csv(file).map_err(|e| data(e.to_string()))?;
        return Ok(group_by_session(events));
    }
    if !input.is_dir() {
        return Err(data(format!("input '{}' does not exist", input.display())));
    }
    let store = TelemetryStore::open(input).map_err(|e| data(e.to_string()))?;
    let ids = store.session_ids().map_err(|e| data(e.to_string()))?;
    ids.iter()
        .map(|id| store.load_session(id).map_err(|e| data(e.to_string())))
        .collect()
}

fn cmd_analyze(args: AnalyzeArgs) -> CmdResult {
    let thresholds = args.thresholds.unwrap_or_else(default_thresholds);
    if thresholds.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(usage("--thresholds must be finite and non-negative"));
    }
    let cohort = load_cohort(&args.input)?;
    let report = run_study_report(&cohort, &thresholds).map_err(|e| data(e.to_string()))?;
    if args.report_name.is_empty() || args.report_name.contains(['/', '\\']) {
        return Err(usage("--report-name must be a plain directory name"));
    }
    write_report(&report, &args.out.join(&args.report_name)).map_err(|e| data(e.to_string()))?;
    print!("{}", summary(&report));
    Ok(())
}

fn cmd_render(args: RenderArgs) -> CmdResult {
    let weights = BlendWeights::from_values(&args.weights).map_err(|e| usage(blend_code(&e)))?;
    if weights.is_all_zero() {
        return Err(usage("ALL_ZERO_WEIGHTS"));
    }
    let g = &args.geometry;
    let sources =
        source_latents(weights.len(), g.latent_dim, args.seed).map_err(|e| usage(e.to_string()))?;
    let latent = blend(&sources, &weights).map_err(|e| usage(blend_code(&e)))?;
    let renderer = Renderer::new(g.latent_dim, g.image_size, g.image_size, g.generator_seed)
        .map_err(|e| usage(e.to_string()))?;
    let image = renderer.render(&latent).map_err(|e| data(e.to_string()))?;
    std::fs::write(&args.out, encode_png(&image)).map_err(|e| data(e.to_string()))?;
    Ok(())
}

fn blend_code(e: &BlendError) -> String {
    match e {
        BlendError::AllZeroWeights => "ALL_ZERO_WEIGHTS".into(),
        other => other.to_string(),
    }
}
