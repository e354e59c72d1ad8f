use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prompt_artisan::backend::BackendSpec;
use prompt_artisan::sampler::{SamplerConfig, SamplerOverrides};
use prompt_artisan_cli::{bench, edit, BenchArgs, CliError, EditArgs, EditOutputs, PairArg, EXIT_BACKEND, EXIT_INVALID};
use prompt_artisan_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "prompt-artisan", version, about = "Multi-instruction region image editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit one image with one or more mask-prompt pairs.
    Edit(EditCmd),
    /// Benchmark sweeps.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Run the HTTP edit service. Unset flags fall back to PROMPT_ARTISAN_* variables.
    Serve(ServeCmd),
}

#[derive(Args)]
struct EditCmd {
    #[arg(long)]
    image: PathBuf,
    /// MASK.png:PROMPT:ORDER[:GROUP]; repeat once per instruction.
    #[arg(long = "pair", required = true)]
    pairs: Vec<PairArg>,
    #[arg(long)]
    steps: Option<usize>,
    /// Blend the background while t > S.
    #[arg(long)]
    blend_stop: Option<usize>,
    #[arg(long)]
    text_scale: Option<f64>,
    #[arg(long)]
    image_scale: Option<f64>,
    /// Attention boost weight w.
    #[arg(long)]
    boost: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "toy")]
    backend: String,
    #[arg(long, default_value_t = 0)]
    toy_seed: u64,
    #[arg(long)]
    no_cross_control: bool,
    #[arg(long)]
    no_self_control: bool,
    #[arg(long)]
    no_boost: bool,
    /// Write per-step, per-site attention summaries as JSON lines.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
    /// Print the token roles of each prompt as JSON lines.
    #[arg(long)]
    dump_roles: bool,
    /// Output PNG; the resolved config goes next to it as .json.
    #[arg(long)]
    out: PathBuf,
}

impl EditCmd {
    fn config(&self) -> SamplerConfig {
        let mut cfg = SamplerOverrides {
            steps: self.steps,
            blend_stop: self.blend_stop,
            text_scale: self.text_scale,
            image_scale: self.image_scale,
            seed: self.seed,
            ..Default::default()
        }
        .apply(&SamplerConfig::default());
        if let Some(w) = self.boost {
            cfg.cacm.boost_weight = w;
        }
        cfg.cacm.enable_cross &= !self.no_cross_control;
        cfg.cacm.enable_self &= !self.no_self_control;
        cfg.cacm.enable_boost &= !self.no_boost;
        cfg
    }
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Run every method over every case and write report.json and report.md.
    Run {
        #[arg(long)]
        cases: PathBuf,
        /// Methods YAML; defaults to the four ablation arms with the toy scorer.
        #[arg(long)]
        methods: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write every edited image to DIR/<case>/<method>.png.
        #[arg(long)]
        images: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeCmd {
    #[arg(long)]
    addr: Option<SocketAddr>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Request size limit in bytes.
    #[arg(long)]
    max_payload: Option<usize>,
}

fn serve(cmd: ServeCmd) -> Result<(), CliError> {
    let mut cfg = ServiceConfig::from_env().map_err(CliError::invalid)?;
    if let Some(v) = cmd.addr {
        cfg.addr = v;
    }
    if let Some(v) = cmd.store {
        cfg.store = v;
    }
    if let Some(name) = cmd.backend {
        let seed = match cfg.backend {
            BackendSpec::Toy { seed } => seed,
            BackendSpec::Ip2p(_) => 0,
        };
        cfg.backend = BackendSpec::from_name(&name, seed)?;
    }
    if let Some(v) = cmd.workers {
        cfg.workers = v;
    }
    if let Some(v) = cmd.max_payload {
        cfg.max_payload = v;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::backend(e.to_string()))?;
    rt.block_on(prompt_artisan_service::serve(cfg))
        .map_err(|e| CliError::backend(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Edit(cmd) => {
            let args = EditArgs {
                image: cmd.image.clone(),
                pairs: cmd.pairs.clone(),
                config: cmd.config(),
                backend: BackendSpec::from_name(&cmd.backend, cmd.toy_seed)?,
            };
            let outputs = EditOutputs {
                out: cmd.out.clone(),
                dump_attention: cmd.dump_attention.clone(),
                dump_roles: cmd.dump_roles,
            };
            edit(&args, &outputs, &mut std::io::stdout().lock())?;
            eprintln!("wrote {}", cmd.out.display());
            Ok(())
        }
        Command::Bench(BenchCmd::Run {
            cases,
            methods,
            out,
            images,
        }) => {
            let (json, md) = bench(&BenchArgs {
                cases,
                methods,
                out,
                images,
            })?;
            eprintln!("wrote {} and {}", json.display(), md.display());
            Ok(())
        }
        Command::Serve(cmd) => serve(cmd),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            debug_assert!(e.code == EXIT_INVALID || e.code == EXIT_BACKEND);
            ExitCode::from(e.code)
        }
    }
}
