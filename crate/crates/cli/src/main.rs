use std::path::PathBuf;
use std::sync::Arc;

use anyecg_cli::commands::{self, BuildTarget, EvalOptions, Generator};
use anyecg_cli::data::{load_records, write_synthetic, Inputs, SynthSizes};
use anyecg_cli::eval::{parse_masks, Protocol};
use anyecg_cli::service::{ChatService, ServiceOptions};
use anyecg_cli::{http, repl, AppConfig, RunDir};
use anyecg_datagen::ClipMode;
use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "anyecg", version, about = "Build datasets, train, evaluate and serve the ECG chat model")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for datasets, checkpoints and reports.
    #[arg(long, global = true, default_value = "anyecg-run")]
    out: PathBuf,
    /// Single-threaded kernels and greedy decoding everywhere.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Reportgen,
    Localization,
    Multiecg,
    Ecgqa,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Short,
    Long,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Template,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Localization,
    Reportgen,
    Ecgqa,
    Multiecg,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic raw corpus under <out>/raw.
    Synth {
        #[arg(long, default_value_t = 96)]
        reports: usize,
        #[arg(long, default_value_t = 20)]
        arrhythmia: usize,
        #[arg(long, default_value_t = 12)]
        patients: usize,
    },
    /// Build a QA dataset into <out>/data.
    Build {
        subset: SubsetArg,
        #[arg(long, value_enum, default_value = "short")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "template")]
        generator: GeneratorArg,
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        reports: Option<PathBuf>,
        #[arg(long)]
        patients: Option<PathBuf>,
        /// ECG-QA source rows.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Contrastive encoder pretraining and language-model warm-up.
    Pretrain,
    /// Run one curriculum stage.
    Train {
        #[arg(long)]
        stage: u8,
        /// Starting checkpoint; defaults to the previous stage's output.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        protocol: ProtocolArg,
        /// Lead masking for localization: all, or a list of none, first, second, random.
        #[arg(long, default_value = "all")]
        mask: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Serve the chat API.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        addr: Option<std::net::SocketAddr>,
        /// Records to preload into the library.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Persist sessions and uploads here.
        #[arg(long)]
        sessions: Option<PathBuf>,
    },
    /// Chat in the terminal.
    Chat {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

fn print<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn open_service(
    cfg: &AppConfig,
    run: &RunDir,
    checkpoint: Option<PathBuf>,
    records: Option<PathBuf>,
    deterministic: bool,
) -> anyhow::Result<ChatService> {
    let ckpt = checkpoint.unwrap_or_else(|| run.checkpoint("stage3"));
    if !ckpt.exists() {
        bail!("checkpoint {} does not exist; train stage 3 or pass --checkpoint", ckpt.display());
    }
    let svc = ChatService::open(&ckpt, ServiceOptions::from_config(&cfg.serve, deterministic))?;
    if let Some(dir) = records {
        for rec in load_records(&dir)? {
            svc.register_record(rec)?;
        }
    }
    Ok(svc)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if cli.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let run = RunDir::new(&cli.out);
    let mut inputs = Inputs::resolve(&cfg.data, &run);

    match cli.command {
        Command::Synth {
            reports,
            arrhythmia,
            patients,
        } => {
            let sizes = SynthSizes {
                reports,
                arrhythmia,
                patients,
            };
            print(&write_synthetic(&inputs, &sizes, cfg.seed)?)?;
        }
        Command::Build {
            subset,
            mode,
            generator,
            records,
            reports,
            patients,
            input,
        } => {
            if let Some(p) = records {
                inputs.records = p;
            }
            if let Some(p) = reports {
                inputs.reports = p;
            }
            if let Some(p) = patients {
                inputs.patients = p;
            }
            if let Some(p) = input {
                inputs.ecgqa = p;
            }
            let mode = match mode {
                ModeArg::Short => ClipMode::Short,
                ModeArg::Long => ClipMode::Long,
            };
            let target = match subset {
                SubsetArg::Reportgen => BuildTarget::Reportgen,
                SubsetArg::Localization => BuildTarget::Localization(mode),
                SubsetArg::Multiecg => BuildTarget::Multiecg,
                SubsetArg::Ecgqa => BuildTarget::Ecgqa,
                SubsetArg::All => BuildTarget::All,
            };
            let generator = match generator {
                GeneratorArg::Template => Generator::Template,
                GeneratorArg::Http => Generator::Http,
            };
            print(&commands::build(&cfg, &run, &inputs, target, generator)?)?;
        }
        Command::Pretrain => print(&commands::pretrain(&cfg, &run, &inputs)?)?,
        Command::Train { stage, init } => print(&commands::train(&cfg, &run, &inputs, stage, init)?)?,
        Command::Eval {
            protocol,
            mask,
            checkpoint,
        } => {
            let protocol = match protocol {
                ProtocolArg::Localization => Protocol::Localization,
                ProtocolArg::Reportgen => Protocol::Reportgen,
                ProtocolArg::Ecgqa => Protocol::Ecgqa,
                ProtocolArg::Multiecg => Protocol::Multiecg,
            };
            let opts = EvalOptions {
                checkpoint: checkpoint.unwrap_or_else(|| run.checkpoint("stage3")),
                masks: parse_masks(&mask)?,
                judge: None,
            };
            let summary = commands::eval(&cfg, &run, &inputs, protocol, &opts)?;
            if let Some(t) = &summary.table {
                println!("{t}");
            }
            print(&summary)?;
        }
        Command::Serve {
            checkpoint,
            addr,
            records,
            sessions,
        } => {
            if sessions.is_some() {
                cfg.serve.sessions_dir = sessions;
            }
            let addr = addr.unwrap_or(cfg.serve.addr);
            let svc = Arc::new(open_service(&cfg, &run, checkpoint, records, cli.deterministic)?);
            let app = http::router(svc, cfg.serve.queue, cfg.serve.max_upload_bytes);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                http::serve(listener, app, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
                anyhow::Ok(())
            })?;
        }
        Command::Chat { checkpoint, records } => {
            let svc = open_service(&cfg, &run, checkpoint, records, cli.deterministic)?;
            let stdin = std::io::stdin();
            repl::run_repl(&svc, stdin.lock(), std::io::stdout())?;
        }
    }
    Ok(())
}
