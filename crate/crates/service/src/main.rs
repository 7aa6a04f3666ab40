use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use vstory_core::backend::{BackendHandle, Backends};
use vstory_core::eval::fixture::FixtureBackend;
use vstory_core::eval::report::{report_csv, InterPairing};
use vstory_core::mock::MockBackend;
use vstory_core::project_io::ProjectDir;
use vstory_core::story::PrefixDims;
use vstory_service::config::{env_map, load_backends, BackendPool, MockPool};
use vstory_service::jobs::{ExpandSettings, JobConfig};
use vstory_service::ops::{
    self, DatasetSettings, DirectParams, EvalParams, OpError, OpEvent, Overrides, TuneSettings,
};
use vstory_service::ServiceConfig;

#[derive(Parser)]
#[command(
    name = "vstory",
    version,
    about = "Shot-aware multi-subject visual story generation"
)]
struct Cli {
    /// Project directory.
    #[arg(long, global = true, default_value = ".")]
    project: PathBuf,
    /// Use the deterministic in-process mock for every backend.
    #[arg(long, global = true)]
    mock: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    mu: Option<usize>,
    /// Backend configuration file.
    #[arg(long, global = true, env = "VSTORY_BACKENDS")]
    backends: Option<PathBuf>,
    /// Machine-readable output; errors go to stderr as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draft scripts and reference images from a story description.
    Direct {
        #[arg(long)]
        description: String,
        #[arg(long, default_value_t = 8)]
        scripts: usize,
    },
    /// Generate every missing keyframe.
    Generate,
    /// Regenerate unlocked keyframes from script T on.
    Regen {
        #[arg(long = "from")]
        from: u32,
    },
    /// Score the story and write report.json.
    Eval {
        /// Embedding fixture file used in place of analysis backends.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Pairing::CrossProduct)]
        pairing: Pairing,
        /// Print the per-story CSV row instead of the report.
        #[arg(long)]
        csv: bool,
    },
    /// Extend each keyframe into a clip and write the concat manifest.
    Expand {
        #[arg(long)]
        frames: Option<u32>,
        #[arg(long)]
        fps: Option<u32>,
        #[arg(long)]
        retries: Option<u32>,
    },
    /// Tune the shot prefix table on a pair dataset.
    Tune {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 4000)]
        iters: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: usize,
    },
    /// Shot-pair dataset tools.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Benchmark tools.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Run the REST service.
    Serve(ServeArgs),
    /// Serve the mock backend over the adapter protocol.
    MockBackend {
        #[arg(long, default_value = "127.0.0.1:8700")]
        bind: String,
        #[arg(long, default_value_t = PrefixDims::default().d)]
        dim: usize,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    Build {
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau: Option<u32>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        max_pairs_per_track: Option<usize>,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    Validate {
        root: PathBuf,
        /// Require the full 100 x 8 layout.
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Args)]
struct ServeArgs {
    /// Store root holding projects/, assets/ and jobs/.
    #[arg(long, default_value = "vstory-data")]
    root: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    #[arg(long, default_value_t = 2)]
    workers: usize,
    #[arg(long, default_value_t = 64)]
    queue: usize,
    #[arg(long, env = "VSTORY_API_TOKEN")]
    token: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pairing {
    CrossProduct,
    MentionMatched,
}

impl From<Pairing> for InterPairing {
    fn from(p: Pairing) -> Self {
        match p {
            Pairing::CrossProduct => InterPairing::CrossProduct,
            Pairing::MentionMatched => InterPairing::MentionMatched,
        }
    }
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            alpha: self.alpha,
            mu: self.mu,
        }
    }

    fn pool(&self) -> Result<BackendPool> {
        let env = env_map();
        if self.mock {
            return Ok(BackendPool::Mock(MockPool::from_env(&env)?));
        }
        let b = load_backends(self.backends.as_deref(), &env)?;
        Ok(BackendPool::Fixed(b))
    }

    fn backends(&self) -> Result<Backends> {
        let dir = ProjectDir::new(&self.project);
        let dim = if dir.exists() {
            dir.load()?.config.shot_prefix_dims.d
        } else {
            PrefixDims::default().d
        };
        Ok(self.pool()?.for_dim(dim))
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e, cli.json);
            ExitCode::FAILURE
        }
    }
}

fn report_error(e: &anyhow::Error, as_json: bool) {
    let (code, details) = match e.downcast_ref::<OpError>() {
        Some(op) => (op.code(), op.details()),
        None => ("ERROR".to_string(), Vec::new()),
    };
    if as_json {
        let body =
            json!({ "error": { "code": code, "message": format!("{e:#}"), "details": details } });
        eprintln!("{body}");
    } else {
        eprintln!("error[{code}]: {e:#}");
        for d in details {
            eprintln!("  {d}");
        }
    }
}

fn emit<T: Serialize>(as_json: bool, value: &T, human: impl FnOnce() -> String) -> Result<()> {
    let mut out = std::io::stdout().lock();
    if as_json {
        serde_json::to_writer(&mut out, value)?;
        writeln!(out)?;
    } else {
        writeln!(out, "{}", human())?;
    }
    Ok(())
}

fn progress(quiet: bool) -> impl FnMut(OpEvent) {
    move |e| {
        if quiet {
            return;
        }
        match e {
            OpEvent::FrameDone {
                index,
                asset,
                reused,
                ..
            } => {
                let how = if reused { "kept" } else { "generated" };
                eprintln!("frame {index} {how} {}", &asset[..12.min(asset.len())]);
            }
            OpEvent::StageDone { stage } => eprintln!("{stage} done"),
            OpEvent::Log { message } => eprintln!("{message}"),
            OpEvent::Progress { .. } => {}
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let dir = ProjectDir::new(&cli.project);
    let mut sink = progress(cli.json);
    match &cli.command {
        Command::Direct {
            description,
            scripts,
        } => {
            let params = DirectParams {
                description: description.clone(),
                n_scripts: *scripts,
                seed: cli.seed,
            };
            let s = ops::direct(&dir, &params, &cli.backends()?, &mut sink)?;
            emit(cli.json, &s, || {
                format!(
                    "{} scripts, {} characters, {} backgrounds ({} repair attempts)",
                    s.scripts, s.characters, s.backgrounds, s.repair_attempts
                )
            })
        }
        Command::Generate => {
            let s = ops::generate(&dir, &cli.backends()?, &cli.overrides(), None, &mut sink)?;
            emit(cli.json, &s, || {
                format!("generated {:?}, kept {:?}", s.generated, s.reused)
            })
        }
        Command::Regen { from } => {
            let s = ops::regenerate(
                &dir,
                *from,
                &cli.backends()?,
                &cli.overrides(),
                None,
                &mut sink,
            )?;
            emit(cli.json, &s, || {
                format!("generated {:?}, kept {:?}", s.generated, s.reused)
            })
        }
        Command::Eval {
            fixtures,
            pairing,
            csv,
        } => {
            let mut backends = if cli.mock || cli.backends.is_some() || fixtures.is_none() {
                cli.backends()?
            } else {
                Backends::new()
            };
            if let Some(path) = fixtures {
                let fx = FixtureBackend::load(path).map_err(OpError::from)?;
                backends.add(BackendHandle::in_process(Arc::new(fx)));
            }
            let params = EvalParams {
                pairing: (*pairing).into(),
            };
            let report = ops::evaluate(&dir, &backends, &params, &mut sink)?;
            if *csv {
                print!("{}", report_csv(std::slice::from_ref(&report)));
                return Ok(());
            }
            emit(cli.json, &report, || {
                let p = &report.per_story;
                let f = |s: &vstory_core::eval::report::Score| match s.value {
                    Some(v) => format!("{v:.4}"),
                    None => "n/a".into(),
                };
                format!(
                    "{}: inter_fg {} inter_bg {} intra_fg {} intra_bg {} avg {} clip_t {} id_sim {} sta {}",
                    report.story_id,
                    f(&p.inter_fg),
                    f(&p.inter_bg),
                    f(&p.intra_fg),
                    f(&p.intra_bg),
                    f(&p.avg_consistency),
                    f(&p.clip_t),
                    f(&p.id_sim),
                    f(&p.sta)
                )
            })
        }
        Command::Expand {
            frames,
            fps,
            retries,
        } => {
            let settings = ExpandSettings {
                duration_frames: *frames,
                fps: *fps,
                seed: cli.seed,
                retries: *retries,
                retry_delay_ms: None,
            };
            let out = ops::expand(&dir, &cli.backends()?, &settings.params(), &mut sink)?;
            emit(cli.json, &out.manifest, || {
                format!(
                    "{} clips, {:.2}s total, gaps {:?}; mux with: {}",
                    out.manifest.clips.len(),
                    out.manifest.total_duration_s,
                    out.manifest.gaps,
                    out.manifest.mux_command.join(" ")
                )
            })
        }
        Command::Tune {
            dataset,
            iters,
            lr,
            batch_size,
            checkpoint_every,
        } => {
            let settings = TuneSettings {
                dataset: dataset.clone(),
                iters: *iters,
                lr: *lr,
                batch_size: *batch_size,
                seed: cli.seed.unwrap_or(0),
                checkpoint_every: *checkpoint_every,
            };
            let s = ops::tune(&dir, &settings, &cli.backends()?, &mut sink)?;
            emit(cli.json, &s, || {
                format!(
                    "{} iterations, loss {:.3e} -> {:.3e}, table {}",
                    s.iterations,
                    s.first_loss,
                    s.final_loss,
                    s.table.display()
                )
            })
        }
        Command::Dataset {
            command:
                DatasetCommand::Build {
                    clips,
                    out,
                    tau,
                    theta,
                    max_pairs_per_track,
                },
        } => {
            let settings = DatasetSettings {
                clips_dir: clips.clone(),
                out_dir: out.clone(),
                tau: *tau,
                theta_id: *theta,
                max_pairs_per_track: *max_pairs_per_track,
                seed: cli.seed.unwrap_or(0),
            };
            let s = ops::build_dataset(
                &settings,
                &cli.pool()?.for_dim(PrefixDims::default().d),
                &mut sink,
            )?;
            emit(cli.json, &s, || {
                format!(
                    "{} pairs from {} clips, {} rejections {:?}",
                    s.pairs, s.clips, s.rejections, s.rejection_reasons
                )
            })
        }
        Command::Bench {
            command: BenchCommand::Validate { root, strict },
        } => {
            let s = ops::bench_validate(root, *strict)?;
            emit(cli.json, &s, || {
                format!(
                    "OK: {} with {} stories, {} scripts",
                    s.name, s.stories, s.scripts
                )
            })
        }
        Command::Serve(args) => serve(cli, args),
        Command::MockBackend { bind, dim } => mock_backend(bind, *dim),
    }
}

fn serve(cli: &Cli, args: &ServeArgs) -> Result<()> {
    let pool = cli.pool()?;
    if let BackendPool::Fixed(b) = &pool {
        if !b.has(vstory_core::backend::Capability::DitDecode) {
            tracing::warn!("no dit_decode backend configured; generation jobs will be refused");
        }
    }
    let config = ServiceConfig {
        root: args.root.clone(),
        jobs: JobConfig {
            workers: args.workers,
            queue_capacity: args.queue,
        },
        token: args.token.clone(),
    };
    let state = vstory_service::start(&config, pool).context("starting service")?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    let result = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .with_context(|| format!("binding {}", args.bind))?;
        announce(&listener)?;
        vstory_service::serve(listener, state.clone(), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        anyhow::Ok(())
    });
    drop(rt);
    state.jobs.shutdown();
    result
}

fn announce(listener: &tokio::net::TcpListener) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "listening on http://{}", listener.local_addr()?)?;
    out.flush()?;
    Ok(())
}

fn mock_backend(bind: &str, dim: usize) -> Result<()> {
    if dim == 0 {
        bail!("--dim must be positive");
    }
    let backend = Arc::new(MockBackend::new(dim));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        announce(&listener)?;
        vstory_service::backend_server::serve(backend, listener).await?;
        anyhow::Ok(())
    })
}
