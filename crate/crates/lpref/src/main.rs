use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use lpref::api::{router, AppState};
use lpref::config::{resolve_path, ServiceConfig, CONFIG_ENV};
use lpref::dispatch::spawn_dispatcher;
use lpref_core::fixtures::generate_fixtures;
use lpref_core::labelmap::{DEFAULT_HEIGHT, DEFAULT_WIDTH};
use lpref_core::referee::Referee;
use lpref_core::worker::{serve_worker, LocalWorker, TcpWorkerClient, WorkerClient};

#[derive(Parser)]
#[command(name = "lpref", version, about = "Accuracy-versus-latency segmentation contest referee")]
struct Cli {
    /// Service configuration (JSON).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service and the evaluation dispatcher.
    Serve,
    /// Run a device worker that evaluates archives sent by the service.
    Worker {
        /// Overrides `worker_listen` from the configuration.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Score a directory of predictions against ground truth.
    Score {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Cumulative inference time over all images, in milliseconds.
        #[arg(long)]
        total_time_ms: f64,
        /// Where to write the JSON report.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Generate a deterministic synthetic test set.
    GenFixtures {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 600)]
        count: usize,
        #[arg(long, default_value_t = DEFAULT_WIDTH)]
        width: u32,
        #[arg(long, default_value_t = DEFAULT_HEIGHT)]
        height: u32,
    },
}

fn load_config(flag: Option<PathBuf>) -> anyhow::Result<ServiceConfig> {
    ServiceConfig::load(&resolve_path(flag)?)
}

fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let worker: Arc<dyn WorkerClient> = match (&cfg.remote_worker, &cfg.worker) {
        (Some(addr), _) => Arc::new(TcpWorkerClient::new(addr.clone())),
        (None, Some(w)) => Arc::new(LocalWorker::new(w.clone())),
        (None, None) => bail!("configure either remote_worker or worker"),
    };
    let referee = Arc::new(Referee::open(&cfg.data_dir, cfg.referee.clone(), &cfg.ground_truth_dir, worker)?);
    let state = Arc::new(AppState::new(
        referee.clone(),
        &cfg.data_dir,
        cfg.teams.clone(),
        cfg.max_archive_bytes,
        Duration::from_secs(cfg.submission_cooldown_secs),
    )?);
    let stop = Arc::new(AtomicBool::new(false));
    let dispatcher = spawn_dispatcher(referee, stop.clone());

    let mut app = router(state);
    if let Some(dir) = &cfg.static_dir {
        app = app.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.listen)
            .await
            .with_context(|| format!("binding {}", cfg.listen))?;
        log::info!("listening on {}", cfg.listen);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })?;
    stop.store(true, Ordering::Relaxed);
    let _ = dispatcher.join();
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Serve => serve(load_config(cli.config)?),
        Command::Worker { listen } => {
            let cfg = load_config(cli.config)?;
            let Some(wcfg) = cfg.worker.clone() else {
                bail!("the worker section is missing from the configuration");
            };
            let addr = listen.unwrap_or(cfg.worker_listen);
            let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
            log::info!("worker listening on {addr}");
            serve_worker(listener, Arc::new(LocalWorker::new(wcfg)))?;
            Ok(())
        }
        Command::Score {
            pred_dir,
            gt_dir,
            total_time_ms,
            out,
        } => {
            let report = lpref::commands::score(&pred_dir, &gt_dir, total_time_ms, &out)?;
            println!("accuracy: {}", report.accuracy);
            println!("mean_inference_time_ms: {}", report.mean_inference_time_ms);
            println!("score: {}", report.score);
            Ok(())
        }
        Command::GenFixtures {
            out_dir,
            seed,
            count,
            width,
            height,
        } => {
            let set = generate_fixtures(seed, count, width, height, &out_dir)?;
            println!(
                "wrote {} images and labels ({}x{}, seed {}) to {}",
                set.manifest.count,
                width,
                height,
                seed,
                out_dir.display()
            );
            Ok(())
        }
    }
}
