use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use notigate_core::notifier::AdapterTransport;
use notigate_core::time::SystemClock;
use notigate_service::{api, watchers, App, ServiceConfig};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "notigate", about = "User-aware alert and notification gateway")]
struct Args {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Address to listen on, e.g. 127.0.0.1:8080.
    #[arg(long)]
    listen: Option<String>,
    /// Directory holding the command log and snapshots.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    let mut cfg = ServiceConfig::load(args.config.as_deref(), std::env::vars())?;
    if let Some(listen) = args.listen {
        cfg.service.listen = listen;
    }
    if let Some(dir) = args.data_dir {
        cfg.service.data_dir = dir;
    }

    let transport = AdapterTransport::new(Duration::from_secs(cfg.service.http_timeout_secs));
    let app = App::open(&cfg, Arc::new(SystemClock), Box::new(transport))?;
    watchers::spawn_ticker(app.clone(), Duration::from_millis(cfg.service.tick_interval_ms));
    watchers::spawn_watchers(
        app.clone(),
        &cfg.gateway.watchers,
        &cfg.gateway.ingestion,
        Duration::from_secs(cfg.service.http_timeout_secs),
        cfg.service.replay_speed,
    );

    let listener = tokio::net::TcpListener::bind(&cfg.service.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, api::router(app.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    app.snapshot()?;
    tracing::info!("snapshot written, shutting down");
    Ok(())
}
