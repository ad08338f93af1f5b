use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use gitfarm_gateway::GatewayConfig;
use gitfarm_statestore::StoreConfig;
use tokio::signal::unix::{signal, SignalKind};

/// Runs the gitfarm gateway. SIGHUP reloads the client table from the
/// config file.
#[derive(Debug, Parser)]
#[command(name = "gitfarm-gateway", version)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `listen` from the config file.
    #[arg(long)]
    listen: Option<SocketAddr>,
    /// Overrides `statestore` from the config file.
    #[arg(long)]
    statestore: Option<String>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    let mut config = GatewayConfig::load(&args.config)?;
    if let Some(l) = args.listen {
        config.listen = l;
    }
    if let Some(s) = args.statestore {
        config.statestore = s;
    }
    let store = gitfarm_statestore::connect(&config.statestore, StoreConfig::default())?;
    let handle = gitfarm_gateway::start(config, store).await?;
    let mut hup = signal(SignalKind::hangup())?;
    loop {
        tokio::select! {
            _ = tokio::signal::ctrl_c() => break,
            _ = hup.recv() => match GatewayConfig::load(&args.config) {
                Ok(c) => {
                    if let Err(e) = handle.gateway().reload(&c) {
                        tracing::error!(error = %e, "reload rejected");
                    }
                }
                Err(e) => tracing::error!(error = %e, "reload failed"),
            },
        }
    }
    handle.shutdown().await;
    Ok(())
}
