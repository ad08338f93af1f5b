use std::path::PathBuf;

use clap::Parser;
use gitfarm_backend::BackendConfig;
use gitfarm_statestore::StoreConfig;

/// Runs a gitfarm backend node.
#[derive(Debug, Parser)]
#[command(name = "gitfarm-backend", version)]
struct Args {
    #[arg(long)]
    config: PathBuf,
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
    let mut config = BackendConfig::load(&args.config)?;
    if let Some(s) = args.statestore {
        config.statestore = s;
    }
    let store = gitfarm_statestore::connect(&config.statestore, StoreConfig::default())?;
    let handle = gitfarm_backend::start(config, store).await?;
    tokio::signal::ctrl_c().await?;
    handle.shutdown().await;
    Ok(())
}
