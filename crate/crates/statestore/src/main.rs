use std::net::SocketAddr;

use clap::Parser;

/// Networked key-value server backing shared gitfarm gateway state.
#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7300")]
    listen: SocketAddr,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let args = Args::parse();
    let server = gitfarm_statestore::kv::serve(args.listen).await?;
    tracing::info!(addr = %server.addr(), "statestore listening");
    tokio::signal::ctrl_c().await?;
    server.shutdown();
    Ok(())
}
