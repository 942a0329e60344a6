use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use sms_service::{router, AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "sms-service", version, about = "Soft Mumford-Shah segmentation service")]
struct Args {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1")]
    bind: std::net::IpAddr,
    /// Persist sessions and finished runs here and reload them on start.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Largest accepted image, in pixels.
    #[arg(long, default_value_t = 4096 * 4096)]
    max_pixels: usize,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let state = AppState::load(ServiceConfig {
        max_pixels: args.max_pixels,
        data_dir: args.data_dir,
    })?;
    let addr = SocketAddr::new(args.bind, args.port);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
