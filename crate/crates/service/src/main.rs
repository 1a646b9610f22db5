use finecontrol::diffusion::NoiseSchedule;
use finecontrol_service::{router, start, Config};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = Config::from_env()?;
    let schedule = NoiseSchedule::default();
    let state = start(&config, config.factory(&schedule)?, schedule)?;
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", config.port)).await?;
    log::info!(
        "listening on {} with {} worker(s), data in {}",
        listener.local_addr()?,
        config.workers,
        config.data_dir.display()
    );
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
