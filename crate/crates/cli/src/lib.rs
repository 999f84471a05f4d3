//! HTTP front ends for the scenecraft engine.

pub mod api;
pub mod mock_server;

use std::net::SocketAddr;

use axum::Router;

/// Serves `app` until ctrl-c.
pub async fn serve(app: Router, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
