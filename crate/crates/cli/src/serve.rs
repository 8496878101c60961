use std::net::SocketAddr;

use serde::Serialize;
use telecare_core::config::RunConfig;
use telecare_core::gateway::Gateway;
use telecare_core::http;

use crate::exit::{print_json, CliError, Status};
use crate::ServeArgs;

#[derive(Serialize)]
struct Listening {
    listening: String,
    data_dir: String,
}

pub fn run(args: ServeArgs, json: bool) -> Result<Status, CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Input(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(bind) = args.bind {
        config.bind = bind;
    }
    if let Some(dir) = args.data_dir {
        config.data_dir = dir;
    }
    config
        .validate()
        .map_err(|e| CliError::Input(e.to_string()))?;
    let addr = config
        .bind_addr()
        .map_err(|e| CliError::Input(e.to_string()))?;
    let clock = config
        .clock
        .build()
        .map_err(|e| CliError::Input(e.to_string()))?;

    let sinks = config.build_sinks(&clock);
    let gateway = Gateway::open(
        &config.data_dir,
        config.gateway_config(),
        clock.clone(),
        sinks,
    )
    .map_err(|e| CliError::Runtime(format!("data directory {}: {e}", config.data_dir.display())))?;
    let started = clock.now();
    for w in &config.outages {
        gateway.faults().add_window(
            started + chrono::Duration::seconds(w.start_secs as i64),
            started + chrono::Duration::seconds(w.end_secs as i64),
        );
    }

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("starting runtime: {e}")))?;
    let result = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))?;
        let bound: SocketAddr = listener
            .local_addr()
            .map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))?;
        let url = format!("http://{bound}");
        if json {
            print_json(&Listening {
                listening: url,
                data_dir: config.data_dir.display().to_string(),
            })?;
        } else {
            println!("listening on {url}");
        }
        tracing::info!(%bound, data_dir = %config.data_dir.display(), "gateway started");
        http::serve(
            gateway.clone(),
            listener,
            config.http_config(),
            shutdown_signal(),
        )
        .await
        .map_err(|e| CliError::Runtime(format!("server: {e}")))
    });
    tracing::info!("shutting down");
    gateway.shutdown();
    result.map(|()| Status::Clean)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = terminate => {}
    }
}
