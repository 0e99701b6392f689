//! Entry point of a worker process.

use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use super::config::TcpMode;
use super::{Job, NetError, WorkerSpec};
use crate::channel::{run_block, RunStats, RxBridge, TxBridge};
use crate::pacing::RateLimiter;
use crate::shmq::{Consumer, Producer};
use crate::tcpbridge;

/// Raises the returned flag once stdin reaches end of file.
pub fn stop_on_stdin_eof() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    thread::spawn(move || {
        let mut sink = [0u8; 256];
        let mut stdin = std::io::stdin().lock();
        while matches!(stdin.read(&mut sink), Ok(n) if n > 0) {}
        flag.store(true, Ordering::Relaxed);
    });
    stop
}

pub fn load_spec(path: &Path) -> Result<WorkerSpec, NetError> {
    let text = std::fs::read(path).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&text).map_err(|e| NetError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

/// Runs a worker until `stop` is raised.
pub fn run(spec: &WorkerSpec, stop: Arc<AtomicBool>) -> Result<Option<RunStats>, NetError> {
    match &spec.job {
        Job::Block {
            spec: block,
            inputs,
            outputs,
            max_rate_hz,
        } => {
            let mut model = block.build()?;
            let mut rx = inputs
                .iter()
                .map(|p| Consumer::open(p, false).map(RxBridge::new))
                .collect::<Result<Vec<_>, _>>()?;
            let mut tx = outputs
                .iter()
                .map(|p| Producer::open(p, false).map(TxBridge::new))
                .collect::<Result<Vec<_>, _>>()?;
            let mut limiter = max_rate_hz.map(RateLimiter::new);
            let stats = run_block(&mut model, &mut rx, &mut tx, limiter.as_mut(), &stop);
            log::debug!("{}: {stats:?}", spec.name);
            Ok(Some(stats))
        }
        Job::Tcp { endpoint, bindings } => {
            let bridge = match endpoint.mode {
                TcpMode::Server => tcpbridge::serve(endpoint.port, bindings, &stop),
                TcpMode::Client => tcpbridge::connect(&endpoint.host, endpoint.port, bindings, &stop),
            };
            let bridge = match bridge {
                Err(tcpbridge::BridgeError::Stopped) => return Ok(None),
                other => other?,
            };
            let stats = bridge.pump(stop)?;
            log::debug!("{}: {stats:?}", spec.name);
            Ok(None)
        }
    }
}
