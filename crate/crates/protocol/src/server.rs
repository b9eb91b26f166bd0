//! Line-protocol server over TCP or a Unix socket.

use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use log::{debug, info, warn};
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use magscan::instrument::{Instrument, InstrumentError};

use crate::command::{Command, Reply, MAX_LINE};
use crate::endpoint::Endpoint;

/// Shared instrument plus the exclusive control session.
pub struct Backend {
    identity: String,
    instrument: Mutex<Box<dyn Instrument + Send>>,
    session: Mutex<Option<u64>>,
}

impl Backend {
    pub fn new(mut instrument: Box<dyn Instrument + Send>) -> Result<Self, InstrumentError> {
        let identity = instrument.identify()?;
        Ok(Self { identity, instrument: Mutex::new(instrument), session: Mutex::new(None) })
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    /// Runs one command for connection `conn`. The flag is true when the
    /// connection should close after the reply.
    pub fn execute(&self, conn: u64, cmd: Command) -> (Reply, bool) {
        match cmd {
            Command::Identify => return (Reply::Text(self.identity.clone()), false),
            Command::Quit => {
                self.release(conn);
                return (Reply::Ok, true);
            }
            _ => {}
        }
        {
            let mut s = self.session.lock().unwrap_or_else(|e| e.into_inner());
            match *s {
                Some(owner) if owner != conn => {
                    return (Reply::error(409, format!("control session held by connection {owner}")), false)
                }
                _ => *s = Some(conn),
            }
        }
        let mut inst = self.instrument.lock().unwrap_or_else(|e| e.into_inner());
        let result = match cmd {
            Command::SetCoil { axis, volts } => inst.set_coil(axis, volts).map(|_| Reply::Ok),
            Command::SetRfDetuning { khz } => inst.set_rf_detuning(khz).map(|_| Reply::Ok),
            Command::SetRfModulation { amplitude, frequency } => {
                inst.set_rf_modulation(amplitude, frequency).map(|_| Reply::Ok)
            }
            Command::SetBModulation { axis, amplitude, frequency } => {
                inst.set_b_modulation(axis, amplitude, frequency).map(|_| Reply::Ok)
            }
            Command::ReadLia(lia) => inst.read(lia).map(Reply::Value),
            Command::Scan { target, start, stop, points, lia } => {
                inst.scan(target, start, stop, points, lia).map(|t| Reply::Trace(t.samples))
            }
            Command::Identify | Command::Quit => unreachable!(),
        };
        (result.unwrap_or_else(|e| Reply::from_instrument_error(&e)), false)
    }

    pub fn release(&self, conn: u64) {
        let mut s = self.session.lock().unwrap_or_else(|e| e.into_inner());
        if *s == Some(conn) {
            *s = None;
        }
    }
}

enum LineRead {
    Line,
    TooLong,
    Eof,
}

/// Reads one `\n`-terminated line into `buf`, keeping at most `MAX_LINE` bytes.
async fn read_line<R: AsyncBufRead + Unpin>(r: &mut R, buf: &mut Vec<u8>) -> io::Result<LineRead> {
    buf.clear();
    let mut overflow = false;
    loop {
        let chunk = r.fill_buf().await?;
        if chunk.is_empty() {
            return Ok(match (buf.is_empty() && !overflow, overflow) {
                (true, _) => LineRead::Eof,
                (false, true) => LineRead::TooLong,
                (false, false) => LineRead::Line,
            });
        }
        let (take, done) = match chunk.iter().position(|&b| b == b'\n') {
            Some(i) => (i, true),
            None => (chunk.len(), false),
        };
        if buf.len() + take > MAX_LINE {
            overflow = true;
        } else {
            buf.extend_from_slice(&chunk[..take]);
        }
        r.consume(if done { take + 1 } else { take });
        if done {
            return Ok(if overflow { LineRead::TooLong } else { LineRead::Line });
        }
    }
}

async fn handle_connection<S>(stream: S, backend: Arc<Backend>, conn: u64, mut shutdown: watch::Receiver<bool>)
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let (rd, mut wr) = tokio::io::split(stream);
    let mut rd = BufReader::new(rd);
    let mut buf = Vec::new();
    loop {
        let read = tokio::select! {
            r = read_line(&mut rd, &mut buf) => r,
            _ = shutdown.changed() => break,
        };
        let (reply, close) = match read {
            Err(e) => {
                debug!("connection {conn}: read error: {e}");
                break;
            }
            Ok(LineRead::Eof) => break,
            Ok(LineRead::TooLong) => (Reply::error(400, format!("line longer than {MAX_LINE} bytes")), false),
            Ok(LineRead::Line) => {
                let line = match std::str::from_utf8(&buf) {
                    Ok(s) => s.trim_end_matches('\r'),
                    Err(_) => "\u{fffd}",
                };
                debug!("connection {conn}: {line}");
                match Command::parse(line) {
                    Err(e) => (Reply::error(400, e.0), false),
                    Ok(cmd) => {
                        let b = backend.clone();
                        match tokio::task::spawn_blocking(move || b.execute(conn, cmd)).await {
                            Ok(r) => r,
                            Err(e) => (Reply::error(500, format!("command panicked: {e}")), true),
                        }
                    }
                }
            }
        };
        if let Err(e) = wr.write_all(reply.to_wire().as_bytes()).await {
            debug!("connection {conn}: write error: {e}");
            break;
        }
        if close {
            break;
        }
    }
    let _ = wr.shutdown().await;
    backend.release(conn);
    debug!("connection {conn} closed");
}

/// A running server. Dropping the handle leaves the server running until the
/// runtime stops; call `shutdown` to stop it deterministically.
pub struct ServerHandle {
    endpoint: Endpoint,
    stop: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl ServerHandle {
    /// The bound endpoint, with a TCP port of 0 resolved.
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        let _ = self.task.await;
    }

    /// Waits until the accept loop ends.
    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

/// Binds `endpoint` and starts serving `backend` on the current runtime.
pub async fn serve(endpoint: &Endpoint, backend: Arc<Backend>) -> io::Result<ServerHandle> {
    let (stop, stop_rx) = watch::channel(false);
    let ids = Arc::new(AtomicU64::new(1));
    match endpoint {
        Endpoint::Tcp(addr) => {
            let listener = tokio::net::TcpListener::bind(addr.as_str()).await?;
            let bound = Endpoint::Tcp(listener.local_addr()?.to_string());
            info!("serving {} on {bound}", backend.identity());
            let task = tokio::spawn(async move {
                let mut rx = stop_rx.clone();
                loop {
                    let accepted = tokio::select! {
                        a = listener.accept() => a,
                        _ = rx.changed() => break,
                    };
                    match accepted {
                        Ok((stream, peer)) => {
                            let _ = stream.set_nodelay(true);
                            let id = ids.fetch_add(1, Ordering::Relaxed);
                            debug!("connection {id} from {peer}");
                            tokio::spawn(handle_connection(stream, backend.clone(), id, stop_rx.clone()));
                        }
                        Err(e) => warn!("accept failed: {e}"),
                    }
                }
            });
            Ok(ServerHandle { endpoint: bound, stop, task })
        }
        #[cfg(unix)]
        Endpoint::Unix(path) => {
            let listener = tokio::net::UnixListener::bind(path)?;
            let path = path.clone();
            info!("serving {} on {endpoint}", backend.identity());
            let task = tokio::spawn(async move {
                let mut rx = stop_rx.clone();
                loop {
                    let accepted = tokio::select! {
                        a = listener.accept() => a,
                        _ = rx.changed() => break,
                    };
                    match accepted {
                        Ok((stream, _)) => {
                            let id = ids.fetch_add(1, Ordering::Relaxed);
                            debug!("connection {id} on local socket");
                            tokio::spawn(handle_connection(stream, backend.clone(), id, stop_rx.clone()));
                        }
                        Err(e) => warn!("accept failed: {e}"),
                    }
                }
                let _ = std::fs::remove_file(&path);
            });
            Ok(ServerHandle { endpoint: endpoint.clone(), stop, task })
        }
        #[cfg(not(unix))]
        Endpoint::Unix(_) => Err(io::Error::new(io::ErrorKind::Unsupported, "local sockets need a Unix platform")),
    }
}
