//! Blocking client implementing the instrument interface over the line protocol.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use log::debug;

use magscan::instrument::{Instrument, InstrumentError, Lia, ScanTarget};
use magscan::trace::{Trace, TraceChannel};
use magscan::Axis;

use crate::command::Command;
use crate::endpoint::Endpoint;

pub const CONNECT_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub timeout: Duration,
    pub backoff: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(120), backoff: Duration::from_millis(100) }
    }
}

enum Stream {
    Tcp(TcpStream),
    #[cfg(unix)]
    Unix(std::os::unix::net::UnixStream),
}

impl Stream {
    fn open(endpoint: &Endpoint, timeout: Duration) -> io::Result<Stream> {
        let s = match endpoint {
            Endpoint::Tcp(addr) => {
                let s = TcpStream::connect(addr.as_str())?;
                s.set_nodelay(true)?;
                s.set_read_timeout(Some(timeout))?;
                s.set_write_timeout(Some(timeout))?;
                Stream::Tcp(s)
            }
            #[cfg(unix)]
            Endpoint::Unix(path) => {
                let s = std::os::unix::net::UnixStream::connect(path)?;
                s.set_read_timeout(Some(timeout))?;
                s.set_write_timeout(Some(timeout))?;
                Stream::Unix(s)
            }
            #[cfg(not(unix))]
            Endpoint::Unix(_) => return Err(io::Error::new(io::ErrorKind::Unsupported, "local sockets need Unix")),
        };
        Ok(s)
    }

    fn try_clone(&self) -> io::Result<Stream> {
        Ok(match self {
            Stream::Tcp(s) => Stream::Tcp(s.try_clone()?),
            #[cfg(unix)]
            Stream::Unix(s) => Stream::Unix(s.try_clone()?),
        })
    }
}

impl Read for Stream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.read(buf),
            #[cfg(unix)]
            Stream::Unix(s) => s.read(buf),
        }
    }
}

impl Write for Stream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.write(buf),
            #[cfg(unix)]
            Stream::Unix(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => s.flush(),
            #[cfg(unix)]
            Stream::Unix(s) => s.flush(),
        }
    }
}

/// One connection to an instrument server.
///
/// Only connecting is retried. A command that fails mid-flight is reported,
/// not resent: the server may already have executed it.
pub struct Client {
    reader: BufReader<Stream>,
    writer: Stream,
    b_axis: Axis,
    closed: bool,
}

fn connection(e: io::Error) -> InstrumentError {
    InstrumentError::Connection(e.to_string())
}

fn protocol(line: &str, message: impl Into<String>) -> InstrumentError {
    InstrumentError::Protocol { line: line.to_string(), message: message.into() }
}

fn parse_num(line: &str, s: &str) -> Result<f64, InstrumentError> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(protocol(line, format!("`{s}` is not a finite number"))),
    }
}

impl Client {
    pub fn connect(endpoint: &Endpoint) -> Result<Client, InstrumentError> {
        Self::connect_with(endpoint, &ClientOptions::default())
    }

    pub fn connect_with(endpoint: &Endpoint, opts: &ClientOptions) -> Result<Client, InstrumentError> {
        let mut delay = opts.backoff;
        let mut attempt = 1;
        let stream = loop {
            match Stream::open(endpoint, opts.timeout) {
                Ok(s) => break s,
                Err(e) if attempt < CONNECT_ATTEMPTS => {
                    debug!("connect to {endpoint} failed ({e}), retry {attempt}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => {
                    return Err(InstrumentError::Connection(format!(
                        "{endpoint}: {e} after {CONNECT_ATTEMPTS} attempts"
                    )))
                }
            }
        };
        let writer = stream.try_clone().map_err(connection)?;
        Ok(Client { reader: BufReader::new(stream), writer, b_axis: Axis::Z, closed: false })
    }

    fn read_line(&mut self) -> Result<String, InstrumentError> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Err(InstrumentError::Connection("server closed the connection".into())),
            Ok(_) => Ok(line.trim_end_matches(['\n', '\r']).to_string()),
            Err(e) => Err(connection(e)),
        }
    }

    fn send(&mut self, cmd: &Command) -> Result<String, InstrumentError> {
        if self.closed {
            return Err(InstrumentError::SessionClosed);
        }
        let text = format!("{cmd}\n");
        self.writer.write_all(text.as_bytes()).map_err(connection)?;
        self.writer.flush().map_err(connection)?;
        let line = self.read_line()?;
        if let Some(rest) = line.strip_prefix("ERR ") {
            let (code, msg) = rest.split_once(' ').unwrap_or((rest, ""));
            let msg = msg.to_string();
            return Err(match code {
                "400" => InstrumentError::BadRequest(msg),
                "404" => InstrumentError::NotAvailable(msg),
                "409" => InstrumentError::Busy(msg),
                "422" => InstrumentError::OutOfRange(msg),
                "500" => InstrumentError::Fault(msg),
                _ => protocol(&line, "unknown error code"),
            });
        }
        Ok(line)
    }

    fn expect_ok(&mut self, cmd: Command) -> Result<(), InstrumentError> {
        let line = self.send(&cmd)?;
        if line == "OK" {
            Ok(())
        } else {
            Err(protocol(&line, "expected OK"))
        }
    }

    fn expect_val(&mut self, cmd: Command) -> Result<String, InstrumentError> {
        let line = self.send(&cmd)?;
        match line.strip_prefix("VAL ") {
            Some(v) => Ok(v.to_string()),
            None => Err(protocol(&line, "expected VAL")),
        }
    }

    /// Ends the session. Later calls fail with `SessionClosed`.
    pub fn quit(&mut self) -> Result<(), InstrumentError> {
        let r = self.expect_ok(Command::Quit);
        self.closed = true;
        r
    }
}

impl Instrument for Client {
    fn identify(&mut self) -> Result<String, InstrumentError> {
        self.expect_val(Command::Identify)
    }

    fn set_coil(&mut self, axis: Axis, volts: f64) -> Result<(), InstrumentError> {
        self.expect_ok(Command::SetCoil { axis, volts })
    }

    fn set_rf_detuning(&mut self, khz: f64) -> Result<(), InstrumentError> {
        self.expect_ok(Command::SetRfDetuning { khz })
    }

    fn set_rf_modulation(&mut self, amplitude: f64, frequency: f64) -> Result<(), InstrumentError> {
        self.expect_ok(Command::SetRfModulation { amplitude, frequency })
    }

    fn set_b_modulation(&mut self, axis: Axis, amplitude: f64, frequency: f64) -> Result<(), InstrumentError> {
        self.expect_ok(Command::SetBModulation { axis, amplitude, frequency })?;
        self.b_axis = axis;
        Ok(())
    }

    fn read(&mut self, lia: Lia) -> Result<f64, InstrumentError> {
        let v = self.expect_val(Command::ReadLia(lia))?;
        parse_num(&format!("VAL {v}"), &v)
    }

    fn scan(
        &mut self,
        target: ScanTarget,
        start: f64,
        stop: f64,
        points: usize,
        lia: Lia,
    ) -> Result<Trace, InstrumentError> {
        let head = self.send(&Command::Scan { target, start, stop, points, lia })?;
        let n = head
            .strip_prefix("TRACE ")
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| protocol(&head, "expected TRACE <points>"))?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let line = self.read_line()?;
            let mut it = line.split(' ');
            let (Some(c), Some(v), None) = (it.next(), it.next(), it.next()) else {
                return Err(protocol(&line, "expected `<control> <value>`"));
            };
            samples.push((parse_num(&line, c)?, parse_num(&line, v)?));
        }
        let channel = match lia {
            Lia::One => TraceChannel::Cpt,
            Lia::Two => TraceChannel::mm(self.b_axis),
        };
        Trace::new(channel, target.scan_axis(), target.unit(), samples)
            .map_err(|e| protocol(&head, format!("trace rejected: {e}")))
    }
}
