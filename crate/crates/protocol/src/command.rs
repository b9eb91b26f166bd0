//! Wire grammar: one command per line, one reply block per command.

use std::fmt;

use magscan::instrument::{InstrumentError, Lia, ScanTarget};
use magscan::trace::fmt_num;
use magscan::Axis;

/// Longest accepted request line, bytes, excluding the newline.
pub const MAX_LINE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Command {
    SetCoil { axis: Axis, volts: f64 },
    SetRfDetuning { khz: f64 },
    SetRfModulation { amplitude: f64, frequency: f64 },
    SetBModulation { axis: Axis, amplitude: f64, frequency: f64 },
    ReadLia(Lia),
    Scan { target: ScanTarget, start: f64, stop: f64, points: usize, lia: Lia },
    Identify,
    Quit,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Ok,
    Value(f64),
    Text(String),
    Trace(Vec<(f64, f64)>),
    Err { code: u16, message: String },
}

impl Reply {
    pub fn error(code: u16, message: impl Into<String>) -> Self {
        // messages stay on one line
        let message: String = message.into().chars().map(|c| if c.is_control() { ' ' } else { c }).collect();
        Reply::Err { code, message }
    }

    pub fn from_instrument_error(e: &InstrumentError) -> Self {
        let code = match e {
            InstrumentError::BadRequest(_) | InstrumentError::Protocol { .. } => 400,
            InstrumentError::NotAvailable(_) => 404,
            InstrumentError::Busy(_) => 409,
            InstrumentError::OutOfRange(_) => 422,
            _ => 500,
        };
        Reply::error(code, e.to_string())
    }

    /// Encoded reply block including the trailing newline.
    pub fn to_wire(&self) -> String {
        match self {
            Reply::Ok => "OK\n".to_string(),
            Reply::Value(v) => format!("VAL {}\n", fmt_num(*v)),
            Reply::Text(s) => format!("VAL {s}\n"),
            Reply::Trace(rows) => {
                let mut out = format!("TRACE {}\n", rows.len());
                for (c, v) in rows {
                    out.push_str(&fmt_num(*c));
                    out.push(' ');
                    out.push_str(&fmt_num(*v));
                    out.push('\n');
                }
                out
            }
            Reply::Err { code, message } => format!("ERR {code} {message}\n"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError(pub String);

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError(msg.into()))
}

fn number(tok: Option<&str>, what: &str) -> Result<f64, ParseError> {
    let Some(t) = tok else { return err(format!("missing {what}")) };
    // decimal only: reject inf/nan spellings and hex-ish junk
    let decimal = t.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'+' | b'-' | b'.' | b'e' | b'E'));
    match t.parse::<f64>() {
        Ok(v) if decimal && v.is_finite() => Ok(v),
        _ => err(format!("{what} `{t}` is not a finite decimal number")),
    }
}

fn axis(tok: Option<&str>) -> Result<Axis, ParseError> {
    match tok {
        Some("X") => Ok(Axis::X),
        Some("Y") => Ok(Axis::Y),
        Some("Z") => Ok(Axis::Z),
        Some(t) => err(format!("axis `{t}` is not X, Y or Z")),
        None => err("missing axis"),
    }
}

fn lia(tok: Option<&str>) -> Result<Lia, ParseError> {
    match tok {
        Some("1") => Ok(Lia::One),
        Some("2") => Ok(Lia::Two),
        Some(t) => err(format!("lock-in `{t}` is not 1 or 2")),
        None => err("missing lock-in number"),
    }
}

fn keyword(tok: Option<&str>, want: &str) -> Result<(), ParseError> {
    match tok {
        Some(t) if t == want => Ok(()),
        Some(t) => err(format!("expected `{want}`, got `{t}`")),
        None => err(format!("missing `{want}`")),
    }
}

impl Command {
    pub fn parse(line: &str) -> Result<Command, ParseError> {
        let mut toks = line.split_ascii_whitespace();
        let cmd = match toks.next() {
            None => return err("empty command"),
            Some("IDN?") => Command::Identify,
            Some("QUIT") => Command::Quit,
            Some("SET") => match toks.next() {
                Some("COIL") => {
                    let axis = axis(toks.next())?;
                    Command::SetCoil { axis, volts: number(toks.next(), "coil voltage")? }
                }
                Some("RFDET") => Command::SetRfDetuning { khz: number(toks.next(), "detuning")? },
                Some("MOD") => match toks.next() {
                    Some("RF") => Command::SetRfModulation {
                        amplitude: number(toks.next(), "amplitude")?,
                        frequency: number(toks.next(), "frequency")?,
                    },
                    Some("B") => Command::SetBModulation {
                        axis: axis(toks.next())?,
                        amplitude: number(toks.next(), "amplitude")?,
                        frequency: number(toks.next(), "frequency")?,
                    },
                    Some(t) => return err(format!("unknown modulation `{t}`")),
                    None => return err("missing modulation target"),
                },
                Some(t) => return err(format!("unknown SET target `{t}`")),
                None => return err("missing SET target"),
            },
            Some("READ") => {
                keyword(toks.next(), "LIA")?;
                Command::ReadLia(lia(toks.next())?)
            }
            Some("SCAN") => {
                let target = match toks.next() {
                    Some("COIL") => ScanTarget::Coil(axis(toks.next())?),
                    Some("RFDET") => ScanTarget::RfDetuning,
                    Some(t) => return err(format!("unknown scan target `{t}`")),
                    None => return err("missing scan target"),
                };
                let start = number(toks.next(), "start")?;
                let stop = number(toks.next(), "stop")?;
                let points = match toks.next() {
                    Some(t) if !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()) => {
                        t.parse::<usize>().or_else(|_| err(format!("points `{t}` too large")))?
                    }
                    Some(t) => return err(format!("points `{t}` is not a positive integer")),
                    None => return err("missing points"),
                };
                keyword(toks.next(), "LIA")?;
                Command::Scan { target, start, stop, points, lia: lia(toks.next())? }
            }
            Some(t) => return err(format!("unknown command `{t}`")),
        };
        if let Some(extra) = toks.next() {
            return err(format!("unexpected trailing token `{extra}`"));
        }
        Ok(cmd)
    }

    /// Whether the command needs the exclusive control session.
    pub fn needs_session(&self) -> bool {
        !matches!(self, Command::Identify | Command::Quit)
    }
}

/// Shortest decimal that parses back to the same `f64`.
fn num(v: f64) -> String {
    format!("{v:?}")
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Command::SetCoil { axis, volts } => write!(f, "SET COIL {axis} {}", num(volts)),
            Command::SetRfDetuning { khz } => write!(f, "SET RFDET {}", num(khz)),
            Command::SetRfModulation { amplitude, frequency } => {
                write!(f, "SET MOD RF {} {}", num(amplitude), num(frequency))
            }
            Command::SetBModulation { axis, amplitude, frequency } => {
                write!(f, "SET MOD B {axis} {} {}", num(amplitude), num(frequency))
            }
            Command::ReadLia(l) => write!(f, "READ LIA {}", l.number()),
            Command::Scan { target, start, stop, points, lia } => {
                match target {
                    ScanTarget::Coil(a) => write!(f, "SCAN COIL {a}")?,
                    ScanTarget::RfDetuning => f.write_str("SCAN RFDET")?,
                }
                write!(f, " {} {} {points} LIA {}", num(start), num(stop), lia.number())
            }
            Command::Identify => f.write_str("IDN?"),
            Command::Quit => f.write_str("QUIT"),
        }
    }
}
