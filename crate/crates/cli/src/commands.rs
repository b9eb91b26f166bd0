use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use magscan::calib::assign_harmonics;
use magscan::detect::{detect_with, DetectParams};
use magscan::lockin::auto_phase;
use magscan::trace::{fmt_num, read_timeseries_csv};
use magscan::{
    auto_calibrate, conventional_calibrate, demodulate, CalibrationPlan, CalibrationReport, ControlUnit, Instrument,
    InstrumentTruth, LockinSettings, Trace, TraceChannel, VirtualInstrument,
};
use magscan_protocol::{serve, Backend, Client, Endpoint, ReplayInstrument};

use crate::exit;

pub const FEATURES_FORMAT: &str = "magscan-features";
pub const FEATURES_VERSION: &str = "1.0";

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid {}", path.display()))
}

fn read_trace(path: &Path) -> Result<Trace> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Trace::read_csv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn parse_endpoint(s: &str) -> Result<Endpoint> {
    s.parse().map_err(|e: magscan_protocol::endpoint::EndpointError| exit::coded(exit::USAGE, e.to_string()))
}

fn load_truth(path: Option<&Path>, seed: Option<u64>) -> Result<InstrumentTruth> {
    let mut truth = match path {
        Some(p) => read_toml(p)?,
        None => InstrumentTruth::demo(),
    };
    if let Some(s) = seed {
        truth.seed = s;
    }
    Ok(truth)
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Trace CSV.
    pub trace: PathBuf,
    /// Write JSON lines here instead of stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 5.0)]
    pub threshold_sigma: f64,
}

pub fn detect(args: &DetectArgs) -> Result<()> {
    let trace = read_trace(&args.trace)?;
    let params = DetectParams { threshold_sigma: args.threshold_sigma, ..DetectParams::default() };
    let det = detect_with(&trace, &params)?;
    let mut features = det.features.clone();
    // harmonic labels need the detuning, known only from simulated traces
    let mut cfg_note = None;
    if let (TraceChannel::Cpt, Some(cfg), ControlUnit::MicroTesla) = (trace.channel, &trace.metadata, trace.control_unit)
    {
        if trace.scan_axis.is_field() {
            match assign_harmonics(&features, cfg.delta_rf, &cfg.species, trace.scan_axis, trace.control_unit) {
                Ok(a) => features = a.features,
                Err(e) => cfg_note = Some(e.to_string()),
            }
        }
    }
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let header = json!({
        "format": FEATURES_FORMAT,
        "version": FEATURES_VERSION,
        "source": args.trace.display().to_string(),
        "channel": trace.channel,
        "scan_axis": trace.scan_axis,
        "control_unit": trace.control_unit.as_str(),
        "noise_rms": det.noise_rms,
        "threshold": det.threshold,
        "assignment_note": cfg_note,
    });
    writeln!(out, "{header}")?;
    for f in &features {
        writeln!(out, "{}", serde_json::to_string(f)?)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct DemodArgs {
    /// Raw `t,value` time-series CSV.
    pub series: PathBuf,
    /// Reference frequency, Hz.
    #[arg(long)]
    pub freq: f64,
    /// Time constant, s.
    #[arg(long, default_value_t = 0.02)]
    pub tau: f64,
    /// Input full scale, V. 10 V gives unit gain.
    #[arg(long, default_value_t = 10.0)]
    pub sensitivity: f64,
    /// Reference phase, rad.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub phase: f64,
    /// Choose the phase that maximizes the output.
    #[arg(long, conflicts_with = "phase")]
    pub auto_phase: bool,
}

pub fn demod(args: &DemodArgs) -> Result<()> {
    let f = File::open(&args.series).with_context(|| format!("opening {}", args.series.display()))?;
    let series = read_timeseries_csv(BufReader::new(f)).with_context(|| format!("reading {}", args.series.display()))?;
    let mut s = LockinSettings::new(args.freq, args.tau, args.sensitivity);
    s.reference_phase = if args.auto_phase { auto_phase(&series, args.freq) } else { args.phase };
    let v = demodulate(&series, &s)?;
    println!("{}", fmt_num(v));
    Ok(())
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Instrument server endpoint (host:port or socket path). Without it an
    /// in-process virtual instrument is used.
    #[arg(long, conflicts_with = "instrument")]
    pub endpoint: Option<String>,
    /// Hidden truth for the in-process instrument, TOML [default: demo].
    #[arg(long)]
    pub instrument: Option<PathBuf>,
    /// Calibration plan, TOML [default: demo plan].
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Also run the RF-scanning calibration from the plan.
    #[arg(long)]
    pub baseline: bool,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    /// Write report.txt, report.json, report.csv and manifest.toml here.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CalibrateManifest<'a> {
    tool: String,
    command: &'static str,
    instrument: String,
    baseline: bool,
    plan: &'a CalibrationPlan,
}

pub fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let plan: CalibrationPlan = match &args.plan {
        Some(p) => read_toml(p)?,
        None => CalibrationPlan::demo(),
    };
    plan.validate().map_err(|e| exit::coded(exit::USAGE, format!("invalid plan: {e}")))?;
    if args.baseline && plan.conventional.is_none() {
        return Err(exit::coded(exit::USAGE, "--baseline needs a [conventional] section in the plan"));
    }
    let (mut inst, source): (Box<dyn Instrument>, String) = match &args.endpoint {
        Some(ep) => {
            let ep = parse_endpoint(ep)?;
            (Box::new(Client::connect(&ep)?), ep.to_string())
        }
        None => {
            let source = args.instrument.as_ref().map_or("demo".into(), |p| p.display().to_string());
            (Box::new(VirtualInstrument::new(load_truth(args.instrument.as_deref(), None)?)?), source)
        }
    };
    let auto = auto_calibrate(inst.as_mut(), &plan)?;
    let conventional =
        if args.baseline { Some(conventional_calibrate(inst.as_mut(), &plan, &auto.compensation)?) } else { None };
    let report = CalibrationReport::new(auto, conventional);
    if args.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let manifest = CalibrateManifest {
            tool: format!("magscan {}", env!("CARGO_PKG_VERSION")),
            command: "calibrate",
            instrument: source,
            baseline: args.baseline,
            plan: &plan,
        };
        for (name, body) in [
            ("report.txt", report.to_text()),
            ("report.json", report.to_json()),
            ("report.csv", report.to_csv()),
            ("manifest.toml", toml::to_string(&manifest)?),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:5025")]
    pub endpoint: String,
    /// Hidden truth, TOML [default: demo].
    #[arg(long)]
    pub instrument: Option<PathBuf>,
    /// Noise seed; overrides the instrument file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Directory of trace CSVs.
    pub dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:5025")]
    pub endpoint: String,
}

fn run_server(endpoint: &str, inst: Box<dyn Instrument + Send>) -> Result<()> {
    let ep = parse_endpoint(endpoint)?;
    let backend = Arc::new(Backend::new(inst)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let handle = serve(&ep, backend).await.with_context(|| format!("binding {ep}"))?;
        println!("listening on {}", handle.endpoint());
        std::io::stdout().flush()?;
        handle.wait().await;
        Ok(())
    })
}

pub fn serve_cmd(args: &ServeArgs) -> Result<()> {
    let truth = load_truth(args.instrument.as_deref(), args.seed)?;
    run_server(&args.endpoint, Box::new(VirtualInstrument::new(truth)?))
}

pub fn replay(args: &ReplayArgs) -> Result<()> {
    let inst = ReplayInstrument::from_dir(&args.dir).map_err(|e| exit::coded(exit::DATA, e.to_string()))?;
    log::info!("replaying {} trace(s) from {}", inst.len(), args.dir.display());
    run_server(&args.endpoint, Box::new(inst))
}
