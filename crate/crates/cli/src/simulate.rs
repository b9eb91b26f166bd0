use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use magscan::atomic::{predict_rf_positions, predict_scan_positions};
use magscan::{run_scan, Axis, Channel, ExperimentConfig, ScanAxis, Trace};

use crate::svg::{Marker, Plot};
use crate::{exit, AxisArg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Buffer-gas cell, δ = -58 kHz, Bx/By/Bz scans over ±8 μT.
    BfFig3,
    /// Coated cell, δ = +316 kHz, Bx/By/Bz scans over ±40 μT.
    ArcFig4,
    /// Buffer-gas cell, δ = -434 kHz, Bz scan with a transverse field.
    BfFig2,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::BfFig3 => "bf-fig3",
            Preset::ArcFig4 => "arc-fig4",
            Preset::BfFig2 => "bf-fig2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ChannelArg {
    Cpt,
    Mm,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in configuration.
    #[arg(long, value_enum, conflicts_with = "config")]
    pub preset: Option<Preset>,
    /// TOML experiment configuration (see --print-config for the schema).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scan axes for field-scan presets [default: x,y,z].
    #[arg(long, value_enum, value_delimiter = ',')]
    pub axis: Vec<AxisArg>,
    /// Transverse field along X for bf-fig2, μT.
    #[arg(long, default_value_t = 13.0)]
    pub transverse: f64,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub start: Option<f64>,
    #[arg(long)]
    pub stop: Option<f64>,
    /// Static RF detuning, kHz.
    #[arg(long, allow_hyphen_values = true)]
    pub delta_rf: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Photodetector noise rms, V.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ChannelArg::Cpt, ChannelArg::Mm])]
    pub channels: Vec<ChannelArg>,
    /// Also write an SVG plot per trace.
    #[arg(long)]
    pub svg: bool,
    /// Print the resolved configuration(s) as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
    #[arg(long, short, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ManifestScan<'a> {
    name: &'a str,
    files: Vec<String>,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: String,
    command: &'static str,
    source: String,
    scan: Vec<ManifestScan<'a>>,
}

fn resolve(args: &SimulateArgs) -> Result<(String, Vec<(String, ExperimentConfig)>)> {
    let axes: Vec<Axis> = if args.axis.is_empty() {
        Axis::ALL.to_vec()
    } else {
        args.axis.iter().map(|a| a.axis()).collect()
    };
    let (source, mut scans) = match (args.preset, &args.config) {
        (_, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg: ExperimentConfig =
                toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
            let stem = path.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned());
            (path.display().to_string(), vec![(stem, cfg)])
        }
        (Some(Preset::BfFig2), None) => {
            let cfg = ExperimentConfig::bf_fig2(args.transverse);
            ("bf-fig2".into(), vec![(format!("bf-fig2_BZ_perp{}", args.transverse), cfg)])
        }
        (Some(p @ (Preset::BfFig3 | Preset::ArcFig4)), None) => {
            let make = if p == Preset::BfFig3 { ExperimentConfig::bf_fig3 } else { ExperimentConfig::arc_fig4 };
            let scans = axes.iter().map(|&a| (format!("{}_{}", p.name(), a.scan_axis()), make(a))).collect();
            (p.name().into(), scans)
        }
        (None, None) => return Err(exit::coded(exit::USAGE, "give --preset or --config")),
    };
    for (_, c) in &mut scans {
        if let Some(n) = args.points {
            c.scan.points = n;
        }
        if let Some(v) = args.start {
            c.scan.start = v;
        }
        if let Some(v) = args.stop {
            c.scan.stop = v;
        }
        if let Some(v) = args.delta_rf {
            c.delta_rf = v;
        }
        if let Some(v) = args.seed {
            c.seed = v;
        }
        if let Some(v) = args.noise {
            c.noise_rms = v;
        }
        c.validate()?;
    }
    Ok((source, scans))
}

/// Predicted resonance markers in scan coordinates.
pub fn markers(cfg: &ExperimentConfig) -> Vec<Marker> {
    let label = |n: i32| format!("{n:+}ΩL");
    match cfg.scan.axis.field_axis() {
        Some(axis) => {
            let mut other = cfg.background + cfg.applied;
            let offset = cfg.background.component(axis);
            other.set(axis, 0.0);
            predict_scan_positions(cfg.delta_rf, cfg.scan.axis, other.magnitude(), &cfg.species)
                .unwrap_or_default()
                .into_iter()
                .map(|p| Marker { x: p.position - offset, label: label(p.n.0) })
                .collect()
        }
        None => predict_rf_positions(&(cfg.background + cfg.applied), &cfg.species)
            .into_iter()
            .filter(|(n, _)| n.0 != 0)
            .map(|(n, x)| Marker { x, label: label(n.0) })
            .collect(),
    }
}

fn x_label(axis: ScanAxis) -> String {
    match axis.field_axis() {
        Some(a) => format!("B{} (uT)", a.as_str().to_lowercase()),
        None => "RF detuning (kHz)".into(),
    }
}

pub fn write_svg(path: &Path, title: &str, trace: &Trace, markers: &[Marker]) -> Result<()> {
    let svg = Plot {
        title,
        x_label: &x_label(trace.scan_axis),
        y_label: &format!("{} lock-in (V)", trace.channel),
        points: &trace.samples,
        markers,
    }
    .render();
    fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

pub fn run(args: &SimulateArgs) -> Result<()> {
    let (source, scans) = resolve(args)?;
    if args.print_config {
        for (name, c) in &scans {
            println!("# {name}\n{}", toml::to_string(c)?);
        }
        return Ok(());
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let channels: Vec<Channel> = args
        .channels
        .iter()
        .map(|c| match c {
            ChannelArg::Cpt => Channel::Cpt,
            ChannelArg::Mm => Channel::Mm,
        })
        .collect();
    let mut manifest = Manifest {
        tool: format!("magscan {}", env!("CARGO_PKG_VERSION")),
        command: "simulate",
        source,
        scan: Vec::new(),
    };
    for (name, cfg) in &scans {
        let t0 = std::time::Instant::now();
        let traces = run_scan(cfg, &channels)?;
        log::info!("{name}: {} points in {:.2?}", cfg.scan.points, t0.elapsed());
        let marks = markers(cfg);
        let mut files = Vec::new();
        for t in &traces {
            let base = format!("{name}_{}", t.channel);
            let csv = args.out.join(format!("{base}.csv"));
            fs::write(&csv, t.to_csv_string()).with_context(|| format!("writing {}", csv.display()))?;
            files.push(format!("{base}.csv"));
            if args.svg {
                let svg = args.out.join(format!("{base}.svg"));
                write_svg(&svg, &format!("{name} {}", t.channel), t, &marks)?;
                files.push(format!("{base}.svg"));
            }
            println!("{}", csv.display());
        }
        manifest.scan.push(ManifestScan { name, files, config: cfg });
    }
    let path = args.out.join("manifest.toml");
    fs::write(&path, toml::to_string(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use magscan::FieldVector;

    #[test]
    fn bz_markers_follow_prediction() {
        let m = markers(&ExperimentConfig::bf_fig3(Axis::Z));
        let xs: Vec<f64> = m.iter().map(|m| m.x).collect();
        assert_eq!(xs.len(), 4);
        assert!((xs[0] + 6.2156).abs() < 1e-3 && (xs[3] - 6.2156).abs() < 1e-3, "{xs:?}");
        assert_eq!(m[0].label, "+2ΩL");
    }

    #[test]
    fn rf_markers_skip_zero_order() {
        let cfg = ExperimentConfig::bf_rf_scan(FieldVector::new(0.0, 0.0, 3.0));
        assert!(markers(&cfg).iter().all(|m| m.x != 0.0));
    }
}
