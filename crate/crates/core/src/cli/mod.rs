//! Command-line driver: configuration, caching, experiments and the run manifest.

pub mod experiments;
pub mod selftest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::ManifoldModel;
use crate::spectrum::{SpectrumCache, SpectrumTable};
use crate::wavetrace::REGULATOR_REACH;
use experiments::*;

/// Environment variable that overrides the spectrum cache directory.
pub const CACHE_ENV: &str = "WEYLSCOPE_CACHE";

#[derive(Parser, Debug)]
#[command(name = "weylscope", version, about = "Numerical experiments in spectral geometry and microlocal analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Build or load the cached eigenfrequency table.
    Spectrum,
    /// Fit the counting function against the Weyl prediction.
    Weyl,
    /// Smoothed wave trace and its peaks against the length spectrum.
    Trace,
    /// Closed geodesics with their Poincare maps.
    Geodesics,
    /// Compare a trace singularity amplitude with its classical prediction.
    DgCheck,
    /// Conservation, Morawetz, Hardy and local smoothing reports.
    Schrodinger,
    /// Wavefront detection and transport under the half-wave group.
    Wavefront,
    /// Build phase and amplitude tables and run the error-scaling study.
    Parametrix,
    /// Run the invariant suite.
    Selftest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Weyl => "weyl",
            Command::Trace => "trace",
            Command::Geodesics => "geodesics",
            Command::DgCheck => "dg-check",
            Command::Schrodinger => "schrodinger",
            Command::Wavefront => "wavefront",
            Command::Parametrix => "parametrix",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// Preset name or path to a JSON model descriptor.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Spectral cutoff of the eigenfrequency table.
    #[arg(long = "lambda-max", global = true)]
    lambda_max: Option<f64>,
    /// Frequency regulator of the trace and amplitude checks.
    #[arg(long = "Lambda", global = true)]
    big_lambda: Option<f64>,
    /// Grid size of the Schrodinger, wavefront or parametrix experiment.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Tolerance of the command's numeric gate.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Worker threads; runs are single-threaded and the value is recorded.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed; every experiment is deterministic and the value is recorded.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Time or frequency window.
    #[arg(long, global = true, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    window: Option<Vec<f64>>,
    /// Longest closed geodesic to catalog.
    #[arg(long = "length-max", global = true)]
    length_max: Option<f64>,
    /// JSON run configuration; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

/// A validated run configuration, echoed into every manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<String>,
    pub model: Option<String>,
    pub out: Option<PathBuf>,
    pub lambda_max: Option<f64>,
    pub big_lambda: Option<f64>,
    pub grid: Option<usize>,
    pub tol: Option<f64>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub window: Option<[f64; 2]>,
    pub length_max: Option<f64>,
}

/// Output directory used when `--out` is absent.
pub const DEFAULT_OUT: &str = "weylscope-out";

impl RunConfig {
    /// Parses a JSON configuration, rejecting unknown keys.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run configuration: {e}")))
    }

    /// Fills every field unset here from `base`.
    fn over(self, base: RunConfig) -> Self {
        Self {
            command: self.command.or(base.command),
            model: self.model.or(base.model),
            out: self.out.or(base.out),
            lambda_max: self.lambda_max.or(base.lambda_max),
            big_lambda: self.big_lambda.or(base.big_lambda),
            grid: self.grid.or(base.grid),
            tol: self.tol.or(base.tol),
            threads: self.threads.or(base.threads),
            seed: self.seed.or(base.seed),
            window: self.window.or(base.window),
            length_max: self.length_max.or(base.length_max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x.is_finite() && x > 0.0) => Err(Error::Config(format!("{name} must be positive and finite, got {x}"))),
            _ => Ok(()),
        };
        positive("lambda_max", self.lambda_max)?;
        positive("Lambda", self.big_lambda)?;
        positive("tol", self.tol)?;
        positive("length_max", self.length_max)?;
        if let Some(g) = self.grid {
            if g < 8 {
                return Err(Error::Config(format!("grid must be at least 8, got {g}")));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if let Some([lo, hi]) = self.window {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("window [{lo}, {hi}] is not an increasing finite pair")));
            }
        }
        Ok(())
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

impl Flags {
    fn into_config(self, command: Command) -> Result<RunConfig> {
        let window = match self.window.as_deref() {
            None => None,
            Some(&[lo, hi]) => Some([lo, hi]),
            Some(w) => return Err(Error::Config(format!("window takes two values, got {}", w.len()))),
        };
        let flags = RunConfig {
            command: Some(command.name().to_string()),
            model: self.model,
            out: self.out,
            lambda_max: self.lambda_max,
            big_lambda: self.big_lambda,
            grid: self.grid,
            tol: self.tol,
            threads: self.threads,
            seed: self.seed,
            window,
            length_max: self.length_max,
        };
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let file = RunConfig::from_json(&text)?;
                if let Some(c) = &file.command {
                    if c != command.name() {
                        return Err(Error::Config(format!("configuration is for `{c}`, command is `{}`", command.name())));
                    }
                }
                file
            }
            None => RunConfig::default(),
        };
        let cfg = flags.over(file);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Result of one command before it is written to the manifest.
struct Outcome {
    headline: Value,
    artifacts: Vec<String>,
    gate: Option<Gate>,
}

#[derive(Serialize)]
struct Gate {
    description: String,
    tol: f64,
    passed: bool,
}

fn error_json(kind: &str, message: &str, code: i32) -> String {
    json!({ "error": { "kind": kind, "message": message, "exit_code": code } }).to_string()
}

/// Parses arguments, runs one command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand)
            {
                let _ = e.print();
                return 0;
            }
            eprintln!("{}", error_json("Config", e.to_string().trim(), 2));
            return 2;
        }
    };
    let command = cli.command;
    let cfg = match cli.flags.into_config(command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string(), e.exit_code()));
            return e.exit_code();
        }
    };
    let out = cfg.out_dir();
    let defaults = Defaults::builtin();
    let start = Instant::now();
    let result = fs::create_dir_all(&out).map_err(Error::from).and_then(|_| execute(command, &cfg, &defaults, &out));
    let wall = start.elapsed().as_secs_f64();
    let mut manifest = json!({
        "command": command.name(),
        "config": cfg,
        "defaults_version": defaults.version,
        "defaults": defaults,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "wall_time_s": wall,
    });
    let code = match &result {
        Ok(o) => {
            manifest["headline"] = o.headline.clone();
            manifest["artifacts"] = json!(o.artifacts);
            manifest["gate"] = json!(o.gate);
            match &o.gate {
                Some(g) if !g.passed => {
                    eprintln!("{}", error_json("GateFailed", &format!("{} (tol {:e})", g.description, g.tol), 3));
                    3
                }
                _ => 0,
            }
        }
        Err(e) => {
            manifest["error"] = json!({ "kind": e.kind(), "message": e.to_string() });
            eprintln!("{}", error_json(e.kind(), &e.to_string(), e.exit_code()));
            e.exit_code()
        }
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    if let Err(e) = fs::write(out.join("manifest.json"), text + "\n") {
        if code == 0 {
            eprintln!("{}", error_json("Io", &e.to_string(), 4));
            return 4;
        }
    }
    code
}

fn write_text(out: &Path, name: &str, text: &str, artifacts: &mut Vec<String>) -> Result<()> {
    fs::write(out.join(name), text)?;
    artifacts.push(name.to_string());
    Ok(())
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T, artifacts: &mut Vec<String>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    write_text(out, name, &(text + "\n"), artifacts)
}

fn cache_for(out: &Path) -> SpectrumCache {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => SpectrumCache::new(dir),
        _ => SpectrumCache::new(out.join("cache")),
    }
}

fn table(out: &Path, model: &ManifoldModel, lambda_max: f64) -> Result<(SpectrumTable, bool)> {
    cache_for(out).get_or_compute(model, lambda_max)
}

fn gate(description: impl Into<String>, tol: f64, passed: bool) -> Option<Gate> {
    Some(Gate { description: description.into(), tol, passed })
}

fn execute(command: Command, cfg: &RunConfig, d: &Defaults, out: &Path) -> Result<Outcome> {
    let mut artifacts = Vec::new();
    let model_or = |name: &str| load_model(cfg.model.as_deref().unwrap_or(name));
    let (headline, gate) = match command {
        Command::Spectrum => {
            let model = model_or(&d.spectrum.model)?;
            let (t, hit) = table(out, &model, cfg.lambda_max.unwrap_or(d.spectrum.lambda_max))?;
            write_text(out, "spectrum.csv", &t.to_cache_string(), &mut artifacts)?;
            let h = json!({
                "model_id": t.model_id,
                "lambda_max": t.lambda_max,
                "levels": t.entries.len(),
                "total_count": t.total_count(),
                "cache_hit": hit,
            });
            (h, None)
        }
        Command::Weyl => {
            let model = model_or(&d.spectrum.model)?;
            let (t, _) = table(out, &model, cfg.lambda_max.unwrap_or(d.spectrum.lambda_max))?;
            let mut wd = d.weyl.clone();
            if let Some(w) = cfg.window {
                wd.window = w;
            }
            let (report, csv) = weyl_report(&model, &t, &wd)?;
            write_text(out, "weyl.csv", &csv, &mut artifacts)?;
            let averaged = match model {
                ManifoldModel::FlatTorus(_) | ManifoldModel::Sphere2(_) if model.dim() == 2 => {
                    let (big, _) = table(out, &model, averaged_table_cutoff(&d.averaged)?)?;
                    Some(averaged_weyl(&model, &big, &d.averaged)?)
                }
                _ => None,
            };
            let tol = cfg.tol.unwrap_or(0.05);
            let passed = (report.leading_ratio - 1.0).abs() <= tol;
            let h = json!({ "weyl": report, "averaged": averaged });
            write_json(out, "weyl.json", &h, &mut artifacts)?;
            (h, gate("leading ratio at lambda_max within tol of 1", tol, passed))
        }
        Command::Trace => {
            let model = model_or(&d.trace.model)?;
            let mut td = d.trace.clone();
            if let Some(l) = cfg.big_lambda {
                td.big_lambda = l;
            }
            if let Some(w) = cfg.window {
                td.window = w;
            }
            let need = REGULATOR_REACH * td.big_lambda;
            let lmax = cfg.lambda_max.unwrap_or(need);
            if lmax < need {
                return Err(Error::Config(format!("lambda_max {lmax} is below the regulator reach {need}")));
            }
            let (t, _) = table(out, &model, lmax)?;
            let (report, csv) = trace_report(&model, &t, &td)?;
            write_text(out, "trace.csv", &csv, &mut artifacts)?;
            write_json(out, "peaks.json", &report, &mut artifacts)?;
            let tol = cfg.tol.unwrap_or(0.05);
            let gaps: Vec<f64> = report.detection.peaks.iter().map(|p| p.gap.unwrap_or(f64::INFINITY)).collect();
            let max_gap = gaps.iter().copied().fold(0.0, f64::max);
            let passed = !gaps.is_empty() && max_gap <= tol;
            let h = json!({
                "big_lambda": td.big_lambda,
                "window": td.window,
                "peaks": report.peaks.iter().map(|p| p.t).collect::<Vec<_>>(),
                "max_gap": max_gap,
                "quiet_peaks": report.quiet_peaks,
            });
            (h, gate("every peak within tol of a closed geodesic length", tol, passed))
        }
        Command::Geodesics => {
            let model = model_or(&d.geodesics.model)?;
            let catalog = geodesic_catalog(&model, cfg.length_max.unwrap_or(d.geodesics.length_max))?;
            let entries: Vec<GeodesicEntry> = catalog.iter().map(GeodesicEntry::from_geodesic).collect();
            write_json(out, "geodesics.json", &entries, &mut artifacts)?;
            let h = json!({
                "model_id": model.model_id(),
                "count": entries.len(),
                "lengths": entries.iter().take(8).map(|e| e.length).collect::<Vec<_>>(),
            });
            (h, None)
        }
        Command::DgCheck => {
            let model = model_or(&d.dg.model)?;
            let mut dd = d.dg.clone();
            if let Some(l) = cfg.big_lambda {
                dd.big_lambda = l;
            }
            if let Some(l) = cfg.lambda_max {
                dd.lambda_max = l;
            }
            let (t, _) = table(out, &model, dd.lambda_max)?;
            let report = dg_report(&model, &t, &dd)?;
            write_json(out, "dg.json", &report, &mut artifacts)?;
            let tol = cfg.tol.unwrap_or(0.3);
            (json!(report), gate("amplitude ratio within tol of 1", tol, (report.ratio - 1.0).abs() <= tol))
        }
        Command::Schrodinger => {
            let mut sd = d.schrodinger.clone();
            if let Some(g) = cfg.grid {
                sd.morawetz_grid = g;
                sd.smoothing_grid = 2 * g;
            }
            let conservation = conservation_report(sd.conservation_time)?;
            let hardy = hardy_study(&sd)?;
            let morawetz = morawetz_study(&sd)?;
            let smoothing = local_smoothing_study(&sd)?;
            let report = json!({ "conservation": conservation, "hardy": hardy, "morawetz": morawetz, "local_smoothing": smoothing });
            write_json(out, "schrodinger.json", &report, &mut artifacts)?;
            let tol = cfg.tol.unwrap_or(1e-12);
            let drift = conservation.sobolev_drift.iter().copied().fold(conservation.l2_drift, f64::max);
            let passed = drift < tol && conservation.periodicity_gap < tol && hardy.bound_holds;
            let h = json!({
                "max_conservation_drift": drift,
                "periodicity_gap": conservation.periodicity_gap,
                "hardy_bound_holds": hardy.bound_holds,
                "hardy_best_extremizer": hardy.best_extremizer,
                "morawetz_max_ratio": morawetz.max_ratio,
                "morawetz_max_drift": morawetz.max_drift,
                "smoothing_max_ratio": smoothing.max_ratio,
                "smoothing_max_drift": smoothing.max_drift,
            });
            (h, gate("conservation and periodicity below tol, Hardy bound holds", tol, passed))
        }
        Command::Wavefront => {
            let mut wd = d.wavefront.clone();
            if let Some(g) = cfg.grid {
                wd.cells = g;
            }
            let study = wavefront_study(&wd)?;
            write_json(out, "wavefront.json", &study, &mut artifacts)?;
            let tol = cfg.tol.unwrap_or(0.05);
            let failures: usize = study.transport.iter().map(|t| t.2).sum();
            let passed = study.fraction >= 1.0 - tol && failures == 0;
            let h = json!({
                "fraction": study.fraction,
                "correct": study.correct,
                "probes": study.probes,
                "transport_failures": failures,
                "worst_offset_cells": study.transport.iter().map(|t| t.1).fold(0.0, f64::max),
            });
            (h, gate("classified fraction at least 1 - tol, every probe transported", tol, passed))
        }
        Command::Parametrix => {
            let mut pd = d.parametrix.clone();
            if let Some(g) = cfg.grid {
                pd.grid = g;
            }
            let study = parametrix_study(&pd, Some(out))?;
            artifacts.extend(["phase.bin".to_string(), "amplitude.bin".to_string()]);
            write_json(out, "parametrix.json", &study, &mut artifacts)?;
            let tol = cfg.tol.unwrap_or(1e-8);
            let passed = study.euclidean_gap <= tol && study.time_zero_gap <= tol;
            (json!(study), gate("flat and time-zero gaps below tol", tol, passed))
        }
        Command::Selftest => {
            let checks = selftest::run_selftest(out, d, |c| {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            });
            write_json(out, "selftest.json", &checks, &mut artifacts)?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            let h = json!({ "checks": checks.len(), "failed": failed });
            (h, gate("every invariant check passes", 0.0, failed == 0))
        }
    };
    Ok(Outcome { headline, artifacts, gate })
}
