//! Seeded Monte-Carlo sweeps and their CSV output.
//!
//! Randomness per trial comes from three independent ChaCha streams:
//!
//! * paths, keyed by `(seed, trial)`;
//! * pilots and morph patterns, keyed by `(seed, trial)`;
//! * receiver noise and the ALS seed, keyed by `(seed, trial, point)` where
//!   `point` is a fingerprint of the sweep values, not their position.
//!
//! All points of a sweep therefore see the same propagation scenario in a
//! given trial, and reordering the sweep axes leaves every row unchanged.

use std::f64::consts::PI;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{channel_matrix, steering_matrix, PathSet};
use crate::estimator::{nmse, nmse_steering, run_two_phase_als, AlsOptions};
use crate::geometry::{FimConfig, Orientation};
use crate::training::{observe_scenario, TrainingConfig, TrainingScenario};
use crate::{Error, Result};

/// Column order of the per-trial CSV.
pub const CSV_HEADER: [&str; 17] = [
    "sweep_id",
    "trial",
    "snr_db",
    "L",
    "rx_nx",
    "rx_nz",
    "tx_nx",
    "tx_nz",
    "I",
    "J",
    "y_max",
    "nmse_A",
    "nmse_B",
    "nmse_channel",
    "iterations",
    "converged",
    "wall_ms",
];

/// Column order of the per-point aggregate CSV.
pub const SUMMARY_HEADER: [&str; 19] = [
    "sweep_id",
    "snr_db",
    "L",
    "rx_nx",
    "rx_nz",
    "tx_nx",
    "tx_nz",
    "I",
    "J",
    "y_max",
    "trials",
    "failed",
    "mean_nmse_A_db",
    "median_nmse_A_db",
    "mean_nmse_B_db",
    "median_nmse_B_db",
    "mean_nmse_channel_db",
    "median_nmse_channel_db",
    "converged",
];

pub const DEFAULT_TRIALS: usize = 200;
/// SNR grid shared by the three sweep presets.
pub const SNR_GRID: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];
pub const PATH_GRID: [usize; 3] = [2, 3, 4];
pub const RX_SIZE_GRID: [(usize, usize); 2] = [(4, 4), (6, 6)];
pub const MORPH_GRID: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub tx_size: (usize, usize),
    /// Receive array sizes to sweep, `(nx, nz)`.
    pub rx_sizes: Vec<(usize, usize)>,
    pub dx: f64,
    pub dz: f64,
    /// Path counts to sweep.
    pub paths: Vec<usize>,
    pub rx_slots: usize,
    pub tx_slots: usize,
    /// `None` is a noiseless point.
    pub snr_db: Vec<Option<f64>>,
    pub y_max: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub als: AlsOptions,
    pub tx_orientation: Orientation,
    pub rx_orientation: Orientation,
    pub output: PathBuf,
    /// Write measured wall time into the CSV. Off by default so that the
    /// output is a pure function of the configuration.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tx_size: (4, 4),
            rx_sizes: vec![(4, 4)],
            dx: 0.5,
            dz: 0.5,
            paths: vec![3],
            rx_slots: 10,
            tx_slots: 10,
            snr_db: vec![Some(10.0)],
            y_max: vec![1.0],
            trials: DEFAULT_TRIALS,
            seed: 0,
            als: AlsOptions::default(),
            tx_orientation: Orientation::new(PI / 4.0, PI / 3.0, PI / 6.0).expect("valid orientation"),
            rx_orientation: Orientation::new(PI / 3.0, PI / 6.0, -PI / 4.0).expect("valid orientation"),
            output: PathBuf::from("results.csv"),
            record_timing: false,
        }
    }
}

impl ExperimentConfig {
    /// Reads a flat `key = value` file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            key: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines. `#` starts a comment; lists are comma
    /// separated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                key: format!("line {}", n + 1),
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let err = |message: String| Error::Parse {
            key: key.to_string(),
            message,
        };
        match key {
            "tx_size" => self.tx_size = parse_size(value).map_err(err)?,
            "rx_size" => self.rx_sizes = parse_list(value, parse_size).map_err(err)?,
            "dx" => self.dx = parse_num(value).map_err(err)?,
            "dz" => self.dz = parse_num(value).map_err(err)?,
            "L" => self.paths = parse_list(value, parse_num).map_err(err)?,
            "I" => self.rx_slots = parse_num(value).map_err(err)?,
            "J" => self.tx_slots = parse_num(value).map_err(err)?,
            "snr_db" => self.snr_db = parse_list(value, parse_snr).map_err(err)?,
            "y_max" => self.y_max = parse_list(value, parse_num).map_err(err)?,
            "trials" => self.trials = parse_num(value).map_err(err)?,
            "seed" => self.seed = parse_num(value).map_err(err)?,
            "max_outer_iterations" => self.als.max_outer_iterations = parse_num(value).map_err(err)?,
            "tolerance" => self.als.tolerance = parse_num(value).map_err(err)?,
            "restarts" => self.als.restarts = parse_num(value).map_err(err)?,
            "algebraic_start" => self.als.algebraic_start = parse_num(value).map_err(err)?,
            "tx_orientation" => self.tx_orientation = parse_orientation(value).map_err(err)?,
            "rx_orientation" => self.rx_orientation = parse_orientation(value).map_err(err)?,
            "output" => self.output = PathBuf::from(value),
            "record_timing" => self.record_timing = parse_num(value).map_err(err)?,
            _ => return Err(err("unknown key".into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        for (name, empty) in [
            ("rx_size", self.rx_sizes.is_empty()),
            ("L", self.paths.is_empty()),
            ("snr_db", self.snr_db.is_empty()),
            ("y_max", self.y_max.is_empty()),
        ] {
            if empty {
                return Err(Error::InvalidConfig(format!("{name} list is empty")));
            }
        }
        if self.paths.contains(&0) {
            return Err(Error::InvalidConfig("path count must be at least 1".into()));
        }
        if self.snr_db.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig("SNR values must be finite or `inf`".into()));
        }
        self.als.validate()?;
        for point in self.points() {
            point.training_config(self)?.validate()?;
        }
        Ok(())
    }

    /// Sweep points with SNR varying fastest, then `y_max`, receive size and
    /// path count.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &paths in &self.paths {
            for &rx_size in &self.rx_sizes {
                for &y_max in &self.y_max {
                    for &snr_db in &self.snr_db {
                        out.push(SweepPoint {
                            snr_db,
                            paths,
                            rx_size,
                            tx_size: self.tx_size,
                            rx_slots: self.rx_slots,
                            tx_slots: self.tx_slots,
                            y_max,
                        });
                    }
                }
            }
        }
        out
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse().map_err(|e: T::Err| format!("`{s}`: {e}"))
}

fn parse_list<T>(s: &str, item: fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    s.split(',').map(|t| item(t.trim())).collect()
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}`: expected NXxNZ, e.g. 4x4"))?;
    Ok((parse_num(a)?, parse_num(b)?))
}

fn parse_snr(s: &str) -> std::result::Result<Option<f64>, String> {
    match s.to_ascii_lowercase().as_str() {
        "inf" | "none" | "noiseless" => Ok(None),
        _ => parse_num(s).map(Some),
    }
}

/// Accepts plain radians or multiples of pi: `pi/4`, `-pi/4`, `2pi/3`, `2*pi/3`.
fn parse_angle(s: &str) -> std::result::Result<f64, String> {
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_lowercase();
    if let Ok(v) = t.parse::<f64>() {
        return Ok(v);
    }
    let bad = || format!("`{s}`: expected radians or a multiple of pi");
    let (sign, body) = match t.strip_prefix('-') {
        Some(rest) => (-1.0, rest),
        None => (1.0, t.as_str()),
    };
    let (num, den) = match body.split_once('/') {
        Some((n, d)) => (n, d.parse::<f64>().map_err(|_| bad())?),
        None => (body, 1.0),
    };
    let coef = num.strip_suffix("pi").ok_or_else(bad)?;
    let coef = coef.strip_suffix('*').unwrap_or(coef);
    let k = if coef.is_empty() { 1.0 } else { coef.parse::<f64>().map_err(|_| bad())? };
    Ok(sign * k * PI / den)
}

fn parse_orientation(s: &str) -> std::result::Result<Orientation, String> {
    let v = parse_list(s, parse_angle)?;
    if v.len() != 3 {
        return Err(format!("`{s}`: expected theta, phi, rho"));
    }
    Orientation::new(v[0], v[1], v[2]).map_err(|e| e.to_string())
}

/// Points swept by the path-count figure: L in {2, 3, 4} over the SNR grid.
pub fn snr_vs_paths(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        paths: PATH_GRID.to_vec(),
        snr_db: SNR_GRID.iter().map(|&s| Some(s)).collect(),
        ..cfg.clone()
    }
}

/// Points swept by the array-size figure: 4x4 and 6x6 receive arrays.
pub fn array_size(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        rx_sizes: RX_SIZE_GRID.to_vec(),
        snr_db: SNR_GRID.iter().map(|&s| Some(s)).collect(),
        ..cfg.clone()
    }
}

/// Points swept by the morph-range figure.
pub fn morph_range(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        y_max: MORPH_GRID.to_vec(),
        snr_db: SNR_GRID.iter().map(|&s| Some(s)).collect(),
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub snr_db: Option<f64>,
    pub paths: usize,
    pub rx_size: (usize, usize),
    pub tx_size: (usize, usize),
    pub rx_slots: usize,
    pub tx_slots: usize,
    pub y_max: f64,
}

impl SweepPoint {
    pub fn training_config(&self, cfg: &ExperimentConfig) -> Result<TrainingConfig> {
        let tx = FimConfig::new(
            self.tx_size.0,
            self.tx_size.1,
            cfg.dx,
            cfg.dz,
            cfg.tx_orientation,
            self.y_max,
        )?;
        let rx = FimConfig::new(
            self.rx_size.0,
            self.rx_size.1,
            cfg.dx,
            cfg.dz,
            cfg.rx_orientation,
            self.y_max,
        )?;
        Ok(TrainingConfig {
            tx,
            rx,
            rx_slots: self.rx_slots,
            tx_slots: self.tx_slots,
            snr_db: self.snr_db,
        })
    }

    /// Order-independent key of the sweep values.
    fn fingerprint(&self) -> u64 {
        let words = [
            self.snr_db.map_or(u64::MAX, f64::to_bits),
            self.paths as u64,
            self.rx_size.0 as u64,
            self.rx_size.1 as u64,
            self.tx_size.0 as u64,
            self.tx_size.1 as u64,
            self.rx_slots as u64,
            self.tx_slots as u64,
            self.y_max.to_bits(),
        ];
        words.iter().fold(0x243f_6a88_85a3_08d3, |h, &w| splitmix(h ^ w))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy)]
enum Stream {
    Paths = 1,
    Scenario = 2,
    Noise = 3,
}

fn substream(seed: u64, trial: usize, stream: Stream, salt: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(trial as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(stream as u64).to_le_bytes());
    key[24..].copy_from_slice(&salt.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub sweep_id: usize,
    pub trial: usize,
    pub point: SweepPoint,
    /// Linear NMSE; NaN when the trial failed.
    pub nmse_a: f64,
    pub nmse_b: f64,
    pub nmse_channel: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_ms: f64,
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

struct TrialMetrics {
    nmse_a: f64,
    nmse_b: f64,
    nmse_channel: f64,
    iterations: usize,
    converged: bool,
}

fn simulate(cfg: &ExperimentConfig, point: &SweepPoint, trial: usize) -> Result<TrialMetrics> {
    let tcfg = point.training_config(cfg)?;
    let paths = PathSet::sample(point.paths, &mut substream(cfg.seed, trial, Stream::Paths, 0))?;
    let scenario = TrainingScenario::sample(&tcfg, &mut substream(cfg.seed, trial, Stream::Scenario, 0))?;
    let mut noise = substream(cfg.seed, trial, Stream::Noise, point.fingerprint());
    let als = AlsOptions {
        seed: noise.random(),
        ..cfg.als.clone()
    };
    let frame = observe_scenario(&tcfg, &paths, &scenario, &mut noise)?;
    let est = run_two_phase_als(&frame, point.paths, &als)?;

    let a = steering_matrix(&tcfg.rx, &frame.static_rx, &paths.rx_directions());
    let b = steering_matrix(&tcfg.tx, &frame.static_tx, &paths.tx_directions());
    let h = channel_matrix(&tcfg.tx, &tcfg.rx, &frame.static_tx, &frame.static_rx, &paths);
    let metrics = TrialMetrics {
        nmse_a: nmse_steering(&est.a_hat, &a)?,
        nmse_b: nmse_steering(&est.b_hat, &b)?,
        nmse_channel: nmse(&est.channel(), &h)?,
        iterations: est.iterations,
        converged: est.converged,
    };
    if ![metrics.nmse_a, metrics.nmse_b, metrics.nmse_channel].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite NMSE".into()));
    }
    Ok(metrics)
}

/// Runs one trial of one sweep point. Failures are recorded, not raised.
pub fn run_trial(cfg: &ExperimentConfig, sweep_id: usize, point: &SweepPoint, trial: usize) -> TrialRecord {
    let start = Instant::now();
    let outcome = simulate(cfg, point, trial);
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok(m) => TrialRecord {
            sweep_id,
            trial,
            point: *point,
            nmse_a: m.nmse_a,
            nmse_b: m.nmse_b,
            nmse_channel: m.nmse_channel,
            iterations: m.iterations,
            converged: m.converged,
            wall_ms,
            error: None,
        },
        Err(e) => {
            warn!("sweep point {sweep_id}, trial {trial} failed: {e}");
            TrialRecord {
                sweep_id,
                trial,
                point: *point,
                nmse_a: f64::NAN,
                nmse_b: f64::NAN,
                nmse_channel: f64::NAN,
                iterations: 0,
                converged: false,
                wall_ms,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Aggregate of one sweep point over its successful trials.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub sweep_id: usize,
    pub point: SweepPoint,
    pub trials: usize,
    pub failed: usize,
    pub converged: usize,
    /// dB of the linear mean, for A, B and the channel.
    pub mean_db: [f64; 3],
    /// dB of the linear median, for A, B and the channel.
    pub median_db: [f64; 3],
}

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Groups records by sweep point, in order of first appearance.
pub fn summarize(records: &[TrialRecord]) -> Vec<PointSummary> {
    let mut ids: Vec<usize> = Vec::new();
    for r in records {
        if !ids.contains(&r.sweep_id) {
            ids.push(r.sweep_id);
        }
    }
    ids.into_iter()
        .map(|id| {
            let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.sweep_id == id).collect();
            let ok: Vec<&TrialRecord> = rows.iter().copied().filter(|r| !r.failed()).collect();
            let mut mean_db = [f64::NAN; 3];
            let mut median_db = [f64::NAN; 3];
            for (k, pick) in [
                (|r: &TrialRecord| r.nmse_a) as fn(&TrialRecord) -> f64,
                |r: &TrialRecord| r.nmse_b,
                |r: &TrialRecord| r.nmse_channel,
            ]
            .iter()
            .enumerate()
            {
                let mut v: Vec<f64> = ok.iter().map(|r| pick(r)).collect();
                if v.is_empty() {
                    continue;
                }
                mean_db[k] = db(v.iter().sum::<f64>() / v.len() as f64);
                v.sort_by(f64::total_cmp);
                median_db[k] = db(median(&v));
            }
            PointSummary {
                sweep_id: id,
                point: rows[0].point,
                trials: rows.len(),
                failed: rows.len() - ok.len(),
                converged: ok.iter().filter(|r| r.converged).count(),
                mean_db,
                median_db,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<PointSummary>,
}

/// Runs every trial of every sweep point on the rayon pool. Records come back
/// ordered by sweep point, then trial.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let points = cfg.points();
    info!("{} sweep points x {} trials", points.len(), cfg.trials);
    let tasks: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..cfg.trials).map(move |t| (p, t)))
        .collect();
    let records: Vec<TrialRecord> = tasks
        .into_par_iter()
        .map(|(p, t)| run_trial(cfg, p, &points[p], t))
        .collect();
    let summaries = summarize(&records);
    for s in &summaries {
        info!(
            "point {}: snr {} L {} rx {}x{} y_max {} -> channel NMSE mean {:.2} dB, median {:.2} dB ({} failed)",
            s.sweep_id,
            fmt_snr(s.point.snr_db),
            s.point.paths,
            s.point.rx_size.0,
            s.point.rx_size.1,
            s.point.y_max,
            s.mean_db[2],
            s.median_db[2],
            s.failed
        );
    }
    Ok(ExperimentOutput { records, summaries })
}

fn fmt_snr(snr: Option<f64>) -> String {
    snr.map_or_else(|| "inf".to_string(), |s| s.to_string())
}

fn point_fields(p: &SweepPoint) -> [String; 9] {
    [
        fmt_snr(p.snr_db),
        p.paths.to_string(),
        p.rx_size.0.to_string(),
        p.rx_size.1.to_string(),
        p.tx_size.0.to_string(),
        p.tx_size.1.to_string(),
        p.rx_slots.to_string(),
        p.tx_slots.to_string(),
        p.y_max.to_string(),
    ]
}

/// Writes one row per trial. Floats use Rust's shortest round-trip form, so
/// values read back are bit-identical.
pub fn write_trials_csv(path: &Path, records: &[TrialRecord], record_timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let mut row = vec![r.sweep_id.to_string(), r.trial.to_string()];
        row.extend(point_fields(&r.point));
        row.extend([
            format!("{:e}", r.nmse_a),
            format!("{:e}", r.nmse_b),
            format!("{:e}", r.nmse_channel),
            r.iterations.to_string(),
            r.converged.to_string(),
            if record_timing { format!("{:.3}", r.wall_ms) } else { "0".into() },
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, summaries: &[PointSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(SUMMARY_HEADER)?;
    for s in summaries {
        let mut row = vec![s.sweep_id.to_string()];
        row.extend(point_fields(&s.point));
        row.extend([s.trials.to_string(), s.failed.to_string()]);
        for k in 0..3 {
            row.push(s.mean_db[k].to_string());
            row.push(s.median_db[k].to_string());
        }
        row.push(s.converged.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a per-trial CSV back. Trials with NaN metrics are marked failed.
pub fn read_trials_csv(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::mismatch("CSV header", CSV_HEADER.join(","), header.join(",")));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let f = |i: usize| row.get(i).unwrap_or("");
        let p = |i: usize, what: &str| -> Result<usize> {
            f(i).parse().map_err(|_| Error::Parse {
                key: what.into(),
                message: format!("`{}`", f(i)),
            })
        };
        let x = |i: usize, what: &str| -> Result<f64> {
            f(i).parse().map_err(|_| Error::Parse {
                key: what.into(),
                message: format!("`{}`", f(i)),
            })
        };
        let snr = parse_snr(f(2)).map_err(|message| Error::Parse {
            key: "snr_db".into(),
            message,
        })?;
        let nmse_a = x(11, "nmse_A")?;
        out.push(TrialRecord {
            sweep_id: p(0, "sweep_id")?,
            trial: p(1, "trial")?,
            point: SweepPoint {
                snr_db: snr,
                paths: p(3, "L")?,
                rx_size: (p(4, "rx_nx")?, p(5, "rx_nz")?),
                tx_size: (p(6, "tx_nx")?, p(7, "tx_nz")?),
                rx_slots: p(8, "I")?,
                tx_slots: p(9, "J")?,
                y_max: x(10, "y_max")?,
            },
            nmse_a,
            nmse_b: x(12, "nmse_B")?,
            nmse_channel: x(13, "nmse_channel")?,
            iterations: p(14, "iterations")?,
            converged: f(15) == "true",
            wall_ms: x(16, "wall_ms")?,
            error: nmse_a.is_nan().then(|| "failed".to_string()),
        });
    }
    Ok(out)
}

/// `results.csv` -> `results_summary.csv`.
pub fn summary_path(trials_path: &Path) -> PathBuf {
    let stem = trials_path.file_stem().map_or_else(|| "results".into(), |s| s.to_string_lossy().into_owned());
    let name = match trials_path.extension() {
        Some(ext) => format!("{stem}_summary.{}", ext.to_string_lossy()),
        None => format!("{stem}_summary"),
    };
    trials_path.with_file_name(name)
}

/// Runs the experiment and writes the per-trial and summary CSVs next to
/// each other.
pub fn run_and_write(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let out = run_experiment(cfg)?;
    write_trials_csv(&cfg.output, &out.records, cfg.record_timing)?;
    write_summary_csv(&summary_path(&cfg.output), &out.summaries)?;
    Ok(out)
}
