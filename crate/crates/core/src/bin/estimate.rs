use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fim_csi::harness::{self, ExperimentConfig, ExperimentOutput};

/// Monte-Carlo channel estimation sweeps for flexible-surface MIMO links.
///
/// Writes one CSV row per trial to the configured output path and per-point
/// aggregates to `<stem>_summary.<ext>` beside it.
#[derive(Parser)]
#[command(name = "estimate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a preset sweep over the SNR grid 0..20 dB.
    Sweep {
        kind: SweepKind,
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    /// Path counts 2, 3 and 4.
    Snr,
    /// 4x4 and 6x6 receive arrays.
    Array,
    /// Morph ranges 0.1, 0.25, 0.5 and 1.0 wavelengths.
    Morph,
}

/// Flags applied after the config file and any preset, so they always win.
#[derive(Args)]
struct Overrides {
    /// Comma-separated SNR list in dB; `inf` means noiseless.
    #[arg(long)]
    snr: Option<String>,
    /// Path count (a comma-separated list is also accepted).
    #[arg(long)]
    paths: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Per-trial CSV path.
    #[arg(long)]
    out: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> fim_csi::Result<()> {
        for (key, value) in [
            ("snr_db", &self.snr),
            ("L", &self.paths),
            ("trials", &self.trials),
            ("seed", &self.seed),
            ("output", &self.out),
        ] {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(())
    }
}

fn load(command: &Command) -> fim_csi::Result<ExperimentConfig> {
    let (cfg, overrides) = match command {
        Command::Run { config, overrides } => (ExperimentConfig::from_file(config)?, overrides),
        Command::Sweep { kind, config, overrides } => {
            let base = ExperimentConfig::from_file(config)?;
            let cfg = match kind {
                SweepKind::Snr => harness::snr_vs_paths(&base),
                SweepKind::Array => harness::array_size(&base),
                SweepKind::Morph => harness::morph_range(&base),
            };
            (cfg, overrides)
        }
    };
    let mut cfg = cfg;
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn report(cfg: &ExperimentConfig, out: &ExperimentOutput) {
    println!(
        "{:>5} {:>7} {:>3} {:>5} {:>6} {:>10} {:>10} {:>12} {:>7}",
        "point", "snr_db", "L", "rx", "y_max", "A [dB]", "B [dB]", "H mean/med", "failed"
    );
    for s in &out.summaries {
        let p = &s.point;
        println!(
            "{:>5} {:>7} {:>3} {:>5} {:>6} {:>10.2} {:>10.2} {:>5.1}/{:<6.1} {:>7}",
            s.sweep_id,
            p.snr_db.map_or_else(|| "inf".into(), |v| v.to_string()),
            p.paths,
            format!("{}x{}", p.rx_size.0, p.rx_size.1),
            p.y_max,
            s.mean_db[0],
            s.mean_db[1],
            s.mean_db[2],
            s.median_db[2],
            s.failed
        );
    }
    println!(
        "wrote {} and {}",
        cfg.output.display(),
        harness::summary_path(&cfg.output).display()
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load(&cli.command) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    match harness::run_and_write(&cfg) {
        Ok(out) => {
            report(&cfg, &out);
            if out.records.iter().all(|r| r.failed()) {
                eprintln!("every trial failed");
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
