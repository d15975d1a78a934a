use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hsi_robust::config::{DatasetConfig, RunConfig, SynthSource};
use hsi_robust::runner;
use hsi_robust::{Error, Precision, Result};

#[derive(Parser)]
#[command(name = "hsi-robust", version, about = "Adversarial training and robustness analysis for hyperspectral patch classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, epoch log and summary.
    Train(Common),
    /// Evaluate a checkpoint under the configured attacks.
    Eval(Common),
    /// Spectral envelopes, total variation and the imbalance report.
    Spectra(Common),
    /// RandAugment single-op or pool-size ablation.
    Ablate(Common),
    /// Show sampled augmentation policies on training patches.
    AugmentPreview(Common),
    /// Write the synthetic pavia-mini scene as an HSC cube.
    Synth(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint for eval and spectra (default: `<out>/checkpoint.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    precision: Option<Precision>,
}

impl Common {
    fn load(&self, default_synth: bool) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if default_synth => RunConfig::from_toml("")?,
            None => return Err(Error::Config { path: "--config".into(), message: "a run config is required".into() }),
        };
        if default_synth && cfg.dataset.is_none() {
            cfg.dataset = Some(DatasetConfig {
                path: None,
                synth: Some(SynthSource { preset: Some("pavia-mini".into()), spec: None, seed: None, blend: Vec::new() }),
                patch_size: 9,
                normalize: true,
                split: Default::default(),
            });
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        Ok(cfg)
    }
}

macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::Fast => runner::$f::<f32>($($arg),*),
            Precision::Verify => runner::$f::<f64>($($arg),*),
        }
    };
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load(false)?;
            let (log, files) = match cfg.precision {
                Precision::Fast => runner::run_train::<f32>(&cfg).map(|r| (r.log, r.files))?,
                Precision::Verify => runner::run_train::<f64>(&cfg).map(|r| (r.log, r.files))?,
            };
            println!("{}: final benign accuracy {:.2}% in {:.1}s", log.label, log.final_benign_acc().unwrap_or(f64::NAN), log.wall_s);
            print_files(&files);
        }
        Command::Eval(c) => {
            let cfg = c.load(false)?;
            let report = with_precision!(cfg.precision, run_eval(&cfg, c.checkpoint.as_deref()))?;
            for r in &report.rows {
                let note = r.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default();
                println!("{:<10} {:>7.2}%{note}", r.attack, r.accuracy);
            }
            print_files(&report.files);
        }
        Command::Spectra(c) => {
            let cfg = c.load(false)?;
            let report = with_precision!(cfg.precision, run_spectra(&cfg, c.checkpoint.as_deref()))?;
            if let Some(rep) = &report.imbalance {
                println!("flagged classes: {:?}", rep.flagged_names());
            }
            print_files(&report.files);
        }
        Command::Ablate(c) => {
            let cfg = c.load(false)?;
            let report = with_precision!(cfg.precision, run_ablation(&cfg))?;
            for r in &report.rows {
                println!("{:<14} benign {:>6.2}%  robust {:>6.2}%", r.setting, r.benign, r.robust);
            }
            print_files(&report.files);
        }
        Command::AugmentPreview(c) => {
            let cfg = c.load(false)?;
            let (samples, files) = runner::augment_preview(&cfg)?;
            for s in &samples {
                let ops: Vec<String> = s.ops.iter().map(|(o, m)| format!("{o}{m:+}")).collect();
                println!("sample {} ({}): {} max change {:.4}", s.index, s.class, ops.join(", "), s.max_abs_change);
            }
            print_files(&files);
        }
        Command::Synth(c) => {
            let cfg = c.load(true)?;
            let (cube, files) = runner::run_synth(&cfg)?;
            println!("{}x{}x{} cube, class counts {:?}", cube.height, cube.width, cube.bands, cube.class_counts());
            print_files(&files);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
