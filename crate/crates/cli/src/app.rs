//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use tumorsynth::targeted_aug::KindFilter;
use tumorsynth::turing::TuringStudy;

use crate::manifest::Manifest;
use crate::{pipeline, server, CliError, RunConfig};

/// Serve address when `--addr` is not given.
pub const ADDR_ENV: &str = "TUMORSYNTH_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(name = "tumorsynth", version, about = "Text-conditioned CT tumor synthesis on phantoms")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "configs/reference.toml")]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kinds {
    Both,
    Fp,
    Fn,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render phantom training items and healthy patches.
    PhantomGen,
    /// Train the autoencoder on the phantom patches.
    TrainAe,
    /// Train the denoiser.
    TrainDiffusion {
        #[arg(long, value_enum, default_value = "on")]
        contrastive: OnOff,
        /// Defaults to the config value.
        #[arg(long, value_enum)]
        text_aug: Option<OnOff>,
        /// Add the samples of an `augment` stage directory to the training set.
        /// Without a value, the `augment` stage of this run.
        #[arg(long, value_name = "DIR", num_args = 0..=1)]
        targeted_aug: Option<Option<PathBuf>>,
    },
    /// Synthesize tumors on healthy patches.
    Synthesize {
        /// Use this report for every synthesis instead of the item reports.
        #[arg(long)]
        text: Option<String>,
    },
    /// Mine detector failures and synthesize targeted examples.
    Augment {
        #[arg(long, value_enum)]
        kinds: Option<Kinds>,
    },
    /// Radiomics diversity of varied, fixed and synthesized sets.
    RadiomicsCompare,
    /// Assemble the blinded case set and serve the reader study.
    TuringServe {
        /// Defaults to $TUMORSYNTH_ADDR or 127.0.0.1:8080.
        #[arg(long)]
        addr: Option<String>,
        /// Assemble and write the case set without serving.
        #[arg(long)]
        prepare_only: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PhantomGen => "phantom-gen",
            Command::TrainAe => "train-ae",
            Command::TrainDiffusion { .. } => "train-diffusion",
            Command::Synthesize { .. } => "synthesize",
            Command::Augment { .. } => "augment",
            Command::RadiomicsCompare => "radiomics-compare",
            Command::TuringServe { .. } => "turing-serve",
        }
    }
}

/// Applies flag overrides so the manifest echoes the effective settings.
fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    match &cli.command {
        Command::TrainDiffusion {
            contrastive, text_aug, ..
        } => {
            if *contrastive == OnOff::Off {
                cfg.contrastive.lambda_c = 0.0;
            } else if cfg.contrastive.lambda_c <= 0.0 {
                return Err(CliError::Config(
                    "--contrastive on needs contrastive.lambda_c > 0 in the config".into(),
                ));
            }
            if let Some(t) = text_aug {
                cfg.diffusion.text_aug = *t == OnOff::On;
            }
        }
        Command::Augment { kinds: Some(k) } => {
            cfg.augmentation.mining.kinds = match k {
                Kinds::Both => KindFilter::Both,
                Kinds::Fp => KindFilter::FalsePositive,
                Kinds::Fn => KindFilter::FalseNegative,
            };
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one subcommand to completion. `turing-serve` blocks until shutdown
/// unless `--prepare-only` is given.
pub fn run(cli: &Cli) -> Result<Manifest, CliError> {
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::PhantomGen => pipeline::phantom_gen(&cfg),
        Command::TrainAe => pipeline::train_ae(&cfg),
        Command::TrainDiffusion { targeted_aug, .. } => {
            let dir = targeted_aug
                .as_ref()
                .map(|p| p.clone().unwrap_or_else(|| cfg.output_dir.join(pipeline::AUGMENT)));
            pipeline::train_diffusion_stage(&cfg, dir.as_deref())
        }
        Command::Synthesize { text } => pipeline::synthesize(&cfg, text.as_deref()),
        Command::Augment { .. } => pipeline::augment_stage(&cfg),
        Command::RadiomicsCompare => pipeline::radiomics_compare(&cfg),
        Command::TuringServe { addr, prepare_only } => {
            let (manifest, cases) = pipeline::turing_prepare(&cfg)?;
            if *prepare_only {
                return Ok(manifest);
            }
            let log = pipeline::turing_log_path(&cfg);
            if let Some(dir) = log.parent() {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            let study = TuringStudy::open(cases, &cfg.output_dir, Some(&log), cfg.seed)?;
            let addr = addr
                .clone()
                .or_else(|| std::env::var(ADDR_ENV).ok())
                .unwrap_or_else(|| DEFAULT_ADDR.into());
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| CliError::Runtime(format!("tokio runtime: {e}")))?;
            rt.block_on(server::serve(study, &addr))
                .map_err(|e| CliError::Runtime(format!("server on {addr}: {e}")))?;
            Ok(manifest)
        }
    }
}
