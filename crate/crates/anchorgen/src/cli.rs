use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands;
use crate::config::{parse_config, Overrides};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "anchorgen", version, about = "Pose-driven avatar video with structure-guided diffusion")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate identities, pose sequences and ground-truth test frames.
    GenData,
    /// Multi-identity pretraining on foreground-only targets.
    Pretrain,
    /// Single-identity fine-tuning (or an ablation plan, see --plan).
    Finetune,
    /// Train the face inpainting model.
    TrainFace,
    /// Generate the held-out test sequences.
    Synthesize,
    /// Face-enhance synthesized frames.
    Enhance,
    /// Score synthesized frames against ground truth.
    Evaluate {
        /// Score the enhanced frames instead.
        #[arg(long)]
        enhanced: bool,
    },
    /// Run the gradient, sampler-oracle and window-plan checks.
    Verify,
    /// Print the effective configuration as TOML.
    EmitConfig {
        /// Write to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = parse_config(cli.config.as_deref(), &cli.overrides)?;
    log::debug!("effective config:\n{}", cfg.to_toml());
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg).map(drop),
        Command::Pretrain => commands::run_pretrain(&cfg).map(drop),
        Command::Finetune => commands::run_finetune(&cfg).map(drop),
        Command::TrainFace => commands::run_train_face(&cfg).map(drop),
        Command::Synthesize => commands::synthesize(&cfg).map(drop),
        Command::Enhance => commands::enhance(&cfg).map(drop),
        Command::Evaluate { enhanced } => commands::evaluate(&cfg, *enhanced).map(drop),
        Command::Verify => commands::verify(&cfg).map(drop),
        Command::EmitConfig { out: Some(path) } => std::fs::write(path, cfg.to_toml()).map_err(|e| CliError::io(path, e)),
        Command::EmitConfig { out: None } => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_mirror_config_keys() {
        let cli = Cli::try_parse_from(["anchorgen", "synthesize", "--ws", "8", "--os", "2", "--cfg-scale", "3", "--w-c", "1.5", "--serial"]).unwrap();
        let cfg = parse_config(None, &cli.overrides).unwrap();
        assert_eq!((cfg.ws, cfg.os, cfg.cfg_scale, cfg.w_c, cfg.serial), (8, 2, 3.0, 1.5, true));
        assert!(matches!(cli.command, Command::Synthesize));
        assert!(Cli::try_parse_from(["anchorgen", "synthesize", "--window", "8"]).is_err());
    }
}
