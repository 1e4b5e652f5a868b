//! Command-line harness: dataset generation, training, evaluation, the
//! ablation ladder, and quick gradient self-checks.
//!
//! Exit codes: 0 success, 2 configuration or schema error, 3 numeric or
//! oracle failure, 4 I/O error, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metauda::config::TrainConfig;
use metauda::harness::{
    format_ablation, run_ablation, run_and_save, run_grad_check, evaluate_params,
};
use metauda::meta::load_checkpoint;
use metauda::synth::{export_dataset, generate_quartet, import_dataset, SynthDataset};
use metauda::{Error, Result};

#[derive(Parser)]
#[command(
    name = "metauda",
    about = "Micro-scale domain-adaptive detector with meta-learned initialization",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key=value configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's `run_mode` (source-only, da, meta-da, oracle).
    #[arg(long)]
    mode: Option<String>,
    /// Override the config's `ap_variant` (allpoint or 11pt).
    #[arg(long, value_name = "allpoint|11pt")]
    ap_variant: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::parse(&std::fs::read_to_string(path)?)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.meta.seed = seed;
        }
        if let Some(mode) = &self.mode {
            cfg.run_mode = mode.parse()?;
        }
        if let Some(v) = &self.ap_variant {
            cfg.ap_variant = v.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic two-domain benchmark and export it as
    /// PNG images plus JSON manifests.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for the dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run mode and write report.json, losses.csv, and
    /// checkpoint.bin under --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Use a previously exported dataset instead of regenerating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a training checkpoint on both test splits.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run every mode over the config's seed list and summarize the ladder.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare exact gradients and meta-gradients against finite
    /// differences on a small smooth network.
    GradCheck {
        /// Seed of the randomly drawn check problem.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the effective configuration in its canonical text form.
    PrintConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load_dataset(cfg: &TrainConfig, data: &Option<PathBuf>) -> Result<SynthDataset> {
    match data {
        Some(dir) => import_dataset(dir),
        None => generate_quartet(&cfg.scene, &cfg.counts, cfg.meta.seed),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let ds = generate_quartet(&cfg.scene, &cfg.counts, cfg.meta.seed)?;
            export_dataset(&ds, &out)?;
            println!(
                "wrote dataset ({} train + {} val + {} test samples per domain) to {}",
                cfg.counts.source_train,
                cfg.counts.source_val,
                cfg.counts.source_test,
                out.display()
            );
        }
        Cmd::Train { cfg, out, data } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&cfg, &data)?;
            let report = run_and_save(&cfg, &ds, &out)?;
            println!(
                "{} seed {}: source-test mAP {:.4}, target-test mAP {:.4} ({:.1}s)",
                report.mode.tag(),
                report.seed,
                report.source_test.map,
                report.target_test.map,
                report.wall_time_secs
            );
            println!("artifacts in {}", out.display());
        }
        Cmd::Eval { cfg, out, checkpoint, data } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&cfg, &data)?;
            let state = load_checkpoint(&checkpoint)?;
            let det = cfg.detector();
            let source = evaluate_params(&det, &state.params, &ds.source_test, &cfg)?;
            let target = evaluate_params(&det, &state.params, &ds.target_test, &cfg)?;
            std::fs::create_dir_all(&out)?;
            let json = serde_json::json!({
                "checkpoint": checkpoint.display().to_string(),
                "config_hash": format!("{:016x}", cfg.hash()),
                "source_test": source,
                "target_test": target,
            });
            std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&json)? + "\n")?;
            println!("source-test mAP {:.4}, target-test mAP {:.4}", source.map, target.map);
        }
        Cmd::Ablation { cfg, out } => {
            let cfg = cfg.load()?;
            let report = run_ablation(&cfg)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join("ablation.json"),
                serde_json::to_string_pretty(&report)? + "\n",
            )?;
            print!("{}", format_ablation(&report));
        }
        Cmd::GradCheck { seed } => {
            let mut failed = false;
            for line in run_grad_check(seed)? {
                println!(
                    "{}: max relative error {:.3e} (tolerance {:.0e}) ... {}",
                    line.name,
                    line.max_rel_err,
                    line.tol,
                    if line.pass { "ok" } else { "FAILED" }
                );
                failed |= !line.pass;
            }
            if failed {
                return Err(Error::OracleInvalid(
                    "analytic gradients disagree with finite differences".into(),
                ));
            }
        }
        Cmd::PrintConfig { cfg } => {
            print!("{}", cfg.load()?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
