use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use deskpick_core::curriculum::CurriculumParam;
use deskpick_core::env::{EpisodeConfig, RewardMode};
use deskpick_core::harness::{self, Profile, ReplayVerdict, RunConfig};
use deskpick_core::perception::{FrozenEncoder, ImageDataset};
use deskpick_core::policy::GaussianPolicy;
use deskpick_core::trpo::{log_to_csv, Trainer};
use deskpick_core::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "deskpick", version, about = "Curriculum TRPO for tabletop picking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Budget profile supplying defaults.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// TOML file layered over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any key, e.g. `--set trpo.max_kl=0.02` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> Result<RunConfig> {
        let text = self.config.as_deref().map(std::fs::read_to_string).transpose()?;
        let mut all = self.overrides.clone();
        all.extend_from_slice(extra);
        RunConfig::resolve(self.profile.parse::<Profile>()?, text.as_deref(), &all)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the fully resolved configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Record random-policy depth images for the autoencoder.
    CollectDataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoencoder and write the frozen encoder to `<out>.json`/`<out>.bin`.
    TrainAutoencoder {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy with TRPO.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for checkpoint, logs and report.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// Warm-start from a cloned policy stem.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Save a checkpoint every N iterations.
        #[arg(long, default_value_t = 10)]
        checkpoint_every: usize,
    },
    /// Train a simplified-task teacher and clone it into a full-task policy.
    Clone {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evaluation protocols on a policy.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Policy stem (`<stem>.json`/`<stem>.bin`).
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use mean actions instead of sampling.
        #[arg(long)]
        deterministic: bool,
        /// Also write a replayable log of one single-object episode.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Hold one curriculum parameter at its maximum and train both reward modes.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One of l, h_robot, h_lift, n_max.
        #[arg(long)]
        param: String,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one reward mode.
        #[arg(long)]
        reward: Option<String>,
    },
    /// Verify an episode log by re-executing it.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Reject logs written under another seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn encoder(cfg: &RunConfig) -> Result<Arc<FrozenEncoder>> {
    Ok(Arc::new(harness::load_encoder(cfg)?))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    harness::write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn provenance(cfg: &RunConfig) -> serde_json::Value {
    json!({
        "code_version": harness::CODE_VERSION,
        "config_hash": cfg.hash(),
        "seeds": cfg.seed_list(),
    })
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Config { cfg } => {
            print!("{}", cfg.resolve(&[])?.to_toml());
        }
        Command::CollectDataset { cfg, out } => {
            let cfg = cfg.resolve(&[])?;
            let data = harness::collect_images(&cfg)?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            data.save(&out)?;
            eprintln!("wrote {} images to {}", data.len(), out.display());
        }
        Command::TrainAutoencoder { cfg, dataset, out } => {
            let cfg = cfg.resolve(&[])?;
            let data = ImageDataset::load(&dataset)?;
            let (enc, report) = harness::train_encoder_on(&cfg, &data)?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            enc.save(&out)?;
            write_json(
                &out.with_extension("report.json"),
                &json!({"provenance": provenance(&cfg), "encoder_fingerprint": enc.fingerprint(), "training": report}),
            )?;
            eprintln!(
                "held-out loss {:.5} -> {:.5}; encoder {}",
                report.heldout_initial,
                report.heldout_final,
                out.display()
            );
        }
        Command::Train {
            cfg,
            out,
            resume,
            init,
            checkpoint_every,
        } => {
            let cfg = cfg.resolve(&[])?;
            let enc = encoder(&cfg)?;
            let ckpt = out.join("checkpoint");
            let mut trainer = if resume {
                Trainer::resume(&ckpt, enc)?
            } else {
                let init = init.as_deref().map(GaussianPolicy::load).transpose()?;
                let tc = cfg.train_config(cfg.model, cfg.curriculum_for(cfg.model), cfg.seed, cfg.max_env_steps);
                Trainer::new(tc, enc, init)?
            };
            std::fs::create_dir_all(&out)?;
            harness::write_file(&out.join("config.toml"), &cfg.to_toml())?;
            while !trainer.finished() {
                let r = trainer.iterate()?;
                eprintln!(
                    "it {:4} steps {:8} window {:.3} lambda {:.3} kl {:.4} return {:.2}",
                    r.iteration, r.env_steps, r.success_rate_window, r.lambda, r.mean_kl, r.mean_return
                );
                if trainer.iteration % checkpoint_every.max(1) == 0 {
                    trainer.save_checkpoint(&ckpt)?;
                }
            }
            trainer.save_checkpoint(&ckpt)?;
            harness::write_file(&out.join("log.csv"), &trainer.log_csv()?)?;
            trainer.best_policy().save(&out.join("best"))?;
            trainer.policy.save(&out.join("final"))?;
            write_json(
                &out.join("train.json"),
                &json!({
                    "provenance": provenance(&cfg),
                    "model": cfg.model,
                    "seed": trainer.config.seed,
                    "iterations": trainer.iteration,
                    "env_steps": trainer.env_steps,
                    "final_stage": trainer.curriculum.k,
                    "best_iteration": trainer.best.as_ref().map(|b| b.iteration),
                    "best_policy": harness::policy_fingerprint(&trainer.best_policy()),
                }),
            )?;
        }
        Command::Clone { cfg, out } => {
            let cfg = cfg.resolve(&[])?;
            let enc = encoder(&cfg)?;
            let bc = harness::bc_pipeline(&cfg, enc, cfg.seed)?;
            std::fs::create_dir_all(&out)?;
            bc.teacher.best.save(&out.join("teacher"))?;
            bc.cloned.save(&out.join("cloned"))?;
            harness::write_file(&out.join("teacher_log.csv"), &log_to_csv(&bc.teacher.log)?)?;
            write_json(
                &out.join("clone.json"),
                &json!({
                    "provenance": provenance(&cfg),
                    "lambda": cfg.bc.lambda,
                    "samples": bc.dataset.len(),
                    "heldout_samples": bc.heldout_idx.len(),
                    "heldout_action_mse": bc.heldout_mse,
                    "cloned_policy": harness::policy_fingerprint(&bc.cloned),
                }),
            )?;
            eprintln!("held-out action MSE {:.5}", bc.heldout_mse);
        }
        Command::Evaluate {
            cfg,
            policy,
            out,
            deterministic,
            record,
        } => {
            let extra = if deterministic { vec!["eval.deterministic=true".to_string()] } else { vec![] };
            let cfg = cfg.resolve(&extra)?;
            let enc = encoder(&cfg)?;
            let policy = GaussianPolicy::load(&policy)?;
            let report = harness::evaluate(&cfg, &policy, enc.clone())?;
            let text = report.to_json() + "\n";
            match out {
                Some(p) => harness::write_file(&p, &text)?,
                None => print!("{text}"),
            }
            if let Some(path) = record {
                let ws = cfg.curriculum.params_at(cfg.eval.lambda)?;
                let ep = EpisodeConfig::new(ws, RewardMode::Sparse, policy.task);
                let log = harness::record_episode(&policy, enc, cfg.sim, ep, cfg.eval.seed, cfg.eval.deterministic)?;
                harness::write_file(&path, &log)?;
            }
        }
        Command::Ablation { cfg, param, out, reward } => {
            let cfg = cfg.resolve(&[])?;
            let param: CurriculumParam = param.parse()?;
            let modes = match reward.as_deref() {
                None => vec![RewardMode::Sparse, RewardMode::Shaped],
                Some("sparse") => vec![RewardMode::Sparse],
                Some("shaped") => vec![RewardMode::Shaped],
                Some(o) => return Err(Error::Config(format!("unknown reward mode {o:?}"))),
            };
            let arms = harness::run_ablation(&cfg, param, encoder(&cfg)?, &modes)?;
            let mut summary = Vec::new();
            for (arm, logs) in &arms {
                let tag = serde_json::to_value(arm.reward_mode)?.as_str().unwrap_or("mode").to_string();
                for (seed, log) in arm.seeds.iter().zip(logs) {
                    harness::write_file(&out.join(format!("{tag}_seed{seed}.csv")), &log_to_csv(log)?)?;
                }
                harness::write_file(&out.join(format!("{tag}_median.csv")), &harness::median_csv(&arm.median)?)?;
                summary.push(json!({
                    "reward_mode": arm.reward_mode,
                    "final_success": arm.final_success,
                    "median_final_success": arm.median_final_success,
                }));
                eprintln!("{tag}: median final success {:.3}", arm.median_final_success);
            }
            write_json(
                &out.join("ablation.json"),
                &json!({"provenance": provenance(&cfg), "frozen": param.name(), "arms": summary}),
            )?;
        }
        Command::Replay { log, seed } => {
            let text = std::fs::read_to_string(&log)?;
            let verdict = harness::replay(&text, seed);
            println!("{}", serde_json::to_string(&verdict)?);
            return Ok(match verdict {
                ReplayVerdict::Match { .. } => 0,
                ReplayVerdict::Mismatch { .. } => 1,
                ReplayVerdict::Rejected { .. } => 2,
            });
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
