//! Experiment driver around the edens-core library. Every subcommand
//! reads one TOML config; model state travels through checkpoint files,
//! results through CSV/JSON reports. Exit code 0 means every invariant
//! self-check passed.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use edens_core::attacks::{AttackFamily, AttackModel, AttackSpec, LossTarget};
use edens_core::data::{Dataset, Split};
use edens_core::ensemble::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
use edens_core::harness::{
    emit_report, run_attack_eval, selection_histograms, train_pipeline, ExperimentConfig, Report,
};
use edens_core::numerics::RngStream;
use edens_core::train::pretrain_baseline;

#[derive(Parser)]
#[command(name = "edens", about = "Uncertainty-driven dynamic ensemble selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's training seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(&self.config)
            .with_context(|| format!("reading {}", self.config.display()))?;
        let mut cfg = ExperimentConfig::from_toml(&text)
            .with_context(|| format!("parsing {}", self.config.display()))?;
        if let Some(seed) = self.seed_override {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the softmax backbone and write its checkpoint.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the ensemble (pretraining first unless the config names
    /// a baseline checkpoint) and write its checkpoint plus history.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint output path; history lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Craft one adversarial test set and write it as a dataset JSON.
    Attack {
        #[command(flatten)]
        config: ConfigArg,
        /// Model the examples are crafted against.
        #[arg(long)]
        victim: PathBuf,
        /// Craft against this model instead (transfer mode).
        #[arg(long)]
        surrogate: Option<PathBuf>,
        /// Attack family: fgsm, pgd, mim, cw, dim, tim.
        #[arg(long)]
        attack: AttackFamily,
        /// L-inf budget.
        #[arg(long)]
        eps: f64,
        /// Iteration count; defaults to 1 for fgsm, 20 otherwise.
        #[arg(long)]
        steps: Option<usize>,
        /// Per-iteration step size; defaults to 1/255.
        #[arg(long)]
        step_size: Option<f64>,
        /// Loss readout: member, member-N, avg, or dsc.
        #[arg(long)]
        loss_target: Option<LossTarget>,
        /// Output path for the perturbed dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the policy-by-attack grid against a trained victim.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        victim: PathBuf,
        /// Overrides the config's surrogate checkpoint.
        #[arg(long)]
        surrogate: Option<PathBuf>,
        /// Report directory; defaults to the config's out_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Selection-frequency histograms per condition.
    Dynamics {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// End to end: train, evaluate, emit the report.
    Report {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn as_attack_model(ckpt: &Checkpoint) -> &dyn AttackModel {
    match &ckpt.model {
        ModelKind::Baseline(net) => net,
        ModelKind::Ensemble(net) => net,
    }
}

fn surrogate_from(
    flag: Option<&PathBuf>,
    cfg: &ExperimentConfig,
) -> Result<Option<Checkpoint>> {
    let path = flag.or(cfg.surrogate.as_ref());
    path.map(|p| load_model(p)).transpose()
}

fn build_attack_spec(
    family: AttackFamily,
    eps: f64,
    steps: Option<usize>,
    step_size: Option<f64>,
    loss_target: Option<LossTarget>,
) -> Result<AttackSpec> {
    let step = step_size.unwrap_or(1.0 / 255.0);
    let iters = steps.unwrap_or(match family {
        AttackFamily::Fgsm => 1,
        _ => 20,
    });
    let mut spec = match family {
        AttackFamily::Fgsm => AttackSpec::fgsm(eps),
        AttackFamily::Pgd => AttackSpec::pgd(eps, iters, step),
        AttackFamily::Mim => AttackSpec::mim(eps, iters, step),
        AttackFamily::Cw => AttackSpec::cw(eps, iters, step),
        AttackFamily::Dim => AttackSpec::dim(eps, iters, step),
        AttackFamily::Tim => AttackSpec::tim(eps, iters, step),
    };
    if family == AttackFamily::Fgsm {
        if let Some(s) = steps {
            spec.steps = s;
        }
        if let Some(s) = step_size {
            spec.step_size = s;
        }
    }
    if let Some(t) = loss_target {
        spec = spec.with_target(t);
    }
    spec.validate()?;
    Ok(spec)
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain { config, out } => {
            let cfg = config.load()?;
            let mut rng = RngStream::from_seed(cfg.train.seed).child(0x9E7);
            let (train, _) = cfg.data.load(&mut RngStream::from_seed(cfg.train.seed))?;
            let arch = cfg.data.architecture(Some(train.n_classes));
            let net = pretrain_baseline(&arch, &train, cfg.pretrain_epochs, cfg.pretrain_lr, &mut rng)?;
            let acc = edens_core::train::baseline_accuracy(&net, &train)?;
            save_checkpoint(&out, &Checkpoint::baseline(cfg.train.seed, net))?;
            println!("baseline train accuracy {acc:.4}");
            println!("wrote {}", out.display());
        }
        Command::Train { config, out } => {
            let cfg = config.load()?;
            let (train, _) = cfg.data.load(&mut RngStream::from_seed(cfg.train.seed))?;
            let models = train_pipeline(&cfg, &train)?;
            save_checkpoint(&out, &Checkpoint::ensemble(cfg.train.seed, models.victim))?;
            let history_path = out.with_extension("history.json");
            let mut text = serde_json::to_string_pretty(&models.history)?;
            text.push('\n');
            std::fs::write(&history_path, text)?;
            if let Some(last) = models.history.epochs.last() {
                println!("final mean loss {:.6}", last.mean_loss);
            }
            println!("wrote {}", out.display());
            println!("wrote {}", history_path.display());
        }
        Command::Attack {
            config,
            victim,
            surrogate,
            attack,
            eps,
            steps,
            step_size,
            loss_target,
            out,
        } => {
            let cfg = config.load()?;
            let spec = build_attack_spec(attack, eps, steps, step_size, loss_target)?;
            let victim_ckpt = load_model(&victim)?;
            let surrogate_ckpt = surrogate_from(surrogate.as_ref(), &cfg)?;
            let source = surrogate_ckpt
                .as_ref()
                .map(as_attack_model)
                .unwrap_or_else(|| as_attack_model(&victim_ckpt));
            let (_, test) = cfg.data.load(&mut RngStream::from_seed(cfg.train.seed))?;
            let count = if cfg.eval_samples == 0 {
                test.n_samples()
            } else {
                test.n_samples().min(cfg.eval_samples)
            };
            let (inputs, labels) = test.slice(0, count)?;
            let mut rng = RngStream::from_seed(cfg.train.seed).child(0xADA);
            let adv = edens_core::attacks::run_attack(source, &inputs, &labels, &spec, &mut rng)?;
            let ds = Dataset::new(adv, labels, test.n_classes, Split::Test)?;
            let mut text = serde_json::to_string(&ds)?;
            text.push('\n');
            std::fs::write(&out, text)?;
            println!("wrote {} ({} samples)", out.display(), count);
        }
        Command::Eval {
            config,
            victim,
            surrogate,
            out_dir,
        } => {
            let cfg = config.load()?;
            let victim_ckpt = load_model(&victim)?;
            let net = victim_ckpt.as_ensemble()?;
            let surrogate_ckpt = surrogate_from(surrogate.as_ref(), &cfg)?;
            let (_, test) = cfg.data.load(&mut RngStream::from_seed(cfg.train.seed))?;
            let (metrics, evals) = run_attack_eval(
                net,
                surrogate_ckpt.as_ref().map(as_attack_model),
                &test,
                &cfg,
            )?;
            let histograms = selection_histograms(&evals, net.n_members())?;
            metrics.self_check(net.n_members())?;
            let report = Report {
                config: cfg.clone(),
                metrics,
                histograms,
            };
            let dir = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
            let (csv, json) = emit_report(&report, &dir)?;
            println!(
                "self-checks passed ({} rows, {} histograms)",
                report.metrics.rows.len(),
                report.histograms.len()
            );
            println!("wrote {}", csv.display());
            println!("wrote {}", json.display());
        }
        Command::Dynamics {
            config,
            victim,
            surrogate,
            out_dir,
        } => {
            let cfg = config.load()?;
            let victim_ckpt = load_model(&victim)?;
            let net = victim_ckpt.as_ensemble()?;
            let surrogate_ckpt = surrogate_from(surrogate.as_ref(), &cfg)?;
            let (_, test) = cfg.data.load(&mut RngStream::from_seed(cfg.train.seed))?;
            let (_, evals) = run_attack_eval(
                net,
                surrogate_ckpt.as_ref().map(as_attack_model),
                &test,
                &cfg,
            )?;
            let histograms = selection_histograms(&evals, net.n_members())?;
            let dir = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("dynamics.json");
            let mut text = serde_json::to_string_pretty(&histograms)?;
            text.push('\n');
            std::fs::write(&path, text)?;
            println!("self-checks passed ({} histograms)", histograms.len());
            println!("wrote {}", path.display());
        }
        Command::Report { config, out_dir } => {
            let cfg = config.load()?;
            let mut rng = RngStream::from_seed(cfg.train.seed);
            let (train, test) = cfg.data.load(&mut rng)?;
            let models = train_pipeline(&cfg, &train)?;
            let surrogate_ckpt = surrogate_from(None, &cfg)?;
            let (metrics, evals) = run_attack_eval(
                &models.victim,
                surrogate_ckpt.as_ref().map(as_attack_model),
                &test,
                &cfg,
            )?;
            let histograms = selection_histograms(&evals, models.victim.n_members())?;
            metrics.self_check(models.victim.n_members())?;
            let report = Report {
                config: cfg.clone(),
                metrics,
                histograms,
            };
            let dir = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
            let (csv, json) = emit_report(&report, &dir)?;
            println!(
                "self-checks passed ({} rows, {} histograms)",
                report.metrics.rows.len(),
                report.histograms.len()
            );
            println!("wrote {}", csv.display());
            println!("wrote {}", json.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
