//! Experiment orchestration: dataset assembly, the attack-by-policy
//! evaluation grid, selection-frequency histograms, and deterministic
//! CSV/JSON reports.
//!
//! Per-sample records are the source of truth; every aggregate in a
//! report can be recomputed from them exactly, and the self-checks do.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{run_attack, AttackError, AttackModel, AttackSpec};
use crate::data::{data_dir, DataError, Dataset, Split};
use crate::ensemble::{Architecture, BaselineNet, EnsembleError, EnsembleNet};
use crate::evidential::{DirichletOpinion, EvidentialError};
use crate::numerics::RngStream;
use crate::policy::{policy_predict, PolicyError, PolicySpec, SubsetFusion};
use crate::tensor::{Array, TensorError};
use crate::train::{fit, member_opinions, pretrain_baseline, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {detail}")]
    BadConfig { detail: String },
    #[error("self-check failed: {detail}")]
    SelfCheck { detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Evidential(#[from] EvidentialError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where the experiment's samples come from. Relative file paths resolve
/// against DES_DATA_DIR when that variable is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataConfig {
    TwoMoons {
        n_train: usize,
        n_test: usize,
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Seeded training subset; None keeps everything.
        subset: Option<usize>,
    },
    Cifar10 {
        train_batches: Vec<PathBuf>,
        test_batch: PathBuf,
        subset: Option<usize>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::TwoMoons {
            n_train: 2000,
            n_test: 500,
            noise: 0.15,
        }
    }
}

fn resolve(path: &Path) -> PathBuf {
    match data_dir() {
        Some(root) if path.is_relative() => root.join(path),
        _ => path.to_path_buf(),
    }
}

impl DataConfig {
    /// Input geometry the model must be built for.
    pub fn architecture(&self, n_classes_override: Option<usize>) -> Architecture {
        match self {
            Self::TwoMoons { .. } => Architecture::mlp(2, n_classes_override.unwrap_or(2)),
            Self::Idx { .. } => Architecture::conv_small(1, 28, 28, n_classes_override.unwrap_or(10)),
            Self::Cifar10 { .. } => {
                Architecture::conv_small(3, 32, 32, n_classes_override.unwrap_or(10))
            }
        }
    }

    pub fn load(&self, rng: &mut RngStream) -> Result<(Dataset, Dataset), HarnessError> {
        match self {
            Self::TwoMoons {
                n_train,
                n_test,
                noise,
            } => {
                let train = crate::data::gen_two_moons(*n_train, *noise, &mut rng.child(1))?;
                let mut test = crate::data::gen_two_moons(*n_test, *noise, &mut rng.child(2))?;
                test.split = Split::Test;
                Ok((train, test))
            }
            Self::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                subset,
            } => {
                let mut train =
                    crate::data::load_idx(&resolve(train_images), &resolve(train_labels))?;
                if let Some(n) = subset {
                    train = train.subset(*n, &mut rng.child(3))?;
                }
                let mut test = crate::data::load_idx(&resolve(test_images), &resolve(test_labels))?;
                test.split = Split::Test;
                Ok((train, test))
            }
            Self::Cifar10 {
                train_batches,
                test_batch,
                subset,
            } => {
                let paths: Vec<PathBuf> = train_batches.iter().map(|p| resolve(p)).collect();
                let mut train = crate::data::load_cifar10_bin(&paths)?;
                if let Some(n) = subset {
                    train = train.subset(*n, &mut rng.child(3))?;
                }
                let mut test = crate::data::load_cifar10_bin(&[resolve(test_batch)])?;
                test.split = Split::Test;
                Ok((train, test))
            }
        }
    }
}

const EPS_SMALL: f64 = 8.0 / 255.0;
const EPS_LARGE: f64 = 16.0 / 255.0;

/// Evaluation attack grid: the four white-box families at 20 iterations
/// with step 1/255, at both budgets.
pub fn white_box_grid() -> Vec<AttackSpec> {
    let step = 1.0 / 255.0;
    let mut grid = Vec::new();
    for eps in [EPS_SMALL, EPS_LARGE] {
        grid.push(AttackSpec::fgsm(eps));
        grid.push(AttackSpec::pgd(eps, 20, step));
        grid.push(AttackSpec::mim(eps, 20, step));
        grid.push(AttackSpec::cw(eps, 20, step));
    }
    grid
}

/// Transfer grid: same families, 50 iterations against the surrogate.
pub fn transfer_grid() -> Vec<AttackSpec> {
    let step = 1.0 / 255.0;
    let mut grid = Vec::new();
    for eps in [EPS_SMALL, EPS_LARGE] {
        grid.push(AttackSpec::fgsm(eps));
        grid.push(AttackSpec::pgd(eps, 50, step));
        grid.push(AttackSpec::mim(eps, 50, step));
        grid.push(AttackSpec::cw(eps, 50, step));
    }
    grid
}

pub fn default_policies() -> Vec<PolicySpec> {
    vec![
        PolicySpec::Uncertain { h: 1 },
        PolicySpec::Uncertain { h: 2 },
        PolicySpec::Stochastic { h: 2 },
        PolicySpec::Average,
        PolicySpec::Dsc,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub attacks: Vec<AttackSpec>,
    pub policies: Vec<PolicySpec>,
    pub subset_fusion: SubsetFusion,
    /// Checkpoint whose model crafts the adversarial examples; absent
    /// means white-box against the victim itself.
    pub surrogate: Option<PathBuf>,
    /// Pretrained backbone checkpoint; absent pretrains from scratch.
    pub baseline: Option<PathBuf>,
    /// Cap on test samples per condition; 0 evaluates the whole test set.
    pub eval_samples: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataConfig::default(),
            pretrain_epochs: 50,
            pretrain_lr: 0.1,
            attacks: white_box_grid(),
            policies: default_policies(),
            subset_fusion: SubsetFusion::Mean,
            surrogate: None,
            baseline: None,
            eval_samples: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.train.validate()?;
        if self.policies.is_empty() {
            return Err(HarnessError::BadConfig {
                detail: "need at least one policy".into(),
            });
        }
        for p in &self.policies {
            p.validate_for(self.train.members)?;
        }
        if self.attacks.is_empty() {
            return Err(HarnessError::BadConfig {
                detail: "need at least one attack".into(),
            });
        }
        for a in &self.attacks {
            a.validate()?;
        }
        if !(self.pretrain_lr.is_finite() && self.pretrain_lr > 0.0) {
            return Err(HarnessError::BadConfig {
                detail: format!("pretrain_lr {} must be finite and > 0", self.pretrain_lr),
            });
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::BadConfig {
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One grid cell of the final table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub policy: String,
    /// Attack family name; "none" on the benign row.
    pub attack: String,
    pub eps: f64,
    pub accuracy: f64,
    /// Mean count of individually correct members.
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn self_check(&self, members: usize) -> Result<(), HarnessError> {
        for row in &self.rows {
            if !(0.0..=1.0).contains(&row.accuracy) {
                return Err(HarnessError::SelfCheck {
                    detail: format!(
                        "{} / {} eps {}: accuracy {} outside [0, 1]",
                        row.policy, row.attack, row.eps, row.accuracy
                    ),
                });
            }
            if !(0.0..=members as f64).contains(&row.proportion) {
                return Err(HarnessError::SelfCheck {
                    detail: format!(
                        "{} / {} eps {}: proportion {} outside [0, {members}]",
                        row.policy, row.attack, row.eps, row.proportion
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Per-member pick frequency of the argmin-entropy rule on one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionHistogram {
    pub attack: String,
    pub eps: f64,
    pub counts: Vec<usize>,
}

impl SelectionHistogram {
    pub fn self_check(&self, n_samples: usize) -> Result<(), HarnessError> {
        let total: usize = self.counts.iter().sum();
        if total != n_samples {
            return Err(HarnessError::SelfCheck {
                detail: format!(
                    "{} eps {}: histogram mass {total} for {n_samples} samples",
                    self.attack, self.eps
                ),
            });
        }
        Ok(())
    }

    /// Total-variation distance between two histograms over the same
    /// member set.
    pub fn tv_distance(&self, other: &Self) -> Result<f64, HarnessError> {
        if self.counts.len() != other.counts.len() {
            return Err(HarnessError::SelfCheck {
                detail: format!(
                    "histograms over {} vs {} members",
                    self.counts.len(),
                    other.counts.len()
                ),
            });
        }
        let na: usize = self.counts.iter().sum();
        let nb: usize = other.counts.iter().sum();
        if na == 0 || nb == 0 {
            return Err(HarnessError::SelfCheck {
                detail: "empty histogram".into(),
            });
        }
        let mut tv = 0.0;
        for (a, b) in self.counts.iter().zip(&other.counts) {
            tv += (*a as f64 / na as f64 - *b as f64 / nb as f64).abs();
        }
        Ok(tv / 2.0)
    }
}

/// Everything measured on one condition, per sample. Aggregates are
/// derived from these and nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEval {
    pub attack: String,
    pub eps: f64,
    pub labels: Vec<usize>,
    /// Predicted class per sample, per policy.
    pub predictions: BTreeMap<String, Vec<usize>>,
    /// Individually correct members per sample.
    pub member_correct: Vec<usize>,
    /// Argmin-entropy member per sample.
    pub argmin_member: Vec<usize>,
}

impl ConditionEval {
    pub fn accuracy(&self, policy: &str) -> Option<f64> {
        let preds = self.predictions.get(policy)?;
        let hits = preds.iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        Some(hits as f64 / self.labels.len() as f64)
    }

    pub fn proportion(&self) -> f64 {
        let total: usize = self.member_correct.iter().sum();
        total as f64 / self.member_correct.len() as f64
    }
}

/// Adversarial inputs are cached per (attack spec, crafting model), so a
/// surrogate-crafted batch can never be replayed as white-box or against
/// a different surrogate.
pub fn cache_key(spec: &AttackSpec, source: &dyn AttackModel) -> String {
    format!(
        "{}|{:016x}",
        serde_json::to_string(spec).expect("attack spec serializes"),
        source.params_fingerprint()
    )
}

fn evaluate_condition(
    victim: &EnsembleNet,
    attack_name: &str,
    eps: f64,
    inputs: &Array,
    labels: &[usize],
    policies: &[PolicySpec],
    fusion: SubsetFusion,
    policy_rng_root: &RngStream,
) -> Result<ConditionEval, HarnessError> {
    let ops = member_opinions(victim, inputs)?;
    let members = ops.len();
    let n = labels.len();

    let mut member_correct = vec![0usize; n];
    let mut argmin_member = vec![0usize; n];
    for i in 0..n {
        let mut best = 0usize;
        let mut best_h = f64::INFINITY;
        for m in 0..members {
            let mean = ops[m][i].predictive_mean();
            let pred = argmax(&mean);
            if pred == labels[i] {
                member_correct[i] += 1;
            }
            let h = ops[m][i].entropy();
            if h < best_h {
                best_h = h;
                best = m;
            }
        }
        argmin_member[i] = best;
    }

    let mut predictions = BTreeMap::new();
    for (pi, spec) in policies.iter().enumerate() {
        // The stream is keyed by policy index only, so stochastic draws
        // pair up across conditions and an eps-0 attack row reproduces
        // the benign row exactly.
        let mut rng = policy_rng_root.child(pi as u64);
        let mut preds = Vec::with_capacity(n);
        for i in 0..n {
            let opinions: Vec<DirichletOpinion> = (0..members).map(|m| ops[m][i].clone()).collect();
            let outcome = policy_predict(&opinions, *spec, fusion, &mut rng)?;
            preds.push(outcome.predicted);
        }
        predictions.insert(spec.to_string(), preds);
    }

    Ok(ConditionEval {
        attack: attack_name.to_string(),
        eps,
        labels: labels.to_vec(),
        predictions,
        member_correct,
        argmin_member,
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Full grid pass: a benign condition first, then every configured
/// attack, each policy evaluated on the same adversarial inputs.
pub fn run_attack_eval(
    victim: &EnsembleNet,
    surrogate: Option<&dyn AttackModel>,
    test: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<(MetricsTable, Vec<ConditionEval>), HarnessError> {
    cfg.validate()?;
    let count = if cfg.eval_samples == 0 {
        test.n_samples()
    } else {
        test.n_samples().min(cfg.eval_samples)
    };
    let (inputs, labels) = test.slice(0, count)?;

    let root = RngStream::from_seed(cfg.train.seed);
    let attack_rng_root = root.child(0xA77);
    let policy_rng_root = root.child(0x901);

    let mut evals = Vec::new();
    evals.push(evaluate_condition(
        victim,
        "none",
        0.0,
        &inputs,
        &labels,
        &cfg.policies,
        cfg.subset_fusion,
        &policy_rng_root,
    )?);

    let mut cache: HashMap<String, Array> = HashMap::new();
    for (ai, spec) in cfg.attacks.iter().enumerate() {
        let source: &dyn AttackModel = match surrogate {
            Some(s) => s,
            None => victim,
        };
        let key = cache_key(spec, source);
        let adv = match cache.get(&key) {
            Some(a) => a.clone(),
            None => {
                let mut rng = attack_rng_root.child(ai as u64);
                let a = run_attack(source, &inputs, &labels, spec, &mut rng)?;
                cache.insert(key, a.clone());
                a
            }
        };
        evals.push(evaluate_condition(
            victim,
            &spec.family.to_string(),
            spec.eps,
            &adv,
            &labels,
            &cfg.policies,
            cfg.subset_fusion,
            &policy_rng_root,
        )?);
    }

    let mut table = MetricsTable::default();
    for eval in &evals {
        for spec in &cfg.policies {
            let name = spec.to_string();
            let accuracy = eval.accuracy(&name).ok_or_else(|| HarnessError::SelfCheck {
                detail: format!("missing predictions for {name}"),
            })?;
            table.rows.push(MetricsRow {
                policy: name,
                attack: eval.attack.clone(),
                eps: eval.eps,
                accuracy,
                proportion: eval.proportion(),
            });
        }
    }
    table.self_check(victim.n_members())?;
    Ok((table, evals))
}

/// Selection-frequency histograms per condition, derived from the same
/// per-sample records the metrics come from.
pub fn selection_histograms(
    evals: &[ConditionEval],
    members: usize,
) -> Result<Vec<SelectionHistogram>, HarnessError> {
    let mut out = Vec::with_capacity(evals.len());
    for eval in evals {
        let mut counts = vec![0usize; members];
        for &m in &eval.argmin_member {
            if m >= members {
                return Err(HarnessError::SelfCheck {
                    detail: format!("selected member {m} of {members}"),
                });
            }
            counts[m] += 1;
        }
        let hist = SelectionHistogram {
            attack: eval.attack.clone(),
            eps: eval.eps,
            counts,
        };
        hist.self_check(eval.labels.len())?;
        out.push(hist);
    }
    Ok(out)
}

/// The whole run in one document: config echo (seed included), the
/// metrics grid, and the selection histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub metrics: MetricsTable,
    pub histograms: Vec<SelectionHistogram>,
}

pub const CSV_HEADER: &str = "policy,attack,eps,accuracy,proportion";

pub fn metrics_csv(table: &MetricsTable) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.policy, row.attack, row.eps, row.accuracy, row.proportion
        )
        .expect("string write");
    }
    out
}

/// Writes report.csv and report.json under `dir`; bytes are a pure
/// function of the report content.
pub fn emit_report(report: &Report, dir: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("report.csv");
    let json_path = dir.join("report.json");
    std::fs::write(&csv_path, metrics_csv(&report.metrics))?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(&json_path, json)?;
    Ok((csv_path, json_path))
}

/// Models produced by a full experiment run.
pub struct TrainedModels {
    pub baseline: BaselineNet,
    pub victim: EnsembleNet,
    pub history: TrainHistory,
}

/// Pretrain the backbone (or load it from `cfg.baseline`), expand it
/// into the ensemble, fine-tune.
pub fn train_pipeline(
    cfg: &ExperimentConfig,
    train: &Dataset,
) -> Result<TrainedModels, HarnessError> {
    let arch = cfg.data.architecture(Some(train.n_classes));
    let root = RngStream::from_seed(cfg.train.seed);
    let baseline = match &cfg.baseline {
        Some(path) => {
            let ckpt = crate::ensemble::load_checkpoint(&resolve(path))?;
            let net = ckpt.as_baseline()?.clone();
            if net.arch() != &arch {
                return Err(HarnessError::BadConfig {
                    detail: format!("baseline checkpoint architecture does not match {arch:?}"),
                });
            }
            net
        }
        None => pretrain_baseline(
            &arch,
            train,
            cfg.pretrain_epochs,
            cfg.pretrain_lr,
            &mut root.child(0x9E7),
        )?,
    };
    let mut victim = EnsembleNet::init_from_pretrained(
        &baseline,
        cfg.train.members,
        cfg.train.rank,
        cfg.train.init_scale,
        &mut root.child(0x1417),
    )?;
    let history = fit(&mut victim, train, &cfg.train)?;
    Ok(TrainedModels {
        baseline,
        victim,
        history,
    })
}
