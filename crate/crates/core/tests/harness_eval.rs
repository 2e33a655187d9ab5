//! Grid evaluation behavior on small nets: benign-row identities,
//! per-sample log consistency, histogram mass, cache keying, and
//! byte-identical report output.

use edens_core::attacks::AttackSpec;
use edens_core::data::gen_two_moons;
use edens_core::harness::{
    cache_key, emit_report, metrics_csv, run_attack_eval, selection_histograms, DataConfig,
    ExperimentConfig, Report,
};
use edens_core::numerics::RngStream;
use edens_core::policy::PolicySpec;
use edens_core::train::TrainConfig;
use edens_core::{Architecture, BaselineNet, EnsembleNet};

fn small_ensemble(members: usize, seed: u64) -> EnsembleNet {
    let mut rng = RngStream::from_seed(seed);
    let baseline = BaselineNet::init(Architecture::mlp(2, 2), &mut rng).unwrap();
    EnsembleNet::init_from_pretrained(&baseline, members, 2, 0.1, &mut rng).unwrap()
}

fn small_config(members: usize) -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            members,
            rank: 2,
            epochs: 1,
            batch_size: 16,
            adv: AttackSpec::fgsm(0.05),
            seed: 11,
            ..TrainConfig::default()
        },
        data: DataConfig::TwoMoons {
            n_train: 60,
            n_test: 24,
            noise: 0.12,
        },
        pretrain_epochs: 10,
        attacks: vec![AttackSpec::fgsm(0.04), AttackSpec::pgd(0.05, 3, 0.02)],
        eval_samples: 0,
        ..ExperimentConfig::default()
    }
}

#[test]
fn zero_eps_attack_row_reproduces_the_benign_row() {
    let net = small_ensemble(3, 21);
    let mut rng = RngStream::from_seed(22);
    let test = gen_two_moons(30, 0.1, &mut rng).unwrap();
    let mut cfg = small_config(3);
    // A do-nothing attack: every policy row, stochastic included, must
    // match the benign row because policy streams pair across conditions.
    cfg.attacks = vec![AttackSpec::pgd(0.0, 2, 0.01)];
    let (table, evals) = run_attack_eval(&net, None, &test, &cfg).unwrap();
    assert_eq!(evals.len(), 2);
    assert_eq!(evals[0].predictions, evals[1].predictions);
    let benign: Vec<_> = table.rows.iter().filter(|r| r.attack == "none").collect();
    let null_attack: Vec<_> = table.rows.iter().filter(|r| r.attack == "pgd").collect();
    assert_eq!(benign.len(), 5);
    for (b, z) in benign.iter().zip(&null_attack) {
        assert_eq!(b.policy, z.policy);
        assert_eq!(b.accuracy, z.accuracy);
        assert_eq!(b.proportion, z.proportion);
    }
}

#[test]
fn aggregates_recompute_from_per_sample_logs() {
    let net = small_ensemble(2, 31);
    let mut rng = RngStream::from_seed(32);
    let test = gen_two_moons(25, 0.15, &mut rng).unwrap();
    let cfg = small_config(2);
    let (table, evals) = run_attack_eval(&net, None, &test, &cfg).unwrap();
    assert_eq!(table.rows.len(), evals.len() * cfg.policies.len());
    for row in &table.rows {
        let eval = evals
            .iter()
            .find(|e| e.attack == row.attack && e.eps == row.eps)
            .unwrap();
        let preds = &eval.predictions[&row.policy];
        let hits = preds
            .iter()
            .zip(&eval.labels)
            .filter(|(p, l)| p == l)
            .count();
        assert_eq!(row.accuracy, hits as f64 / eval.labels.len() as f64);
        let total: usize = eval.member_correct.iter().sum();
        assert_eq!(row.proportion, total as f64 / eval.labels.len() as f64);
    }
}

#[test]
fn histograms_cover_every_sample_and_collapse_for_one_member() {
    let net = small_ensemble(3, 41);
    let mut rng = RngStream::from_seed(42);
    let test = gen_two_moons(20, 0.1, &mut rng).unwrap();
    let cfg = small_config(3);
    let (_, evals) = run_attack_eval(&net, None, &test, &cfg).unwrap();
    let hists = selection_histograms(&evals, 3).unwrap();
    assert_eq!(hists.len(), evals.len());
    for h in &hists {
        assert_eq!(h.counts.iter().sum::<usize>(), 20);
    }

    let solo = small_ensemble(1, 43);
    let mut cfg = small_config(1);
    cfg.policies = vec![PolicySpec::Uncertain { h: 1 }, PolicySpec::Average, PolicySpec::Dsc];
    let (_, evals) = run_attack_eval(&solo, None, &test, &cfg).unwrap();
    for h in selection_histograms(&evals, 1).unwrap() {
        assert_eq!(h.counts, vec![20]);
    }
}

#[test]
fn cache_keys_separate_crafting_models() {
    let victim = small_ensemble(2, 51);
    let surrogate_a = small_ensemble(2, 52);
    let mut rng = RngStream::from_seed(53);
    let baseline = BaselineNet::init(Architecture::mlp(2, 2), &mut rng).unwrap();
    let spec = AttackSpec::pgd(0.05, 3, 0.02);

    let white_box = cache_key(&spec, &victim);
    let transfer_a = cache_key(&spec, &surrogate_a);
    let transfer_b = cache_key(&spec, &baseline);
    assert_ne!(white_box, transfer_a);
    assert_ne!(white_box, transfer_b);
    assert_ne!(transfer_a, transfer_b);
    assert_eq!(white_box, cache_key(&spec, &victim));

    let other_spec = AttackSpec::pgd(0.06, 3, 0.02);
    assert_ne!(cache_key(&spec, &victim), cache_key(&other_spec, &victim));
}

#[test]
fn transfer_and_white_box_rows_differ_on_the_same_grid() {
    let victim = small_ensemble(2, 61);
    let surrogate = small_ensemble(2, 62);
    let mut rng = RngStream::from_seed(63);
    let test = gen_two_moons(20, 0.1, &mut rng).unwrap();
    let mut cfg = small_config(2);
    cfg.attacks = vec![AttackSpec::fgsm(0.08)];
    let (white, _) = run_attack_eval(&victim, None, &test, &cfg).unwrap();
    let (transfer, _) = run_attack_eval(&victim, Some(&surrogate), &test, &cfg).unwrap();
    // Benign rows agree; the attacked inputs come from different models.
    let benign = |t: &edens_core::MetricsTable| {
        t.rows
            .iter()
            .filter(|r| r.attack == "none")
            .map(|r| (r.policy.clone(), r.accuracy))
            .collect::<Vec<_>>()
    };
    assert_eq!(benign(&white), benign(&transfer));

    // The crafted inputs themselves depend on the source model.
    let (inputs, labels) = test.slice(0, test.n_samples()).unwrap();
    let mut r1 = RngStream::from_seed(64);
    let mut r2 = RngStream::from_seed(64);
    let from_victim =
        edens_core::attacks::run_attack(&victim, &inputs, &labels, &cfg.attacks[0], &mut r1)
            .unwrap();
    let from_surrogate =
        edens_core::attacks::run_attack(&surrogate, &inputs, &labels, &cfg.attacks[0], &mut r2)
            .unwrap();
    assert!(from_victim.max_abs_diff(&from_surrogate) > 0.0);
}

#[test]
fn full_run_reports_are_byte_identical() {
    let cfg = small_config(2);
    let run = || {
        let mut rng = RngStream::from_seed(cfg.train.seed);
        let (train, test) = cfg.data.load(&mut rng).unwrap();
        let models = edens_core::harness::train_pipeline(&cfg, &train).unwrap();
        let (metrics, evals) = run_attack_eval(&models.victim, None, &test, &cfg).unwrap();
        let histograms = selection_histograms(&evals, models.victim.n_members()).unwrap();
        Report {
            config: cfg.clone(),
            metrics,
            histograms,
        }
    };
    let r1 = run();
    let r2 = run();
    assert_eq!(r1, r2);

    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let (csv1, json1) = emit_report(&r1, dir1.path()).unwrap();
    let (csv2, json2) = emit_report(&r2, dir2.path()).unwrap();
    let csv_a = std::fs::read(csv1).unwrap();
    let csv_b = std::fs::read(csv2).unwrap();
    assert_eq!(csv_a, csv_b);
    assert!(csv_a.starts_with(b"policy,attack,eps,accuracy,proportion\n"));
    let json_a = std::fs::read(json1).unwrap();
    assert_eq!(json_a, std::fs::read(json2).unwrap());

    // The JSON document reloads to the same report, config echo included.
    let parsed: Report = serde_json::from_slice(&json_a).unwrap();
    assert_eq!(parsed, r1);
    assert_eq!(parsed.config.train.seed, cfg.train.seed);

    // CSV body matches the in-memory table rendering.
    assert_eq!(csv_a, metrics_csv(&r1.metrics).into_bytes());
}
