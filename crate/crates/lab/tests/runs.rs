use bsam_core::Variant;
use bsam_lab::config::parse_config_with;
use bsam_lab::formats::{parse_checkpoint, parse_report, read_metrics, read_text};
use bsam_lab::run;
use bsam_lab::{parse_config, ExperimentConfig, LabError};

const SMALL: &str = "\
model.kind = mlp
model.layers = 2, 8, 2
data.n = 160
data.test_fraction = 0.2
data.separation = 3.0
train.epochs = 1
train.batch_size = 32
train.seeds = 0
probe.k = 1
probe.iters = 500
";

fn small(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    parse_config_with(SMALL, &o).unwrap()
}

#[test]
fn pass_totals_per_variant() {
    for (v, per_step) in [("sgd", 1), ("sam", 2), ("bsam", 3)] {
        let cfg = small(&[&format!("opt.variant = {v}")]);
        let r = run::train_seed(&cfg, 0).unwrap();
        assert_eq!(r.setup.train.len(), 128);
        let last = r.final_epoch().unwrap();
        assert_eq!(last.fwd_total, 4 * per_step, "{v}");
        assert_eq!(last.bwd_total, 4 * per_step, "{v}");
    }
}

fn nearest_mean_accuracy(train: &bsam_core::Dataset, test: &bsam_core::Dataset) -> f64 {
    let d = train.dim();
    let k = train.classes();
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0.0; k];
    for i in 0..train.len() {
        let y = train.labels()[i];
        counts[y] += 1.0;
        for (m, x) in means[y].iter_mut().zip(train.features().row(i)) {
            *m += x;
        }
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c);
    }
    let mut hits = 0;
    for i in 0..test.len() {
        let x = test.features().row(i);
        let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = (0..k).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
        hits += usize::from(best == test.labels()[i]);
    }
    hits as f64 / test.len() as f64
}

#[test]
fn separated_blobs_are_learned() {
    let cfg = parse_config(
        "model.kind = mlp\nmodel.layers = 2, 16, 2\ndata.separation = 6.0\ntrain.epochs = 30\nprobe.k = 0\n",
    )
    .unwrap();
    let r = run::train_seed(&cfg, 0).unwrap();
    let acc = r.final_epoch().unwrap().test_acc.unwrap();
    let oracle = nearest_mean_accuracy(&r.setup.train, &r.setup.test);
    assert!(oracle >= 0.95, "oracle {oracle}");
    assert!(acc >= 0.95, "acc {acc}");
    assert!(acc >= oracle - 0.02, "acc {acc} vs oracle {oracle}");
}

#[test]
fn mean_std_matches_hand_values() {
    let (m, s) = run::mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
    assert!((m - 3.0).abs() <= 1e-12);
    assert!((s - 2.5f64.sqrt()).abs() <= 1e-12);
    assert_eq!(run::mean_std(&[0.7]), (0.7, 0.0));
}

#[test]
fn compare_tabulates_and_checks_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small(&["train.seeds = 0, 1, 2", "opt.variant = sgd"]);
    let b = small(&["train.seeds = 2, 1, 0", "opt.variant = bsam"]);
    let rows = run::compare(&[a.clone(), b], tmp.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].variant, "bsam");
    assert!(rows.iter().all(|r| r.seeds == 3 && r.test_acc.is_some() && r.lambda_max.is_some()));
    let text = read_text(&tmp.path().join("compare.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(text.lines().next().unwrap(), run::COMPARE_HEADER);

    let one = small(&["opt.variant = sam"]);
    let rows = run::compare(&[small(&[]), one], &tmp.path().join("single")).unwrap();
    assert!(rows.iter().all(|r| r.test_acc.unwrap().1 == 0.0));

    let err = run::compare(&[a, small(&["train.seeds = 0, 1"])], tmp.path()).unwrap_err();
    assert!(matches!(err, LabError::Mismatch(_)));
    assert!(run::compare(&[small(&[])], tmp.path()).is_err());
}

#[test]
fn convergence_check_is_deterministic() {
    let cfg = parse_config(
        "model.kind = quadratic\nmodel.diag = 1, 2, 4\nopt.momentum = 0\nopt.weight_decay = 0\nconvergence.horizons = 10, 100, 1000\n",
    )
    .unwrap();
    let a = run::convergence_check(&cfg).unwrap();
    let b = run::convergence_check(&cfg).unwrap();
    assert_eq!(run::convergence_csv(&a), run::convergence_csv(&b));
    assert_eq!(a.horizons, vec![10, 100, 1000]);
    assert!(a.slope < 0.0);
}

#[test]
fn slice_center_is_the_probe_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(&["probe.slice_grid = 5", "opt.variant = bsam"]);
    run::run_training(&cfg, tmp.path(), false).unwrap();
    let dir = run::seed_dir(tmp.path(), "run", 0);
    let ck = dir.join("checkpoint.txt");
    let ckpt = parse_checkpoint(&read_text(&ck).unwrap(), &ck).unwrap();
    let report = parse_report(&read_text(&dir.join("report.txt")).unwrap());
    let probe_loss: f64 = report.iter().find(|(k, _)| k == "probe_loss").unwrap().1.parse().unwrap();

    let slice = run::emit_slice(&cfg, &ckpt).unwrap();
    assert!((slice.center() - probe_loss).abs() <= 1e-9 * probe_loss.abs());
    let p1 = run::write_slice(&tmp.path().join("s1"), &slice).unwrap();
    let p2 = run::write_slice(&tmp.path().join("s2"), &run::emit_slice(&cfg, &ckpt).unwrap()).unwrap();
    let text = read_text(&p1).unwrap();
    assert_eq!(text, read_text(&p2).unwrap());
    let cells: Vec<usize> = text.lines().map(|l| l.split('\t').count()).collect();
    assert_eq!(cells, vec![6; 6]);

    let again = run::probe_checkpoint(&cfg, &ckpt).unwrap();
    assert_eq!(again.loss, probe_loss);
}

#[test]
fn divergence_leaves_a_diagnostic_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(
        "model.kind = quadratic\nmodel.diag = 10, 1\ndata.n = 80\ntrain.batch_size = 8\ntrain.epochs = 30\nopt.lr_max = 1000\nopt.variant = sgd\n",
    )
    .unwrap();
    let err = run::run_training(&cfg, tmp.path(), false).unwrap_err();
    assert!(matches!(err, LabError::Run { seed: 0, .. }), "{err}");
    let rows = read_metrics(&run::seed_dir(tmp.path(), "run", 0).join("metrics.csv")).unwrap();
    let last = rows.last().unwrap();
    assert!(last.lr.is_nan());
    assert!(!last.train_loss.is_finite() || !last.grad_norm.is_finite());
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        let cfg = small(&[&format!("opt.variant = {}", v.as_str())]);
        assert_eq!(cfg.opt.variant, v);
    }
}
