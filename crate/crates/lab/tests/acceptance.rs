//! Acceptance suite: one pass/fail line per criterion, non-zero exit on any
//! failure. Runs as a plain binary so the lines are always printed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use bsam_core::autodiff::{finite_difference_gradient, grad, PassCount};
use bsam_core::models::{build_mlp, QuadraticSpec};
use bsam_core::optim::{
    compute_perturbation, cosine_lr, rho_min_at, Direction, LrSchedule, RhoMinSchedule,
};
use bsam_core::probes::{cosine_diagnostic, top_eigenpairs, top_eigenvalues, DenseOperator, EigenOptions};
use bsam_core::{cosine_similarity, rng, Batch, ModelSpec, ParamVector, Tensor, Variant};
use bsam_lab::config::parse_config_with;
use bsam_lab::formats::{parse_checkpoint, parse_report, read_text};
use bsam_lab::run::{self, SeedRun};
use bsam_lab::ExperimentConfig;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/configs").join(name)
}

fn config(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let text = read_text(&config_path(name)).expect("acceptance config");
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    parse_config_with(&text, &o).expect("valid acceptance config")
}

fn rel(x: f64, y: f64) -> f64 {
    (x - y).abs() / 1f64.max(x.abs()).max(y.abs())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gaussian(n: usize, seed: u64, purpose: &str) -> Vec<f64> {
    let mut r = rng::stream(seed, purpose);
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    if dir.exists() {
        walk(dir, dir, &mut out);
    }
    out
}

fn report_files(dir: &Path) -> Vec<PathBuf> {
    snapshot(dir)
        .into_keys()
        .filter(|p| p.file_name().is_some_and(|n| n == "report.txt"))
        .map(|p| dir.join(p))
        .collect()
}

/// Runs for the experiment criteria, each written to a primary and a
/// replay directory.
struct Workspace {
    primary: PathBuf,
    replay: PathBuf,
    _tmp: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().expect("temp dir");
        Workspace {
            primary: tmp.path().join("a"),
            replay: tmp.path().join("b"),
            _tmp: tmp,
        }
    }

    fn train(&self, tag: &str, cfg: &ExperimentConfig, trace: bool) -> Vec<SeedRun> {
        run::run_training(cfg, &self.primary.join(tag), trace).expect("training run")
    }
}

// 1
fn gradient_correctness() -> Verdict {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut r = rng::indexed_stream(1, "acceptance-grad", case);
        let input = r.random_range(1..6);
        let depth = r.random_range(1..3);
        let mut sizes = vec![input];
        sizes.extend((0..depth).map(|_| r.random_range(2..9)));
        let classes = r.random_range(2..5);
        sizes.push(classes);
        let rows = r.random_range(1..9);
        let (w, spec) = build_mlp(&sizes, classes, case).unwrap();
        let w = w.with_values(w.values().iter().map(|v| v + 0.1 * r.sample::<f64, _>(StandardNormal)).collect()).unwrap();
        let x = gaussian(rows * input, case, "acceptance-grad-x");
        let y = (0..rows).map(|_| r.random_range(0..classes)).collect();
        let batch = Batch::new(Tensor::matrix(rows, input, x).unwrap(), y).unwrap();
        let (_, g) = grad(&w, &batch, &spec, &mut PassCount::new()).unwrap();
        let fd = finite_difference_gradient(&w, &batch, &spec, 1e-5).unwrap();
        for (a, b) in g.values().iter().zip(fd.values()) {
            worst = worst.max(rel(*a, *b));
        }
    }
    verdict(worst <= 1e-5, format!("worst componentwise rel. err {worst:.2e} over 100 cases"))
}

// 2
fn perturbation_geometry() -> Verdict {
    let (mut norm_err, mut cos_err) = (0.0f64, 0.0f64);
    for i in 0..1000u64 {
        let dim = 1 + (i as usize % 50);
        let g = ParamVector::flat(gaussian(dim, i, "acceptance-geometry"));
        let rho = 0.001 + (i as f64) * 1e-3;
        for (dir, sign) in [(Direction::Ascent, 1.0), (Direction::Descent, -1.0)] {
            let e = compute_perturbation(&g, rho, dir, 2.0, 1e-12).unwrap();
            norm_err = norm_err.max((e.norm() - rho).abs());
            cos_err = cos_err.max((cosine_similarity(&e, &g).unwrap() - sign).abs());
        }
    }
    verdict(
        norm_err <= 1e-10 && cos_err <= 1e-10,
        format!("max |‖ε‖ − ρ| = {norm_err:.1e}, max |cos ∓ 1| = {cos_err:.1e}"),
    )
}

// 3
fn dual_norm_optimality() -> Verdict {
    let mut worst = f64::INFINITY;
    for (pi, p) in [1.5, 2.0, 3.0].into_iter().enumerate() {
        let q = p / (p - 1.0);
        for dim in 1..=4usize {
            let seed = (pi * 10 + dim) as u64;
            let g = gaussian(dim, seed, "acceptance-dual-g");
            let rho = 0.5;
            let best = compute_perturbation(&ParamVector::flat(g.clone()), rho, Direction::Ascent, p, 1e-12).unwrap();
            let best_val: f64 = g.iter().zip(best.values()).map(|(a, b)| a * b).sum();
            let mut r = rng::stream(seed, "acceptance-dual-samples");
            for _ in 0..100_000 {
                let d: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
                let qn = d.iter().map(|x| x.abs().powf(q)).sum::<f64>().powf(1.0 / q);
                let radius = rho * r.random::<f64>().powf(1.0 / dim as f64);
                let val: f64 = g.iter().zip(&d).map(|(a, b)| a * b * radius / qn).sum();
                worst = worst.min(best_val - val);
            }
        }
    }
    verdict(worst >= -1e-9, format!("min margin {worst:.2e} over 1.2e6 feasible samples"))
}

// 4
fn scaling_invariant() -> Verdict {
    let cfg = config("flatness.cfg", &["train.seeds = 0", "probe.k = 0"]);
    let run = run::train_seed(&cfg, 0).unwrap();
    let steps = &run.outcome.steps;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for s in steps {
        if s.norm_gmin > 0.0 {
            worst = worst.max((s.scale * s.norm_gmin - s.norm_gmax).abs() / s.norm_gmax);
            checked += 1;
        }
    }
    verdict(
        steps.len() == 1000 && checked == 1000 && worst <= 1e-12,
        format!("{checked}/{} BSAM steps, worst rel. err {worst:.1e}", steps.len()),
    )
}

// 5
fn rho_min_schedule(cosine_runs: &[SeedRun]) -> Verdict {
    let lrs = LrSchedule::new(0.05, 0.001, 1000).unwrap();
    let rs = RhoMinSchedule::new(0.1, 0.02).unwrap();
    let at = |lr: f64| rho_min_at(lr, &rs, &lrs).unwrap();
    let ends = (at(0.05) - 0.1).abs() <= 1e-12 && (at(0.001) - 0.02).abs() <= 1e-12;
    let mid = (at(0.0255) - 0.06).abs() <= 1e-12;
    let mut mono = true;
    let mut prev = f64::INFINITY;
    for t in 0..=1000 {
        let r = at(cosine_lr(t, &lrs).unwrap());
        mono &= r <= prev;
        prev = r;
    }
    let mut run_mono = true;
    for run in cosine_runs {
        run_mono &= run.outcome.steps.windows(2).all(|p| p[1].rho_min_t <= p[0].rho_min_t);
    }
    let first = cosine_runs[0].outcome.steps.first().unwrap().rho_min_t;
    verdict(
        ends && mid && mono && run_mono && first == 0.1,
        format!("endpoints {ends}, midpoint {mid}, monotone schedule {mono}, monotone in runs {run_mono}"),
    )
}

// 6
fn cost_accounting(by_variant: &BTreeMap<&'static str, Vec<SeedRun>>) -> Verdict {
    let mut ok = true;
    let mut steps = 0;
    for runs in by_variant.values() {
        for r in runs {
            let k = r.outcome.steps.first().map_or(0, |s| s.fwd);
            let want = match k {
                1..=3 => k,
                _ => 0,
            };
            ok &= want > 0;
            for s in &r.outcome.steps {
                ok &= s.fwd == want && s.bwd == want;
            }
            let last = r.final_epoch().unwrap();
            ok &= last.fwd_total == want * r.outcome.steps.len() as u64;
            ok &= last.bwd_total == last.fwd_total;
            steps += r.outcome.steps.len();
        }
    }
    let per: Vec<String> = by_variant
        .iter()
        .map(|(v, runs)| {
            let s = runs[0].outcome.steps[0];
            format!("{v}=({},{})", s.fwd, s.bwd)
        })
        .collect();
    let expected = ["bsam=(3,3)", "sam=(2,2)", "sgd=(1,1)"];
    verdict(
        ok && per == expected,
        format!("{} over {steps} steps", per.join(" ")),
    )
}

fn oracle_top(m: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(n, n, m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev.truncate(k);
    ev
}

// 7
fn hessian_probe() -> Verdict {
    let diag: Vec<f64> = (1..=10).map(f64::from).collect();
    let spec = ModelSpec::Quadratic(QuadraticSpec::diagonal(&diag).unwrap());
    let w = ParamVector::flat(vec![0.3; 10]);
    let opts = EigenOptions { k: 3, iters: 5000, tol: 1e-9, seed: 0 };
    let top = top_eigenvalues(&w, &Batch::zero_shift(10), &spec, &opts).unwrap();
    let quad_err = top
        .iter()
        .zip([10.0, 9.0, 8.0])
        .map(|(p, e)| (p.value - e).abs())
        .fold(0.0, f64::max);

    let n = 20;
    let g = gaussian(n * n, 7, "acceptance-sym");
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (g[i * n + j] + g[j * n + i]);
        }
    }
    let mut op = DenseOperator { matrix: &m, n };
    let got = top_eigenpairs(&mut op, &EigenOptions { k: 5, iters: 50_000, tol: 1e-11, seed: 1 }).unwrap();
    let dense_err = got
        .iter()
        .zip(oracle_top(&m, n, 5))
        .map(|(p, e)| (p.value - e).abs())
        .fold(0.0, f64::max);

    let (w, spec) = build_mlp(&[2, 4, 2], 2, 5).unwrap();
    let data = bsam_core::data::gen_gaussian_blobs(32, 2, 2, 2.0, 5).unwrap();
    let batch = data.as_batch();
    let dim = w.len();
    let h = 1e-5;
    let mut hm = vec![0.0; dim * dim];
    for i in 0..dim {
        let mut e = vec![0.0; dim];
        e[i] = h;
        let e = w.with_values(e).unwrap();
        let (_, gp) = grad(&w.add_scaled(1.0, &e).unwrap(), &batch, &spec, &mut PassCount::new()).unwrap();
        let (_, gm) = grad(&w.add_scaled(-1.0, &e).unwrap(), &batch, &spec, &mut PassCount::new()).unwrap();
        for j in 0..dim {
            hm[i * dim + j] = (gp.values()[j] - gm.values()[j]) / (2.0 * h);
        }
    }
    let sym: Vec<f64> = (0..dim * dim)
        .map(|k| 0.5 * (hm[k] + hm[(k % dim) * dim + k / dim]))
        .collect();
    let want = oracle_top(&sym, dim, 1)[0];
    let opts = EigenOptions { k: 1, iters: 5000, tol: 1e-9, seed: 2 };
    let mlp = top_eigenvalues(&w, &batch, &spec, &opts).unwrap()[0].value;
    let mlp_rel = (mlp - want).abs() / want.abs();
    verdict(
        quad_err <= 1e-4 && dense_err <= 1e-4 && mlp_rel <= 0.01,
        format!("diag err {quad_err:.1e}, 20x20 err {dense_err:.1e}, MLP λ_max {mlp:.5} vs {want:.5}"),
    )
}

// 8
fn convergence_trend(ws: &Workspace) -> Verdict {
    let cfg = config("convergence.cfg", &[]);
    let r = run::convergence_check(&cfg).unwrap();
    for dir in [&ws.primary, &ws.replay] {
        bsam_lab::formats::write_file(
            &dir.join("convergence/convergence.csv"),
            run::convergence_csv(&run::convergence_check(&cfg).unwrap()).as_bytes(),
        )
        .unwrap();
    }
    let decreasing = r.averages.windows(2).all(|p| p[1] < p[0]);
    verdict(
        decreasing && r.slope <= -0.4,
        format!("A(T) strictly decreasing {decreasing}, slope {:.3}", r.slope),
    )
}

// 9
fn flat_minimum_selection(ws: &Workspace) -> Verdict {
    let mut frac = BTreeMap::new();
    for v in ["sgd", "sam", "bsam"] {
        let mut hits = 0;
        let mut total = 0;
        for i in 0..51 {
            let x = -1.5 + 4.0 * i as f64 / 50.0;
            let variant = format!("opt.variant = {v}");
            let init = format!("model.init = {x}");
            let cfg = config("double_well.cfg", &[&variant, &init, "probe.k = 0"]);
            for &seed in &cfg.train.seeds {
                let r = run::train_seed(&cfg, seed).unwrap();
                total += 1;
                if (r.outcome.params.values()[0] - 2.0).abs() <= 0.05 {
                    hits += 1;
                }
            }
        }
        frac.insert(v, hits as f64 / total as f64);
    }
    let cfg = config("double_well.cfg", &[]);
    for dir in [&ws.primary, &ws.replay] {
        run::run_training(&cfg, &dir.join("double-well"), false).unwrap();
    }
    let (sgd, sam, bsam) = (frac["sgd"], frac["sam"], frac["bsam"]);
    verdict(
        bsam >= sam && sam >= sgd && bsam >= sgd + 0.1,
        format!("flat-minimum fraction sgd {sgd:.3}, sam {sam:.3}, bsam {bsam:.3}"),
    )
}

fn variant_runs(ws: &Workspace, name: &str, tag: &str) -> BTreeMap<&'static str, Vec<SeedRun>> {
    let mut out = BTreeMap::new();
    for v in Variant::ALL {
        let o = format!("opt.variant = {}", v.as_str());
        let cfg = config(name, &[&o]);
        out.insert(v.as_str(), ws.train(&format!("{tag}-{}", v.as_str()), &cfg, false));
    }
    out
}

fn accuracies(runs: &[SeedRun]) -> Vec<f64> {
    runs.iter().map(|r| r.final_epoch().unwrap().test_acc.unwrap()).collect()
}

// 10
fn flatter_minima(runs: &BTreeMap<&'static str, Vec<SeedRun>>) -> Verdict {
    let lam = |v: &str| -> Vec<f64> { runs[v].iter().map(|r| r.lambda_max().unwrap()).collect() };
    let (sgd, bsam) = (lam("sgd"), lam("bsam"));
    let paired = sgd.iter().zip(&bsam).filter(|(s, b)| b <= s).count();
    let acc: BTreeMap<&str, f64> = runs.iter().map(|(v, r)| (*v, mean(&accuracies(r)))).collect();
    let best = acc.values().cloned().fold(0.0, f64::max);
    verdict(
        median(&bsam) <= median(&sgd) && paired >= 4 && acc["bsam"] >= best - 0.005,
        format!(
            "median λ_max sgd {:.4} sam {:.4} bsam {:.4}; bsam ≤ sgd in {paired}/5; acc sgd {:.3} sam {:.3} bsam {:.3}",
            median(&sgd),
            median(&lam("sam")),
            median(&bsam),
            acc["sgd"],
            acc["sam"],
            acc["bsam"]
        ),
    )
}

// 11
fn label_noise(runs: &BTreeMap<&'static str, Vec<SeedRun>>) -> Verdict {
    let acc: BTreeMap<&str, f64> = runs.iter().map(|(v, r)| (*v, mean(&accuracies(r)))).collect();
    verdict(
        acc["bsam"] >= acc["sgd"],
        format!("mean clean-test acc sgd {:.4} sam {:.4} bsam {:.4}", acc["sgd"], acc["sam"], acc["bsam"]),
    )
}

// 12
fn cosine_diagnostic_check(fixed: &[SeedRun], scheduled: &[SeedRun]) -> Verdict {
    let mut fixed_drop = 0;
    let mut sched_ok = 0;
    let mut lines = Vec::new();
    for (f, s) in fixed.iter().zip(scheduled) {
        let fd = cosine_diagnostic(&f.outcome.steps).unwrap();
        let sd = cosine_diagnostic(&s.outcome.steps).unwrap();
        if fd.last().unwrap() < fd.first().unwrap() {
            fixed_drop += 1;
        }
        if sd.last().unwrap() >= 0.0 {
            sched_ok += 1;
        }
        lines.push(format!(
            "{:.2}→{:.2}/{:.2}→{:.2}",
            fd.first().unwrap(),
            fd.last().unwrap(),
            sd.first().unwrap(),
            sd.last().unwrap()
        ));
    }
    verdict(
        fixed_drop == fixed.len() && sched_ok >= 4,
        format!(
            "fixed drops in {fixed_drop}/{}, scheduled final ≥ 0 in {sched_ok}/{} (fixed/scheduled first→last: {})",
            fixed.len(),
            scheduled.len(),
            lines.join(" ")
        ),
    )
}

// 13
fn report_identity(dir: &Path) -> Verdict {
    let files = report_files(dir);
    let mut worst = 0.0f64;
    for f in &files {
        let kv: BTreeMap<String, String> = parse_report(&read_text(f).unwrap()).into_iter().collect();
        let get = |k: &str| kv[k].parse::<f64>().unwrap();
        worst = worst.max((get("bil_s") - (get("max_s") + get("min_s"))).abs());
    }
    verdict(
        !files.is_empty() && worst <= 1e-9,
        format!("{} reports, worst |bil − (max + min)| = {worst:.1e}", files.len()),
    )
}

// 14
fn determinism(ws: &Workspace, replays: &[(&str, &str, Vec<&str>, bool)]) -> Verdict {
    for (tag, name, overrides, trace) in replays {
        let cfg = config(name, overrides);
        run::run_training(&cfg, &ws.replay.join(tag), *trace).unwrap();
    }
    // slice emission from a stored checkpoint, twice
    let cfg = config("flatness.cfg", &[]);
    let ck_path = run::seed_dir(&ws.primary.join("flatness-bsam"), "flatness", 0).join("checkpoint.txt");
    let ckpt = parse_checkpoint(&read_text(&ck_path).unwrap(), &ck_path).unwrap();
    for dir in [&ws.primary, &ws.replay] {
        let slice = run::emit_slice(&cfg, &ckpt).unwrap();
        run::write_slice(&dir.join("slice"), &slice).unwrap();
    }
    let (a, b) = (snapshot(&ws.primary), snapshot(&ws.replay));
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    verdict(
        differing.is_empty() && a.len() == b.len() && !a.is_empty(),
        format!("{} files compared, {} differ {:?}", a.len(), differing.len(), differing),
    )
}

fn main() {
    let ws = Workspace::new();
    let mut results: Vec<(u32, &str, Verdict, Duration, Option<Duration>)> = Vec::new();
    let mut timed = |id: u32, name: &'static str, budget: Option<u64>, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = f();
        results.push((id, name, v, t.elapsed(), budget.map(Duration::from_secs)));
    };

    timed(1, "gradient correctness", Some(10), &mut gradient_correctness);
    timed(2, "perturbation geometry", Some(1), &mut perturbation_geometry);
    timed(3, "dual-norm optimality", Some(30), &mut dual_norm_optimality);
    timed(4, "scaling invariant", Some(30), &mut scaling_invariant);
    timed(7, "Hessian probe", Some(60), &mut hessian_probe);
    timed(8, "convergence trend", Some(120), &mut || convergence_trend(&ws));
    timed(9, "flat-minimum selection", Some(120), &mut || flat_minimum_selection(&ws));

    let mut flat_runs = BTreeMap::new();
    timed(10, "flatter minima", Some(600), &mut || {
        flat_runs = variant_runs(&ws, "flatness.cfg", "flatness");
        flatter_minima(&flat_runs)
    });
    timed(11, "label-noise robustness", Some(600), &mut || {
        label_noise(&variant_runs(&ws, "label_noise.cfg", "label-noise"))
    });
    let (mut fixed, mut scheduled) = (Vec::new(), Vec::new());
    timed(12, "cosine-similarity diagnostic", Some(600), &mut || {
        fixed = ws.train("cosine-fixed", &config("cosine.cfg", &["opt.rho_min_check = 0.1"]), true);
        scheduled = ws.train("cosine-scheduled", &config("cosine.cfg", &[]), true);
        cosine_diagnostic_check(&fixed, &scheduled)
    });
    timed(5, "rho_min schedule", None, &mut || rho_min_schedule(&scheduled));
    timed(6, "cost accounting", None, &mut || cost_accounting(&flat_runs));
    timed(13, "report identity", None, &mut || report_identity(&ws.primary));

    let mut replays: Vec<(&str, &str, Vec<&str>, bool)> = vec![
        ("cosine-fixed", "cosine.cfg", vec!["opt.rho_min_check = 0.1"], true),
        ("cosine-scheduled", "cosine.cfg", vec![], true),
    ];
    for (tag, name) in [("flatness", "flatness.cfg"), ("label-noise", "label_noise.cfg")] {
        for (v, o) in [("sgd", "opt.variant = sgd"), ("sam", "opt.variant = sam"), ("bsam", "opt.variant = bsam")] {
            let t: &'static str = Box::leak(format!("{tag}-{v}").into_boxed_str());
            replays.push((t, name, vec![o], false));
        }
    }
    timed(14, "determinism", None, &mut || determinism(&ws, &replays));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, v, took, budget) in &results {
        let in_time = budget.is_none_or(|b| *took <= b);
        let pass = v.pass && in_time;
        failed += usize::from(!pass);
        let limit = budget.map_or(String::new(), |b| format!(" / {}s", b.as_secs()));
        println!(
            "criterion {id:>2} {} {name} ({:.1}s{limit}): {}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            v.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
