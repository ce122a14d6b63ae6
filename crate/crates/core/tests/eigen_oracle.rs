use bsam_core::autodiff::{grad, PassCount};
use bsam_core::models::{build_mlp, QuadraticSpec};
use bsam_core::probes::{
    default_hvp_step, hvp, sharpness_report, top_eigenpairs, top_eigenvalues, DenseOperator,
    EigenOptions,
};
use bsam_core::{data::gen_gaussian_blobs, rng, Batch, ModelSpec, ParamVector};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

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

fn random_symmetric(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "test-sym");
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = r.sample(StandardNormal);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    m
}

#[test]
fn diagonal_quadratic_top_three() {
    let diag: Vec<f64> = (1..=10).map(f64::from).collect();
    let spec = ModelSpec::Quadratic(QuadraticSpec::diagonal(&diag).unwrap());
    let w = ParamVector::flat(vec![0.1; 10]);
    let opts = EigenOptions { k: 3, iters: 5000, tol: 1e-9, seed: 1 };
    let pairs = top_eigenvalues(&w, &Batch::zero_shift(10), &spec, &opts).unwrap();
    for (p, want) in pairs.iter().zip([10.0, 9.0, 8.0]) {
        assert!((p.value - want).abs() <= 1e-4, "{:?}", pairs);
    }
}

#[test]
fn random_indefinite_matrices_match_dense_oracle() {
    for seed in 0..5 {
        let m = random_symmetric(20, seed);
        let mut op = DenseOperator { matrix: &m, n: 20 };
        let opts = EigenOptions { k: 5, iters: 50_000, tol: 1e-11, seed };
        let got = top_eigenpairs(&mut op, &opts).unwrap();
        for (g, want) in got.iter().zip(oracle_top(&m, 20, 5)) {
            assert!((g.value - want).abs() <= 1e-4, "seed {seed}: {} vs {}", g.value, want);
        }
    }
}

#[test]
fn jacobi_matches_nalgebra() {
    let m = random_symmetric(12, 9);
    let ours = bsam_core::linalg::symmetric_eigenvalues(&m, 12);
    for (a, b) in ours.iter().zip(oracle_top(&m, 12, 12)) {
        assert!((a - b).abs() < 1e-10);
    }
}

/// Dense Hessian by central differences of autodiff gradients.
fn fd_hessian(w: &ParamVector, batch: &Batch, spec: &ModelSpec, h: f64) -> Vec<f64> {
    let n = w.len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = h;
        let e = w.with_values(e).unwrap();
        let (_, gp) = grad(&w.add_scaled(1.0, &e).unwrap(), batch, spec, &mut PassCount::new()).unwrap();
        let (_, gm) = grad(&w.add_scaled(-1.0, &e).unwrap(), batch, spec, &mut PassCount::new()).unwrap();
        for j in 0..n {
            m[i * n + j] = (gp.values()[j] - gm.values()[j]) / (2.0 * h);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    m
}

#[test]
fn tiny_mlp_lambda_max_matches_dense_hessian() {
    let (w, spec) = build_mlp(&[2, 4, 2], 2, 5).unwrap();
    let batch = gen_gaussian_blobs(32, 2, 2, 2.0, 5).unwrap().as_batch();
    let dense = fd_hessian(&w, &batch, &spec, 1e-5);
    let want = oracle_top(&dense, w.len(), 1)[0];
    let opts = EigenOptions { k: 1, iters: 5000, tol: 1e-8, seed: 2 };
    let got = top_eigenvalues(&w, &batch, &spec, &opts).unwrap()[0].value;
    assert!((got - want).abs() <= 0.01 * want.abs(), "{got} vs {want}");
}

#[test]
fn hvp_matches_dense_product_on_quadratic() {
    let m = random_symmetric(6, 4);
    let mut psd = vec![0.0; 36];
    for i in 0..6 {
        for j in 0..6 {
            psd[i * 6 + j] = (0..6).map(|k| m[k * 6 + i] * m[k * 6 + j]).sum();
        }
    }
    let spec = ModelSpec::Quadratic(QuadraticSpec::new(6, psd.clone(), vec![0.0; 6]).unwrap());
    let w = ParamVector::flat(vec![0.5, -0.2, 1.0, 0.0, 0.3, -1.0]);
    let v = ParamVector::flat(vec![1.0, 2.0, -1.0, 0.5, 0.0, 0.25]);
    let hv = hvp(&w, &v, &Batch::zero_shift(6), &spec, default_hvp_step(&w)).unwrap();
    let want = bsam_core::linalg::sym_matvec(&psd, 6, v.values());
    for (a, b) in hv.values().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
}

#[test]
fn report_identity_holds_on_mlp() {
    let (w, spec) = build_mlp(&[2, 6, 2], 2, 8).unwrap();
    let batch = gen_gaussian_blobs(20, 2, 2, 2.0, 8).unwrap().as_batch();
    for rho in [0.0, 0.01, 0.05, 0.5] {
        let r = sharpness_report(&w, &batch, &spec, rho, &EigenOptions { k: 0, ..Default::default() }).unwrap();
        assert!((r.bil_s - (r.max_s + r.min_s)).abs() <= 1e-9);
    }
}
