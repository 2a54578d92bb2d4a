use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sttm_core::stm::StmModel;
use sttm_core::sttm::compute_xhat;
use sttm_core::svm::{self, SolveOptions, SvmProblem};
use sttm_core::{DenseTensor, TensorTrain};

fn random_dense(dims: &[usize], seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseTensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn rel_err(a: &DenseTensor, b: &DenseTensor) -> f64 {
    let d: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    d / b.frobenius_norm().max(1e-300)
}

/// Ranks no larger than what fixed-rank QR sweeps allow.
fn feasible_ranks(dims: &[usize], cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let d = dims.len();
    let mut r = vec![1; d + 1];
    for k in 1..d {
        let left: usize = dims[..k].iter().product();
        let right: usize = dims[k..].iter().product();
        r[k] = rng.random_range(1..=cap.min(left).min(right));
    }
    for k in 1..d {
        r[k] = r[k].min(r[k - 1] * dims[k - 1]);
    }
    for k in (1..d).rev() {
        r[k] = r[k].min(dims[k] * r[k + 1]);
    }
    r
}

fn dims_strategy(max_d: usize, max_n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1..=max_n, 1..=max_d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tt_svd_meets_requested_error(dims in dims_strategy(4, 5), eps in prop::sample::select(vec![0.0, 0.1, 0.3]), seed in any::<u64>()) {
        let a = random_dense(&dims, seed);
        let out = TensorTrain::tt_svd(&a, eps, None).unwrap();
        let err = rel_err(&out.train.to_full(), &a);
        prop_assert!(err <= eps + 1e-10, "err {err} eps {eps}");
        prop_assert!(out.relative_error <= eps + 1e-10);
        let r = out.train.ranks();
        let storage: usize = (0..dims.len()).map(|k| r[k] * dims[k] * r[k + 1]).sum();
        prop_assert_eq!(out.train.storage(), storage);
        prop_assert_eq!(out.train.center(), Some(dims.len()));
    }

    #[test]
    fn canonical_forms_keep_the_tensor(dims in dims_strategy(4, 4), seed in any::<u64>(), site in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranks = feasible_ranks(&dims, 3, &mut rng);
        let t = TensorTrain::random(&dims, &ranks, &mut rng).unwrap();
        let full = t.to_full();
        let k = site % dims.len() + 1;
        let c = t.canonicalized(k).unwrap();
        prop_assert!(rel_err(&c.to_full(), &full) <= 1e-10);
        prop_assert!(c.canonical_residual().unwrap() <= 1e-10);
        prop_assert!((c.norm() - full.frobenius_norm()).abs() <= 1e-10 * full.frobenius_norm());
        let s = c.shifted_right().unwrap();
        prop_assert!(rel_err(&s.to_full(), &full) <= 1e-10);
        prop_assert!(s.canonical_residual().unwrap() <= 1e-10);
        let ip = t.inner_product(&t).unwrap();
        prop_assert!((s.norm().powi(2) - ip).abs() <= 1e-10 * ip);
    }

    #[test]
    fn inner_products_match_dense(dims in dims_strategy(4, 4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ra = feasible_ranks(&dims, 3, &mut rng);
        let rb = feasible_ranks(&dims, 2, &mut rng);
        let a = TensorTrain::random(&dims, &ra, &mut rng).unwrap();
        let b = TensorTrain::random(&dims, &rb, &mut rng).unwrap();
        let dense = a.to_full().inner_product(&b.to_full()).unwrap();
        let scale = a.to_full().frobenius_norm() * b.to_full().frobenius_norm();
        prop_assert!((a.inner_product(&b).unwrap() - dense).abs() <= 1e-10 * scale.max(1e-300));
    }

    #[test]
    fn xhat_linearizes_the_network(dims in dims_strategy(4, 4), seed in any::<u64>(), site in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rx = feasible_ranks(&dims, 3, &mut rng);
        let rw = feasible_ranks(&dims, 3, &mut rng);
        let x = TensorTrain::random(&dims, &rx, &mut rng).unwrap();
        let w = TensorTrain::random(&dims, &rw, &mut rng).unwrap();
        let k = site % dims.len() + 1;
        let xhat = compute_xhat(&x, &w, k).unwrap();
        let lin: f64 = w.core(k).data().iter().zip(&xhat).map(|(a, b)| a * b).sum();
        let dense = w.to_full().inner_product(&x.to_full()).unwrap();
        let scale = w.to_full().frobenius_norm() * x.to_full().frobenius_norm();
        prop_assert!((lin - dense).abs() <= 1e-10 * scale.max(1e-300));
    }

    #[test]
    fn stm_decision_paths_agree(dims in dims_strategy(4, 4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = StmModel {
            weight_vectors: dims.iter().map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            bias: rng.random_range(-1.0..1.0),
            trace: vec![],
        };
        let x = random_dense(&dims, seed ^ 1);
        let (a, b) = (model.decision(&x).unwrap(), model.decision_dense(&x).unwrap());
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
}

fn random_problem(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    loop {
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<f64> = (0..m).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        if labels.contains(&1.0) && labels.contains(&-1.0) {
            return (rows, labels);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svm_solutions_are_dual_feasible(seed in any::<u64>(), m in 2usize..40, n in 1usize..6, c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, labels) = random_problem(&mut rng, m, n);
        let sol = svm::solve(&SvmProblem::from_rows(&rows, labels.clone(), c).unwrap(), &SolveOptions::default());
        prop_assert!(sol.converged);
        for &a in &sol.dual_vars {
            prop_assert!((-1e-9..=c + 1e-9).contains(&a));
        }
        let eq: f64 = sol.dual_vars.iter().zip(&labels).map(|(a, y)| a * y).sum();
        prop_assert!(eq.abs() <= 1e-8);
        prop_assert!(sol.gap() <= 1e-6 * (1.0 + sol.objective.abs()));
    }

    #[test]
    fn svm_sign_pattern_survives_rescaling(seed in any::<u64>(), m in 4usize..12, s in 0.5f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, labels) = random_problem(&mut rng, m, 2);
        let tight = SolveOptions { tol: 1e-10, max_iters: None };
        let base = svm::solve(&SvmProblem::from_rows(&rows, labels.clone(), 1.0).unwrap(), &tight);
        let scaled_rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * s).collect()).collect();
        let scaled = svm::solve(&SvmProblem::from_rows(&scaled_rows, labels, 1.0 / (s * s)).unwrap(), &tight);
        for (r, sr) in rows.iter().zip(&scaled_rows) {
            let a = svm::decision(&base.w, base.b, r).unwrap();
            let b = svm::decision(&scaled.w, scaled.b, sr).unwrap();
            // Decision values agree exactly in theory; only compare signs away from zero.
            if a.abs() > 1e-6 {
                prop_assert_eq!(a.signum(), b.signum(), "a {} b {}", a, b);
            }
        }
    }
}
