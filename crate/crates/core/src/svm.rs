//! Soft-margin linear SVM trained in the dual by SMO.
//!
//! Solves `min 1/2 beta ||w||^2 + C sum xi_i` subject to
//! `y_i (w^T x_i + b) >= 1 - xi_i`, `xi_i >= 0`. The penalty scale `beta` is
//! folded in by rescaling: the standard problem is solved on `x / sqrt(beta)`
//! and `w` is mapped back, which leaves a single code path.
//!
//! Pair selection uses second-order working-set selection; iteration stops
//! when the primal-dual gap is below `tol (1 + |primal|)`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::dot;

const TAU: f64 = 1e-12;
/// Full Gram matrices are kept up to this many samples; larger problems use a
/// row cache.
const FULL_GRAM_MAX_SAMPLES: usize = 6000;
const ROW_CACHE_BYTES: usize = 512 << 20;

#[derive(Clone, Debug)]
pub struct SvmProblem {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<f64>,
    c: f64,
    beta: f64,
}

impl SvmProblem {
    /// `features` is row-major `M x n_features`; labels must be +1 or -1
    /// with both classes present.
    pub fn new(features: Vec<f64>, n_features: usize, labels: Vec<f64>, c: f64) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::InvalidArgument("need at least one feature".into()));
        }
        let m = labels.len();
        if features.len() != m * n_features {
            return Err(Error::LengthMismatch {
                expected: m * n_features,
                found: features.len(),
            });
        }
        if m < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 samples, got {m}")));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidArgument(format!("label {bad} is not +1 or -1")));
        }
        if !labels.contains(&1.0) || !labels.contains(&-1.0) {
            return Err(Error::InvalidArgument("both classes must be present".into()));
        }
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
        }
        Ok(Self {
            features,
            n_features,
            labels,
            c,
            beta: 1.0,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<f64>, c: f64) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::LengthMismatch {
                expected: n,
                found: bad.len(),
            });
        }
        Self::new(rows.concat(), n, labels, c)
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        self.beta = beta;
        Ok(self)
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    /// Pair updates; `None` means `100_000 * M`.
    pub max_iters: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SvmSolution {
    pub w: Vec<f64>,
    pub b: f64,
    pub dual_vars: Vec<f64>,
    /// Primal objective `1/2 beta ||w||^2 + C sum xi`.
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SvmSolution {
    pub fn gap(&self) -> f64 {
        self.objective - self.dual_objective
    }

    pub fn classifier(&self) -> SvmClassifier {
        SvmClassifier {
            w: self.w.clone(),
            b: self.b,
        }
    }
}

/// A trained linear decision function `w^T x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmClassifier {
    pub w: Vec<f64>,
    pub b: f64,
}

impl SvmClassifier {
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        decision(&self.w, self.b, x)
    }
}

pub fn decision(w: &[f64], b: f64, x: &[f64]) -> Result<f64> {
    if w.len() != x.len() {
        return Err(Error::LengthMismatch {
            expected: w.len(),
            found: x.len(),
        });
    }
    Ok(dot(w, x) + b)
}

struct Kernel<'a> {
    problem: &'a SvmProblem,
    scale: f64,
    diag: Vec<f64>,
    store: KernelStore,
}

enum KernelStore {
    Full(Vec<f64>),
    Rows {
        rows: HashMap<usize, (u64, Vec<f64>)>,
        capacity: usize,
        clock: u64,
    },
}

impl<'a> Kernel<'a> {
    fn new(problem: &'a SvmProblem) -> Self {
        let m = problem.n_samples();
        let scale = 1.0 / problem.beta;
        let diag: Vec<f64> = (0..m)
            .map(|i| {
                let r = problem.row(i);
                dot(r, r) * scale
            })
            .collect();
        let store = if m <= FULL_GRAM_MAX_SAMPLES {
            let mut gram = vec![0.0; m * m];
            gram.par_chunks_mut(m).enumerate().for_each(|(i, out)| {
                let xi = problem.row(i);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = dot(xi, problem.row(j)) * scale;
                }
            });
            KernelStore::Full(gram)
        } else {
            KernelStore::Rows {
                rows: HashMap::new(),
                capacity: (ROW_CACHE_BYTES / (8 * m)).max(2),
                clock: 0,
            }
        };
        Self {
            problem,
            scale,
            diag,
            store,
        }
    }

    fn row_into(&mut self, i: usize, out: &mut [f64]) {
        let m = self.problem.n_samples();
        match &mut self.store {
            KernelStore::Full(gram) => out.copy_from_slice(&gram[i * m..(i + 1) * m]),
            KernelStore::Rows { rows, capacity, clock } => {
                *clock += 1;
                if let Some((stamp, row)) = rows.get_mut(&i) {
                    *stamp = *clock;
                    out.copy_from_slice(row);
                    return;
                }
                let xi = self.problem.row(i);
                let scale = self.scale;
                let problem = self.problem;
                out.par_iter_mut()
                    .enumerate()
                    .for_each(|(j, o)| *o = dot(xi, problem.row(j)) * scale);
                if rows.len() >= *capacity {
                    let oldest = rows
                        .iter()
                        .min_by_key(|(_, (stamp, _))| *stamp)
                        .map(|(&k, _)| k)
                        .expect("cache non-empty");
                    rows.remove(&oldest);
                }
                rows.insert(i, (*clock, out.to_vec()));
            }
        }
    }
}

/// Solves the soft-margin problem in the dual. Deterministic for fixed input.
/// Non-convergence within the iteration budget is reported through
/// `converged = false` with the last iterate.
pub fn solve(problem: &SvmProblem, options: &SolveOptions) -> SvmSolution {
    let m = problem.n_samples();
    let c = problem.c;
    let y = &problem.labels;
    let max_iters = options.max_iters.unwrap_or(100_000usize.saturating_mul(m));
    let mut kernel = Kernel::new(problem);

    let mut alpha = vec![0.0; m];
    // gradient of 1/2 a^T Q a - e^T a with Q_ij = y_i y_j K_ij
    let mut grad = vec![-1.0; m];
    let mut row_i = vec![0.0; m];
    let mut row_j = vec![0.0; m];

    let in_up = |a: f64, yt: f64| if yt > 0.0 { a < c } else { a > 0.0 };
    let in_low = |a: f64, yt: f64| if yt > 0.0 { a > 0.0 } else { a < c };

    let mut iterations = 0;
    let mut converged = false;
    loop {
        if iterations % 8 == 0 && gap_ok(&alpha, &grad, y, c, options.tol) {
            converged = true;
            break;
        }
        if iterations >= max_iters {
            break;
        }

        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..m {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v >= gmax {
                    gmax = v;
                    i = t;
                }
            }
        }
        if i == usize::MAX {
            converged = true;
            break;
        }
        kernel.row_into(i, &mut row_i);

        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..m {
            if in_low(alpha[t], y[t]) {
                let v = y[t] * grad[t];
                if v >= gmax2 {
                    gmax2 = v;
                }
                let diff = gmax + v;
                if diff > 0.0 {
                    let quad = kernel.diag[i] + kernel.diag[t] - 2.0 * row_i[t];
                    let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                    if obj <= best {
                        best = obj;
                        j = t;
                    }
                }
            }
        }
        if j == usize::MAX || gmax + gmax2 < 1e-12 {
            // stationary to working precision
            converged = true;
            break;
        }
        kernel.row_into(j, &mut row_j);

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = {
            let q = kernel.diag[i] + kernel.diag[j] - 2.0 * row_i[j];
            if q > 0.0 {
                q
            } else {
                TAU
            }
        };
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        alpha[i] = snap(alpha[i], c);
        alpha[j] = snap(alpha[j], c);

        let (di, dj) = ((alpha[i] - old_i) * y[i], (alpha[j] - old_j) * y[j]);
        for t in 0..m {
            grad[t] += y[t] * (row_i[t] * di + row_j[t] * dj);
        }
        iterations += 1;
    }

    let b = bias(&alpha, &grad, y, c);
    let (objective, dual_objective) = objectives(&alpha, &grad, y, c, b);
    let n = problem.n_features;
    let mut w = vec![0.0; n];
    for (t, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            let coef = a * y[t];
            for (wk, xk) in w.iter_mut().zip(problem.row(t)) {
                *wk += coef * xk;
            }
        }
    }
    let inv_beta = 1.0 / problem.beta;
    w.iter_mut().for_each(|x| *x *= inv_beta);

    SvmSolution {
        w,
        b,
        dual_vars: alpha,
        objective,
        dual_objective,
        iterations,
        converged,
    }
}

/// Clamps to `[0, c]` and removes round-off residue next to either bound, so
/// a variable that was clipped in exact arithmetic is not counted as free.
fn snap(a: f64, c: f64) -> f64 {
    let eps = 4.0 * f64::EPSILON * c;
    if a <= eps {
        0.0
    } else if a >= c - eps {
        c
    } else {
        a
    }
}

/// Average of `-y_i G_i` over free dual variables, else the midpoint of the
/// feasible interval.
fn bias(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free = 0usize;
    let mut sum = 0.0;
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };
    -rho
}

/// `(primal, dual)` from the gradient: `y_i w^T x_i = G_i + 1`.
fn objectives(alpha: &[f64], grad: &[f64], y: &[f64], c: f64, b: f64) -> (f64, f64) {
    let mut quad = 0.0;
    let mut sum_alpha = 0.0;
    let mut slack = 0.0;
    for t in 0..alpha.len() {
        quad += alpha[t] * (grad[t] + 1.0);
        sum_alpha += alpha[t];
        slack += (1.0 - (grad[t] + 1.0 + y[t] * b)).max(0.0);
    }
    (0.5 * quad + c * slack, sum_alpha - 0.5 * quad)
}

fn gap_ok(alpha: &[f64], grad: &[f64], y: &[f64], c: f64, tol: f64) -> bool {
    let b = bias(alpha, grad, y, c);
    let (p, d) = objectives(alpha, grad, y, c, b);
    p - d <= tol * (1.0 + p.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_margin() {
        let p = SvmProblem::from_rows(&[vec![-1.0], vec![1.0]], vec![-1.0, 1.0], 10.0).unwrap();
        let s = solve(&p, &SolveOptions::default());
        assert!(s.converged);
        assert!((s.w[0] - 1.0).abs() < 1e-6, "w = {}", s.w[0]);
        assert!(s.b.abs() < 1e-6);
    }

    #[test]
    fn penalty_scale_keeps_boundary() {
        let p = SvmProblem::from_rows(&[vec![-1.0], vec![1.0]], vec![-1.0, 1.0], 10.0)
            .unwrap()
            .with_beta(4.0)
            .unwrap();
        let s = solve(&p, &SolveOptions::default());
        // 2 w^2 + 20 (1 - w) is minimized at the hard-margin corner w = 1
        assert!((s.w[0] - 1.0).abs() < 1e-6);
        assert!(s.b.abs() < 1e-6);
        assert!((s.objective - 2.0).abs() < 1e-6);
        for x in [-3.0, -0.5, 0.25, 2.0] {
            assert_eq!((s.w[0] * x + s.b).signum(), x.signum());
        }
    }

    #[test]
    fn identical_points_are_all_slack() {
        let rows = vec![vec![0.5, -1.0]; 6];
        let labels = vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let p = SvmProblem::from_rows(&rows, labels, 2.0).unwrap();
        let s = solve(&p, &SolveOptions::default());
        assert!(s.w.iter().all(|w| w.abs() < 1e-12));
        assert!(s.b.abs() < 1e-12);
        assert!((s.objective - 2.0 * 6.0).abs() < 1e-9);
        for i in 0..6 {
            let xi = 1.0 - p.labels()[i] * s.classifier().decision(p.row(i)).unwrap();
            assert!((xi - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decision_arithmetic() {
        assert_eq!(decision(&[1.0, 2.0], -1.0, &[3.0, 1.0]).unwrap(), 4.0);
        assert_eq!(decision(&[1.0, 2.0], 0.5, &[0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(decision(&[0.0, 0.0], 0.5, &[3.0, 1.0]).unwrap(), 0.5);
        assert!(decision(&[1.0], 0.0, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rejects_bad_problems() {
        assert!(SvmProblem::from_rows(&[vec![1.0]], vec![1.0], 1.0).is_err());
        assert!(SvmProblem::from_rows(&[vec![1.0], vec![2.0]], vec![1.0, 1.0], 1.0).is_err());
        assert!(SvmProblem::from_rows(&[vec![1.0], vec![2.0]], vec![1.0, -1.0], 0.0).is_err());
        assert!(SvmProblem::from_rows(&[vec![1.0], vec![2.0]], vec![1.0, 0.0], 1.0).is_err());
        let ok = SvmProblem::from_rows(&[vec![1.0], vec![2.0]], vec![1.0, -1.0], 1.0).unwrap();
        assert!(ok.with_beta(0.0).is_err());
    }

    #[test]
    fn iteration_budget_is_flagged() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()])
            .collect();
        let labels: Vec<f64> = (0..40).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let p = SvmProblem::from_rows(&rows, labels, 5.0).unwrap();
        let s = solve(
            &p,
            &SolveOptions {
                tol: 1e-12,
                max_iters: Some(1),
            },
        );
        assert!(!s.converged);
        assert_eq!(s.iterations, 1);
        let full = solve(&p, &SolveOptions::default());
        assert!(full.converged);
        assert!(full.gap() <= 1e-6 * (1.0 + full.objective.abs()));
    }

    #[test]
    fn row_cache_path_matches_full_gram() {
        // exercise the cached path directly on a small problem
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64 * 1.3).sin(), (i as f64 * 0.4).cos(), 0.1 * i as f64])
            .collect();
        let labels: Vec<f64> = (0..30).map(|i| if (i * 7) % 5 < 2 { 1.0 } else { -1.0 }).collect();
        let p = SvmProblem::from_rows(&rows, labels, 1.0).unwrap();
        let mut full = Kernel::new(&p);
        let mut cached = Kernel::new(&p);
        cached.store = KernelStore::Rows {
            rows: HashMap::new(),
            capacity: 3,
            clock: 0,
        };
        let (mut a, mut b) = (vec![0.0; 30], vec![0.0; 30]);
        for i in [0, 5, 7, 5, 29, 0, 13, 7] {
            full.row_into(i, &mut a);
            cached.row_into(i, &mut b);
            assert_eq!(a, b);
        }
    }
}
