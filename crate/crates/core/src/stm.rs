//! Linear support tensor machine with a rank-1 weight tensor.
//!
//! The decision function is `X x_1 w1 x_2 ... x_d wd + b`. Training fixes all
//! but one weight vector and solves an SVM in the free one with penalty scale
//! `beta = prod_{l != k} ||w_l||^2` on the features
//! `xhat_i = X_i prod_{l != k} x_l w_l`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svm::{self, SolveOptions, SvmProblem};
use crate::tensor::{best_rank1, contract_all_but, dot, DenseTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StmConfig {
    pub c: f64,
    pub max_sweeps: usize,
    /// Stop when the loss changes by less than this fraction between sweeps.
    pub loss_rel_tol: f64,
    pub seed: u64,
    pub solver: SolveOptions,
}

impl Default for StmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_sweeps: 20,
            loss_rel_tol: 1e-4,
            seed: 0,
            solver: SolveOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StmInit {
    /// Seeded standard normal vectors scaled to unit norm.
    Random,
    Vectors(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StmTraceEntry {
    pub sweep: usize,
    /// 1-based mode whose vector was updated.
    pub mode: usize,
    pub train_acc: f64,
    pub objective: f64,
    pub converged: bool,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StmModel {
    pub weight_vectors: Vec<Vec<f64>>,
    pub bias: f64,
    pub trace: Vec<StmTraceEntry>,
}

impl StmModel {
    /// `X x_1 w1 ... x_d wd + b` by sequential mode products.
    pub fn decision(&self, x: &DenseTensor) -> Result<f64> {
        self.check_dims(x)?;
        Ok(contract_all_but(x, &self.weight_vectors, None)?[0] + self.bias)
    }

    /// `<W, X> + b` with `W` materialized as an outer product.
    pub fn decision_dense(&self, x: &DenseTensor) -> Result<f64> {
        Ok(self.weight_tensor()?.inner_product(x)? + self.bias)
    }

    pub fn weight_tensor(&self) -> Result<DenseTensor> {
        DenseTensor::rank1_from_vectors(&self.weight_vectors)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.weight_vectors.iter().map(Vec::len).collect()
    }

    /// True when any factor is zero, which makes the decision constant.
    pub fn is_degenerate(&self) -> bool {
        self.weight_vectors.iter().any(|v| v.iter().all(|&x| x == 0.0))
    }

    fn check_dims(&self, x: &DenseTensor) -> Result<()> {
        let dims = self.dims();
        if x.dims() != dims.as_slice() {
            return Err(Error::Shape(format!(
                "sample dims {:?}, model dims {:?}",
                x.dims(),
                dims
            )));
        }
        Ok(())
    }
}

/// Unit-norm factors of the best rank-1 approximation of `w`, with the scale
/// spread evenly over the factors.
pub fn init_from_weight(w: &DenseTensor) -> Result<Vec<Vec<f64>>> {
    let (lambda, mut factors) = best_rank1(w, 100, 1e-8)?;
    let d = factors.len() as f64;
    let per = lambda.abs().powf(1.0 / d);
    for f in factors.iter_mut() {
        f.iter_mut().for_each(|x| *x *= per);
    }
    if lambda < 0.0 {
        factors[0].iter_mut().for_each(|x| *x = -*x);
    }
    Ok(factors)
}

pub fn stm_train(samples: &[DenseTensor], labels: &[f64], config: &StmConfig, init: StmInit) -> Result<StmModel> {
    let dims = common_dims(samples)?;
    if labels.len() != samples.len() {
        return Err(Error::LengthMismatch {
            expected: samples.len(),
            found: labels.len(),
        });
    }
    let d = dims.len();
    let mut w = match init {
        StmInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            dims.iter()
                .map(|&n| {
                    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let nrm = dot(&v, &v).sqrt();
                    v.into_iter().map(|x| x / nrm).collect()
                })
                .collect::<Vec<Vec<f64>>>()
        }
        StmInit::Vectors(v) => {
            let got: Vec<usize> = v.iter().map(Vec::len).collect();
            if got != dims {
                return Err(Error::Shape(format!("init vectors {got:?}, sample dims {dims:?}")));
            }
            v
        }
    };
    for (k, v) in w.iter().enumerate() {
        if d > 1 && v.iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateWeight { mode: k + 1 });
        }
    }

    let start = Instant::now();
    let mut bias = 0.0;
    let mut trace = Vec::new();
    let mut prev_loss: Option<f64> = None;
    for sweep in 1..=config.max_sweeps {
        let mut loss = 0.0;
        for k in 0..d {
            let beta: f64 = (0..d).filter(|&l| l != k).map(|l| dot(&w[l], &w[l])).product();
            if beta.is_nan() || beta <= 0.0 {
                let mode = (0..d).find(|&l| l != k && dot(&w[l], &w[l]) == 0.0).unwrap_or(k) + 1;
                return Err(Error::DegenerateWeight { mode });
            }
            let rows: Vec<Vec<f64>> = samples
                .par_iter()
                .map(|x| contract_all_but(x, &w, Some(k)))
                .collect::<Result<_>>()?;
            let problem = SvmProblem::new(rows.concat(), dims[k], labels.to_vec(), config.c)?.with_beta(beta)?;
            let sol = svm::solve(&problem, &config.solver);
            let correct = (0..problem.n_samples())
                .filter(|&i| label_of(dot(&sol.w, problem.row(i)) + sol.b) == labels[i])
                .count();
            w[k] = sol.w;
            bias = sol.b;
            loss = sol.objective;
            trace.push(StmTraceEntry {
                sweep,
                mode: k + 1,
                train_acc: correct as f64 / labels.len() as f64,
                objective: sol.objective,
                converged: sol.converged,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            if d > 1 && w[k].iter().all(|&x| x == 0.0) {
                return Err(Error::DegenerateWeight { mode: k + 1 });
            }
        }
        if let Some(p) = prev_loss {
            if (p - loss).abs() <= config.loss_rel_tol * p.abs() {
                break;
            }
        }
        prev_loss = Some(loss);
    }
    Ok(StmModel {
        weight_vectors: w,
        bias,
        trace,
    })
}

/// Sign with ties going to +1.
pub fn label_of(decision: f64) -> f64 {
    if decision >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub(crate) fn common_dims(samples: &[DenseTensor]) -> Result<Vec<usize>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training samples".into()))?;
    let dims = first.dims().to_vec();
    if let Some(bad) = samples.iter().find(|s| s.dims() != dims.as_slice()) {
        return Err(Error::Shape(format!(
            "sample dims {:?} differ from {:?}",
            bad.dims(),
            dims
        )));
    }
    Ok(dims)
}
