//! Support tensor train machine.
//!
//! The weight tensor is a tensor train. Training loops over the cores; each
//! update contracts every sample against the weight with the active core
//! removed (`xhat`), solves a linear SVM in that core's entries, and moves the
//! canonical center one site to the right so the next core again carries the
//! whole norm.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stm::{common_dims, label_of};
use crate::svm::{self, SolveOptions, SvmProblem};
use crate::tensor::{dot, DenseTensor};
use crate::tt::{
    core_shape, left_env_step, left_environments, open_core, right_environments, validate_rank_vector, TensorTrain,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SttmConfig {
    /// Interior ranks `r_2..r_d`; the boundary ranks are always 1.
    pub ranks: Vec<usize>,
    /// Relative TT-SVD error used to compress samples.
    pub epsilon: f64,
    pub c: f64,
    pub max_loops: usize,
    pub train_acc_threshold: f64,
    pub seed: u64,
    pub canonical_updates: bool,
    /// Reuse left/right contractions between core updates.
    pub cache_environments: bool,
    pub solver: SolveOptions,
}

impl Default for SttmConfig {
    fn default() -> Self {
        Self {
            ranks: Vec::new(),
            epsilon: 1e-2,
            c: 1.0,
            max_loops: 10,
            train_acc_threshold: 0.99,
            seed: 0,
            canonical_updates: true,
            cache_environments: false,
            solver: SolveOptions::default(),
        }
    }
}

impl SttmConfig {
    pub fn full_ranks(&self) -> Vec<usize> {
        let mut r = Vec::with_capacity(self.ranks.len() + 2);
        r.push(1);
        r.extend_from_slice(&self.ranks);
        r.push(1);
        r
    }

    fn validate(&self, dims: &[usize]) -> Result<()> {
        if self.ranks.len() + 1 != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "{} interior ranks given for {} modes (need {})",
                self.ranks.len(),
                dims.len(),
                dims.len() - 1
            )));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.max_loops == 0 {
            return Err(Error::InvalidArgument("max_loops must be >= 1".into()));
        }
        let r = self.full_ranks();
        validate_rank_vector(dims, &r)?;
        for k in 0..dims.len() - 1 {
            let bound = (r[k] * dims[k]).min(dims[k + 1] * r[k + 2]);
            if r[k + 1] > bound {
                return Err(Error::RankBound {
                    bond: k + 2,
                    rank: r[k + 1],
                    bound,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SttmTraceEntry {
    #[serde(rename = "loop")]
    pub loop_index: usize,
    /// 1-based core that was updated.
    pub core: usize,
    pub train_acc: f64,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SttmModel {
    pub weight: TensorTrain,
    pub bias: f64,
    pub trace: Vec<SttmTraceEntry>,
    pub config: SttmConfig,
}

impl SttmModel {
    /// `<W, X> + b` contracted train against train.
    pub fn decision(&self, sample: &TensorTrain) -> Result<f64> {
        Ok(self.weight.inner_product(sample)? + self.bias)
    }

    /// `<full(W), X> + b` for an uncompressed sample.
    pub fn decision_dense(&self, sample: &DenseTensor) -> Result<f64> {
        Ok(self.weight.to_full().inner_product(sample)? + self.bias)
    }

    /// Sign of the decision value, with 0 mapped to +1.
    pub fn predict_label(&self, sample: &TensorTrain) -> Result<f64> {
        Ok(label_of(self.decision(sample)?))
    }
}

/// Observation points inside the training loop, for diagnostics and tests.
pub enum SttmEvent<'a> {
    /// Core `core` is about to be replaced by a new SVM solution.
    BeforeUpdate {
        loop_index: usize,
        core: usize,
        weight: &'a TensorTrain,
    },
    /// The center has just been moved past `core`.
    AfterShift {
        loop_index: usize,
        core: usize,
        before: &'a TensorTrain,
        after: &'a TensorTrain,
        bias: f64,
    },
}

/// TT-SVD of every sample at relative error `epsilon`, in sample order.
pub fn compress_samples(samples: &[DenseTensor], epsilon: f64) -> Result<Vec<TensorTrain>> {
    samples
        .par_iter()
        .map(|s| TensorTrain::tt_svd(s, epsilon, None).map(|r| r.train))
        .collect()
}

/// The network `<W, X>` with core `k` (1-based) of `weight` removed, shaped
/// like that core and vectorized first-index-fastest.
pub fn compute_xhat(sample: &TensorTrain, weight: &TensorTrain, k: usize) -> Result<Vec<f64>> {
    let d = weight.order();
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("core {k} out of range 1..={d}")));
    }
    if sample.dims() != weight.dims() {
        return Err(Error::Shape(format!(
            "sample dims {:?}, weight dims {:?}",
            sample.dims(),
            weight.dims()
        )));
    }
    let left = left_environments(weight, sample, k - 1);
    let right = right_environments(weight, sample, k - 1);
    let (rw, _, rw2) = core_shape(weight.core(k));
    Ok(open_core(&left[k - 1], sample.core(k), &right[k - 1], rw, rw2))
}

/// Builds a weight train from a dense weight tensor: exact TT-SVD capped at
/// the configured ranks, zero-padded up to them where the tensor needs less.
pub fn init_from_weight(w: &DenseTensor, config: &SttmConfig) -> Result<TensorTrain> {
    config.validate(w.dims())?;
    let tt = TensorTrain::tt_svd(w, 0.0, Some(&config.ranks))?.train;
    let ranks = config.full_ranks();
    let cores = tt
        .cores()
        .iter()
        .enumerate()
        .map(|(k, c)| pad_core(c, ranks[k], ranks[k + 1]))
        .collect::<Result<Vec<_>>>()?;
    TensorTrain::new(cores)
}

fn pad_core(c: &DenseTensor, r: usize, r2: usize) -> Result<DenseTensor> {
    let (a, n, b) = core_shape(c);
    let mut out = DenseTensor::zeros(vec![r, n, r2])?;
    for j in 0..b {
        for i in 0..n {
            for l in 0..a {
                out.data_mut()[l + r * (i + n * j)] = c.data()[l + a * (i + n * j)];
            }
        }
    }
    Ok(out)
}

/// Compresses `samples` with `config.epsilon` and trains.
pub fn sttm_train(
    samples: &[DenseTensor],
    labels: &[f64],
    config: &SttmConfig,
    init: Option<TensorTrain>,
) -> Result<SttmModel> {
    common_dims(samples)?;
    let compressed = compress_samples(samples, config.epsilon)?;
    train_compressed(&compressed, labels, config, init)
}

pub fn train_compressed(
    samples: &[TensorTrain],
    labels: &[f64],
    config: &SttmConfig,
    init: Option<TensorTrain>,
) -> Result<SttmModel> {
    train_with_observer(samples, labels, config, init, |_| {})
}

/// Per-sample contraction state for the cached path.
struct EnvCache {
    left: Vec<f64>,
    right: Vec<Vec<f64>>,
}

pub fn train_with_observer(
    samples: &[TensorTrain],
    labels: &[f64],
    config: &SttmConfig,
    init: Option<TensorTrain>,
    mut observe: impl FnMut(SttmEvent<'_>),
) -> Result<SttmModel> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training samples".into()))?;
    let dims = first.dims();
    if let Some(bad) = samples.iter().find(|s| s.dims() != dims) {
        return Err(Error::Shape(format!(
            "sample dims {:?} differ from {:?}",
            bad.dims(),
            dims
        )));
    }
    if labels.len() != samples.len() {
        return Err(Error::LengthMismatch {
            expected: samples.len(),
            found: labels.len(),
        });
    }
    config.validate(&dims)?;
    let ranks = config.full_ranks();
    let mut weight = match init {
        Some(w) => {
            if w.dims() != dims || w.ranks() != ranks {
                return Err(Error::Shape(format!(
                    "init train dims {:?} ranks {:?}, expected dims {:?} ranks {:?}",
                    w.dims(),
                    w.ranks(),
                    dims,
                    ranks
                )));
            }
            w
        }
        None => TensorTrain::random(&dims, &ranks, &mut ChaCha8Rng::seed_from_u64(config.seed))?,
    };
    if config.canonical_updates {
        weight.canonicalize(1)?;
    }

    let d = dims.len();
    let m = samples.len();
    let start = Instant::now();
    let mut bias = 0.0;
    let mut trace = Vec::new();
    let mut caches: Vec<EnvCache> = Vec::new();
    for loop_index in 1..=config.max_loops {
        if config.cache_environments {
            caches = samples
                .par_iter()
                .map(|x| EnvCache {
                    left: vec![1.0],
                    right: right_environments(&weight, x, 0),
                })
                .collect();
        }
        for k in 1..=d {
            observe(SttmEvent::BeforeUpdate {
                loop_index,
                core: k,
                weight: &weight,
            });
            let (rw, _, rw2) = core_shape(weight.core(k));
            let rows: Vec<Vec<f64>> = if config.cache_environments {
                caches
                    .par_iter()
                    .zip(samples)
                    .map(|(c, x)| open_core(&c.left, x.core(k), &c.right[k - 1], rw, rw2))
                    .collect()
            } else {
                samples
                    .par_iter()
                    .map(|x| compute_xhat(x, &weight, k))
                    .collect::<Result<_>>()?
            };
            let width = rw * dims[k - 1] * rw2;
            let problem = SvmProblem::new(rows.concat(), width, labels.to_vec(), config.c)?;
            let sol = svm::solve(&problem, &config.solver);
            let correct = (0..m)
                .filter(|&i| label_of(dot(&sol.w, problem.row(i)) + sol.b) == labels[i])
                .count();
            weight.set_core_data(k, &sol.w)?;
            bias = sol.b;
            trace.push(SttmTraceEntry {
                loop_index,
                core: k,
                train_acc: correct as f64 / m as f64,
                objective: sol.objective,
                converged: sol.converged,
                iterations: sol.iterations,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            if config.canonical_updates {
                let before = weight.clone();
                weight.shift_center_right()?;
                observe(SttmEvent::AfterShift {
                    loop_index,
                    core: k,
                    before: &before,
                    after: &weight,
                    bias,
                });
            }
            if config.cache_environments && k < d {
                let w = &weight;
                caches
                    .par_iter_mut()
                    .zip(samples)
                    .for_each(|(c, x)| c.left = left_env_step(&c.left, w.core(k), x.core(k)));
            }
        }
        let acc = trace.last().map_or(0.0, |t: &SttmTraceEntry| t.train_acc);
        if acc >= config.train_acc_threshold {
            break;
        }
    }
    Ok(SttmModel {
        weight,
        bias,
        trace,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_dense(dims: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
        DenseTensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn xhat_identity_for_every_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let dims = [2, 3, 2];
            let x = TensorTrain::random(&dims, &[1, 2, 2, 1], &mut rng).unwrap();
            let w = TensorTrain::random(&dims, &[1, 2, 2, 1], &mut rng).unwrap();
            let dense = w.to_full().inner_product(&x.to_full()).unwrap();
            for k in 1..=3 {
                let xhat = compute_xhat(&x, &w, k).unwrap();
                assert_eq!(xhat.len(), w.core(k).numel());
                assert!(rel(dot(w.core(k).data(), &xhat), dense) < 1e-10);
            }
        }
    }

    #[test]
    fn xhat_of_single_core_is_the_sample() {
        let x = TensorTrain::tt_svd(&DenseTensor::from_vector(vec![1.0, -2.0, 3.5]).unwrap(), 0.0, None)
            .unwrap()
            .train;
        let w = TensorTrain::random(&[3], &[1, 1], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(compute_xhat(&x, &w, 1).unwrap(), x.to_full().vectorize());
    }

    #[test]
    fn xhat_of_rank1_chain_factorizes() {
        let a = [vec![1.0, 2.0], vec![3.0, -1.0, 0.5], vec![2.0, 1.0]];
        let w = [vec![0.5, -1.0], vec![2.0, 1.0, 1.0], vec![1.0, 3.0]];
        let to_tt = |v: &[Vec<f64>]| {
            TensorTrain::new(
                v.iter()
                    .map(|x| DenseTensor::new(vec![1, x.len(), 1], x.clone()).unwrap())
                    .collect(),
            )
            .unwrap()
        };
        let (xt, wt) = (to_tt(&a), to_tt(&w));
        let xhat = compute_xhat(&xt, &wt, 2).unwrap();
        let scale = dot(&a[0], &w[0]) * dot(&a[2], &w[2]);
        for (g, s) in xhat.iter().zip(&a[1]) {
            assert!((g - scale * s).abs() < 1e-14);
        }
    }

    #[test]
    fn decisions_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = TensorTrain::random(&[3, 2, 4], &[1, 2, 3, 1], &mut rng).unwrap();
        let x = random_dense(&[3, 2, 4], &mut rng);
        let model = SttmModel {
            weight: w.clone(),
            bias: 0.75,
            trace: vec![],
            config: SttmConfig::default(),
        };
        let xt = TensorTrain::tt_svd(&x, 0.0, None).unwrap().train;
        let oracle: f64 = w.to_full().data().iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>() + 0.75;
        assert!(rel(model.decision(&xt).unwrap(), oracle) < 1e-10);
        assert!(rel(model.decision_dense(&x).unwrap(), oracle) < 1e-10);
        let zero = SttmModel {
            weight: TensorTrain::zeros(&[3, 2, 4], &[1, 2, 3, 1]).unwrap(),
            ..model
        };
        assert_eq!(zero.decision(&xt).unwrap(), 0.75);
    }

    #[test]
    fn label_tie_goes_positive() {
        let model = SttmModel {
            weight: TensorTrain::zeros(&[2], &[1, 1]).unwrap(),
            bias: 0.0,
            trace: vec![],
            config: SttmConfig::default(),
        };
        let x = TensorTrain::tt_svd(&DenseTensor::from_vector(vec![1.0, 1.0]).unwrap(), 0.0, None)
            .unwrap()
            .train;
        assert_eq!(model.predict_label(&x).unwrap(), 1.0);
        assert_eq!(label_of(2.5), 1.0);
        assert_eq!(label_of(-0.1), -1.0);
    }

    #[test]
    fn single_core_reduces_to_svm() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs: Vec<DenseTensor> = (0..30).map(|_| random_dense(&[6], &mut rng)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| label_of(x.data()[1] + 0.5 * x.data()[4] - 0.1))
            .collect();
        let config = SttmConfig {
            epsilon: 0.0,
            max_loops: 1,
            ..SttmConfig::default()
        };
        let model = sttm_train(&xs, &ys, &config, None).unwrap();
        let rows: Vec<Vec<f64>> = xs.iter().map(DenseTensor::vectorize).collect();
        let sol = svm::solve(
            &SvmProblem::from_rows(&rows, ys, 1.0).unwrap(),
            &SolveOptions::default(),
        );
        for x in &xs {
            let a = model.decision_dense(x).unwrap();
            let b = svm::decision(&sol.w, sol.b, x.data()).unwrap();
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rank1_learns_rank1_separable_dataset() {
        let pos = DenseTensor::rank1_from_vectors(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let neg = DenseTensor::rank1_from_vectors(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let xs = vec![pos.clone(), neg.clone(), pos, neg];
        let ys = vec![1.0, -1.0, 1.0, -1.0];
        let config = SttmConfig {
            ranks: vec![1],
            epsilon: 0.0,
            ..SttmConfig::default()
        };
        let model = sttm_train(&xs, &ys, &config, None).unwrap();
        assert_eq!(model.trace.last().unwrap().train_acc, 1.0);
    }

    fn toy_problem(seed: u64) -> (Vec<TensorTrain>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [4, 3, 3];
        let xs: Vec<DenseTensor> = (0..60).map(|_| random_dense(&dims, &mut rng)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| label_of(x.get(&[0, 0, 0]) + x.get(&[1, 2, 1]) - x.get(&[3, 1, 2])))
            .collect();
        (compress_samples(&xs, 0.0).unwrap(), ys)
    }

    #[test]
    fn norm_lives_in_active_core_and_shift_keeps_decisions() {
        let (xs, ys) = toy_problem(5);
        let config = SttmConfig {
            ranks: vec![2, 2],
            max_loops: 3,
            train_acc_threshold: 2.0,
            ..SttmConfig::default()
        };
        let mut checks = 0;
        train_with_observer(&xs, &ys, &config, None, |ev| match ev {
            SttmEvent::BeforeUpdate { core, weight, .. } => {
                assert_eq!(weight.center(), Some(core));
                let dense = weight.to_full().frobenius_norm();
                assert!(rel(weight.core(core).frobenius_norm(), dense) < 1e-8);
                checks += 1;
            }
            SttmEvent::AfterShift {
                before, after, bias, ..
            } => {
                assert!(after.canonical_residual().unwrap() <= 1e-10);
                for x in &xs {
                    let (a, b) = (
                        before.inner_product(x).unwrap() + bias,
                        after.inner_product(x).unwrap() + bias,
                    );
                    assert!((a - b).abs() <= 1e-9);
                }
            }
        })
        .unwrap();
        assert_eq!(checks, 9);
    }

    #[test]
    fn cached_environments_match_fresh_contractions() {
        let (xs, ys) = toy_problem(6);
        for canonical in [true, false] {
            let config = SttmConfig {
                ranks: vec![2, 3],
                max_loops: 3,
                train_acc_threshold: 2.0,
                canonical_updates: canonical,
                ..SttmConfig::default()
            };
            let cached = SttmConfig {
                cache_environments: true,
                ..config.clone()
            };
            let a = train_compressed(&xs, &ys, &config, None).unwrap();
            let b = train_compressed(&xs, &ys, &cached, None).unwrap();
            for x in &xs {
                assert!((a.decision(x).unwrap() - b.decision(x).unwrap()).abs() <= 1e-10);
            }
            assert_eq!(a.trace.len(), b.trace.len());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = toy_problem(7);
        let config = SttmConfig {
            ranks: vec![2, 2],
            max_loops: 2,
            seed: 42,
            ..SttmConfig::default()
        };
        let strip = |m: SttmModel| {
            m.trace
                .into_iter()
                .map(|t| (t.loop_index, t.core, t.train_acc.to_bits(), t.objective.to_bits()))
                .collect::<Vec<_>>()
        };
        let a = strip(train_compressed(&xs, &ys, &config, None).unwrap());
        let b = strip(train_compressed(&xs, &ys, &config, None).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn svm_weight_init_pads_ranks() {
        let w = DenseTensor::rank1_from_vectors(&[vec![1.0, 2.0], vec![0.5, -1.0, 1.0], vec![3.0, 1.0]]).unwrap();
        let config = SttmConfig {
            ranks: vec![2, 2],
            ..SttmConfig::default()
        };
        let tt = init_from_weight(&w, &config).unwrap();
        assert_eq!(tt.ranks(), vec![1, 2, 2, 1]);
        let full = tt.to_full();
        for (a, b) in full.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let (xs, ys) = toy_problem(1);
        let bad_len = SttmConfig {
            ranks: vec![2],
            ..SttmConfig::default()
        };
        assert!(train_compressed(&xs, &ys, &bad_len, None).is_err());
        let too_big = SttmConfig {
            ranks: vec![5, 2],
            ..SttmConfig::default()
        };
        assert!(matches!(
            train_compressed(&xs, &ys, &too_big, None),
            Err(Error::RankBound { .. })
        ));
    }
}
