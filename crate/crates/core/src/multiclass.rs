//! One-vs-one reduction over the binary classifiers.
//!
//! Pair `(i, j)` with `i < j` is trained with class `i` as `+1` and class `j`
//! as `-1`. At prediction time each pair votes; ties between classes with the
//! most votes go to the larger sum of `|decision|` over the votes each class
//! won, then to the smallest class label.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::stm::{self, StmConfig, StmInit, StmModel};
use crate::sttm::{self, SttmConfig, SttmModel};
use crate::svm::{self, SolveOptions, SvmClassifier, SvmProblem};
use crate::tensor::DenseTensor;
use crate::tt::TensorTrain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Svm,
    Stm,
    Sttm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Svm => "svm",
            ModelKind::Stm => "stm",
            ModelKind::Sttm => "sttm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    Random,
    /// Train the pairwise SVM first and decompose its weight.
    FromSvm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvoConfig {
    pub kind: ModelKind,
    pub init: InitPolicy,
    /// Declared class set; defaults to the labels present in the data.
    pub classes: Option<Vec<u32>>,
    pub c: f64,
    pub solver: SolveOptions,
    pub stm: StmConfig,
    pub sttm: SttmConfig,
    /// Per-pair seeds are derived from this one.
    pub seed: u64,
}

impl OvoConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            init: InitPolicy::Random,
            classes: None,
            c: 1.0,
            solver: SolveOptions::default(),
            stm: StmConfig::default(),
            sttm: SttmConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BinaryModel {
    Svm(SvmClassifier),
    Stm(StmModel),
    Sttm(SttmModel),
}

/// A sample in the forms the models consume: the dense tensor, plus its
/// tensor train when STTM decisions should use the compressed sample.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub dense: DenseTensor,
    pub train: Option<TensorTrain>,
}

impl PreparedSample {
    pub fn dense(x: DenseTensor) -> Self {
        Self { dense: x, train: None }
    }

    pub fn compressed(x: DenseTensor, epsilon: f64) -> Result<Self> {
        let train = TensorTrain::tt_svd(&x, epsilon, None)?.train;
        Ok(Self {
            dense: x,
            train: Some(train),
        })
    }
}

impl BinaryModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            BinaryModel::Svm(_) => ModelKind::Svm,
            BinaryModel::Stm(_) => ModelKind::Stm,
            BinaryModel::Sttm(_) => ModelKind::Sttm,
        }
    }

    /// Signed decision value. STTM uses the sample's train when present and
    /// the dense inner product otherwise.
    pub fn decision(&self, x: &PreparedSample) -> Result<f64> {
        match self {
            BinaryModel::Svm(m) => m.decision(x.dense.data()),
            BinaryModel::Stm(m) => m.decision(&x.dense),
            BinaryModel::Sttm(m) => match &x.train {
                Some(t) => m.decision(t),
                None => m.decision_dense(&x.dense),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairModel {
    /// Class voted for on a non-negative decision.
    pub positive: u32,
    pub negative: u32,
    pub model: BinaryModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvoEnsemble {
    pub classes: Vec<u32>,
    pub kind: ModelKind,
    pub pairs: Vec<PairModel>,
}

/// Votes and margin sums per class, in `classes` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tally {
    pub votes: Vec<usize>,
    pub margins: Vec<f64>,
}

/// Winner index given pairwise decisions `(positive_index, negative_index, f)`.
pub fn vote(n_classes: usize, decisions: &[(usize, usize, f64)]) -> (usize, Tally) {
    let mut votes = vec![0usize; n_classes];
    let mut margins = vec![0.0; n_classes];
    for &(p, n, f) in decisions {
        let w = if f >= 0.0 { p } else { n };
        votes[w] += 1;
        margins[w] += f.abs();
    }
    let mut best = 0;
    for c in 1..n_classes {
        if votes[c] > votes[best] || (votes[c] == votes[best] && margins[c] > margins[best]) {
            best = c;
        }
    }
    (best, Tally { votes, margins })
}

/// Deterministic stream of per-task seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl OvoEnsemble {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Wraps a sample for prediction. STTM ensembles compress it with their
    /// training epsilon unless `raw` is set.
    pub fn prepare(&self, x: DenseTensor, raw: bool) -> Result<PreparedSample> {
        match self.sttm_epsilon() {
            Some(e) if !raw => PreparedSample::compressed(x, e),
            _ => Ok(PreparedSample::dense(x)),
        }
    }

    pub fn decisions(&self, x: &PreparedSample) -> Result<Vec<(usize, usize, f64)>> {
        self.pairs
            .iter()
            .map(|p| {
                let f = p.model.decision(x)?;
                Ok((self.index_of(p.positive)?, self.index_of(p.negative)?, f))
            })
            .collect()
    }

    pub fn predict(&self, x: &PreparedSample) -> Result<u32> {
        let (w, _) = vote(self.n_classes(), &self.decisions(x)?);
        Ok(self.classes[w])
    }

    pub fn predict_prepared(&self, samples: &[PreparedSample]) -> Result<Vec<u32>> {
        samples.par_iter().map(|x| self.predict(x)).collect()
    }

    /// STTM compression epsilon, if this ensemble holds STTM models.
    pub fn sttm_epsilon(&self) -> Option<f64> {
        self.pairs.iter().find_map(|p| match &p.model {
            BinaryModel::Sttm(m) => Some(m.config.epsilon),
            _ => None,
        })
    }

    pub fn predict_batch(&self, samples: &[DenseTensor], raw: bool) -> Result<Vec<u32>> {
        samples
            .par_iter()
            .map(|x| self.predict(&self.prepare(x.clone(), raw)?))
            .collect()
    }

    fn index_of(&self, class: u32) -> Result<usize> {
        self.classes
            .binary_search(&class)
            .map_err(|_| Error::InvalidArgument(format!("class {class} not in ensemble")))
    }
}

/// Trains one binary model on samples labelled `+1`/`-1`.
pub fn train_binary(samples: &[DenseTensor], labels: &[f64], config: &OvoConfig, seed: u64) -> Result<BinaryModel> {
    train_binary_cached(samples, None, labels, config, seed)
}

/// As [`train_binary`]; STTM uses `trains` as the compressed samples when given
/// instead of compressing `samples` again.
pub fn train_binary_cached(
    samples: &[DenseTensor],
    trains: Option<&[TensorTrain]>,
    labels: &[f64],
    config: &OvoConfig,
    seed: u64,
) -> Result<BinaryModel> {
    let train_svm = || -> Result<svm::SvmSolution> {
        let rows: Vec<Vec<f64>> = samples.iter().map(DenseTensor::vectorize).collect();
        let problem = SvmProblem::from_rows(&rows, labels.to_vec(), config.c)?;
        Ok(svm::solve(&problem, &config.solver))
    };
    let dims = stm::common_dims(samples)?;
    Ok(match config.kind {
        ModelKind::Svm => BinaryModel::Svm(train_svm()?.classifier()),
        ModelKind::Stm => {
            let cfg = StmConfig {
                c: config.c,
                seed,
                solver: config.solver,
                ..config.stm.clone()
            };
            let init = match config.init {
                InitPolicy::Random => StmInit::Random,
                InitPolicy::FromSvm => {
                    let w = DenseTensor::new(dims.clone(), train_svm()?.w)?;
                    StmInit::Vectors(stm::init_from_weight(&w)?)
                }
            };
            BinaryModel::Stm(stm::stm_train(samples, labels, &cfg, init)?)
        }
        ModelKind::Sttm => {
            let cfg = SttmConfig {
                c: config.c,
                seed,
                solver: config.solver,
                ..config.sttm.clone()
            };
            let init = match config.init {
                InitPolicy::Random => None,
                InitPolicy::FromSvm => {
                    let w = DenseTensor::new(dims.clone(), train_svm()?.w)?;
                    Some(sttm::init_from_weight(&w, &cfg)?)
                }
            };
            BinaryModel::Sttm(match trains {
                Some(t) => sttm::train_compressed(t, labels, &cfg, init)?,
                None => sttm::sttm_train(samples, labels, &cfg, init)?,
            })
        }
    })
}

pub fn ovo_train(ds: &Dataset, config: &OvoConfig) -> Result<OvoEnsemble> {
    ovo_train_with_progress(ds, None, config, |_, _| {})
}

/// As [`ovo_train`], calling `progress(done, total)` after each pair. `trains`,
/// when given, are the samples of `ds` already compressed for STTM.
pub fn ovo_train_with_progress(
    ds: &Dataset,
    trains: Option<&[TensorTrain]>,
    config: &OvoConfig,
    progress: impl Fn(usize, usize) + Sync,
) -> Result<OvoEnsemble> {
    if let Some(t) = trains {
        if t.len() != ds.len() {
            return Err(Error::LengthMismatch {
                expected: ds.len(),
                found: t.len(),
            });
        }
    }
    let mut classes = config.classes.clone().unwrap_or_else(|| ds.classes());
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {classes:?}"
        )));
    }
    let counts = ds.class_counts();
    if let Some(&c) = classes.iter().find(|c| !counts.contains_key(c)) {
        return Err(Error::EmptyClass(c));
    }
    if let Some(&l) = ds.labels.iter().find(|l| classes.binary_search(l).is_err()) {
        return Err(Error::InvalidArgument(format!("label {l} not in the declared classes")));
    }
    let pairs: Vec<(u32, u32)> = classes
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| classes[i + 1..].iter().map(move |&b| (a, b)))
        .collect();
    let total = pairs.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let models = pairs
        .par_iter()
        .enumerate()
        .map(|(idx, &(pos, neg))| {
            let keep: Vec<usize> = (0..ds.len())
                .filter(|&i| ds.labels[i] == pos || ds.labels[i] == neg)
                .collect();
            let samples: Vec<DenseTensor> = keep.iter().map(|&i| ds.samples[i].clone()).collect();
            let labels: Vec<f64> = keep
                .iter()
                .map(|&i| if ds.labels[i] == pos { 1.0 } else { -1.0 })
                .collect();
            let pair_trains: Option<Vec<TensorTrain>> = trains.map(|t| keep.iter().map(|&i| t[i].clone()).collect());
            let seed = derive_seed(config.seed, idx as u64);
            let model = train_binary_cached(&samples, pair_trains.as_deref(), &labels, config, seed)?;
            let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            progress(n, total);
            Ok(PairModel {
                positive: pos,
                negative: neg,
                model,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OvoEnsemble {
        classes,
        kind: config.kind,
        pairs: models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(classes: &[u32], per: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..per {
            for &c in classes {
                let centre = [(c as f64).cos() * 3.0, (c as f64).sin() * 3.0];
                let v = vec![
                    centre[0] + rng.random_range(-0.5..0.5),
                    centre[1] + rng.random_range(-0.5..0.5),
                    1.0,
                    rng.random_range(-0.1..0.1),
                ];
                samples.push(DenseTensor::new(vec![2, 2], v).unwrap());
                labels.push(c);
            }
        }
        Dataset::new(samples, labels).unwrap()
    }

    #[test]
    fn pair_counts_follow_formula() {
        for (l, want) in [(2usize, 1usize), (3, 3)] {
            let classes: Vec<u32> = (0..l as u32).collect();
            let ens = ovo_train(&blobs(&classes, 6, 1), &OvoConfig::new(ModelKind::Svm)).unwrap();
            assert_eq!(ens.pairs.len(), want);
        }
        let classes: Vec<u32> = (0..10).collect();
        let ens = ovo_train(&blobs(&classes, 3, 2), &OvoConfig::new(ModelKind::Svm)).unwrap();
        assert_eq!(ens.pairs.len(), 45);
        for (i, p) in ens.pairs.iter().enumerate() {
            assert!(p.positive < p.negative, "pair {i}");
        }
    }

    #[test]
    fn two_classes_match_binary_api() {
        let ds = blobs(&[4, 7], 10, 3);
        let config = OvoConfig::new(ModelKind::Svm);
        let ens = ovo_train(&ds, &config).unwrap();
        let labels: Vec<f64> = ds.labels.iter().map(|&l| if l == 4 { 1.0 } else { -1.0 }).collect();
        let bin = train_binary(&ds.samples, &labels, &config, 0).unwrap();
        for x in &ds.samples {
            let p = PreparedSample::dense(x.clone());
            let want = if bin.decision(&p).unwrap() >= 0.0 { 4 } else { 7 };
            assert_eq!(ens.predict(&p).unwrap(), want);
        }
    }

    #[test]
    fn missing_class_is_named() {
        let ds = blobs(&[0, 1], 4, 0);
        let config = OvoConfig {
            classes: Some(vec![0, 1, 2]),
            ..OvoConfig::new(ModelKind::Svm)
        };
        assert!(matches!(ovo_train(&ds, &config), Err(Error::EmptyClass(2))));
    }

    #[test]
    fn unanimous_and_single_pair_votes() {
        let decisions: Vec<(usize, usize, f64)> = (0..10)
            .flat_map(|i| (i + 1..10).map(move |j| (i, j)))
            .map(|(i, j)| {
                if i == 3 {
                    (i, j, 1.0)
                } else if j == 3 {
                    (i, j, -1.0)
                } else {
                    (i, j, 0.5)
                }
            })
            .collect();
        let (w, t) = vote(10, &decisions);
        assert_eq!(w, 3);
        assert_eq!(t.votes[3], 9);
        assert_eq!(t.votes.iter().sum::<usize>(), 45);
        assert_eq!(vote(2, &[(0, 1, 0.2)]).0, 0);
        assert_eq!(vote(2, &[(0, 1, -0.2)]).0, 1);
    }

    #[test]
    fn vote_cycle_matches_enumerated_table() {
        // 0 beats 1, 1 beats 2, 2 beats 0: one vote each, margins decide.
        let table = [
            ((0.3, 0.2, 0.1), 0), // margins 0.3, 0.2, 0.1
            ((0.1, 0.5, 0.2), 1),
            ((0.1, 0.2, 0.9), 2),
            ((0.4, 0.4, 0.4), 0), // full tie goes to the lowest index
            ((0.2, 0.6, 0.6), 1),
        ];
        for ((m01, m12, m20), want) in table {
            let decisions = [(0, 1, m01), (1, 2, m12), (0, 2, -m20)];
            let (w, t) = vote(3, &decisions);
            assert_eq!(t.votes, vec![1, 1, 1]);
            assert_eq!(w, want, "margins {m01} {m12} {m20}");
        }
    }

    #[test]
    fn vote_is_permutation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let l = rng.random_range(2..6usize);
            let mut decisions = Vec::new();
            for i in 0..l {
                for j in i + 1..l {
                    decisions.push((i, j, rng.random_range(-1.0..1.0)));
                }
            }
            let (w, _) = vote(l, &decisions);
            let mut perm: Vec<usize> = (0..l).collect();
            for k in (1..l).rev() {
                perm.swap(k, rng.random_range(0..=k));
            }
            let permuted: Vec<(usize, usize, f64)> = decisions
                .iter()
                .map(|&(i, j, f)| {
                    let (a, b) = (perm[i], perm[j]);
                    if a < b {
                        (a, b, f)
                    } else {
                        (b, a, -f)
                    }
                })
                .collect();
            let (wp, tp) = vote(l, &permuted);
            let (_, t) = vote(l, &decisions);
            // Ties resolved by index may move; otherwise the winner follows the relabeling.
            let top = *t.votes.iter().max().unwrap();
            let tied: Vec<usize> = (0..l)
                .filter(|&c| t.votes[c] == top && (t.margins[c] - t.margins[w]).abs() < 1e-15)
                .collect();
            if tied.len() == 1 {
                assert_eq!(wp, perm[w]);
            }
            assert_eq!(tp.votes[perm[w]], t.votes[w]);
        }
    }

    #[test]
    fn tensor_kinds_train_per_pair() {
        let ds = blobs(&[0, 1, 2], 8, 5);
        for kind in [ModelKind::Stm, ModelKind::Sttm] {
            for init in [InitPolicy::Random, InitPolicy::FromSvm] {
                let mut config = OvoConfig {
                    init,
                    ..OvoConfig::new(kind)
                };
                config.sttm.ranks = vec![2];
                config.sttm.epsilon = 0.0;
                let ens = ovo_train(&ds, &config).unwrap();
                assert_eq!(ens.pairs.len(), 3);
                let pred = ens.predict_batch(&ds.samples, false).unwrap();
                let acc = pred.iter().zip(&ds.labels).filter(|(a, b)| a == b).count() as f64 / ds.len() as f64;
                assert!(acc > 0.9, "{kind:?} {init:?} acc {acc}");
            }
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 100);
        assert_eq!(derive_seed(7, 3), s[3]);
    }
}
