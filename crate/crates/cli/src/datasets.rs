//! Dataset location and train/validation/test assembly.
//!
//! MNIST: training pool is `train-*` in file order, test split is `t10k-*`.
//! CIFAR-10: all six batch files are pooled and filtered to the chosen
//! classes; the first 3000 samples of each class form the training pool and
//! the rest the test split.

use std::path::{Path, PathBuf};

use anyhow::Result;
use sttm_core::data::{self, Dataset, SplitSpec};

use crate::args::{DataArgs, DatasetKind};
use crate::Failure;

pub const CIFAR_TRAIN_PER_CLASS: usize = 3000;

pub struct Splits {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
}

fn mnist_dir(args: &DataArgs) -> PathBuf {
    args.data_dir.join("mnist")
}

fn cifar_files(args: &DataArgs) -> Vec<PathBuf> {
    let dir = args.data_dir.join("cifar-10-batches-bin");
    let mut v: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    v.push(dir.join("test_batch.bin"));
    v
}

fn require(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Failure::Data(format!("missing data file {}", path.display())).into());
    }
    Ok(())
}

fn data_err(e: sttm_core::Error) -> anyhow::Error {
    Failure::Data(e.to_string()).into()
}

pub fn default_classes(kind: DatasetKind) -> Vec<u32> {
    match kind {
        DatasetKind::Mnist => (0..10).collect(),
        DatasetKind::Cifar10 => vec![0, 1],
    }
}

/// Last `v` samples of each class, split off from `ds`.
fn hold_out_last_per_class(ds: &Dataset, v: usize) -> Result<(Dataset, Dataset)> {
    let counts = ds.class_counts();
    if let Some((c, n)) = counts.iter().find(|(_, &n)| n <= v) {
        return Err(Failure::Usage(format!("class {c} has {n} training samples, cannot hold out {v}")).into());
    }
    let mut seen = std::collections::BTreeMap::new();
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for (i, l) in ds.labels.iter().enumerate() {
        let n = seen.entry(*l).or_insert(0usize);
        if *n >= counts[l] - v {
            held.push(i);
        } else {
            keep.push(i);
        }
        *n += 1;
    }
    Ok((ds.select(&keep), ds.select(&held)))
}

fn take_first(ds: Dataset, n: Option<usize>) -> Result<Dataset> {
    match n {
        None => Ok(ds),
        Some(n) if n > ds.len() => {
            Err(Failure::Usage(format!("requested {n} samples but only {} available", ds.len())).into())
        }
        Some(n) => Ok(data::split(&ds, &SplitSpec::FirstN(n))
            .map_err(|e| Failure::Usage(e.to_string()))?
            .0),
    }
}

/// Loads the training pool and test split; `validation` samples per class are
/// held out from the end of the training pool before `train_count` applies.
pub fn load(args: &DataArgs, validation: usize) -> Result<Splits> {
    let classes = args.classes.clone().unwrap_or_else(|| default_classes(args.dataset));
    let scale = !args.no_scale;
    let (pool, test) = match args.dataset {
        DatasetKind::Mnist => {
            let dir = mnist_dir(args);
            let files = [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ]
            .map(|f| dir.join(f));
            files.iter().try_for_each(|f| require(f))?;
            let train = data::load_idx_with(&files[0], &files[1], scale).map_err(data_err)?;
            let test = data::load_idx_with(&files[2], &files[3], scale).map_err(data_err)?;
            (
                data::filter_classes(&train, &classes),
                data::filter_classes(&test, &classes),
            )
        }
        DatasetKind::Cifar10 => {
            let files = cifar_files(args);
            files.iter().try_for_each(|f| require(f))?;
            let mut parts = Vec::new();
            for f in &files {
                let ds = data::load_cifar10_with(&[f], scale).map_err(data_err)?;
                parts.push(data::filter_classes(&ds, &classes));
            }
            let mut all = parts.remove(0);
            for p in parts {
                all.samples.extend(p.samples);
                all.labels.extend(p.labels);
            }
            all.provenance.push(format!("pooled {} files", files.len()));
            data::split(&all, &SplitSpec::FirstPerClass(CIFAR_TRAIN_PER_CLASS))
                .map_err(|e| Failure::Data(format!("CIFAR pool: {e}")))?
        }
    };
    for c in &classes {
        if !pool.labels.contains(c) {
            return Err(Failure::Data(format!("class {c} has no training samples")).into());
        }
    }
    let (pool, validation) = if validation > 0 {
        let (p, v) = hold_out_last_per_class(&pool, validation)?;
        (p, Some(v))
    } else {
        (pool, None)
    };
    let train = take_first(pool, args.train_count)?;
    let test = take_first(test, args.test_count)?;
    Ok(Splits {
        train,
        validation,
        test,
    })
}

pub fn reshape(ds: &Dataset, dims: &[usize]) -> Result<Dataset> {
    if ds.dims() == Some(dims) {
        return Ok(ds.clone());
    }
    data::retensorize(ds, dims).map_err(|e| Failure::Usage(format!("reshaping samples to {dims:?}: {e}")).into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sttm_core::DenseTensor;

    #[test]
    fn holds_out_the_tail_of_each_class() {
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 0];
        let samples = (0..labels.len())
            .map(|i| DenseTensor::from_vector(vec![i as f64]).unwrap())
            .collect();
        let ds = Dataset::new(samples, labels).unwrap();
        let (keep, held) = hold_out_last_per_class(&ds, 2).unwrap();
        let ids = |d: &Dataset| d.samples.iter().map(|s| s.data()[0] as usize).collect::<Vec<_>>();
        assert_eq!(ids(&held), vec![3, 5, 6, 7]);
        assert_eq!(ids(&keep), vec![0, 1, 2, 4]);
        assert!(hold_out_last_per_class(&ds, 3).is_err());
    }
}
