//! Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, reshaping and
//! splits.
//!
//! IDX: big-endian `u32` magic (`0x00000803` images, `0x00000801` labels),
//! big-endian `u32` sizes, then one byte per entry in row-major order.
//! An image pixel `(row, col)` lands at tensor index `(row, col)`, which in
//! first-index-fastest storage is offset `row + rows * col`.
//!
//! CIFAR-10: records of 3073 bytes, one label byte then 1024 red, 1024 green
//! and 1024 blue bytes, each plane row-major over 32x32. Samples become
//! `32 x 32 x 3` tensors indexed `(row, col, channel)`.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<DenseTensor>,
    pub labels: Vec<u32>,
    pub class_names: Option<Vec<String>>,
    /// Source files and every transform applied, in order.
    pub provenance: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<DenseTensor>, labels: Vec<u32>) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: samples.len(),
                found: labels.len(),
            });
        }
        if let Some(first) = samples.first() {
            if let Some(bad) = samples.iter().find(|s| s.dims() != first.dims()) {
                return Err(Error::Shape(format!(
                    "sample dims {:?} differ from {:?}",
                    bad.dims(),
                    first.dims()
                )));
            }
        }
        Ok(Self {
            samples,
            labels,
            class_names: None,
            provenance: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> Option<&[usize]> {
        self.samples.first().map(DenseTensor::dims)
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<u32> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for &l in &self.labels {
            *m.entry(l).or_insert(0) += 1;
        }
        m
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    fn log(mut self, entry: String) -> Self {
        self.provenance.push(entry);
        self
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::format(path.display().to_string(), 0, format!("cannot read: {e}")))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path.display().to_string(), offset as u64, "truncated header"))
}

fn pixel(v: u8, scale: bool) -> f64 {
    if scale {
        f64::from(v) / 255.0
    } else {
        f64::from(v)
    }
}

/// Loads an IDX image/label pair with pixels divided by 255.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_with(images, labels, true)
}

pub fn load_idx_with(images: impl AsRef<Path>, labels: impl AsRef<Path>, scale: bool) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let img = read(ip)?;
    let lab = read(lp)?;
    let ipath = ip.display().to_string();
    let lpath = lp.display().to_string();

    let magic = be_u32(&img, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(ipath, 0, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(ipath, 8, "zero image dimension"));
    }
    let need = 16 + count * rows * cols;
    if img.len() < need {
        return Err(Error::format(
            ipath,
            img.len() as u64,
            format!("truncated image payload: {need} bytes expected"),
        ));
    }

    let lmagic = be_u32(&lab, 0, lp)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(lpath, 0, format!("bad label magic {lmagic:#010x}")));
    }
    let lcount = be_u32(&lab, 4, lp)? as usize;
    if lcount != count {
        return Err(Error::format(
            lpath,
            4,
            format!("label count {lcount} does not match image count {count}"),
        ));
    }
    if lab.len() < 8 + count {
        return Err(Error::format(
            lpath,
            lab.len() as u64,
            format!("truncated label payload: {} bytes expected", 8 + count),
        ));
    }

    let px = rows * cols;
    let samples = (0..count)
        .map(|s| {
            let src = &img[16 + s * px..16 + (s + 1) * px];
            let mut data = vec![0.0; px];
            for r in 0..rows {
                for c in 0..cols {
                    data[r + rows * c] = pixel(src[r * cols + c], scale);
                }
            }
            DenseTensor::new(vec![rows, cols], data)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = lab[8..8 + count].iter().map(|&b| u32::from(b)).collect();
    let mut ds = Dataset::new(samples, labels)?;
    ds.class_names = Some((0..10).map(|d| d.to_string()).collect());
    let scaled = if scale { ", /255" } else { "" };
    Ok(ds.log(format!("idx {}, {}{scaled}", ip.display(), lp.display())))
}

fn to_byte(x: f64, scale: bool) -> Result<u8> {
    let v = if scale { x * 255.0 } else { x };
    let r = v.round();
    if !(0.0..=255.0).contains(&r) || (v - r).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("value {x} is not a stored pixel")));
    }
    Ok(r as u8)
}

/// Writes 2-way samples back to an IDX pair. `scale` must match the load.
pub fn write_idx(ds: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>, scale: bool) -> Result<()> {
    let (rows, cols) = match ds.dims() {
        Some([r, c]) => (*r, *c),
        Some(d) => return Err(Error::Shape(format!("IDX images need 2 modes, got {d:?}"))),
        None => (28, 28),
    };
    let mut img = Vec::with_capacity(16 + ds.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for s in &ds.samples {
        for r in 0..rows {
            for c in 0..cols {
                img.push(to_byte(s.data()[r + rows * c], scale)?);
            }
        }
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        lab.push(u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds a byte")))?);
    }
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    Ok(())
}

/// Loads and concatenates CIFAR-10 batch files with pixels divided by 255.
pub fn load_cifar10<P: AsRef<Path>>(batches: &[P]) -> Result<Dataset> {
    load_cifar10_with(batches, true)
}

pub fn load_cifar10_with<P: AsRef<Path>>(batches: &[P], scale: bool) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    for p in batches {
        let p = p.as_ref();
        let bytes = read(p)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
            return Err(Error::format(
                p.display().to_string(),
                whole as u64,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(Error::format(
                    p.display().to_string(),
                    (i * CIFAR_RECORD) as u64,
                    format!("label {} out of range", rec[0]),
                ));
            }
            labels.push(u32::from(rec[0]));
            let mut data = vec![0.0; 3072];
            for ch in 0..3 {
                for r in 0..32 {
                    for c in 0..32 {
                        data[r + 32 * c + 1024 * ch] = pixel(rec[1 + 1024 * ch + 32 * r + c], scale);
                    }
                }
            }
            samples.push(DenseTensor::new(vec![32, 32, 3], data)?);
        }
        sources.push(p.display().to_string());
    }
    let mut ds = Dataset::new(samples, labels)?;
    ds.class_names = Some(CIFAR_CLASSES.iter().map(|s| s.to_string()).collect());
    let scaled = if scale { ", /255" } else { "" };
    Ok(ds.log(format!("cifar10 {}{scaled}", sources.join(", "))))
}

pub fn write_cifar10(ds: &Dataset, path: impl AsRef<Path>, scale: bool) -> Result<()> {
    if let Some(d) = ds.dims() {
        if d != [32, 32, 3] {
            return Err(Error::Shape(format!("CIFAR records need dims [32, 32, 3], got {d:?}")));
        }
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (s, &l) in ds.samples.iter().zip(&ds.labels) {
        out.push(u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds a byte")))?);
        for ch in 0..3 {
            for r in 0..32 {
                for c in 0..32 {
                    out.push(to_byte(s.data()[r + 32 * c + 1024 * ch], scale)?);
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Keeps samples whose label is in `classes`, preserving order.
pub fn filter_classes(ds: &Dataset, classes: &[u32]) -> Dataset {
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| classes.contains(&ds.labels[i])).collect();
    ds.select(&idx).log(format!("filter classes {classes:?}"))
}

pub fn retensorize(ds: &Dataset, new_dims: &[usize]) -> Result<Dataset> {
    let samples = ds
        .samples
        .iter()
        .map(|s| s.reshape(new_dims))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        labels: ds.labels.clone(),
        class_names: ds.class_names.clone(),
        provenance: ds.provenance.clone(),
    }
    .log(format!("reshape to {new_dims:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitSpec {
    /// First `n` samples train, the rest test.
    FirstN(usize),
    /// First `n` samples of each class train, in original order; the rest test.
    FirstPerClass(usize),
    /// Seeded shuffle, then the first `train` samples train.
    Shuffled { train: usize, seed: u64 },
    IndexRanges {
        train: Vec<Range<usize>>,
        test: Vec<Range<usize>>,
    },
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    let (train, test): (Vec<usize>, Vec<usize>) = match spec {
        SplitSpec::FirstN(k) => {
            check_count(*k, n)?;
            ((0..*k).collect(), (*k..n).collect())
        }
        SplitSpec::FirstPerClass(k) => {
            if *k == 0 {
                return Err(Error::InvalidArgument("per-class train count must be >= 1".into()));
            }
            let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for i in 0..n {
                let c = seen.entry(ds.labels[i]).or_insert(0);
                if *c < *k {
                    tr.push(i);
                } else {
                    te.push(i);
                }
                *c += 1;
            }
            if let Some((&class, _)) = seen.iter().find(|(_, &c)| c < *k) {
                return Err(Error::InvalidArgument(format!(
                    "class {class} has only {} samples, {k} requested",
                    seen[&class]
                )));
            }
            (tr, te)
        }
        SplitSpec::Shuffled { train, seed } => {
            check_count(*train, n)?;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let test = idx.split_off(*train);
            (idx, test)
        }
        SplitSpec::IndexRanges { train, test } => {
            let flat = |rs: &[Range<usize>]| -> Result<Vec<usize>> {
                rs.iter()
                    .flat_map(|r| r.clone())
                    .map(|i| {
                        if i < n {
                            Ok(i)
                        } else {
                            Err(Error::InvalidArgument(format!(
                                "index {i} out of range for {n} samples"
                            )))
                        }
                    })
                    .collect()
            };
            let tr = flat(train)?;
            if tr.is_empty() {
                return Err(Error::InvalidArgument("empty training range".into()));
            }
            (tr, flat(test)?)
        }
    };
    let tag = format!("{spec:?}");
    Ok((
        ds.select(&train).log(format!("split train {tag}")),
        ds.select(&test).log(format!("split test {tag}")),
    ))
}

fn check_count(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("count {k} must be in 1..={n}")));
    }
    Ok(())
}

/// `+1` for `positive`, `-1` otherwise.
pub fn binary_labels(ds: &Dataset, positive: u32) -> Vec<f64> {
    ds.labels
        .iter()
        .map(|&l| if l == positive { 1.0 } else { -1.0 })
        .collect()
}
