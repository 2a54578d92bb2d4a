use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use sttm_core::data::Dataset;
use sttm_core::multiclass::{
    derive_seed, ovo_train_with_progress, BinaryModel, InitPolicy, ModelKind, OvoConfig, OvoEnsemble, PreparedSample,
};
use sttm_core::persist::{self, SavedModel};
use sttm_core::sttm::compress_samples;
use sttm_core::TensorTrain;

use crate::args::{AblateArgs, DataArgs, EvalArgs, Init, Kind, ModelArgs, RerunArgs, SweepArgs, TrainArgs};
use crate::datasets::{self, Splits};
use crate::output::{csv_writer, Manifest};
use crate::Failure;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

pub fn model_kind(k: Kind) -> ModelKind {
    match k {
        Kind::Svm => ModelKind::Svm,
        Kind::Stm => ModelKind::Stm,
        Kind::Sttm => ModelKind::Sttm,
    }
}

/// Interior ranks from either a full (`1,..,1`, length `d+1`) or interior
/// (length `d-1`) list.
pub fn parse_ranks(s: Option<&str>, d: usize) -> Result<Vec<usize>> {
    let Some(s) = s else {
        if d == 1 {
            return Ok(Vec::new());
        }
        return Err(usage(format!("--ranks is required for STTM on {d}-way samples")));
    };
    let v: Vec<usize> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| usage(format!("bad rank {t:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if v.len() == d + 1 {
        if v[0] != 1 || v[d] != 1 {
            return Err(usage(format!("boundary ranks must be 1 in {s:?}")));
        }
        Ok(v[1..d].to_vec())
    } else if v.len() + 1 == d {
        Ok(v)
    } else {
        Err(usage(format!(
            "{} ranks given for {d}-way samples; need {} or {}",
            v.len(),
            d - 1,
            d + 1
        )))
    }
}

pub fn ovo_config(m: &ModelArgs, kind: Kind, dims: &[usize], classes: Vec<u32>) -> Result<OvoConfig> {
    if !m.c.is_finite() || m.c <= 0.0 {
        return Err(usage("--c must be positive"));
    }
    if m.eps.is_nan() || m.eps < 0.0 {
        return Err(usage("--eps must be >= 0"));
    }
    if m.max_loops == 0 {
        return Err(usage("--max-loops must be >= 1"));
    }
    let mut cfg = OvoConfig::new(model_kind(kind));
    cfg.classes = Some(classes);
    cfg.c = m.c;
    cfg.seed = m.seed;
    cfg.init = match m.init {
        Init::Random => InitPolicy::Random,
        Init::FromSvm => InitPolicy::FromSvm,
    };
    cfg.stm.max_sweeps = m.stm_sweeps;
    if kind == Kind::Sttm {
        cfg.sttm.ranks = parse_ranks(m.ranks.as_deref(), dims.len())?;
    }
    cfg.sttm.epsilon = m.eps;
    cfg.sttm.max_loops = m.max_loops;
    cfg.sttm.train_acc_threshold = m.threshold;
    cfg.sttm.canonical_updates = !m.no_canonical;
    cfg.sttm.cache_environments = m.cache_env;
    Ok(cfg)
}

fn classes_of(data: &DataArgs) -> Vec<u32> {
    let mut c = data
        .classes
        .clone()
        .unwrap_or_else(|| datasets::default_classes(data.dataset));
    c.sort_unstable();
    c.dedup();
    c
}

struct Prepared {
    train: Dataset,
    validation: Option<Dataset>,
    test: Dataset,
}

fn prepare(data: &DataArgs, validation: usize) -> Result<Prepared> {
    let Splits {
        train,
        validation: val,
        test,
    } = datasets::load(data, validation)?;
    let native = train.dims().context("empty training split")?.to_vec();
    let dims = data.dims.clone().unwrap_or(native);
    Ok(Prepared {
        train: datasets::reshape(&train, &dims)?,
        validation: val.map(|v| datasets::reshape(&v, &dims)).transpose()?,
        test: datasets::reshape(&test, &dims)?,
    })
}

fn progress(label: &str) -> impl Fn(usize, usize) + Sync + '_ {
    move |done, total| {
        if total > 1 {
            eprintln!("[{label}] pair {done}/{total}");
        }
    }
}

fn pair_name(p: &sttm_core::multiclass::PairModel) -> String {
    format!("{}-{}", p.positive, p.negative)
}

pub fn write_trace(path: &Path, hash: &str, ens: &OvoEnsemble) -> Result<()> {
    let mut w = csv_writer(path, hash)?;
    w.write_record(["pair", "loop", "core", "train_acc", "objective", "converged", "wall_ms"])?;
    for p in &ens.pairs {
        let name = pair_name(p);
        let rows: Vec<[String; 7]> = match &p.model {
            BinaryModel::Svm(_) => Vec::new(),
            BinaryModel::Stm(m) => m
                .trace
                .iter()
                .map(|t| {
                    [
                        name.clone(),
                        t.sweep.to_string(),
                        t.mode.to_string(),
                        t.train_acc.to_string(),
                        t.objective.to_string(),
                        t.converged.to_string(),
                        format!("{:.3}", t.wall_ms),
                    ]
                })
                .collect(),
            BinaryModel::Sttm(m) => m
                .trace
                .iter()
                .map(|t| {
                    [
                        name.clone(),
                        t.loop_index.to_string(),
                        t.core.to_string(),
                        t.train_acc.to_string(),
                        t.objective.to_string(),
                        t.converged.to_string(),
                        format!("{:.3}", t.wall_ms),
                    ]
                })
                .collect(),
        };
        for r in rows {
            w.write_record(&r)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn prepared_samples(ds: &Dataset, trains: Option<&[TensorTrain]>) -> Vec<PreparedSample> {
    match trains {
        Some(t) => ds
            .samples
            .iter()
            .zip(t)
            .map(|(x, tt)| PreparedSample {
                dense: x.clone(),
                train: Some(tt.clone()),
            })
            .collect(),
        None => ds.samples.iter().cloned().map(PreparedSample::dense).collect(),
    }
}

fn accuracy(pred: &[u32], labels: &[u32]) -> f64 {
    let hit = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    100.0 * hit as f64 / labels.len().max(1) as f64
}

/// Writes predictions, confusion matrix and accuracy; returns the accuracy in percent.
fn write_eval(out: &Path, hash: &str, classes: &[u32], labels: &[u32], pred: &[u32]) -> Result<f64> {
    let mut w = csv_writer(&out.join("predictions.csv"), hash)?;
    w.write_record(["index", "label", "predicted"])?;
    for (i, (l, p)) in labels.iter().zip(pred).enumerate() {
        w.write_record([i.to_string(), l.to_string(), p.to_string()])?;
    }
    w.flush()?;

    let mut all = classes.to_vec();
    for l in labels {
        if !all.contains(l) {
            all.push(*l);
        }
    }
    all.sort_unstable();
    let idx = |c: &u32| all.binary_search(c).unwrap();
    let mut m = vec![vec![0usize; all.len()]; all.len()];
    for (l, p) in labels.iter().zip(pred) {
        m[idx(l)][idx(p)] += 1;
    }
    let mut w = csv_writer(&out.join("confusion.csv"), hash)?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend(all.iter().map(u32::to_string));
    w.write_record(&header)?;
    for (c, row) in all.iter().zip(&m) {
        let mut r = vec![c.to_string()];
        r.extend(row.iter().map(usize::to_string));
        w.write_record(&r)?;
    }
    w.flush()?;

    let acc = accuracy(pred, labels);
    std::fs::write(out.join("accuracy.txt"), format!("{acc:.2}\n"))?;
    Ok(acc)
}

fn compress(ds: &Dataset, eps: f64, what: &str) -> Result<Vec<TensorTrain>> {
    let t = Instant::now();
    let tt = compress_samples(&ds.samples, eps).with_context(|| format!("compressing {what} samples"))?;
    eprintln!(
        "compressed {} {what} samples in {:.1}s",
        tt.len(),
        t.elapsed().as_secs_f64()
    );
    Ok(tt)
}

fn predict(ens: &OvoEnsemble, test: &Dataset, test_raw: bool) -> Result<Vec<u32>> {
    let trains = match ens.sttm_epsilon() {
        Some(e) if !test_raw => Some(compress(test, e, "test")?),
        _ => None,
    };
    Ok(ens.predict_prepared(&prepared_samples(test, trains.as_deref()))?)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let classes = classes_of(&args.data);
    let p = prepare(&args.data, 0)?;
    let cfg = ovo_config(&args.model, args.model.kind, p.train.dims().unwrap(), classes)?;
    let hash = Manifest::new("train", args)?.write(&args.out)?;
    let start = Instant::now();
    let label = args.model.kind.to_possible_value_name();
    let ens = ovo_train_with_progress(&p.train, None, &cfg, progress(&label))?;
    eprintln!(
        "trained {} pair model(s) in {:.1}s",
        ens.pairs.len(),
        start.elapsed().as_secs_f64()
    );
    persist::save_ensemble(&ens, args.out.join("model.bin"))?;
    write_trace(&args.out.join("trace.csv"), &hash, &ens)?;
    if args.eval {
        let pred = predict(&ens, &p.test, args.test_raw)?;
        let acc = write_eval(&args.out, &hash, &ens.classes, &p.test.labels, &pred)?;
        println!("test accuracy: {acc:.2}");
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ens = match persist::load_saved(&args.model).map_err(|e| Failure::Data(e.to_string()))? {
        SavedModel::Ensemble(e) => e,
        SavedModel::Binary(_) => bail!(usage("expected an ensemble model file written by `train`")),
    };
    let p = prepare(&args.data, 0)?;
    let hash = Manifest::new("eval", args)?.write(&args.out)?;
    let pred = predict(&ens, &p.test, args.test_raw)?;
    let acc = write_eval(&args.out, &hash, &ens.classes, &p.test.labels, &pred)?;
    println!("test accuracy: {acc:.2}");
    Ok(())
}

struct Cell {
    kind: Kind,
    batch: usize,
    r2: Option<usize>,
    seed: u64,
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    if args.batches.is_empty() || args.kinds.is_empty() || args.repeats == 0 {
        return Err(usage("sweep grid is empty"));
    }
    if args.r2.as_ref().is_some_and(|r| r.is_empty()) {
        return Err(usage("--r2 list is empty"));
    }
    let classes = classes_of(&args.data);
    let p = prepare(&args.data, args.validation)?;
    let max_batch = *args.batches.iter().max().unwrap();
    if max_batch > p.train.len() {
        return Err(usage(format!(
            "batch {max_batch} exceeds the {} training samples",
            p.train.len()
        )));
    }
    let dims = p.train.dims().unwrap().to_vec();
    let hash = Manifest::new("sweep", args)?.write(&args.out)?;

    let mut cells = Vec::new();
    for &batch in &args.batches {
        for &kind in &args.kinds {
            let r2s: Vec<Option<usize>> = match (kind, &args.r2) {
                (Kind::Sttm, Some(r)) => r.iter().copied().map(Some).collect(),
                _ => vec![None],
            };
            let reps = if kind == Kind::Svm { 1 } else { args.repeats };
            for r2 in r2s {
                for _ in 0..reps {
                    let seed = derive_seed(args.model.seed, cells.len() as u64);
                    cells.push(Cell { kind, batch, r2, seed });
                }
            }
        }
    }

    let sttm = args.kinds.contains(&Kind::Sttm);
    let eps = args.model.eps;
    let pool = p.train.select(&(0..max_batch).collect::<Vec<_>>());
    let pool_tt = sttm.then(|| compress(&pool, eps, "train")).transpose()?;
    let val_tt = match (&p.validation, sttm && !args.test_raw) {
        (Some(v), true) => Some(compress(v, eps, "validation")?),
        _ => None,
    };
    let test_tt = (sttm && !args.test_raw)
        .then(|| compress(&p.test, eps, "test"))
        .transpose()?;
    let test_dense = prepared_samples(&p.test, None);
    let test_comp = test_tt.as_deref().map(|t| prepared_samples(&p.test, Some(t)));
    let val_dense = p.validation.as_ref().map(|v| prepared_samples(v, None));
    let val_comp = match (&p.validation, &val_tt) {
        (Some(v), Some(t)) => Some(prepared_samples(v, Some(t))),
        _ => None,
    };

    let total = cells.len();
    let run_cell = |i: usize, cell: &Cell| -> Result<(Option<f64>, f64)> {
        let t = Instant::now();
        let mut m = args.model.clone();
        m.seed = cell.seed;
        let mut cfg = ovo_config(&m, cell.kind, &dims, classes.clone())?;
        if let Some(r2) = cell.r2 {
            if cfg.sttm.ranks.is_empty() {
                return Err(usage("--r2 needs samples with at least 2 modes"));
            }
            cfg.sttm.ranks[0] = r2;
        }
        let idx: Vec<usize> = (0..cell.batch).collect();
        let sub = pool.select(&idx);
        let sub_tt: Option<Vec<TensorTrain>> = pool_tt.as_ref().map(|t| t[..cell.batch].to_vec());
        let ens = ovo_train_with_progress(&sub, sub_tt.as_deref(), &cfg, |_, _| {})?;
        let compressed = cell.kind == Kind::Sttm && !args.test_raw;
        let test = if compressed {
            test_comp.as_ref().unwrap()
        } else {
            &test_dense
        };
        let test_acc = accuracy(&ens.predict_prepared(test)?, &p.test.labels);
        let val_acc = match (&p.validation, compressed) {
            (Some(v), true) => Some(accuracy(&ens.predict_prepared(val_comp.as_ref().unwrap())?, &v.labels)),
            (Some(v), false) => Some(accuracy(&ens.predict_prepared(val_dense.as_ref().unwrap())?, &v.labels)),
            (None, _) => None,
        };
        eprintln!(
            "[cell {}/{total}] {:?} batch {} r2 {:?}: test {test_acc:.2} ({:.1}s)",
            i + 1,
            cell.kind,
            cell.batch,
            cell.r2,
            t.elapsed().as_secs_f64()
        );
        Ok((val_acc, test_acc))
    };
    let results: Vec<(Option<f64>, f64)> = cells
        .par_iter()
        .enumerate()
        .map(|(i, c)| run_cell(i, c))
        .collect::<Result<_>>()?;

    let mut w = csv_writer(&args.out.join("sweep.csv"), &hash)?;
    w.write_record(["kind", "batch", "r2", "seed", "val_acc", "test_acc"])?;
    for (c, (val, test)) in cells.iter().zip(&results) {
        w.write_record([
            c.kind.to_possible_value_name(),
            c.batch.to_string(),
            c.r2.map(|r| r.to_string()).unwrap_or_default(),
            c.seed.to_string(),
            val.map(|v| format!("{v:.4}")).unwrap_or_default(),
            format!("{test:.4}"),
        ])?;
    }
    w.flush()?;
    println!("wrote {} rows to {}", cells.len(), args.out.join("sweep.csv").display());
    Ok(())
}

/// Range of training accuracy (percentage points) over the last `loops` loops.
pub fn trailing_range(ens: &OvoEnsemble, loops: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for p in &ens.pairs {
        if let BinaryModel::Sttm(m) = &p.model {
            let last = m.trace.last().map_or(0, |t| t.loop_index);
            let window: Vec<f64> = m
                .trace
                .iter()
                .filter(|t| t.loop_index + loops > last)
                .map(|t| t.train_acc * 100.0)
                .collect();
            let (lo, hi) = window
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            if hi >= lo {
                worst = worst.max(hi - lo);
            }
        }
    }
    worst
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let classes = classes_of(&args.data);
    let p = prepare(&args.data, 0)?;
    let dims = p.train.dims().unwrap().to_vec();
    let hash = Manifest::new("ablate-canonical", args)?.write(&args.out)?;
    let trains = compress(&p.train, args.model.eps, "train")?;
    let mut rows = Vec::new();
    for (canonical, file) in [(true, "trace_canonical.csv"), (false, "trace_noncanonical.csv")] {
        let mut m = args.model.clone();
        m.no_canonical = !canonical;
        let cfg = ovo_config(&m, Kind::Sttm, &dims, classes.clone())?;
        let t = Instant::now();
        let ens = ovo_train_with_progress(&p.train, Some(&trains), &cfg, |_, _| {})?;
        write_trace(&args.out.join(file), &hash, &ens)?;
        let range = trailing_range(&ens, 2);
        let updates: usize = ens
            .pairs
            .iter()
            .map(|p| match &p.model {
                BinaryModel::Sttm(m) => m.trace.len(),
                _ => 0,
            })
            .sum();
        eprintln!(
            "canonical={canonical}: {updates} updates, last-2-loop range {range:.2} points ({:.1}s)",
            t.elapsed().as_secs_f64()
        );
        rows.push((canonical, updates, range));
    }
    let mut w = csv_writer(&args.out.join("ablation.csv"), &hash)?;
    w.write_record(["canonical", "updates", "last2_range"])?;
    for (c, u, r) in rows {
        w.write_record([c.to_string(), u.to_string(), format!("{r:.4}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn rerun(args: &RerunArgs) -> Result<()> {
    let m = Manifest::read(&args.manifest).map_err(|e| Failure::Data(format!("{e:#}")))?;
    let bad = |e: serde_json::Error| Failure::Data(format!("manifest arguments: {e}"));
    match m.command.as_str() {
        "train" => {
            let mut a: TrainArgs = serde_json::from_value(m.args).map_err(bad)?;
            a.out = args.out.clone();
            train(&a)
        }
        "eval" => {
            let mut a: EvalArgs = serde_json::from_value(m.args).map_err(bad)?;
            a.out = args.out.clone();
            eval(&a)
        }
        "sweep" => {
            let mut a: SweepArgs = serde_json::from_value(m.args).map_err(bad)?;
            a.out = args.out.clone();
            sweep(&a)
        }
        "ablate-canonical" => {
            let mut a: AblateArgs = serde_json::from_value(m.args).map_err(bad)?;
            a.out = args.out.clone();
            ablate(&a)
        }
        other => Err(Failure::Data(format!("unknown manifest command {other:?}")).into()),
    }
}

trait ValueName {
    fn to_possible_value_name(&self) -> String;
}

impl ValueName for Kind {
    fn to_possible_value_name(&self) -> String {
        model_kind(*self).name().to_string()
    }
}
