use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use capsib_core::data::{load_mnist, load_ppm_dir, write_image_grid, Dataset, Split};
use capsib_core::model::{Mode, Model, ModelConfig, PRESETS};
use capsib_core::training::{
    beta_sweep, content_hash, peek_precision, trend_verdicts, worker_count, Checkpoint, MetricsRow, SweepCell,
    SweepOutcome, TrainConfig, Trainer, CSV_HEADER, EVAL_BATCH,
};
use capsib_core::{Precision, Real, Tensor};
use serde_json::{json, Value};

use crate::config::Resolved;
use crate::error::{CliError, Result};
use crate::manifest::Manifest;

/// Settings shared by every subcommand.
pub struct Ctx {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// `--test-samples` given explicitly on the command line.
    pub test_samples: Option<usize>,
    /// `--epochs` given explicitly; resuming otherwise keeps the checkpoint's.
    pub epochs: Option<usize>,
    /// The model was chosen explicitly (config file, architecture or dim),
    /// so a resumed checkpoint must match it.
    pub model_explicit: bool,
}

impl Ctx {
    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| CliError::io(&self.out_dir, e))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub const CROP: usize = 128;

/// Training and test sets for a model's input shape. 28×28 greyscale reads
/// MNIST from `<data>/mnist`; 64×64 colour reads every image in
/// `<data>/faces`, which then serves as both splits.
pub fn load_data(
    model: &ModelConfig,
    train: &TrainConfig,
    data_dir: &Path,
    need_train: bool,
) -> Result<(Option<Dataset>, Dataset)> {
    let cut = |ds: Dataset, n: Option<usize>| match n {
        Some(n) if n < ds.len() => ds.head(n),
        _ => ds,
    };
    match model.input_shape {
        [1, 28, 28] => {
            let test = cut(load_mnist(data_dir, Split::Test)?, train.test_samples);
            let tr = if need_train { Some(cut(load_mnist(data_dir, Split::Train)?, train.train_samples)) } else { None };
            Ok((tr, test))
        }
        [3, s, s2] if s == s2 && CROP.is_multiple_of(s) => {
            let all = load_ppm_dir(&data_dir.join("faces"), CROP, s, train.train_samples)?;
            let test = all.head(train.test_samples.unwrap_or(all.len()));
            let test = Dataset::new(test.images().clone(), None, Split::Test)?;
            Ok((need_train.then_some(all), test))
        }
        other => Err(CliError::config(format!("no dataset for input shape {other:?}"))),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    // write-then-rename so an interrupted run never leaves a torn file
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn csv_text(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

fn append_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path).map_err(|e| CliError::io(path, e))?;
    let mut text = String::new();
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(CliError::Data(format!("{}: not a metrics CSV", path.display())));
    }
    lines
        .map(|l| MetricsRow::parse_csv(l).ok_or_else(|| CliError::Data(format!("{}: bad row {l:?}", path.display()))))
        .collect()
}

fn log_row(r: &MetricsRow) {
    let acc = r.accuracy.map(|a| format!(" acc {a:.4}")).unwrap_or_default();
    eprintln!(
        "epoch {:>3} {:<5} total {:.5} margin {:.5} recon {:.5} info {:.5}{acc} mean|z| {:.4} std z {:.4}",
        r.epoch,
        r.split.as_str(),
        r.total,
        r.margin,
        r.recon,
        r.info,
        r.mean_abs_z,
        r.mean_std_z
    );
}

fn architecture_name(model: &ModelConfig) -> String {
    PRESETS
        .iter()
        .find(|p| ModelConfig::preset(p).as_ref() == Some(model))
        .map(|p| p.to_string())
        .unwrap_or_else(|| "custom".into())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// A checkpoint's trainer, with `--test-samples` applied.
struct Loaded<T: Real> {
    trainer: Trainer<T>,
    resolved: Resolved,
    hash: String,
}

fn load_checkpoint<T: Real>(ctx: &Ctx, bytes: &[u8]) -> Result<Loaded<T>> {
    let ck = Checkpoint::<T>::from_bytes(bytes)?;
    let mut train = ck.train.clone();
    if ctx.test_samples.is_some() {
        train.test_samples = ctx.test_samples;
    }
    let resolved = Resolved { architecture: architecture_name(&ck.model), model: ck.model.clone(), train };
    Ok(Loaded { trainer: ck.into_trainer()?, resolved, hash: content_hash(bytes) })
}

/// Runs `$body` with `$t` bound to the value type of `$precision`.
macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn train(ctx: &Ctx, resolved: &Resolved, resume: Option<&Path>) -> Result<Vec<String>> {
    match resume {
        Some(path) => {
            let bytes = read_bytes(path)?;
            dispatch!(peek_precision(&bytes)?, train_impl(ctx, resolved, Some(&bytes)))
        }
        None => dispatch!(resolved.train.precision, train_impl(ctx, resolved, None)),
    }
}

fn train_impl<T: Real>(ctx: &Ctx, resolved: &Resolved, resume: Option<&[u8]>) -> Result<Vec<String>> {
    ctx.prepare()?;
    let started = Instant::now();
    let metrics = ctx.out("metrics.csv");
    let (trainer, resolved) = match resume {
        Some(bytes) => {
            let ck = Checkpoint::<T>::from_bytes(bytes)?;
            let expected = if ctx.model_explicit { resolved.model.clone() } else { ck.model.clone() };
            let mut t = ck.resume(&expected)?;
            t.set_epochs(ctx.epochs.unwrap_or(t.config().epochs))?;
            if !metrics.exists() {
                write_file(&metrics, csv_text(&[]).as_bytes())?;
            }
            let resolved =
                Resolved { architecture: architecture_name(&expected), model: expected, train: t.config().clone() };
            (t, resolved)
        }
        None => {
            write_file(&metrics, csv_text(&[]).as_bytes())?;
            (Trainer::<T>::new(resolved.model.clone(), resolved.train.clone())?, resolved.clone())
        }
    };
    let mut trainer = trainer;
    let (train, test) = load_data(&resolved.model, &resolved.train, &ctx.data_dir, true)?;
    let train = train.expect("requested");
    eprintln!(
        "training {} ({} parameters) on {} samples, testing on {}",
        resolved.architecture,
        trainer.model().param_count(),
        train.len(),
        test.len()
    );
    let ckpt = ctx.out("checkpoint.ckpt");
    let mut save_error = None;
    let rows = trainer.fit(&train, Some(&test), |t, rows| {
        rows.iter().for_each(log_row);
        let saved = append_rows(&metrics, rows).and_then(|_| write_file(&ckpt, &Checkpoint::from_trainer(t).to_bytes()));
        if let Err(e) = saved {
            save_error = Some(e);
            return Err(capsib_core::training::TrainError::Config("output not writable".into()));
        }
        Ok(())
    });
    if let Some(e) = save_error {
        return Err(e);
    }
    let rows = rows?;
    let bytes = Checkpoint::from_trainer(&trainer).to_bytes();
    write_file(&ckpt, &bytes)?;
    eprintln!("finished in {:.1}s", started.elapsed().as_secs_f64());

    let mut m = Manifest::new("train", &resolved, &ctx.data_dir);
    m.checkpoint_sha256 = Some(content_hash(&bytes));
    m.output(&ckpt);
    m.output(&metrics);
    let last = |split: Split| rows.iter().rev().find(|r| r.split == split);
    m.results = json!({
        "epochs_completed": trainer.epoch(),
        "final_train": last(Split::Train),
        "final_test": last(Split::Test),
    });
    Ok(vec![m.write(&ctx.out_dir)?.display().to_string()])
}

pub fn eval(ctx: &Ctx, checkpoint: &Path) -> Result<Vec<String>> {
    let bytes = read_bytes(checkpoint)?;
    dispatch!(peek_precision(&bytes)?, eval_impl(ctx, checkpoint, &bytes))
}

fn eval_impl<T: Real>(ctx: &Ctx, checkpoint: &Path, bytes: &[u8]) -> Result<Vec<String>> {
    ctx.prepare()?;
    let l = load_checkpoint::<T>(ctx, bytes)?;
    let (_, test) = load_data(&l.resolved.model, &l.resolved.train, &ctx.data_dir, false)?;
    let row = l.trainer.evaluate(&test)?;
    log_row(&row);
    let path = ctx.out("eval.csv");
    write_file(&path, csv_text(std::slice::from_ref(&row)).as_bytes())?;
    let mut m = Manifest::new("eval", &l.resolved, &ctx.data_dir);
    m.checkpoint_sha256 = Some(l.hash);
    m.output(&path);
    m.results = json!({ "checkpoint": checkpoint.display().to_string(), "samples": test.len(), "metrics": row });
    Ok(vec![m.write(&ctx.out_dir)?.display().to_string()])
}

pub struct SweepArgs {
    pub betas: Vec<f64>,
    pub dims: Vec<usize>,
    pub seeds: Vec<u64>,
    pub reuse: bool,
}

fn cell_name(c: &SweepCell) -> String {
    format!("beta{}_dim{}_seed{}", c.beta, c.dim, c.seed)
}

pub fn sweep(ctx: &Ctx, resolved: &Resolved, args: &SweepArgs) -> Result<Vec<String>> {
    dispatch!(resolved.train.precision, sweep_impl(ctx, resolved, args))
}

/// A finished cell from an earlier sweep with the same configuration.
fn reusable<T: Real>(dir: &Path, cell: &SweepCell, resolved: &Resolved) -> Option<Vec<MetricsRow>> {
    let name = cell_name(cell);
    let ck = Checkpoint::<T>::from_bytes(&fs::read(dir.join(format!("{name}.ckpt"))).ok()?).ok()?;
    let (model, train) = cell.configs(&resolved.model, &resolved.train);
    if ck.model != model || ck.train != train || ck.epoch != train.epochs {
        return None;
    }
    read_rows(&dir.join(format!("{name}.csv"))).ok()
}

fn sweep_impl<T: Real>(ctx: &Ctx, resolved: &Resolved, args: &SweepArgs) -> Result<Vec<String>> {
    let dims = if args.dims.is_empty() { vec![resolved.model.capsule_dim] } else { args.dims.clone() };
    let seeds = if args.seeds.is_empty() { vec![resolved.train.seed] } else { args.seeds.clone() };
    if args.betas.is_empty() {
        return Err(CliError::config("--betas needs at least one value"));
    }
    let cells = SweepCell::grid(&args.betas, &dims, &seeds);
    for c in &cells {
        let (model, train) = c.configs(&resolved.model, &resolved.train);
        train.validate().map_err(|e| CliError::config(format!("{}: {e}", cell_name(c))))?;
        Model::build(model).map_err(|e| CliError::config(format!("{}: {e}", cell_name(c))))?;
    }
    ctx.prepare()?;
    let dir = ctx.out("cells");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;

    let mut outcomes: Vec<Option<SweepOutcome>> = cells
        .iter()
        .map(|c| {
            let rows = if args.reuse { reusable::<T>(&dir, c, resolved) } else { None };
            rows.map(|rows| {
                eprintln!("reusing {}", cell_name(c));
                SweepOutcome { cell: *c, rows: Ok(rows) }
            })
        })
        .collect();
    let pending: Vec<usize> = (0..cells.len()).filter(|&i| outcomes[i].is_none()).collect();
    let todo: Vec<SweepCell> = pending.iter().map(|&i| cells[i]).collect();
    let needs_data = !todo.is_empty();
    let started = Instant::now();
    if needs_data {
        let (train, test) = load_data(&resolved.model, &resolved.train, &ctx.data_dir, true)?;
        let train = train.expect("requested");
        let threads = worker_count();
        eprintln!("sweeping {} cells on {} worker(s)", todo.len(), threads);
        let on_done = |i: usize, t: &Trainer<T>, rows: &[MetricsRow]| {
            let name = cell_name(&todo[i]);
            let save = || -> Result<()> {
                write_file(&dir.join(format!("{name}.csv")), csv_text(rows).as_bytes())?;
                write_file(&dir.join(format!("{name}.ckpt")), &Checkpoint::from_trainer(t).to_bytes())
            };
            if let Some(last) = rows.last() {
                eprint!("{name}: ");
                log_row(last);
            }
            save().map_err(|e| capsib_core::training::TrainError::Config(e.to_string()))
        };
        let done = beta_sweep::<T>(&resolved.model, &resolved.train, &todo, &train, Some(&test), threads, &on_done);
        for (slot, o) in pending.iter().zip(done) {
            if let Err(e) = &o.rows {
                eprintln!("{} failed: {e}", cell_name(&o.cell));
            }
            outcomes[*slot] = Some(o);
        }
    }
    let outcomes: Vec<SweepOutcome> = outcomes.into_iter().map(|o| o.expect("every cell resolved")).collect();
    eprintln!("sweep finished in {:.1}s", started.elapsed().as_secs_f64());

    let finals: Vec<MetricsRow> = outcomes.iter().filter_map(|o| o.last().cloned()).collect();
    let csv_path = ctx.out("sweep.csv");
    write_file(&csv_path, csv_text(&finals).as_bytes())?;
    let verdicts = trend_verdicts(&outcomes);

    let mut m = Manifest::new("sweep", resolved, &ctx.data_dir);
    m.output(&csv_path);
    let mut cell_json = Vec::new();
    for o in &outcomes {
        let name = cell_name(&o.cell);
        let entry = match &o.rows {
            Ok(_) => {
                let ck = dir.join(format!("{name}.ckpt"));
                let csv = dir.join(format!("{name}.csv"));
                let hash = content_hash(&read_bytes(&ck)?);
                m.output(&ck);
                m.output(&csv);
                json!({ "cell": name, "beta": o.cell.beta, "dim": o.cell.dim, "seed": o.cell.seed,
                        "status": "ok", "checkpoint_sha256": hash, "final": o.last() })
            }
            Err(e) => json!({ "cell": name, "beta": o.cell.beta, "dim": o.cell.dim, "seed": o.cell.seed,
                              "status": "failed", "error": e }),
        };
        cell_json.push(entry);
    }
    let lines: Vec<String> = verdicts.iter().map(|v| v.to_string()).collect();
    m.results = json!({ "cells": cell_json, "verdicts": lines });
    let mut out = vec![m.write(&ctx.out_dir)?.display().to_string()];
    out.extend(lines);
    Ok(out)
}

/// Representations of every image in `x`, in evaluation-sized batches.
pub fn encode_all<T: Real>(t: &Trainer<T>, x: &Tensor<f32>) -> Result<(Tensor<T>, Vec<usize>)> {
    let n = x.shape()[0];
    let per = x.len() / n.max(1);
    let (mut z, mut pred) = (Vec::new(), Vec::new());
    let mut dim = 0;
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, x.data()[start * per..end * per].to_vec());
        let (zc, pc) = t.encode(&chunk)?;
        dim = zc.shape()[1];
        z.extend_from_slice(zc.data());
        pred.extend(pc);
    }
    Ok((Tensor::new(vec![n, dim], z), pred))
}

pub fn decode_all<T: Real>(t: &Trainer<T>, z: &Tensor<T>) -> Result<Tensor<f32>> {
    let (n, dim) = (z.shape()[0], z.shape()[1]);
    let mut out = Vec::new();
    let mut shape = vec![n];
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let chunk = Tensor::new(vec![end - start, dim], z.data()[start * dim..end * dim].to_vec());
        let x = t.decode(&chunk)?;
        shape.truncate(1);
        shape.extend_from_slice(&x.shape()[1..]);
        out.extend(x.into_data());
    }
    Ok(Tensor::new(shape, out))
}

fn split_images(x: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let n = x.shape()[0];
    let per = x.len() / n.max(1);
    x.data().chunks(per).map(|c| Tensor::new(x.shape()[1..].to_vec(), c.to_vec())).collect()
}

fn grid_name(stem: &str, channels: usize) -> String {
    format!("{stem}.{}", if channels == 3 { "ppm" } else { "pgm" })
}

pub fn reconstruct(ctx: &Ctx, checkpoint: &Path, n: usize) -> Result<Vec<String>> {
    let bytes = read_bytes(checkpoint)?;
    dispatch!(peek_precision(&bytes)?, reconstruct_impl(ctx, checkpoint, &bytes, n))
}

fn reconstruct_impl<T: Real>(ctx: &Ctx, checkpoint: &Path, bytes: &[u8], n: usize) -> Result<Vec<String>> {
    ctx.prepare()?;
    let l = load_checkpoint::<T>(ctx, bytes)?;
    let (_, test) = load_data(&l.resolved.model, &l.resolved.train, &ctx.data_dir, false)?;
    if n == 0 || n > test.len() {
        return Err(CliError::config(format!("--n {n} must be between 1 and the test split size {}", test.len())));
    }
    let x = test.head(n).images().clone();
    let (z, _) = encode_all(&l.trainer, &x)?;
    let x_hat = decode_all(&l.trainer, &z)?;
    let mse = x.data().iter().zip(x_hat.data()).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>() / x.len() as f64;
    let mut tiles = split_images(&x);
    tiles.extend(split_images(&x_hat));
    let path = ctx.out(&grid_name("reconstruct", x.shape()[1]));
    write_image_grid(&tiles, 2, n, &path)?;
    eprintln!("per-pixel MSE over {n} samples: {mse:.6}");
    let mut m = Manifest::new("reconstruct", &l.resolved, &ctx.data_dir);
    m.checkpoint_sha256 = Some(l.hash);
    m.output(&path);
    m.results = json!({ "checkpoint": checkpoint.display().to_string(), "samples": n, "per_pixel_mse": mse,
                        "layout": "row 0 inputs, row 1 reconstructions" });
    Ok(vec![m.write(&ctx.out_dir)?.display().to_string()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraversalSpec {
    pub component: usize,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl TraversalSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(CliError::config(format!("traversal range needs lo < hi, got [{}, {}]", self.lo, self.hi)));
        }
        if self.steps < 2 {
            return Err(CliError::config("traversal needs at least 2 steps"));
        }
        if self.component >= dim {
            return Err(CliError::config(format!("component {} out of range for representation dim {dim}", self.component)));
        }
        Ok(())
    }

    /// Column `j` holds `lo + j·(hi − lo)/(steps − 1)`.
    pub fn values(&self) -> Vec<f64> {
        let span = self.hi - self.lo;
        (0..self.steps).map(|j| self.lo + j as f64 * span / (self.steps - 1) as f64).collect()
    }

    /// One code per (anchor, column), anchors major: each anchor with the
    /// swept component replaced by the column's value.
    pub fn codes<T: Real>(&self, anchors: &Tensor<T>) -> Tensor<T> {
        let (rows, dim) = (anchors.shape()[0], anchors.shape()[1]);
        let values = self.values();
        let mut z = Vec::with_capacity(rows * self.steps * dim);
        for anchor in anchors.data().chunks(dim) {
            for &v in &values {
                let start = z.len();
                z.extend_from_slice(anchor);
                z[start + self.component] = T::lit(v);
            }
        }
        Tensor::new(vec![rows * self.steps, dim], z)
    }
}

pub enum Anchors {
    /// First test samples, one per distinct predicted class where possible.
    Default(usize),
    Indices(Vec<usize>),
    Zero,
}

/// Scans at most this many test samples looking for distinct classes.
const ANCHOR_SCAN: usize = 1000;

fn default_anchors<T: Real>(t: &Trainer<T>, test: &Dataset, count: usize) -> Result<Vec<usize>> {
    let count = count.min(test.len());
    if t.model().config().mode == Mode::Unsupervised {
        return Ok((0..count).collect());
    }
    let scan = test.head(ANCHOR_SCAN.min(test.len()));
    let (_, pred) = encode_all(t, scan.images())?;
    let mut seen = Vec::new();
    let mut picked = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        if picked.len() == count {
            break;
        }
        if !seen.contains(p) {
            seen.push(*p);
            picked.push(i);
        }
    }
    // too few distinct classes: fill with the earliest unused samples
    for i in 0..scan.len() {
        if picked.len() == count {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    Ok(picked)
}

pub fn traverse(ctx: &Ctx, checkpoint: &Path, spec: &TraversalSpec, anchors: &Anchors) -> Result<Vec<String>> {
    let bytes = read_bytes(checkpoint)?;
    dispatch!(peek_precision(&bytes)?, traverse_impl(ctx, checkpoint, &bytes, spec, anchors))
}

fn traverse_impl<T: Real>(
    ctx: &Ctx,
    checkpoint: &Path,
    bytes: &[u8],
    spec: &TraversalSpec,
    anchors: &Anchors,
) -> Result<Vec<String>> {
    let l = load_checkpoint::<T>(ctx, bytes)?;
    let dim = l.resolved.model.representation_dim();
    spec.validate(dim)?;
    ctx.prepare()?;
    let (anchor_ids, base): (Vec<Value>, Tensor<T>) = match anchors {
        Anchors::Zero => (vec![json!("zero")], Tensor::zeros(&[1, dim])),
        _ => {
            let (_, test) = load_data(&l.resolved.model, &l.resolved.train, &ctx.data_dir, false)?;
            let ids = match anchors {
                Anchors::Indices(ids) => ids.clone(),
                Anchors::Default(n) => default_anchors(&l.trainer, &test, *n)?,
                Anchors::Zero => unreachable!(),
            };
            if ids.is_empty() {
                return Err(CliError::config("no anchors"));
            }
            if let Some(bad) = ids.iter().find(|&&i| i >= test.len()) {
                return Err(CliError::config(format!("anchor {bad} out of range for {} test samples", test.len())));
            }
            let (x, _) = test.gather(&ids);
            let (z, _) = encode_all(&l.trainer, &x)?;
            (ids.iter().map(|&i| json!(i)).collect(), z)
        }
    };
    let values = spec.values();
    let rows = base.shape()[0];
    let images = decode_all(&l.trainer, &spec.codes(&base))?;
    let path = ctx.out(&grid_name("traverse", images.shape()[1]));
    write_image_grid(&split_images(&images), rows, spec.steps, &path)?;
    let mut m = Manifest::new("traverse", &l.resolved, &ctx.data_dir);
    m.checkpoint_sha256 = Some(l.hash);
    m.output(&path);
    m.results = json!({
        "checkpoint": checkpoint.display().to_string(),
        "component": spec.component, "lo": spec.lo, "hi": spec.hi, "steps": spec.steps,
        "column_values": values, "anchors": anchor_ids,
    });
    Ok(vec![m.write(&ctx.out_dir)?.display().to_string()])
}

/// Reports on `checkpoint` when given, otherwise on `resolved`.
pub fn inspect(
    ctx: &Ctx,
    resolved: Option<&Resolved>,
    checkpoint: Option<&Path>,
    metrics: Option<&Path>,
) -> Result<Vec<String>> {
    let (resolved, hash, metrics) = match (checkpoint, resolved) {
        (Some(path), _) => {
            let bytes = read_bytes(path)?;
            let hash = content_hash(&bytes);
            let resolved = match peek_precision(&bytes)? {
                Precision::F32 => load_checkpoint::<f32>(ctx, &bytes)?.resolved,
                Precision::F64 => load_checkpoint::<f64>(ctx, &bytes)?.resolved,
            };
            let sibling = path.parent().map(|p| p.join("metrics.csv"));
            let metrics = metrics.map(Path::to_path_buf).or(sibling.filter(|p| p.exists()));
            (resolved, Some(hash), metrics)
        }
        (None, Some(r)) => (r.clone(), None, metrics.map(Path::to_path_buf)),
        (None, None) => return Err(CliError::config("inspect needs a checkpoint or a config")),
    };
    let model = Model::build(resolved.model.clone())?;
    let cfg = model.config();
    let mut report = String::new();
    let _ = writeln!(report, "architecture        {}", resolved.architecture);
    let _ = writeln!(report, "mode                {:?}", cfg.mode);
    let _ = writeln!(report, "representation dim  {}", cfg.representation_dim());
    if let Some(w) = model.specs().iter().find(|s| s.name == "routing.weight") {
        let dims: Vec<String> = w.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(report, "routing matrix      {}", dims.join("x"));
    }
    if let Some(h) = &hash {
        let _ = writeln!(report, "checkpoint sha256   {h}");
    }
    let _ = writeln!(report);
    report.push_str(&model.summary());
    let listed: usize = model.specs().iter().map(|s| s.len()).sum();
    let mut results = json!({
        "representation_dim": cfg.representation_dim(),
        "parameter_total": model.param_count(),
        "parameters": model.specs().iter().map(|s| json!({ "name": s.name, "shape": s.shape, "count": s.len() })).collect::<Vec<_>>(),
    });
    assert_eq!(listed, model.param_count());
    if let Some(path) = &metrics {
        let rows = read_rows(path)?;
        if let Some(r) = rows.iter().rev().find(|r| r.split == Split::Test).or(rows.last()) {
            let _ = writeln!(report);
            let _ = writeln!(
                report,
                "z statistics ({} epoch {} of {}): mean |z| {:.6}, mean std z {:.6}",
                r.split.as_str(),
                r.epoch,
                path.display(),
                r.mean_abs_z,
                r.mean_std_z
            );
            results["z_statistics"] = json!(r);
        }
    }
    eprint!("{report}");
    ctx.prepare()?;
    let path = ctx.out("inspect.txt");
    write_file(&path, report.as_bytes())?;
    let mut m = Manifest::new("inspect", &resolved, &ctx.data_dir);
    m.checkpoint_sha256 = hash;
    m.output(&path);
    m.results = results;
    Ok(vec![m.write(&ctx.out_dir)?.display().to_string()])
}
