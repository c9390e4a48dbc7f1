//! β × dimension × seed grids of independent training runs, and the trend
//! checks read off their final evaluation rows.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{MetricsRow, Result, TrainConfig, Trainer};
use crate::data::Dataset;
use crate::model::ModelConfig;
use crate::real::Real;

/// Worker threads for a sweep: `CAPSIB_THREADS` if set and positive,
/// otherwise the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("CAPSIB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub beta: f64,
    pub dim: usize,
    pub seed: u64,
}

impl SweepCell {
    /// Every combination, ordered by dim, then seed, then β.
    pub fn grid(betas: &[f64], dims: &[usize], seeds: &[u64]) -> Vec<SweepCell> {
        let mut cells = Vec::with_capacity(betas.len() * dims.len() * seeds.len());
        for &dim in dims {
            for &seed in seeds {
                for &beta in betas {
                    cells.push(SweepCell { beta, dim, seed });
                }
            }
        }
        cells
    }

    pub fn configs(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig { capsule_dim: self.dim, ..model.clone() };
        let train = TrainConfig { beta: self.beta, seed: self.seed, ..train.clone() };
        (model, train)
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub cell: SweepCell,
    /// Every row the run logged, or the error that stopped it.
    pub rows: std::result::Result<Vec<MetricsRow>, String>,
}

impl SweepOutcome {
    /// The last test row, or the last train row when there is no test split.
    pub fn last(&self) -> Option<&MetricsRow> {
        let rows = self.rows.as_ref().ok()?;
        rows.iter().rev().find(|r| r.split == crate::data::Split::Test).or(rows.last())
    }
}

/// Trains one model per cell, up to `threads` at a time. A failing cell is
/// recorded and the rest continue. Outcomes come back in `cells` order.
/// `on_done` sees each finished trainer and its rows (e.g. to write a
/// checkpoint); an error there marks the cell failed.
pub fn beta_sweep<T: Real>(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    cells: &[SweepCell],
    train: &Dataset,
    test: Option<&Dataset>,
    threads: usize,
    on_done: &(dyn Fn(usize, &Trainer<T>, &[MetricsRow]) -> Result<()> + Sync),
) -> Vec<SweepOutcome> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SweepOutcome>>> = Mutex::new(vec![None; cells.len()]);
    let run = |i: usize| -> Result<Vec<MetricsRow>> {
        let (m, t) = cells[i].configs(model, train_cfg);
        let mut trainer = Trainer::<T>::new(m, t)?;
        let rows = trainer.fit(train, test, |_, _| Ok(()))?;
        on_done(i, &trainer, &rows)?;
        Ok(rows)
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let rows = run(i).map_err(|e| e.to_string());
                slots.lock().expect("no worker panics while holding the lock")[i] =
                    Some(SweepOutcome { cell: cells[i], rows });
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|o| o.expect("every cell ran")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerdictKind {
    Pass,
    Fail,
    Skipped,
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictKind::Pass => "PASS",
            VerdictKind::Fail => "FAIL",
            VerdictKind::Skipped => "SKIPPED",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub check: &'static str,
    pub dim: usize,
    pub kind: VerdictKind,
    pub detail: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} dim={}: {}", self.kind, self.check, self.dim, self.detail)
    }
}

type Series<'a> = Vec<(f64, &'a MetricsRow)>;

fn ends<'a>(s: &Series<'a>) -> (&'a MetricsRow, &'a MetricsRow) {
    (s[0].1, s[s.len() - 1].1)
}

/// Seeds that completed every β, each with its rows sorted by β.
fn complete_series(outcomes: &[SweepOutcome], dim: usize) -> (usize, Vec<(u64, Series<'_>)>) {
    let mut by_seed: BTreeMap<u64, Vec<&SweepOutcome>> = BTreeMap::new();
    for o in outcomes.iter().filter(|o| o.cell.dim == dim) {
        by_seed.entry(o.cell.seed).or_default().push(o);
    }
    let total = by_seed.len();
    let series = by_seed
        .into_iter()
        .filter_map(|(seed, os)| {
            let mut s: Series = os.iter().map(|o| o.last().map(|r| (o.cell.beta, r))).collect::<Option<_>>()?;
            s.sort_by(|a, b| a.0.total_cmp(&b.0));
            Some((seed, s))
        })
        .collect();
    (total, series)
}

fn vote(
    check: &'static str,
    dim: usize,
    series: &[(u64, Series<'_>)],
    what: &str,
    holds: impl Fn(&Series<'_>) -> Option<bool>,
) -> Verdict {
    let skip = |detail: String| Verdict { check, dim, kind: VerdictKind::Skipped, detail };
    if series.is_empty() {
        return skip("no seed completed every β".into());
    }
    let betas: Vec<f64> = series[0].1.iter().map(|(b, _)| *b).collect();
    let distinct = betas.windows(2).filter(|w| w[0] != w[1]).count() + 1;
    if distinct < 2 {
        return skip("needs at least two distinct β values".into());
    }
    let mut votes = Vec::new();
    for (_, s) in series {
        match holds(s) {
            Some(v) => votes.push(v),
            None => return skip(format!("{what} not available")),
        }
    }
    let yes = votes.iter().filter(|&&v| v).count();
    let kind = if 2 * yes > votes.len() { VerdictKind::Pass } else { VerdictKind::Fail };
    Verdict { check, dim, kind, detail: format!("{yes}/{} seeds: {what}", votes.len()) }
}

/// Majority-over-seeds trend checks, per representation dimension:
/// accuracy and z spread fall from the smallest to the largest β, and the
/// logged information value falls strictly across every β.
pub fn trend_verdicts(outcomes: &[SweepOutcome]) -> Vec<Verdict> {
    let mut dims: Vec<usize> = outcomes.iter().map(|o| o.cell.dim).collect();
    dims.sort_unstable();
    dims.dedup();
    let mut out = Vec::new();
    for dim in dims {
        let (total, series) = complete_series(outcomes, dim);
        let (lo, hi) = series
            .first()
            .map(|(_, s)| (s[0].0, s[s.len() - 1].0))
            .unwrap_or((f64::NAN, f64::NAN));
        let mut v = vec![
            vote("accuracy", dim, &series, &format!("acc(β={lo}) > acc(β={hi})"), |s| {
                let (a, b) = ends(s);
                Some(a.accuracy? > b.accuracy?)
            }),
            vote("std", dim, &series, &format!("mean std z(β={hi}) < mean std z(β={lo})"), |s| {
                let (a, b) = ends(s);
                Some(b.mean_std_z < a.mean_std_z)
            }),
            vote("mean_abs", dim, &series, &format!("mean |z|(β={hi}) < mean |z|(β={lo})"), |s| {
                let (a, b) = ends(s);
                Some(b.mean_abs_z < a.mean_abs_z)
            }),
            vote("info", dim, &series, "information value strictly decreasing in β", |s| {
                Some(s.windows(2).all(|w| w[1].1.info < w[0].1.info))
            }),
        ];
        if series.len() < total {
            for verdict in &mut v {
                verdict.detail += &format!(" ({} seeds incomplete)", total - series.len());
            }
        }
        out.extend(v);
    }
    out
}
