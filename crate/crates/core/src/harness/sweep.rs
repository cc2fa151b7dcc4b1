//! Grid sweeps over (temperature, lr, weight decay) per epoch budget, and
//! patience experiments across budgets.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{RunConfig, SplitTag, SweepSpec};
use super::metrics::{read_metrics, MetricsRow, MetricsWriter};
use super::run::{distill, RunOutcome};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub epochs: usize,
    pub temperature: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl SweepPoint {
    pub fn run_id(&self) -> String {
        format!(
            "e{}-T{}-lr{}-wd{}",
            self.epochs, self.temperature, self.lr, self.weight_decay
        )
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.run_id = self.run_id();
        cfg.epochs = self.epochs;
        cfg.loss.temperature = self.temperature;
        cfg.optim.lr = self.lr;
        cfg.optim.weight_decay = Some(self.weight_decay);
        cfg
    }
}

/// Grid points in a fixed order: epochs, then T, lr, wd (innermost).
pub fn grid(spec: &SweepSpec) -> Vec<SweepPoint> {
    let mut out = Vec::new();
    for &epochs in &spec.epochs {
        for &temperature in &spec.temperature {
            for &lr in &spec.lr {
                for &weight_decay in &spec.weight_decay {
                    out.push(SweepPoint {
                        epochs,
                        temperature,
                        lr,
                        weight_decay,
                    });
                }
            }
        }
    }
    out
}

/// Final metrics of a finished child run. Every split lookup goes through
/// [`RunMetrics::final_for`], which records the split in an audit log.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    rows: Vec<MetricsRow>,
}

#[derive(Debug, Default)]
pub struct AccessAudit(RefCell<Vec<SplitTag>>);

impl AccessAudit {
    pub fn accessed(&self) -> Vec<SplitTag> {
        self.0.borrow().clone()
    }
}

impl RunMetrics {
    pub fn new(rows: Vec<MetricsRow>) -> Self {
        RunMetrics { rows }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(read_metrics(path)?))
    }

    pub fn final_for(&self, split: SplitTag, audit: &AccessAudit) -> Option<&MetricsRow> {
        audit.0.borrow_mut().push(split);
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

#[derive(Debug, Clone)]
pub enum ChildStatus {
    Done(RunMetrics),
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub run_id: String,
    pub status: ChildStatus,
}

/// Index of the best finished row per epoch budget, judged only by
/// `selection` top-1 (earlier grid points win ties).
pub fn select_best(
    rows: &[SweepRow],
    selection: SplitTag,
    audit: &AccessAudit,
) -> BTreeMap<usize, usize> {
    let mut best: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let ChildStatus::Done(m) = &row.status else {
            continue;
        };
        let Some(score) = m.final_for(selection, audit).map(|r| r.top1) else {
            continue;
        };
        match best.get(&row.point.epochs) {
            Some(&(_, s)) if s >= score => {}
            _ => {
                best.insert(row.point.epochs, (i, score));
            }
        }
    }
    best.into_iter().map(|(e, (i, _))| (e, i)).collect()
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub dir: PathBuf,
    pub selection_split: SplitTag,
    pub rows: Vec<SweepRow>,
    /// Epoch budget → index into `rows`.
    pub best: BTreeMap<usize, usize>,
    /// Splits consulted while choosing `best`.
    pub selection_audit: Vec<SplitTag>,
}

impl SweepReport {
    pub fn best_config(&self, base: &RunConfig, epochs: usize) -> Option<RunConfig> {
        self.best.get(&epochs).map(|&i| {
            let mut cfg = self.rows[i].point.apply(base);
            cfg.selection_split = self.selection_split;
            cfg
        })
    }
}

fn run_child(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    match panic::catch_unwind(AssertUnwindSafe(|| distill(cfg, out))) {
        Ok(r) => r,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "child run panicked".into());
            Err(Error::InvalidArgument(format!("panic: {msg}")))
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Run every grid point (sequentially) under `<out>/<sweep_id>/` and pick
/// the best per epoch budget from the selection split alone.
pub fn sweep(spec: &SweepSpec, base: &RunConfig, out: &Path) -> Result<SweepReport> {
    spec.validate()?;
    let mut base = base.clone();
    base.selection_split = spec.selection_split;
    base.validate()?;
    if base.selection_spec().is_none() {
        return Err(Error::Config(format!(
            "selection split `{}` is not configured in the base run",
            spec.selection_split
        )));
    }
    let dir = out.join(&spec.sweep_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut rows = Vec::new();
    for point in grid(spec) {
        let cfg = point.apply(&base);
        let status = match run_child(&cfg, &dir) {
            Ok(o) => ChildStatus::Done(RunMetrics::new(o.rows)),
            Err(e) => {
                log::warn!("sweep child {} failed: {e}", cfg.run_id);
                ChildStatus::Failed(e.to_string())
            }
        };
        rows.push(SweepRow {
            point,
            run_id: cfg.run_id,
            status,
        });
    }

    let audit = AccessAudit::default();
    let best = select_best(&rows, spec.selection_split, &audit);
    let report = SweepReport {
        dir: dir.clone(),
        selection_split: spec.selection_split,
        rows,
        best,
        selection_audit: audit.accessed(),
    };
    write_sweep_tables(&report, &base)?;
    Ok(report)
}

fn write_sweep_tables(report: &SweepReport, base: &RunConfig) -> Result<()> {
    // Reporting happens after selection; its reads are outside the audit.
    let after = AccessAudit::default();
    let sel = report.selection_split;
    let lookup = |row: &SweepRow, tag: SplitTag| match &row.status {
        ChildStatus::Done(m) => m.final_for(tag, &after).map(|r| r.top1),
        ChildStatus::Failed(_) => None,
    };
    let header = "epochs,temperature,lr,weight_decay,run_id,status,selection_top1,test_top1";
    let line = |row: &SweepRow| {
        let status = match &row.status {
            ChildStatus::Done(_) => "ok".to_string(),
            ChildStatus::Failed(e) => format!("failed: {}", e.replace([',', '\n'], ";")),
        };
        let p = &row.point;
        format!(
            "{},{},{},{},{},{},{},{}",
            p.epochs,
            p.temperature,
            p.lr,
            p.weight_decay,
            row.run_id,
            status,
            fmt_opt(lookup(row, sel)),
            fmt_opt(lookup(row, SplitTag::Test))
        )
    };
    let mut all = vec![header.to_string()];
    all.extend(report.rows.iter().map(line));
    let mut best = vec![header.to_string()];
    for (&epochs, &i) in &report.best {
        best.push(line(&report.rows[i]));
        let cfg = report.best_config(base, epochs).expect("present");
        let path = report.dir.join(format!("best_e{epochs}.json"));
        fs::write(&path, cfg.to_json()?).map_err(|e| Error::io(&path, e))?;
    }
    for (name, lines) in [("sweep.csv", all), ("best.csv", best)] {
        let path = report.dir.join(name);
        fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatienceRow {
    pub epochs: usize,
    pub run_id: String,
    pub test: MetricsRow,
}

#[derive(Debug, Clone)]
pub struct PatienceReport {
    pub dir: PathBuf,
    pub rows: Vec<PatienceRow>,
    pub sweep: Option<SweepReport>,
}

/// Distill at each epoch budget (ascending) and tabulate final test metrics.
/// With a sweep attached, each budget uses its best grid point.
pub fn patience(
    patience_id: &str,
    budgets: &[usize],
    base: &RunConfig,
    sweep_spec: Option<&SweepSpec>,
    out: &Path,
) -> Result<PatienceReport> {
    if budgets.is_empty() {
        return Err(Error::Config(
            "patience needs at least one epoch budget".into(),
        ));
    }
    if base.data.test.is_none() {
        return Err(Error::Config("patience needs a test split".into()));
    }
    let mut budgets = budgets.to_vec();
    budgets.sort_unstable();
    budgets.dedup();
    let dir = out.join(patience_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut rows = Vec::new();
    let sweep_report = match sweep_spec {
        Some(spec) => {
            let mut spec = spec.clone();
            spec.epochs = budgets.clone();
            let report = sweep(&spec, base, &dir)?;
            let after = AccessAudit::default();
            for &e in &budgets {
                let i = *report.best.get(&e).ok_or_else(|| {
                    Error::Config(format!("every sweep run at {e} epochs failed"))
                })?;
                let row = &report.rows[i];
                let ChildStatus::Done(m) = &row.status else {
                    unreachable!()
                };
                let test = m
                    .final_for(SplitTag::Test, &after)
                    .cloned()
                    .ok_or_else(|| Error::Manifest(format!("{}: no test row", row.run_id)))?;
                rows.push(PatienceRow {
                    epochs: e,
                    run_id: format!("{}/{}", spec.sweep_id, row.run_id),
                    test,
                });
            }
            Some(report)
        }
        None => {
            for &e in &budgets {
                let mut cfg = base.clone();
                cfg.epochs = e;
                cfg.run_id = format!("e{e}");
                let o = distill(&cfg, &dir)?;
                let test = o
                    .final_row(SplitTag::Test)
                    .cloned()
                    .ok_or_else(|| Error::Manifest(format!("{}: no test row", cfg.run_id)))?;
                rows.push(PatienceRow {
                    epochs: e,
                    run_id: cfg.run_id,
                    test,
                });
            }
            None
        }
    };

    let mut w = MetricsWriter::create(dir.join("metrics.csv"))?;
    let mut table = vec!["epochs,run_id,test_top1,test_agreement".to_string()];
    for r in &rows {
        let mut row = r.test.clone();
        row.epoch = r.epochs as f64;
        w.append(&row)?;
        table.push(format!(
            "{},{},{},{}",
            r.epochs,
            r.run_id,
            r.test.top1,
            fmt_opt(r.test.agreement)
        ));
    }
    w.flush()?;
    let path = dir.join("patience.csv");
    fs::write(&path, table.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(PatienceReport {
        dir,
        rows,
        sweep: sweep_report,
    })
}

/// Final row of every split for every run directory under `root` (searched
/// two levels deep, so sweep children are included), written to
/// `<root>/summary.csv`.
pub fn report_csv(root: &Path) -> Result<PathBuf> {
    let mut runs = Vec::new();
    let mut stack = vec![(root.to_path_buf(), 0)];
    while let Some((dir, depth)) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for sub in entries {
            let metrics = sub.join("metrics.csv");
            if metrics.is_file() {
                runs.push((
                    sub.strip_prefix(root).unwrap_or(&sub).to_path_buf(),
                    metrics,
                ));
            }
            if depth < 1 {
                stack.push((sub, depth + 1));
            }
        }
    }
    runs.sort();
    let mut lines = vec!["run_id,step,epoch,split,loss,top1,agreement,lr,wall_s".to_string()];
    for (id, path) in runs {
        for r in super::metrics::final_rows(&read_metrics(&path)?) {
            lines.push(format!(
                "{},{},{},{},{},{},{},{},{}",
                id.display(),
                r.step,
                r.epoch,
                r.split,
                r.loss,
                r.top1,
                fmt_opt(r.agreement),
                r.lr,
                r.wall_s
            ));
        }
    }
    let out = root.join("summary.csv");
    fs::write(&out, lines.join("\n") + "\n").map_err(|e| Error::io(&out, e))?;
    Ok(out)
}
