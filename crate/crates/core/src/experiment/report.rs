//! Label-savings reports over a directory of metrics files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::csvio::{self, fmt_f64, split_run_name};
use crate::error::{Error, Result};
use crate::metrics::{self, CurvePoint, MetricsRecord, Reference, Task};

pub const UNREACHED: &str = "unreached";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "report_summary.csv";

/// Every metrics file of an output directory, grouped by strategy and repetition.
#[derive(Clone, Debug)]
pub struct RunSet {
    pub dir: PathBuf,
    pub hash: String,
    /// `queried_<class>` column names shared by all files.
    pub queried_columns: Vec<String>,
    pub curves: BTreeMap<String, BTreeMap<usize, Vec<MetricsRecord>>>,
    pub references: BTreeMap<usize, Reference>,
}

fn list_dir(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if let Some(n) = e.file_name().to_str() {
            names.push(n.to_string());
        }
    }
    names.sort();
    Ok(names)
}

fn check_hash(expected: &mut Option<(String, PathBuf)>, found: Option<String>, path: &Path) -> Result<()> {
    let found = found.ok_or_else(|| Error::Contract(format!("{} has no `# config=` line", path.display())))?;
    match expected {
        None => *expected = Some((found, path.to_path_buf())),
        Some((h, first)) if *h != found => {
            return Err(Error::Contract(format!(
                "runs from different configurations: {} has config {h}, {} has config {found}",
                first.display(),
                path.display()
            )))
        }
        Some(_) => {}
    }
    Ok(())
}

pub fn load_runs(dir: &Path) -> Result<RunSet> {
    let mut hash = None;
    let mut curves: BTreeMap<String, BTreeMap<usize, Vec<MetricsRecord>>> = BTreeMap::new();
    let mut references = BTreeMap::new();
    let mut queried_columns: Option<Vec<String>> = None;
    for name in list_dir(dir)? {
        let path = dir.join(&name);
        if let Some((s, r)) = split_run_name(&name, "metrics", ".csv") {
            let (h, q, recs) = csvio::read_metrics(&path)?;
            check_hash(&mut hash, h, &path)?;
            match &queried_columns {
                None => queried_columns = Some(q),
                Some(prev) if *prev != q => {
                    return Err(Error::Contract(format!("{}: class columns differ from other runs", path.display())))
                }
                Some(_) => {}
            }
            if recs.is_empty() {
                return Err(Error::Contract(format!("{} has no records", path.display())));
            }
            curves.entry(s).or_default().insert(r, recs);
        } else if let Some(r) = name
            .strip_prefix("reference_")
            .and_then(|x| x.strip_suffix(".csv"))
            .and_then(|x| x.parse::<usize>().ok())
        {
            let t = csvio::read_table(&path)?;
            check_hash(&mut hash, t.config.clone(), &path)?;
            if t.rows.len() != 1 {
                return Err(Error::parse(path.display().to_string(), "expected one record"));
            }
            let named = |e: Error| Error::parse(path.display().to_string(), e.to_string());
            let reference = Reference {
                accuracy: t.get(0, t.column("accuracy").map_err(named)?).map_err(named)?,
                loc_mse: t.get(0, t.column("loc_mse").map_err(named)?).map_err(named)?,
            };
            references.insert(r, reference);
        }
    }
    if curves.is_empty() {
        return Err(Error::Contract(format!(
            "{}: no metrics_<strategy>_<rep>.csv files",
            dir.display()
        )));
    }
    Ok(RunSet {
        dir: dir.to_path_buf(),
        hash: hash.map(|h| h.0).unwrap_or_default(),
        queried_columns: queried_columns.unwrap_or_default(),
        curves,
        references,
    })
}

pub fn curve(records: &[MetricsRecord]) -> Vec<CurvePoint> {
    records
        .iter()
        .map(|r| CurvePoint {
            labeled: r.labeled,
            accuracy: r.accuracy,
            loc_mse: r.loc_mse,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Criterion {
    /// First labeled count within `threshold` relative error of the full-pool reference.
    RelativeError(Task, f64),
    /// First labeled count reaching the baseline run's final accuracy.
    BaselineFinal,
}

impl Criterion {
    pub fn task_name(&self) -> &'static str {
        match self {
            Criterion::RelativeError(t, _) => t.name(),
            Criterion::BaselineFinal => "baseline-final",
        }
    }

    pub fn threshold_text(&self) -> String {
        match self {
            Criterion::RelativeError(_, t) => format!("{t}"),
            Criterion::BaselineFinal => "-".into(),
        }
    }
}

pub fn default_criteria() -> Vec<Criterion> {
    let mut c: Vec<Criterion> = [0.01, 0.02, 0.05]
        .iter()
        .map(|&t| Criterion::RelativeError(Task::Classification, t))
        .collect();
    c.extend([0.1, 0.2, 0.5].iter().map(|&t| Criterion::RelativeError(Task::Localization, t)));
    c.push(Criterion::BaselineFinal);
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRow {
    pub strategy: String,
    pub criterion: Criterion,
    pub method_rep: usize,
    pub baseline_rep: usize,
    pub method: Option<usize>,
    pub baseline: Option<usize>,
    pub savings: Option<f64>,
}

impl PairRow {
    pub fn paired(&self) -> bool {
        self.method_rep == self.baseline_rep
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub strategy: String,
    pub criterion: Criterion,
    pub paired: bool,
    pub pairs: usize,
    /// Pairs where both curves met the criterion.
    pub reached: usize,
    /// Mean, min and max savings over reached pairs.
    pub savings: Option<(f64, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub baseline: String,
    pub hash: String,
    pub rows: Vec<PairRow>,
    pub summary: Vec<SummaryRow>,
}

fn reference_of(runs: &RunSet, rep: usize) -> Result<&Reference> {
    runs.references.get(&rep).ok_or_else(|| {
        Error::Contract(format!(
            "{}: missing reference_{rep}.csv needed for relative-error rows",
            runs.dir.display()
        ))
    })
}

fn crossing(runs: &RunSet, c: &[CurvePoint], rep: usize, criterion: Criterion, target: f64) -> Result<Option<usize>> {
    match criterion {
        Criterion::RelativeError(task, t) => metrics::first_crossing(c, task, reference_of(runs, rep)?, t),
        Criterion::BaselineFinal => Ok(metrics::labels_to_reach(c, target)),
    }
}

/// Compares every strategy (the baseline included) against `baseline` over all repetition pairs.
pub fn build_report(runs: &RunSet, baseline: &str, criteria: &[Criterion]) -> Result<Report> {
    let base = runs.curves.get(baseline).ok_or_else(|| {
        Error::Contract(format!(
            "{}: no metrics_{baseline}_<rep>.csv for the baseline",
            runs.dir.display()
        ))
    })?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (strategy, reps) in &runs.curves {
        for &criterion in criteria {
            let mut these = Vec::new();
            for (&mr, mrec) in reps {
                let mc = curve(mrec);
                for (&br, brec) in base {
                    let bc = curve(brec);
                    let target = brec.last().expect("non-empty").accuracy;
                    let m = crossing(runs, &mc, mr, criterion, target)?;
                    let b = crossing(runs, &bc, br, criterion, target)?;
                    these.push(PairRow {
                        strategy: strategy.clone(),
                        criterion,
                        method_rep: mr,
                        baseline_rep: br,
                        method: m,
                        baseline: b,
                        savings: m.zip(b).map(|(m, b)| metrics::savings(m, b)),
                    });
                }
            }
            for paired in [true, false] {
                let sel: Vec<&PairRow> = these.iter().filter(|p| !paired || p.paired()).collect();
                let s: Vec<f64> = sel.iter().filter_map(|p| p.savings).collect();
                let stats = (!s.is_empty()).then(|| {
                    let mean = s.iter().sum::<f64>() / s.len() as f64;
                    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (mean, lo, hi)
                });
                summary.push(SummaryRow {
                    strategy: strategy.clone(),
                    criterion,
                    paired,
                    pairs: sel.len(),
                    reached: s.len(),
                    savings: stats,
                });
            }
            rows.extend(these);
        }
    }
    Ok(Report {
        baseline: baseline.to_string(),
        hash: runs.hash.clone(),
        rows,
        summary,
    })
}

fn opt_count(v: Option<usize>) -> String {
    v.map_or(UNREACHED.to_string(), |x| x.to_string())
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or(UNREACHED.to_string(), fmt_f64)
}

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|p| {
            vec![
                p.strategy.clone(),
                report.baseline.clone(),
                p.criterion.task_name().into(),
                p.criterion.threshold_text(),
                p.method_rep.to_string(),
                p.baseline_rep.to_string(),
                p.paired().to_string(),
                opt_count(p.method),
                opt_count(p.baseline),
                opt_f64(p.savings),
            ]
        })
        .collect();
    csvio::write_table(
        &dir.join(REPORT_FILE),
        Some(&report.hash),
        &[
            "strategy",
            "baseline",
            "task",
            "threshold",
            "method_rep",
            "baseline_rep",
            "paired",
            "method_labels",
            "baseline_labels",
            "savings",
        ],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = report
        .summary
        .iter()
        .map(|s| {
            vec![
                s.strategy.clone(),
                report.baseline.clone(),
                s.criterion.task_name().into(),
                s.criterion.threshold_text(),
                if s.paired { "paired" } else { "unpaired" }.into(),
                s.pairs.to_string(),
                s.reached.to_string(),
                opt_f64(s.savings.map(|x| x.0)),
                opt_f64(s.savings.map(|x| x.1)),
                opt_f64(s.savings.map(|x| x.2)),
            ]
        })
        .collect();
    csvio::write_table(
        &dir.join(SUMMARY_FILE),
        Some(&report.hash),
        &[
            "strategy",
            "baseline",
            "task",
            "threshold",
            "pairing",
            "pairs",
            "reached",
            "savings_mean",
            "savings_min",
            "savings_max",
        ],
        &rows,
    )
}

/// Human-readable summary, one line per strategy, criterion and pairing.
pub fn format_table(report: &Report) -> String {
    let mut s = format!("baseline: {}  config: {}\n", report.baseline, report.hash);
    let _ = writeln!(
        s,
        "{:<16} {:<15} {:>9} {:<9} {:>7}  savings mean [min, max]",
        "strategy", "task", "threshold", "pairing", "reached"
    );
    for r in &report.summary {
        let sav = match r.savings {
            Some((m, lo, hi)) => format!("{:6.1}% [{:.1}%, {:.1}%]", 100.0 * m, 100.0 * lo, 100.0 * hi),
            None => UNREACHED.to_string(),
        };
        let _ = writeln!(
            s,
            "{:<16} {:<15} {:>9} {:<9} {:>7}  {}",
            r.strategy,
            r.criterion.task_name(),
            r.criterion.threshold_text(),
            if r.paired { "paired" } else { "unpaired" },
            format!("{}/{}", r.reached, r.pairs),
            sav
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, labeled: usize, accuracy: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            labeled,
            accuracy,
            loc_mse: 1.0,
            calibration_error: 0.0,
            calibration_error_weighted: 0.0,
            error_sum: 0.0,
            queried: vec![0, 0],
            wall_time: 0.0,
        }
    }

    fn write_run(dir: &Path, s: &str, r: usize, hash: &str, acc: &[f64]) {
        let recs: Vec<_> = acc.iter().enumerate().map(|(k, &a)| rec(k, 100 + 100 * k, a)).collect();
        let classes = vec!["A".to_string(), "B".to_string()];
        csvio::write_metrics(&csvio::run_file(dir, "metrics", s, r, ".csv"), hash, &classes, &recs).unwrap();
        csvio::write_table(
            &dir.join(format!("reference_{r}.csv")),
            Some(hash),
            &["accuracy", "loc_mse"],
            &[vec![fmt_f64(0.9), fmt_f64(1.0)]],
        )
        .unwrap();
    }

    #[test]
    fn baseline_against_itself_saves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), "random", 0, "h", &[0.5, 0.7, 0.8, 0.89]);
        let runs = load_runs(dir.path()).unwrap();
        let rep = build_report(&runs, "random", &default_criteria()).unwrap();
        for r in &rep.rows {
            assert!(r.savings.is_none() || r.savings == Some(0.0), "{r:?}");
        }
        let fin = rep.rows.iter().find(|r| r.criterion == Criterion::BaselineFinal).unwrap();
        assert_eq!(fin.method, Some(400));
        let c1 = rep
            .rows
            .iter()
            .find(|r| r.criterion == Criterion::RelativeError(Task::Classification, 0.01))
            .unwrap();
        assert_eq!((c1.method, c1.baseline, c1.savings), (None, None, None));
        write_report(dir.path(), &rep).unwrap();
        let text = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        assert!(text.contains(UNREACHED));
        assert!(format_table(&rep).contains(UNREACHED));
    }

    #[test]
    fn paired_and_unpaired_summaries() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), "random", 0, "h", &[0.5, 0.6, 0.7, 0.8]);
        write_run(dir.path(), "random", 1, "h", &[0.5, 0.6, 0.7, 0.75]);
        write_run(dir.path(), "ens-entropy", 0, "h", &[0.5, 0.8, 0.8, 0.8]);
        write_run(dir.path(), "ens-entropy", 1, "h", &[0.5, 0.6, 0.8, 0.8]);
        let runs = load_runs(dir.path()).unwrap();
        let rep = build_report(&runs, "random", &[Criterion::BaselineFinal]).unwrap();
        let s = |paired| {
            rep.summary
                .iter()
                .find(|s| s.strategy == "ens-entropy" && s.paired == paired)
                .unwrap()
                .clone()
        };
        // rep 0: 200 vs 400; rep 1: target 0.75 reached at 300 vs 400.
        let p = s(true);
        assert_eq!((p.pairs, p.reached), (2, 2));
        let (m, lo, hi) = p.savings.unwrap();
        assert_eq!(lo, metrics::savings(300, 400));
        assert_eq!(hi, metrics::savings(200, 400));
        assert_eq!(m, (metrics::savings(300, 400) + metrics::savings(200, 400)) / 2.0);
        assert_eq!(s(false).pairs, 4);
    }

    #[test]
    fn mismatched_configs_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), "random", 0, "aaaa", &[0.5, 0.6]);
        write_run(dir.path(), "mc-mi", 1, "bbbb", &[0.5, 0.6]);
        let e = load_runs(dir.path()).unwrap_err();
        assert!(matches!(e, Error::Contract(_)), "{e}");
        assert!(e.to_string().contains("different configurations"));
    }

    #[test]
    fn empty_directory_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_runs(dir.path()).is_err());
    }
}
