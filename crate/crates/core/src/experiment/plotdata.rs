//! Plot-ready tables assembled from a run directory.

use std::path::{Path, PathBuf};

use super::csvio::{self, fmt_f64, run_file, slug, Table};
use super::report::{load_runs, RunSet};
use super::run::POOLCOUNTS_FILE;
use crate::error::{Error, Result};
use crate::metrics;

pub const LEARNING_CURVE: &str = "learning_curve.csv";
pub const CLASS_DELTA: &str = "classdelta.csv";

fn require(dir: &Path, runs: &RunSet) -> Result<()> {
    let mut expected = vec![dir.join(POOLCOUNTS_FILE)];
    for (s, reps) in &runs.curves {
        for &r in reps.keys() {
            expected.push(run_file(dir, "calibration", s, r, ".csv"));
            expected.push(run_file(dir, "errorcurve", s, r, ".csv"));
            expected.push(run_file(dir, "querylog", s, r, ".txt"));
        }
    }
    let missing: Vec<String> = expected
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "missing plot inputs (expected alongside the metrics files):\n  {}",
            missing.join("\n  ")
        )))
    }
}

fn read_hashed(path: &Path, hash: &str) -> Result<Table> {
    let t = csvio::read_table(path)?;
    if t.config.as_deref() != Some(hash) {
        return Err(Error::Contract(format!(
            "{} has config {:?}, metrics files have {hash}",
            path.display(),
            t.config
        )));
    }
    Ok(t)
}

fn pool_counts(dir: &Path, runs: &RunSet) -> Result<Vec<usize>> {
    let path = dir.join(POOLCOUNTS_FILE);
    let t = read_hashed(&path, &runs.hash)?;
    let named = |e: Error| Error::parse(path.display().to_string(), e.to_string());
    let (cc, kc) = (t.column("class").map_err(named)?, t.column("count").map_err(named)?);
    let names: Vec<String> = t.rows.iter().map(|r| format!("queried_{}", slug(&r[cc]))).collect();
    if names != runs.queried_columns {
        return Err(Error::Contract(format!(
            "{}: classes {names:?} do not match metrics columns {:?}",
            path.display(),
            runs.queried_columns
        )));
    }
    (0..t.rows.len()).map(|i| t.get(i, kc).map_err(named)).collect()
}

/// Rows of a per-run table whose `step` column equals `step`, without that column.
fn rows_at_step(t: &Table, step: usize) -> Result<Vec<Vec<String>>> {
    let sc = t.column("step")?;
    let mut out = Vec::new();
    for (i, row) in t.rows.iter().enumerate() {
        if t.get::<usize>(i, sc)? == step {
            out.push(row.iter().enumerate().filter(|&(c, _)| c != sc).map(|(_, v)| v.clone()).collect());
        }
    }
    Ok(out)
}

/// Writes learning-curve, calibration, error-curve and class-delta tables into `out`.
///
/// `steps` selects the calibration and error-curve snapshots; by default the first step and the
/// last step every run reached. Class deltas compare each strategy with `baseline` under the same
/// repetition.
pub fn write_plot_data(dir: &Path, out: &Path, baseline: &str, steps: Option<&[usize]>) -> Result<Vec<PathBuf>> {
    let runs = load_runs(dir)?;
    require(dir, &runs)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = runs.hash.clone();
    let mut written = Vec::new();

    let mut lc = Vec::new();
    for (s, reps) in &runs.curves {
        for (r, recs) in reps {
            for m in recs {
                lc.push(vec![
                    s.clone(),
                    r.to_string(),
                    m.step.to_string(),
                    m.labeled.to_string(),
                    fmt_f64(m.accuracy),
                    fmt_f64(m.loc_mse),
                    fmt_f64(m.calibration_error),
                    fmt_f64(m.error_sum),
                ]);
            }
        }
    }
    let p = out.join(LEARNING_CURVE);
    csvio::write_table(
        &p,
        Some(&hash),
        &["strategy", "rep", "step", "labeled", "accuracy", "loc_mse", "calibration_error", "error_sum"],
        &lc,
    )?;
    written.push(p);

    let common_last = runs
        .curves
        .values()
        .flat_map(|reps| reps.values())
        .map(|recs| recs.last().expect("non-empty").step)
        .min()
        .unwrap_or(0);
    let mut snap: Vec<usize> = steps.map_or_else(|| vec![0, common_last], <[usize]>::to_vec);
    snap.sort_unstable();
    snap.dedup();
    for &k in &snap {
        if k > common_last {
            return Err(Error::Contract(format!("step {k} is beyond the last step {common_last} shared by all runs")));
        }
        let mut cal = Vec::new();
        let mut err = Vec::new();
        for (s, reps) in &runs.curves {
            for &r in reps.keys() {
                let prefix = [s.clone(), r.to_string()];
                let c = read_hashed(&run_file(dir, "calibration", s, r, ".csv"), &hash)?;
                cal.extend(rows_at_step(&c, k)?.into_iter().map(|row| [prefix.to_vec(), row].concat()));
                let e = read_hashed(&run_file(dir, "errorcurve", s, r, ".csv"), &hash)?;
                err.extend(rows_at_step(&e, k)?.into_iter().map(|row| [prefix.to_vec(), row].concat()));
            }
        }
        let p = out.join(format!("calibration_step{k}.csv"));
        csvio::write_table(
            &p,
            Some(&hash),
            &["strategy", "rep", "bin", "lower", "upper", "mean_confidence", "accuracy", "count"],
            &cal,
        )?;
        written.push(p);
        let p = out.join(format!("errorcurve_step{k}.csv"));
        csvio::write_table(&p, Some(&hash), &["strategy", "rep", "fraction", "method", "oracle"], &err)?;
        written.push(p);
    }

    let pool = pool_counts(dir, &runs)?;
    let base = runs.curves.get(baseline).ok_or_else(|| {
        Error::Contract(format!("{}: no metrics_{baseline}_<rep>.csv for the baseline", dir.display()))
    })?;
    let mut header = vec!["strategy".to_string(), "rep".into(), "step".into(), "labeled".into()];
    header.extend(runs.queried_columns.iter().map(|q| format!("delta_{}", &q["queried_".len()..])));
    let mut cd = Vec::new();
    for (s, reps) in &runs.curves {
        for (r, recs) in reps {
            let Some(brecs) = base.get(r) else { continue };
            let n = recs.len().min(brecs.len());
            let a: Vec<Vec<usize>> = recs[..n].iter().map(|m| m.queried.clone()).collect();
            let b: Vec<Vec<usize>> = brecs[..n].iter().map(|m| m.queried.clone()).collect();
            let delta = metrics::class_distribution_delta(&a, &b, &pool)?;
            for (m, d) in recs[..n].iter().zip(delta) {
                let mut row = vec![s.clone(), r.to_string(), m.step.to_string(), m.labeled.to_string()];
                row.extend(d.into_iter().map(fmt_f64));
                cd.push(row);
            }
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let p = out.join(CLASS_DELTA);
    csvio::write_table(&p, Some(&hash), &header, &cd)?;
    written.push(p);
    Ok(written)
}
