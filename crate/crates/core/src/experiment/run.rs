use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::csvio::{self, fmt_f64, run_file, slug};
use super::{dataset_hash, hex, ExperimentConfig, LOOP_STREAM, REFERENCE_STREAM};
use crate::al_loop::{self, LoopOutcome};
use crate::error::{Error, Result};
use crate::metrics::Reference;
use crate::rng::RngStream;
use crate::uncertainty::Strategy;
use crate::{Dataset, NetworkConfig};

pub const ECHO_FILE: &str = "config.echo";
pub const POOLCOUNTS_FILE: &str = "poolcounts.csv";
pub const RUN_LOG: &str = "run.log";

#[derive(Clone, Debug)]
pub struct JobSummary {
    pub strategy: Strategy,
    pub rep: usize,
    pub labeled: Vec<usize>,
    pub members_trained: Vec<usize>,
    pub wall_time: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub hash: String,
    pub classes: Vec<String>,
    pub references: Vec<Reference>,
    /// Ordered by strategy (config order), then repetition.
    pub jobs: Vec<JobSummary>,
}

#[derive(Serialize, Deserialize)]
struct CachedReference {
    accuracy: f64,
    loc_mse: f64,
}

fn reference_key(train: &Dataset, test: &Dataset, net: &NetworkConfig, seed: u64) -> Result<String> {
    let mut h = Sha256::new();
    h.update(dataset_hash(train).as_bytes());
    h.update(dataset_hash(test).as_bytes());
    h.update(toml::to_string(net).map_err(|e| Error::Encoding(e.to_string()))?.as_bytes());
    h.update(seed.to_le_bytes());
    Ok(hex(&h.finalize())[..16].to_string())
}

/// Full-pool reference model of one repetition, cached under `cache/`.
fn reference(train: &Dataset, test: &Dataset, net: &NetworkConfig, seed: u64, cache: &Path) -> Result<Reference> {
    let path = cache.join(format!("reference-{}.toml", reference_key(train, test, net, seed)?));
    if let Ok(text) = fs::read_to_string(&path) {
        let c: CachedReference = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        log::info!("reference for seed {seed} read from {}", path.display());
        return Ok(Reference {
            accuracy: c.accuracy,
            loc_mse: c.loc_mse,
        });
    }
    let (_, r) = al_loop::train_reference(train, test, net, &RngStream::new(seed, REFERENCE_STREAM))?;
    let text = toml::to_string(&CachedReference {
        accuracy: r.accuracy,
        loc_mse: r.loc_mse,
    })
    .map_err(|e| Error::Encoding(e.to_string()))?;
    csvio::write_atomic(&path, text.as_bytes())?;
    Ok(r)
}

fn write_outcome(out: &Path, hash: &str, classes: &[String], s: &str, r: usize, o: &LoopOutcome) -> Result<()> {
    csvio::write_metrics(&run_file(out, "metrics", s, r, ".csv"), hash, classes, &o.records)?;
    let qpath = run_file(out, "querylog", s, r, ".txt");
    csvio::write_atomic(&qpath, o.pool.query_log_text().as_bytes())?;

    let mut cal = Vec::new();
    let mut err = Vec::new();
    for (rec, c) in o.records.iter().zip(&o.curves) {
        let cc = &c.calibration;
        for b in 0..cc.bins() {
            cal.push(vec![
                rec.step.to_string(),
                b.to_string(),
                fmt_f64(cc.edges[b]),
                fmt_f64(cc.edges[b + 1]),
                fmt_f64(cc.mean_confidence[b]),
                fmt_f64(cc.accuracy[b]),
                cc.counts[b].to_string(),
            ]);
        }
        let sp = &c.sparsification;
        for j in 0..sp.method.fractions.len() {
            err.push(vec![
                rec.step.to_string(),
                fmt_f64(sp.method.fractions[j]),
                fmt_f64(sp.method.mean_loss[j]),
                fmt_f64(sp.oracle.mean_loss[j]),
            ]);
        }
    }
    csvio::write_table(
        &run_file(out, "calibration", s, r, ".csv"),
        Some(hash),
        &["step", "bin", "lower", "upper", "mean_confidence", "accuracy", "count"],
        &cal,
    )?;
    csvio::write_table(
        &run_file(out, "errorcurve", s, r, ".csv"),
        Some(hash),
        &["step", "fraction", "method", "oracle"],
        &err,
    )?;
    if !o.predictions.is_empty() {
        write_predictions(out, hash, classes, s, r, o)?;
    }
    Ok(())
}

fn write_predictions(out: &Path, hash: &str, classes: &[String], s: &str, r: usize, o: &LoopOutcome) -> Result<()> {
    let first = &o.predictions[0].scores;
    let members = first.predictive.as_ref().map_or(0, |p| p.num_members());
    let mut header: Vec<String> = vec!["step".into(), "index".into(), "score".into()];
    if first.raw.is_some() {
        header.push("raw_mi".into());
    }
    if members > 0 {
        header.extend(classes.iter().map(|c| format!("mean_{}", slug(c))));
        for m in 0..members {
            header.extend(classes.iter().map(|c| format!("member{m}_{}", slug(c))));
        }
    }
    let mut rows = Vec::new();
    for p in &o.predictions {
        let sc = &p.scores;
        for (i, &id) in p.ids.iter().enumerate() {
            let mut row = vec![p.step.to_string(), id.to_string(), fmt_f64(sc.scores[i])];
            if let Some(raw) = &sc.raw {
                row.push(fmt_f64(raw[i]));
            }
            if let Some(ps) = &sc.predictive {
                row.extend(ps.mean().row(i).iter().map(|&v| fmt_f64(v)));
                for m in 0..ps.num_members() {
                    row.extend(ps.member(m).row(i).iter().map(|&v| fmt_f64(v)));
                }
            }
            rows.push(row);
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csvio::write_table(&run_file(out, "predictions", s, r, ".csv"), Some(hash), &header, &rows)
}

/// Runs every (strategy, repetition) pair of `cfg` and writes its files into `out`.
///
/// Repetition `r` runs the loop under stream [`LOOP_STREAM`] of seed `seed + r`, so every strategy
/// of a repetition starts from the same seed set.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let data = cfg.data.materialize(cfg.seed)?;
    let (train, test) = (&data.train, &data.test);
    if train.class_names() != test.class_names() {
        return Err(Error::Config("train and test sets have different classes".into()));
    }
    let net = cfg.network.resolve(train.feature_shape(), train.num_classes())?;
    let hash = cfg.comparison_hash()?;
    let cache = out.join("cache");
    fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;

    let mut echo = format!("# config={hash}\n");
    echo.push_str(&cfg.to_toml()?);
    csvio::write_atomic(&out.join(ECHO_FILE), echo.as_bytes())?;

    let classes = train.class_names().to_vec();
    let counts: Vec<Vec<String>> = classes
        .iter()
        .zip(train.class_counts())
        .map(|(c, k)| vec![c.clone(), k.to_string()])
        .collect();
    csvio::write_table(&out.join(POOLCOUNTS_FILE), Some(&hash), &["class", "count"], &counts)?;

    let references = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| reference(train, test, &net, cfg.seed + r as u64, &cache))
        .collect::<Result<Vec<_>>>()?;
    for (r, rf) in references.iter().enumerate() {
        csvio::write_table(
            &out.join(format!("reference_{r}.csv")),
            Some(&hash),
            &["accuracy", "loc_mse"],
            &[vec![fmt_f64(rf.accuracy), fmt_f64(rf.loc_mse)]],
        )?;
    }

    let pairs: Vec<(Strategy, usize)> = cfg
        .strategies
        .iter()
        .flat_map(|&s| (0..cfg.repetitions).map(move |r| (s, r)))
        .collect();
    let jobs = pairs
        .par_iter()
        .map(|&(s, r)| {
            let lc = cfg.protocol.loop_config(s);
            let o = al_loop::run_loop(train, test, &lc, &net, &RngStream::new(cfg.seed + r as u64, LOOP_STREAM))?;
            write_outcome(out, &hash, &classes, s.name(), r, &o)?;
            Ok(JobSummary {
                strategy: s,
                rep: r,
                labeled: o.records.iter().map(|x| x.labeled).collect(),
                members_trained: o.members_trained.clone(),
                wall_time: o.records.iter().map(|x| x.wall_time).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut log = String::new();
    for (r, rf) in references.iter().enumerate() {
        let _ = writeln!(log, "reference rep={r} accuracy={} loc_mse={}", rf.accuracy, rf.loc_mse);
    }
    for j in &jobs {
        for (k, ((&l, &m), &t)) in j.labeled.iter().zip(&j.members_trained).zip(&j.wall_time).enumerate() {
            let _ = writeln!(
                log,
                "strategy={} rep={} step={k} labeled={l} members_trained={m} wall_time={t:.3}",
                j.strategy, j.rep
            );
        }
    }
    csvio::write_atomic(&out.join(RUN_LOG), log.as_bytes())?;
    Ok(RunSummary {
        hash,
        classes,
        references,
        jobs,
    })
}
