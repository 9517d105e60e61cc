//! The pool-based query loop: seed set, train, score, select, label, retrain, evaluate.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, CalibrationCurve, Confidence, MetricsRecord, Reference, Sparsification};
use crate::nn::{self, Mode, Network, NetworkConfig};
use crate::rng::RngStream;
use crate::uncertainty::{self, AcquisitionScores, Committee, PredictiveSet, Strategy};

/// Strategy tag of the seed-set entry in a query log.
pub const SEED_TAG: &str = "seed";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryEntry {
    pub step: usize,
    pub strategy: String,
    pub indices: Vec<usize>,
}

/// A class with fewer samples than the seed quota.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shortfall {
    pub class: usize,
    pub wanted: usize,
    pub taken: usize,
}

/// Disjoint labeled / unlabeled index sets over a training pool, plus the query history.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolState {
    total: usize,
    labeled: BTreeSet<usize>,
    unlabeled: BTreeSet<usize>,
    log: Vec<QueryEntry>,
    shortfall: Vec<Shortfall>,
}

impl PoolState {
    /// Everything unlabeled.
    pub fn new(total: usize) -> Self {
        Self {
            total,
            labeled: BTreeSet::new(),
            unlabeled: (0..total).collect(),
            log: Vec::new(),
            shortfall: Vec::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn labeled(&self) -> &BTreeSet<usize> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.unlabeled
    }

    pub fn labeled_vec(&self) -> Vec<usize> {
        self.labeled.iter().copied().collect()
    }

    pub fn unlabeled_vec(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    pub fn log(&self) -> &[QueryEntry] {
        &self.log
    }

    pub fn shortfall(&self) -> &[Shortfall] {
        &self.shortfall
    }

    /// Moves `indices` from unlabeled to labeled and logs them.
    pub fn commit(&mut self, step: usize, strategy: &str, indices: &[usize]) -> Result<()> {
        self.check_unlabeled(indices)?;
        for &i in indices {
            self.unlabeled.remove(&i);
            self.labeled.insert(i);
        }
        self.log.push(QueryEntry {
            step,
            strategy: strategy.to_string(),
            indices: indices.to_vec(),
        });
        Ok(())
    }

    fn check_unlabeled(&self, indices: &[usize]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in indices {
            if !seen.insert(i) {
                return Err(Error::Contract(format!("index {i} requested twice")));
            }
            if !self.unlabeled.contains(&i) {
                return Err(Error::Contract(if self.labeled.contains(&i) {
                    format!("index {i} is already labeled")
                } else {
                    format!("index {i} is outside the pool of {}", self.total)
                }));
            }
        }
        Ok(())
    }

    /// `labeled` and `unlabeled` partition `0..total`.
    pub fn check_partition(&self) -> Result<()> {
        let ok = self.labeled.len() + self.unlabeled.len() == self.total
            && self.labeled.is_disjoint(&self.unlabeled)
            && self.labeled.iter().chain(&self.unlabeled).all(|&i| i < self.total);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("labeled/unlabeled sets no longer partition the pool".into()))
        }
    }

    /// One line per step: `step<TAB>strategy<TAB>i,j,k`.
    pub fn query_log_text(&self) -> String {
        let mut out = String::new();
        for e in &self.log {
            let idx: Vec<String> = e.indices.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{}\t{}\t{}", e.step, e.strategy, idx.join(","));
        }
        out
    }
}

pub fn parse_query_log(text: &str) -> Result<Vec<QueryEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |r: &str| Error::parse(format!("query log line {}", n + 1), r);
            let mut parts = line.split('\t');
            let step = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad step number"))?;
            let strategy = parts.next().ok_or_else(|| bad("missing strategy"))?.to_string();
            let list = parts.next().ok_or_else(|| bad("missing index list"))?;
            let indices = if list.is_empty() {
                Vec::new()
            } else {
                list.split(',')
                    .map(|s| s.parse().map_err(|_| bad("bad index")))
                    .collect::<Result<_>>()?
            };
            if parts.next().is_some() {
                return Err(bad("extra fields"));
            }
            Ok(QueryEntry { step, strategy, indices })
        })
        .collect()
}

/// Draws up to `per_class` indices of every class uniformly without replacement and labels them
/// as step 0. Classes with fewer samples contribute everything they have.
pub fn init_seed_set(d: &Dataset, per_class: usize, stream: &RngStream) -> Result<PoolState> {
    if d.is_empty() {
        return Err(Error::Contract("cannot seed an empty dataset".into()));
    }
    let mut by_class = vec![Vec::new(); d.num_classes()];
    for (i, &c) in d.labels().iter().enumerate() {
        by_class[c].push(i);
    }
    let mut pool = PoolState::new(d.len());
    let mut chosen = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        let mut rng = stream.substream(c as u64);
        if members.len() <= per_class {
            chosen.extend_from_slice(members);
            if members.len() < per_class {
                log::warn!("class {c}: only {} of {per_class} seed samples available", members.len());
                pool.shortfall.push(Shortfall {
                    class: c,
                    wanted: per_class,
                    taken: members.len(),
                });
            }
        } else {
            let perm = rng.permutation(members.len());
            chosen.extend(perm[..per_class].iter().map(|&j| members[j]));
        }
    }
    chosen.sort_unstable();
    pool.commit(0, SEED_TAG, &chosen)?;
    Ok(pool)
}

/// The `k` best-scoring ids, best first; equal scores go to the lower id.
pub fn select_top_k(scores: &[f64], ids: &[usize], k: usize) -> Result<Vec<usize>> {
    if scores.len() != ids.len() {
        return Err(Error::Dimension(format!("{} scores for {} ids", scores.len(), ids.len())));
    }
    if k > ids.len() {
        return Err(Error::Contract(format!("cannot select {k} of {} samples", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    Ok(order[..k].iter().map(|&j| ids[j]).collect())
}

/// Simulated annotator backed by the pool's stored ground truth.
pub struct Oracle<'a> {
    truth: &'a Dataset,
}

impl<'a> Oracle<'a> {
    pub fn new(truth: &'a Dataset) -> Self {
        Self { truth }
    }

    /// Class labels and location targets (with their mask bits) of still-unlabeled samples.
    pub fn label(&self, pool: &PoolState, indices: &[usize]) -> Result<Batch> {
        pool.check_unlabeled(indices)?;
        Ok(self.truth.gather(indices))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StopRule {
    /// Stop after `max_steps` query steps.
    MaxSteps,
    /// Stop when accuracy improved by less than `epsilon` over the last `window` steps.
    Convergence { window: usize, epsilon: f64 },
    /// Stop once test accuracy reaches `accuracy`.
    Target { accuracy: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub seed_per_class: usize,
    /// Samples queried per step.
    pub query_size: usize,
    /// Hard cap on query steps; every stop rule also ends here.
    pub max_steps: usize,
    pub strategy: Strategy,
    /// MC-dropout passes.
    pub passes: usize,
    /// Ensemble size.
    pub ensemble: usize,
    pub stop: StopRule,
    pub calibration_bins: usize,
    pub sparsification_steps: usize,
    /// Keep every step's pool scores and predictive sets in the outcome.
    #[serde(default)]
    pub keep_predictions: bool,
}

impl LoopConfig {
    /// 200 seeds per class, 200 queries per step, 60 steps, 20 passes, 5 members.
    pub fn paper(strategy: Strategy) -> Self {
        Self {
            seed_per_class: 200,
            query_size: 200,
            max_steps: 60,
            strategy,
            passes: 20,
            ensemble: 5,
            stop: StopRule::MaxSteps,
            calibration_bins: 10,
            sparsification_steps: 20,
            keep_predictions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.query_size == 0 {
            return bad("query_size must be at least 1");
        }
        if self.passes == 0 {
            return bad("passes must be at least 1");
        }
        if self.ensemble == 0 {
            return bad("ensemble must have at least 1 member");
        }
        if self.calibration_bins < 2 || self.sparsification_steps < 2 {
            return bad("calibration_bins and sparsification_steps must be at least 2");
        }
        if let StopRule::Convergence { window, .. } = self.stop {
            if window == 0 {
                return bad("convergence window must be at least 1");
            }
        }
        Ok(())
    }
}

pub fn stop_condition(history: &[MetricsRecord], cfg: &LoopConfig) -> bool {
    let Some(last) = history.last() else {
        return false;
    };
    if last.step >= cfg.max_steps {
        return true;
    }
    match cfg.stop {
        StopRule::MaxSteps => false,
        StopRule::Convergence { window, epsilon } => {
            history.len() > window && last.accuracy - history[history.len() - 1 - window].accuracy < epsilon
        }
        StopRule::Target { accuracy } => last.accuracy >= accuracy,
    }
}

/// Calibration and sparsification curves of one step's evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCurves {
    pub calibration: CalibrationCurve,
    pub sparsification: Sparsification,
}

#[derive(Clone, Debug)]
pub struct LoopOutcome {
    pub records: Vec<MetricsRecord>,
    pub curves: Vec<StepCurves>,
    /// Networks trained at each step.
    pub members_trained: Vec<usize>,
    pub pool: PoolState,
    /// `(step, scored ids, scores)` for every scoring round, when requested.
    pub predictions: Vec<PoolScores>,
}

#[derive(Clone, Debug)]
pub struct PoolScores {
    /// Step whose model produced the scores.
    pub step: usize,
    pub ids: Vec<usize>,
    pub scores: AcquisitionScores,
}

/// Trains the model(s) a strategy needs from scratch. Ensemble member `e` uses sub-stream `e`;
/// single models use sub-stream 0, so they coincide with ensemble member 0.
pub fn train_committee(
    strategy: Strategy,
    cfg: &NetworkConfig,
    data: &Batch,
    members: usize,
    stream: &RngStream,
) -> Result<Committee> {
    if strategy.uses_ensemble() {
        let nets = (0..members)
            .into_par_iter()
            .map(|e| Ok(nn::train(cfg, data, &stream.substream(e as u64))?.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Committee::Ensemble(nets))
    } else {
        Ok(Committee::Single(nn::train(cfg, data, &stream.substream(0))?.0))
    }
}

/// Test accuracy and localization MSE of a single deterministic pass.
pub fn evaluate(net: &Network, test: &Dataset) -> Result<Reference> {
    let p = net.forward(test.features(), Mode::Deterministic)?;
    Ok(Reference {
        accuracy: metrics::accuracy(&metrics::argmax_rows(&p.class_probs), test.labels())?,
        loc_mse: metrics::loc_mse(&p.loc, test.locations(), test.loc_mask())?,
    })
}

/// Test-set predictive distribution of the strategy's estimator.
fn test_predictive(
    strategy: Strategy,
    committee: &Committee,
    test: &Dataset,
    passes: usize,
    stream: &RngStream,
) -> Result<(PredictiveSet, Vec<f64>)> {
    let x = test.features();
    let ids: Vec<usize> = (0..test.len()).collect();
    let ps = match (strategy, committee) {
        (Strategy::McEntropy | Strategy::McMi, Committee::Single(net)) => {
            uncertainty::mc_dropout_predict(net, x, &ids, passes, stream)?
        }
        (_, Committee::Ensemble(nets)) => uncertainty::ensemble_predict(nets, x)?,
        (_, Committee::Single(net)) => uncertainty::softmax_single(net, x)?,
    };
    let unc = match strategy {
        Strategy::McMi | Strategy::EnsMi => uncertainty::mutual_information(&ps)?.scores,
        _ => uncertainty::shannon_entropy(ps.mean())?,
    };
    Ok((ps, unc))
}

/// Runs the query loop on `train` and evaluates every step on `test`.
///
/// Sub-streams of `stream`: `seed-set`, `train` (per step), `query` (per step), `eval` (per
/// step). The seed set depends only on `stream`, so runs of different strategies under the same
/// stream share it.
pub fn run_loop(
    train: &Dataset,
    test: &Dataset,
    cfg: &LoopConfig,
    net_cfg: &NetworkConfig,
    stream: &RngStream,
) -> Result<LoopOutcome> {
    cfg.validate()?;
    net_cfg.validate()?;
    if train.num_classes() != net_cfg.num_classes || test.num_classes() != net_cfg.num_classes {
        return Err(Error::Config(format!(
            "network has {} classes, datasets have {} / {}",
            net_cfg.num_classes,
            train.num_classes(),
            test.num_classes()
        )));
    }
    let classes = train.num_classes();
    let mut pool = init_seed_set(train, cfg.seed_per_class, &stream.named("seed-set"))?;
    let oracle = Oracle::new(train);
    let (train_s, query_s, eval_s) = (stream.named("train"), stream.named("query"), stream.named("eval"));
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut curves = Vec::new();
    let mut members_trained = Vec::new();
    let mut predictions = Vec::new();
    let mut queried = vec![0usize; classes];
    let mut step = 0usize;
    loop {
        let started = Instant::now();
        let labeled = pool.labeled_vec();
        let data = train.gather(&labeled);
        let committee = train_committee(cfg.strategy, net_cfg, &data, cfg.ensemble, &train_s.substream(step as u64))?;
        members_trained.push(committee.size());
        log::info!(
            "{} step {step}: {} labeled, trained {} member(s)",
            cfg.strategy,
            labeled.len(),
            committee.size()
        );

        let task = evaluate(committee.evaluation_model(), test)?;
        let (ps, unc) = test_predictive(cfg.strategy, &committee, test, cfg.passes, &eval_s.substream(step as u64))?;
        let calibration = metrics::calibration(ps.mean(), test.labels(), cfg.calibration_bins, Confidence::Argmax)?;
        let losses = metrics::cross_entropy_per_sample(ps.mean(), test.labels())?;
        let sparsification = metrics::sparsification(&losses, &unc, cfg.sparsification_steps)?;
        records.push(MetricsRecord {
            step,
            labeled: labeled.len(),
            accuracy: task.accuracy,
            loc_mse: task.loc_mse,
            calibration_error: calibration.error,
            calibration_error_weighted: calibration.weighted_error,
            error_sum: sparsification.error_sum,
            queried: std::mem::replace(&mut queried, vec![0; classes]),
            wall_time: 0.0,
        });
        curves.push(StepCurves {
            calibration,
            sparsification,
        });
        pool.check_partition()?;

        if stop_condition(&records, cfg) || pool.unlabeled().is_empty() {
            records.last_mut().expect("pushed above").wall_time = started.elapsed().as_secs_f64();
            break;
        }

        let ids = pool.unlabeled_vec();
        let x = train.features().select_rows(&ids);
        let scores = uncertainty::score_pool(cfg.strategy, &committee, &x, &ids, cfg.passes, &query_s.substream(step as u64 + 1))?;
        let k = cfg.query_size.min(ids.len());
        let chosen = select_top_k(&scores.scores, &ids, k)?;
        let answers = oracle.label(&pool, &chosen)?;
        for &c in &answers.labels {
            queried[c] += 1;
        }
        step += 1;
        pool.commit(step, cfg.strategy.name(), &chosen)?;
        if cfg.keep_predictions {
            predictions.push(PoolScores {
                step: step - 1,
                ids,
                scores,
            });
        }
        records.last_mut().expect("pushed above").wall_time = started.elapsed().as_secs_f64();
    }
    Ok(LoopOutcome {
        records,
        curves,
        members_trained,
        pool,
        predictions,
    })
}

/// Trains one model on the whole pool and evaluates it.
pub fn train_reference(train: &Dataset, test: &Dataset, net_cfg: &NetworkConfig, stream: &RngStream) -> Result<(Network, Reference)> {
    let (net, _) = nn::train(net_cfg, &train.as_batch(), stream)?;
    let r = evaluate(&net, test)?;
    Ok((net, r))
}
