//! Predictive distributions from MC dropout and deep ensembles, and the acquisition scores built
//! on them.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{DropoutMasks, Mode, Network};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Class-probability matrices of `M` members (dropout passes or ensemble networks) and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSet {
    members: Tensor,
    mean: Tensor,
}

/// Mean written as `x0 + sum(x_t - x0) / M`: identical members give back `x0` bit for bit.
fn shifted_mean(values: impl Iterator<Item = f64>, first: f64, m: usize) -> f64 {
    let mut acc = 0.0;
    for v in values {
        acc += v - first;
    }
    first + acc / m as f64
}

impl PredictiveSet {
    pub fn from_members(members: Vec<Tensor>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Contract("predictive set needs at least one member".into()))?;
        if first.rank() != 2 {
            return Err(Error::Dimension(format!("member shape {:?} is not [n, C]", first.shape())));
        }
        let (n, c) = (first.shape()[0], first.shape()[1]);
        if let Some(bad) = members.iter().find(|t| t.shape() != [n, c]) {
            return Err(Error::Dimension(format!(
                "member shape {:?} differs from [{n}, {c}]",
                bad.shape()
            )));
        }
        let m = members.len();
        let mut mean = Tensor::zeros(&[n, c]);
        for (k, out) in mean.data_mut().iter_mut().enumerate() {
            let x0 = members[0].data()[k];
            *out = shifted_mean(members.iter().map(|t| t.data()[k]), x0, m);
        }
        let mut data = Vec::with_capacity(m * n * c);
        for t in &members {
            data.extend_from_slice(t.data());
        }
        Ok(Self {
            members: Tensor::new(vec![m, n, c], data)?,
            mean,
        })
    }

    pub fn num_members(&self) -> usize {
        self.members.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.mean.shape()[1]
    }

    /// `[M, n, C]`
    pub fn members(&self) -> &Tensor {
        &self.members
    }

    pub fn member(&self, m: usize) -> Tensor {
        let (n, c) = (self.len(), self.num_classes());
        Tensor::new(vec![n, c], self.members.row(m).to_vec()).expect("member slice")
    }

    /// `[n, C]`
    pub fn mean(&self) -> &Tensor {
        &self.mean
    }
}

/// One deterministic pass.
pub fn softmax_single(net: &Network, inputs: &Tensor) -> Result<PredictiveSet> {
    let p = net.forward(inputs, Mode::Deterministic)?;
    PredictiveSet::from_members(vec![p.class_probs])
}

/// `passes` train-mode passes at the training dropout rate.
///
/// Sample `i` draws its masks from `stream.substream(ids[i])`, so a sample's passes do not
/// depend on which other samples share the batch or on thread scheduling. The conv trunk has no
/// dropout and is evaluated once.
pub fn mc_dropout_predict(
    net: &Network,
    inputs: &Tensor,
    ids: &[usize],
    passes: usize,
    stream: &RngStream,
) -> Result<PredictiveSet> {
    if passes == 0 {
        return Err(Error::Config("MC dropout needs at least one pass".into()));
    }
    let flat = net.features(inputs)?;
    if ids.len() != flat.rows() {
        return Err(Error::Dimension(format!(
            "{} sample ids for {} inputs",
            ids.len(),
            flat.rows()
        )));
    }
    let cfg = net.config();
    if cfg.dropout == 0.0 {
        let (p, ..) = net.head(flat, None, false)?;
        return PredictiveSet::from_members(vec![p.class_probs; passes]);
    }
    // Per sample: passes x layers x width.
    let draws: Vec<Vec<Vec<Vec<f64>>>> = ids
        .par_iter()
        .map(|&id| {
            let mut rng = stream.substream(id as u64);
            (0..passes).map(|_| DropoutMasks::sample_row(cfg, &mut rng)).collect()
        })
        .collect();
    let members = (0..passes)
        .into_par_iter()
        .map(|t| {
            let rows: Vec<Vec<Vec<f64>>> = draws.iter().map(|d| d[t].clone()).collect();
            let masks = DropoutMasks::from_sample_rows(cfg, &rows);
            Ok(net.head(flat.clone(), Some(&masks), false)?.0.class_probs)
        })
        .collect::<Result<Vec<_>>>()?;
    PredictiveSet::from_members(members)
}

/// One deterministic pass per member network.
pub fn ensemble_predict(nets: &[Network], inputs: &Tensor) -> Result<PredictiveSet> {
    let first = nets
        .first()
        .ok_or_else(|| Error::Contract("ensemble needs at least one member".into()))?;
    if nets.iter().any(|n| n.config() != first.config()) {
        return Err(Error::Config("ensemble members do not share a network config".into()));
    }
    let members = nets
        .par_iter()
        .map(|n| Ok(n.forward(inputs, Mode::Deterministic)?.class_probs))
        .collect::<Result<Vec<_>>>()?;
    PredictiveSet::from_members(members)
}

fn row_entropy(row: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in row {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Entropy in nats of each row; rows must be distributions.
pub fn shannon_entropy(probs: &Tensor) -> Result<Vec<f64>> {
    if probs.rank() != 2 {
        return Err(Error::Dimension(format!("expected [n, C], got {:?}", probs.shape())));
    }
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Numeric(format!("row {i} is not a distribution (sum {sum})")));
            }
            Ok(row_entropy(row))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MutualInformation {
    /// Clamped at zero.
    pub scores: Vec<f64>,
    /// Before clamping; may be a rounding-level negative.
    pub raw: Vec<f64>,
}

/// Entropy of the mean minus the mean member entropy, over the same member set.
pub fn mutual_information(ps: &PredictiveSet) -> Result<MutualInformation> {
    let h_mean = shannon_entropy(ps.mean())?;
    let m = ps.num_members();
    let member_h: Vec<Vec<f64>> = (0..m)
        .map(|k| shannon_entropy(&ps.member(k)))
        .collect::<Result<_>>()?;
    let raw: Vec<f64> = (0..ps.len())
        .map(|i| h_mean[i] - shifted_mean(member_h.iter().map(|h| h[i]), member_h[0][i], m))
        .collect();
    for (i, r) in raw.iter().enumerate() {
        if *r < 0.0 {
            log::debug!("sample {i}: mutual information {r:e} clamped to 0");
        }
    }
    Ok(MutualInformation {
        scores: raw.iter().map(|&r| r.max(0.0)).collect(),
        raw,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Random,
    SoftmaxEntropy,
    McEntropy,
    McMi,
    EnsEntropy,
    EnsMi,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Random,
        Strategy::SoftmaxEntropy,
        Strategy::McEntropy,
        Strategy::McMi,
        Strategy::EnsEntropy,
        Strategy::EnsMi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::SoftmaxEntropy => "softmax-entropy",
            Strategy::McEntropy => "mc-entropy",
            Strategy::McMi => "mc-mi",
            Strategy::EnsEntropy => "ens-entropy",
            Strategy::EnsMi => "ens-mi",
        }
    }

    pub fn uses_ensemble(self) -> bool {
        matches!(self, Strategy::EnsEntropy | Strategy::EnsMi)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Strategy::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown strategy `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

impl serde::Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The trained model(s) of one query step.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Committee {
    Single(Network),
    Ensemble(Vec<Network>),
}

impl Committee {
    /// The network used for test-set evaluation: the single model or ensemble member 0.
    pub fn evaluation_model(&self) -> &Network {
        match self {
            Committee::Single(n) => n,
            Committee::Ensemble(v) => &v[0],
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Committee::Single(_) => 1,
            Committee::Ensemble(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionScores {
    pub strategy: Strategy,
    /// One non-negative score per scored sample, in input order.
    pub scores: Vec<f64>,
    /// Unclamped mutual information for MI strategies.
    pub raw: Option<Vec<f64>>,
    /// The distribution the scores came from (absent for the random strategy).
    pub predictive: Option<PredictiveSet>,
}

/// Scores pool samples for `strategy`. `ids` are the samples' dataset indices; they address the
/// per-sample random sub-streams (dropout masks, random scores).
pub fn score_pool(
    strategy: Strategy,
    committee: &Committee,
    inputs: &Tensor,
    ids: &[usize],
    passes: usize,
    stream: &RngStream,
) -> Result<AcquisitionScores> {
    let (scores, raw, predictive) = predict_for(strategy, committee, inputs, ids, passes, stream)?;
    Ok(AcquisitionScores {
        strategy,
        scores,
        raw,
        predictive,
    })
}

type Scored = (Vec<f64>, Option<Vec<f64>>, Option<PredictiveSet>);

fn predict_for(
    strategy: Strategy,
    committee: &Committee,
    inputs: &Tensor,
    ids: &[usize],
    passes: usize,
    stream: &RngStream,
) -> Result<Scored> {
    if ids.len() != inputs.rows() {
        return Err(Error::Dimension(format!("{} ids for {} inputs", ids.len(), inputs.rows())));
    }
    let entropy = |ps: PredictiveSet| Ok((shannon_entropy(ps.mean())?, None, Some(ps)));
    let mi = |ps: PredictiveSet| {
        let m = mutual_information(&ps)?;
        Ok((m.scores, Some(m.raw), Some(ps)))
    };
    match (strategy, committee) {
        (Strategy::Random, _) => Ok((
            ids.iter().map(|&i| stream.substream(i as u64).uniform()).collect(),
            None,
            None,
        )),
        (Strategy::SoftmaxEntropy, Committee::Single(net)) => entropy(softmax_single(net, inputs)?),
        (Strategy::McEntropy, Committee::Single(net)) => {
            entropy(mc_dropout_predict(net, inputs, ids, passes, stream)?)
        }
        (Strategy::McMi, Committee::Single(net)) => mi(mc_dropout_predict(net, inputs, ids, passes, stream)?),
        (Strategy::EnsEntropy, Committee::Ensemble(nets)) => entropy(ensemble_predict(nets, inputs)?),
        (Strategy::EnsMi, Committee::Ensemble(nets)) => mi(ensemble_predict(nets, inputs)?),
        (s, c) => Err(Error::Config(format!(
            "strategy {s} cannot score with a committee of {} model(s) of kind {}",
            c.size(),
            match c {
                Committee::Single(_) => "single",
                Committee::Ensemble(_) => "ensemble",
            }
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{InputShape, NetworkConfig};
    use proptest::prelude::{prop, prop_assert, proptest};

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn tiny_net(dropout: f64, seed: u64) -> Network {
        let mut cfg = NetworkConfig::desk(InputShape::Flat { dim: 3 }, 3);
        cfg.fc_widths = vec![16, 16];
        cfg.dropout = dropout;
        Network::init(cfg, &RngStream::new(seed, 0)).unwrap()
    }

    fn inputs(n: usize) -> Tensor {
        let mut r = RngStream::new(99, 0);
        Tensor::from_fn(&[n, 3], |_| r.normal())
    }

    #[test]
    fn entropy_examples() {
        let h = shannon_entropy(&rows(&[&[0.25; 4], &[0.0, 1.0, 0.0, 0.0], &[0.5, 0.5, 0.0, 0.0]])).unwrap();
        assert!((h[0] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(h[1], 0.0);
        assert!((h[2] - 2f64.ln()).abs() < 1e-12);
        assert!(shannon_entropy(&rows(&[&[0.5, 0.6]])).is_err());
    }

    #[test]
    fn mi_examples() {
        let same = PredictiveSet::from_members(vec![rows(&[&[0.2, 0.3, 0.5]]); 3]).unwrap();
        assert_eq!(mutual_information(&same).unwrap().raw, vec![0.0]);
        let split = PredictiveSet::from_members(vec![rows(&[&[1.0, 0.0]]), rows(&[&[0.0, 1.0]])]).unwrap();
        assert_eq!(split.mean().data(), &[0.5, 0.5]);
        let mi = mutual_information(&split).unwrap();
        assert!((mi.scores[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mi_matches_scalar_recomputation() {
        let mut r = RngStream::new(5, 5);
        for _ in 0..50 {
            let members: Vec<Tensor> = (0..4)
                .map(|_| {
                    let mut t = Tensor::from_fn(&[6, 5], |_| r.uniform() + 1e-3);
                    for i in 0..6 {
                        let s: f64 = t.row(i).iter().sum();
                        t.row_mut(i).iter_mut().for_each(|v| *v /= s);
                    }
                    t
                })
                .collect();
            let ps = PredictiveSet::from_members(members.clone()).unwrap();
            let mi = mutual_information(&ps).unwrap();
            for i in 0..6 {
                let mean: Vec<f64> = (0..5).map(|c| members.iter().map(|m| m.get2(i, c)).sum::<f64>() / 4.0).collect();
                let h = |p: &[f64]| -p.iter().map(|&x| x * x.ln()).sum::<f64>();
                let expect = h(&mean) - members.iter().map(|m| h(m.row(i))).sum::<f64>() / 4.0;
                assert!((mi.raw[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_single_is_the_deterministic_pass() {
        let net = tiny_net(0.5, 1);
        let x = inputs(7);
        let ps = softmax_single(&net, &x).unwrap();
        assert_eq!(ps.num_members(), 1);
        assert_eq!(ps.mean(), &net.forward(&x, Mode::Deterministic).unwrap().class_probs);
        assert_eq!(ps.mean(), &ps.member(0));
    }

    #[test]
    fn mc_dropout_degenerate_cases() {
        let x = inputs(5);
        let ids: Vec<usize> = (0..5).collect();
        let s = RngStream::new(3, 0);
        let flat = tiny_net(0.0, 2);
        let ps = mc_dropout_predict(&flat, &x, &ids, 8, &s).unwrap();
        let det = flat.forward(&x, Mode::Deterministic).unwrap().class_probs;
        for m in 0..8 {
            assert_eq!(ps.member(m), det);
        }
        let drop = tiny_net(0.5, 2);
        let one = mc_dropout_predict(&drop, &x, &ids, 1, &s).unwrap();
        assert_eq!(one.mean(), &one.member(0));
        assert!(mc_dropout_predict(&drop, &x, &ids, 0, &s).is_err());
    }

    #[test]
    fn mc_dropout_is_partition_independent() {
        let net = tiny_net(0.5, 4);
        let x = inputs(6);
        let ids = [10, 11, 12, 13, 14, 15];
        let s = RngStream::new(8, 1);
        let all = mc_dropout_predict(&net, &x, &ids, 5, &s).unwrap();
        let part = mc_dropout_predict(&net, &x.select_rows(&[3, 4]), &ids[3..5], 5, &s).unwrap();
        assert_eq!(part.mean().row(0), all.mean().row(3));
        assert_eq!(part.mean().row(1), all.mean().row(4));
    }

    #[test]
    fn mc_dropout_mean_converges() {
        let net = tiny_net(0.5, 6);
        let x = inputs(4);
        let ids = [0, 1, 2, 3];
        let a = mc_dropout_predict(&net, &x, &ids, 1000, &RngStream::new(1, 0)).unwrap();
        let b = mc_dropout_predict(&net, &x, &ids, 10_000, &RngStream::new(2, 0)).unwrap();
        for (p, q) in a.mean().data().iter().zip(b.mean().data()) {
            assert!((p - q).abs() < 0.02, "{p} vs {q}");
        }
    }

    #[test]
    fn ensemble_cases() {
        let x = inputs(5);
        let a = tiny_net(0.5, 1);
        let single = ensemble_predict(std::slice::from_ref(&a), &x).unwrap();
        assert_eq!(single, softmax_single(&a, &x).unwrap());
        let twins = ensemble_predict(&[a.clone(), a.clone(), a.clone()], &x).unwrap();
        assert_eq!(twins.mean(), &twins.member(0));
        let mut other = NetworkConfig::desk(InputShape::Flat { dim: 3 }, 3);
        other.fc_widths = vec![4];
        let b = Network::init(other, &RngStream::new(0, 0)).unwrap();
        assert!(matches!(ensemble_predict(&[a, b], &x), Err(Error::Config(_))));
    }

    #[test]
    fn scoring_dispatch() {
        let x = inputs(9);
        let ids: Vec<usize> = (0..9).collect();
        let s = RngStream::new(2, 2);
        let net = tiny_net(0.0, 3);
        let single = Committee::Single(net.clone());
        let soft = score_pool(Strategy::SoftmaxEntropy, &single, &x, &ids, 4, &s).unwrap();
        let ens = score_pool(Strategy::EnsEntropy, &Committee::Ensemble(vec![net]), &x, &ids, 4, &s).unwrap();
        assert_eq!(soft.scores, ens.scores);
        let mc = score_pool(Strategy::McEntropy, &single, &x, &ids, 4, &s).unwrap();
        assert_eq!(mc.scores, soft.scores);
        let mi = score_pool(Strategy::McMi, &single, &x, &ids, 4, &s).unwrap();
        assert!(mi.scores.iter().all(|&v| v == 0.0));
        let r1 = score_pool(Strategy::Random, &single, &x, &ids, 4, &s).unwrap();
        let r2 = score_pool(Strategy::Random, &single, &x, &ids, 4, &s).unwrap();
        assert_eq!(r1, r2);
        assert!(score_pool(Strategy::EnsMi, &single, &x, &ids, 4, &s).is_err());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("bald".parse::<Strategy>().is_err());
    }

    fn distribution(len: usize) -> impl Strategy2<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
        })
    }

    use proptest::strategy::Strategy as Strategy2;

    proptest! {
        #[test]
        fn mi_is_bounded_by_entropy(
            members in (1usize..6, 2usize..6).prop_flat_map(|(m, c)| prop::collection::vec(distribution(c), m))
        ) {
            let ts: Vec<Tensor> = members.iter().map(|r| Tensor::from_rows(std::slice::from_ref(r)).unwrap()).collect();
            let ps = PredictiveSet::from_members(ts).unwrap();
            let h = shannon_entropy(ps.mean()).unwrap()[0];
            let mi = mutual_information(&ps).unwrap().scores[0];
            prop_assert!(mi >= 0.0);
            prop_assert!(mi <= h + 1e-12);
        }

        #[test]
        fn scores_are_permutation_invariant(p in distribution(5), q in distribution(5)) {
            let a = PredictiveSet::from_members(vec![
                Tensor::from_rows(std::slice::from_ref(&p)).unwrap(),
                Tensor::from_rows(std::slice::from_ref(&q)).unwrap(),
            ]).unwrap();
            let b = PredictiveSet::from_members(vec![
                Tensor::from_rows(&[q.iter().rev().copied().collect()]).unwrap(),
                Tensor::from_rows(&[p.iter().rev().copied().collect()]).unwrap(),
            ]).unwrap();
            let (ma, mb) = (mutual_information(&a).unwrap().raw[0], mutual_information(&b).unwrap().raw[0]);
            prop_assert!((ma - mb).abs() < 1e-12);
        }
    }
}
