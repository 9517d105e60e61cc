//! Region-proposal simulator standing in for the 2D image detector.
//!
//! IoU is a scalar draw per proposal: only its band decides pool membership.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LOC_DIM};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Name of the extra class appended for proposals that do not cover an object.
pub const BACKGROUND: &str = "Background";

/// Lower IoU bound of a positive proposal (exclusive).
pub const POSITIVE_IOU: f64 = 0.5;
/// Upper IoU bound of a background proposal (exclusive).
pub const BACKGROUND_IOU: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalProfile {
    /// Per-class probability that the detector emits a proposal for an object.
    pub recall: Vec<f64>,
    /// Share of background proposals among emitted positive + background proposals.
    pub background_fraction: f64,
    /// Ambiguous-band (IoU 0.2 to 0.5) proposals per surviving object; test split only.
    pub ambiguous_fraction: f64,
}

impl ProposalProfile {
    /// Small Vehicle and Human recall of the RGB detector.
    pub fn rgb_detector() -> Self {
        Self {
            recall: vec![0.917, 0.862],
            background_fraction: 0.2,
            ambiguous_fraction: 0.1,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.recall.len() != classes {
            return Err(Error::Config(format!(
                "{} recall values for {classes} classes",
                self.recall.len()
            )));
        }
        if let Some(r) = self.recall.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!("recall {r} outside (0, 1]")));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(Error::Config("background_fraction must lie in [0, 1)".into()));
        }
        if !(self.ambiguous_fraction >= 0.0 && self.ambiguous_fraction.is_finite()) {
            return Err(Error::Config("ambiguous_fraction must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalPool {
    /// Objects first (original order), then background, then the ambiguous band.
    /// Class list is the source classes plus [`BACKGROUND`].
    pub dataset: Dataset,
    pub iou: Vec<f64>,
    /// Source object index for object proposals, `None` for background and ambiguous ones.
    pub source: Vec<Option<usize>>,
    /// Objects the detector missed.
    pub dropped: Vec<usize>,
}

impl ProposalPool {
    pub fn background_class(&self) -> usize {
        self.dataset.num_classes() - 1
    }
}

/// Clutter built from a real crop with its values permuted: same marginals, no structure.
fn clutter(d: &Dataset, rng: &mut RngStream) -> Vec<f64> {
    let mut v = d.features().row(rng.below(d.len())).to_vec();
    rng.shuffle(&mut v);
    v
}

pub fn simulate_proposals(
    d: &Dataset,
    profile: &ProposalProfile,
    split: Split,
    stream: &RngStream,
) -> Result<ProposalPool> {
    profile.validate(d.num_classes())?;
    let mut keep_rng = stream.named("recall");
    let mut iou_rng = stream.named("iou");
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (i, &label) in d.labels().iter().enumerate() {
        if keep_rng.uniform() < profile.recall[label] {
            kept.push(i);
        } else {
            dropped.push(i);
        }
    }
    let objects = d.gather(&kept);
    let mut iou: Vec<f64> = kept
        .iter()
        .map(|_| 1.0 - (1.0 - POSITIVE_IOU) * iou_rng.uniform())
        .collect();
    let mut source: Vec<Option<usize>> = kept.iter().map(|&i| Some(i)).collect();

    let f = profile.background_fraction;
    let n_bg = (f / (1.0 - f) * kept.len() as f64).round() as usize;
    let n_amb = match split {
        Split::Train => 0,
        Split::Test => (profile.ambiguous_fraction * kept.len() as f64).round() as usize,
    };
    if (n_bg + n_amb > 0) && d.is_empty() {
        return Err(Error::Contract("cannot build clutter from an empty dataset".into()));
    }

    let bg_class = d.num_classes();
    let mut feats = objects.features.into_data();
    let mut labels = objects.labels;
    let mut locs = objects.locations.into_data();
    let mut mask = objects.loc_mask;
    let mut bg_rng = stream.named("background");
    for _ in 0..n_bg {
        feats.extend(clutter(d, &mut bg_rng));
        iou.push(BACKGROUND_IOU * iou_rng.uniform());
    }
    let mut amb_rng = stream.named("ambiguous");
    for _ in 0..n_amb {
        // Part of an object plus clutter: overlap in the ambiguous band.
        let obj = d.features().row(amb_rng.below(d.len())).to_vec();
        let noise = clutter(d, &mut amb_rng);
        let w = amb_rng.uniform_range(BACKGROUND_IOU, POSITIVE_IOU);
        feats.extend(obj.iter().zip(&noise).map(|(a, b)| w * a + (1.0 - w) * b));
        iou.push(w);
    }
    let extra = n_bg + n_amb;
    labels.extend(std::iter::repeat_n(bg_class, extra));
    locs.extend(std::iter::repeat_n(0.0, extra * LOC_DIM));
    mask.extend(std::iter::repeat_n(false, extra));
    source.extend(std::iter::repeat_n(None, extra));

    let n = labels.len();
    let mut shape = d.features().shape().to_vec();
    shape[0] = n;
    let mut names = d.class_names().to_vec();
    names.push(BACKGROUND.into());
    let dataset = Dataset::new(
        Tensor::new(shape, feats)?,
        labels,
        Tensor::new(vec![n, LOC_DIM], locs)?,
        mask,
        names,
    )?;
    Ok(ProposalPool {
        dataset,
        iou,
        source,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_cluster_dataset, ClassProfile, ClusterParams};

    fn objects(n: usize) -> Dataset {
        let p = ClassProfile::proposal_objects();
        let params = ClusterParams {
            feature_dim: 4,
            separation: 3.0,
            loc_coupling: 1.0,
        };
        gen_cluster_dataset(&p, n, 2, &params, &RngStream::new(11, 0)).unwrap().0
    }

    #[test]
    fn perfect_detector_keeps_everything() {
        let d = objects(300);
        let pp = ProposalProfile {
            recall: vec![1.0, 1.0],
            background_fraction: 0.0,
            ambiguous_fraction: 0.0,
        };
        let pool = simulate_proposals(&d, &pp, Split::Train, &RngStream::new(1, 1)).unwrap();
        assert!(pool.dropped.is_empty());
        assert_eq!(pool.dataset.features(), d.features());
        assert_eq!(pool.dataset.labels(), d.labels());
        assert_eq!(pool.dataset.locations(), d.locations());
        assert!(pool.iou.iter().all(|&u| u > 0.5 && u <= 1.0));
    }

    #[test]
    fn survivors_keep_ground_truth_and_background_is_masked() {
        let d = objects(500);
        let pool = simulate_proposals(&d, &ProposalProfile::rgb_detector(), Split::Test, &RngStream::new(2, 0)).unwrap();
        let bg = pool.background_class();
        let mut amb = 0;
        for (j, src) in pool.source.iter().enumerate() {
            match src {
                Some(i) => {
                    assert_eq!(pool.dataset.labels()[j], d.labels()[*i]);
                    assert_eq!(pool.dataset.locations().row(j), d.locations().row(*i));
                    assert_eq!(pool.dataset.features().row(j), d.features().row(*i));
                    assert!(pool.iou[j] > 0.5);
                }
                None => {
                    assert_eq!(pool.dataset.labels()[j], bg);
                    assert!(!pool.dataset.loc_mask()[j]);
                    assert!(pool.iou[j] < 0.5);
                    if pool.iou[j] >= 0.2 {
                        amb += 1;
                    }
                }
            }
        }
        assert!(amb > 0);
        let train = simulate_proposals(&d, &ProposalProfile::rgb_detector(), Split::Train, &RngStream::new(2, 0)).unwrap();
        assert!(train.iou.iter().all(|&u| !(0.2..=0.5).contains(&u)));
        let objects = pool.source.iter().filter(|s| s.is_some()).count();
        assert_eq!(objects + pool.dropped.len(), d.len());
    }

    #[test]
    fn rejects_bad_recall() {
        let d = objects(20);
        let pp = ProposalProfile {
            recall: vec![0.0, 1.0],
            ..ProposalProfile::rgb_detector()
        };
        assert!(simulate_proposals(&d, &pp, Split::Train, &RngStream::new(0, 0)).is_err());
    }
}
