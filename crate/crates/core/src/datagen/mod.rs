//! Synthetic pools standing in for frustum crops, location target encoding, the region-proposal
//! simulator and the dataset container.

pub mod container;
mod proposals;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LOC_DIM};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use proposals::{simulate_proposals, ProposalPool, ProposalProfile, Split, BACKGROUND};

/// Normalization caps `(w_max, l_max, h_max, d_max)` in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationCaps {
    pub width: f64,
    pub length: f64,
    pub height: f64,
    pub distance: f64,
}

impl LocationCaps {
    fn as_array(&self) -> [f64; LOC_DIM] {
        [self.width, self.length, self.height, self.distance]
    }
}

/// Raw box size and ego distance in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocationGroundTruth {
    pub width: f64,
    pub length: f64,
    pub height: f64,
    pub distance: f64,
}

impl LocationGroundTruth {
    fn as_array(&self) -> [f64; LOC_DIM] {
        [self.width, self.length, self.height, self.distance]
    }
}

/// Encodes `(w, l, h, d)` as ratios to the caps; each component lands in `(0, 1]`.
pub fn encode_location(gt: &LocationGroundTruth, caps: &LocationCaps) -> Result<[f64; LOC_DIM]> {
    let raw = gt.as_array();
    let cap = caps.as_array();
    let mut out = [0.0; LOC_DIM];
    for k in 0..LOC_DIM {
        if !(cap[k] > 0.0 && cap[k].is_finite()) {
            return Err(Error::Encoding(format!("cap {} must be positive", cap[k])));
        }
        if !(raw[k] > 0.0) || raw[k] > cap[k] {
            return Err(Error::Encoding(format!(
                "component {k} value {} outside (0, {}]",
                raw[k], cap[k]
            )));
        }
        out[k] = raw[k] / cap[k];
    }
    Ok(out)
}

pub fn decode_location(t: &[f64; LOC_DIM], caps: &LocationCaps) -> LocationGroundTruth {
    LocationGroundTruth {
        width: t[0] * caps.width,
        length: t[1] * caps.length,
        height: t[2] * caps.height,
        distance: t[3] * caps.distance,
    }
}

/// One class of a synthetic pool: its share and the range of its raw location values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub fraction: f64,
    /// Lower bounds of `(w, l, h, d)`.
    pub loc_min: [f64; LOC_DIM],
    /// Upper bounds of `(w, l, h, d)`.
    pub loc_max: [f64; LOC_DIM],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub classes: Vec<ClassSpec>,
}

fn spec(name: &str, fraction: f64, loc_min: [f64; 4], loc_max: [f64; 4]) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        fraction,
        loc_min,
        loc_max,
    }
}

impl ClassProfile {
    /// Five-class KITTI-shaped pool: Small Vehicle 78%, Human 15.6%, Truck 2.7%, Tram 1.3%,
    /// Misc 2.4%.
    pub fn kitti() -> Self {
        Self {
            classes: vec![
                spec("Small Vehicle", 0.78, [1.4, 3.2, 1.3, 4.0], [2.2, 5.5, 2.2, 70.0]),
                spec("Human", 0.156, [0.4, 0.4, 1.0, 3.0], [0.9, 1.9, 2.0, 50.0]),
                spec("Truck", 0.027, [2.0, 5.5, 2.5, 6.0], [3.0, 12.0, 4.0, 80.0]),
                spec("Tram", 0.013, [2.2, 12.0, 3.0, 8.0], [3.0, 30.0, 3.8, 80.0]),
                spec("Misc", 0.024, [0.5, 0.5, 0.5, 3.0], [2.5, 6.0, 3.0, 70.0]),
            ],
        }
    }

    /// The two object classes kept by the proposal experiment, in their KITTI proportion.
    pub fn proposal_objects() -> Self {
        let k = Self::kitti();
        let total = 0.78 + 0.156;
        Self {
            classes: vec![
                ClassSpec {
                    fraction: 0.78 / total,
                    ..k.classes[0].clone()
                },
                ClassSpec {
                    fraction: 0.156 / total,
                    ..k.classes[1].clone()
                },
            ],
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("class profile is empty".into()));
        }
        let total: f64 = self.classes.iter().map(|c| c.fraction).sum();
        if self.classes.iter().any(|c| !(c.fraction > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "class fractions must be positive and sum to 1 (sum {total})"
            )));
        }
        for c in &self.classes {
            for k in 0..LOC_DIM {
                if !(c.loc_min[k] > 0.0 && c.loc_min[k] <= c.loc_max[k]) {
                    return Err(Error::Config(format!("bad location range for {}", c.name)));
                }
            }
        }
        Ok(())
    }

    /// Caps are the largest configured raw values.
    pub fn caps(&self) -> LocationCaps {
        let mut m = [0.0f64; LOC_DIM];
        for c in &self.classes {
            for k in 0..LOC_DIM {
                m[k] = m[k].max(c.loc_max[k]);
            }
        }
        LocationCaps {
            width: m[0],
            length: m[1],
            height: m[2],
            distance: m[3],
        }
    }

    /// Splits `n` into per-class counts by largest-remainder rounding (ties to the lower class).
    pub fn counts(&self, n: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if n < self.classes.len() {
            return Err(Error::Config(format!(
                "{n} samples cannot cover {} classes",
                self.classes.len()
            )));
        }
        Ok(largest_remainder(
            &self.classes.iter().map(|c| c.fraction).collect::<Vec<_>>(),
            n,
        ))
    }

    fn draw_location(&self, class: usize, caps: &LocationCaps, rng: &mut RngStream) -> ([f64; LOC_DIM], [f64; LOC_DIM]) {
        let c = &self.classes[class];
        let mut u = [0.0; LOC_DIM];
        let mut raw = [0.0; LOC_DIM];
        for k in 0..LOC_DIM {
            u[k] = rng.uniform();
            raw[k] = c.loc_min[k] + u[k] * (c.loc_max[k] - c.loc_min[k]);
        }
        let gt = LocationGroundTruth {
            width: raw[0],
            length: raw[1],
            height: raw[2],
            distance: raw[3],
        };
        let t = encode_location(&gt, caps).expect("profile ranges lie within caps");
        (u, t)
    }
}

pub fn largest_remainder(fractions: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Labels with exact per-class counts, in shuffled order.
fn shuffled_labels(counts: &[usize], rng: &mut RngStream) -> Vec<usize> {
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    rng.shuffle(&mut labels);
    labels
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterParams {
    pub feature_dim: usize,
    /// Pairwise distance between class means (in units of the unit-variance noise).
    pub separation: f64,
    /// How strongly the location latent shifts the features, so locations are learnable.
    #[serde(default = "default_coupling")]
    pub loc_coupling: f64,
}

fn default_coupling() -> f64 {
    1.0
}

fn cluster_means(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            if dim >= classes {
                m[c] = separation / std::f64::consts::SQRT_2;
            } else {
                // Regular polygon in the first two coordinates; neighbours sit `separation` apart.
                let r = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
                let a = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                m[0] = r * a.cos();
                m[1] = r * a.sin();
            }
            m
        })
        .collect()
}

fn gen_clusters(
    profile: &ClassProfile,
    n: usize,
    params: &ClusterParams,
    caps: &LocationCaps,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let counts = profile.counts(n)?;
    let labels = shuffled_labels(&counts, rng);
    let dim = params.feature_dim;
    let means = cluster_means(profile.classes.len(), dim, params.separation);
    let mut feats = Vec::with_capacity(n * dim);
    let mut locs = Vec::with_capacity(n * LOC_DIM);
    for &c in &labels {
        let (u, t) = profile.draw_location(c, caps, rng);
        let mut x: Vec<f64> = means[c].iter().map(|m| m + rng.normal()).collect();
        for k in 0..LOC_DIM.min(dim) {
            x[dim - 1 - k] += params.loc_coupling * (u[k] - 0.5);
        }
        feats.extend(x);
        locs.extend(t);
    }
    Dataset::new(
        Tensor::new(vec![n, dim], feats)?,
        labels,
        Tensor::new(vec![n, LOC_DIM], locs)?,
        vec![true; n],
        profile.names(),
    )
}

/// Gaussian class clusters with identity covariance; train and test come from independent
/// sub-streams and follow the profile fractions exactly.
pub fn gen_cluster_dataset(
    profile: &ClassProfile,
    n_train: usize,
    n_test: usize,
    params: &ClusterParams,
    stream: &RngStream,
) -> Result<(Dataset, Dataset)> {
    profile.validate()?;
    if params.feature_dim < 2 {
        return Err(Error::Config("feature_dim must be at least 2".into()));
    }
    if !(params.separation >= 0.0 && params.separation.is_finite()) {
        return Err(Error::Config("separation must be finite and >= 0".into()));
    }
    let caps = profile.caps();
    let train = gen_clusters(profile, n_train, params, &caps, &mut stream.named("train"))?;
    let test = gen_clusters(profile, n_test, params, &caps, &mut stream.named("test"))?;
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchParams {
    pub size: usize,
    /// Probability that a pixel holds no LiDAR return (both channels zero).
    pub sparsity: f64,
}

/// Channel count of depth + intensity patches.
pub const PATCH_CHANNELS: usize = 2;

fn in_motif(class: usize, y: f64, x: f64, half_w: f64, half_h: f64) -> bool {
    let (ax, ay) = (x.abs(), y.abs());
    match class % 5 {
        0 => ax <= half_w * 1.4 && ay <= half_h * 0.7,
        1 => ax <= half_w * 0.35 && ay <= half_h * 1.3,
        2 => ax <= half_w * 1.2 && ay <= half_h * 1.2,
        3 => ax <= half_w * 1.9 && ay <= half_h * 0.45,
        _ => (ax <= half_w * 0.25 || ay <= half_h * 0.25) && ax <= half_w * 1.3 && ay <= half_h * 1.3,
    }
}

/// Two-channel sparse patches (depth, intensity) with a class-specific silhouette.
///
/// Missing returns are exact zeros in both channels; no interpolation is applied.
pub fn gen_patch_dataset(
    profile: &ClassProfile,
    params: &PatchParams,
    n: usize,
    stream: &RngStream,
) -> Result<Dataset> {
    profile.validate()?;
    if params.size < 8 {
        return Err(Error::Config("patch size must be at least 8".into()));
    }
    if !(0.0..1.0).contains(&params.sparsity) {
        return Err(Error::Config("sparsity must lie in [0, 1)".into()));
    }
    let caps = profile.caps();
    let mut rng = stream.clone();
    let counts = profile.counts(n)?;
    let labels = shuffled_labels(&counts, &mut rng);
    let s = params.size;
    let plane = s * s;
    let mut feats = Vec::with_capacity(n * PATCH_CHANNELS * plane);
    let mut locs = Vec::with_capacity(n * LOC_DIM);
    let centre = (s as f64 - 1.0) / 2.0;
    for &c in &labels {
        let (_, t) = profile.draw_location(c, &caps, &mut rng);
        let half_w = s as f64 * (0.18 + 0.12 * t[0]);
        let half_h = s as f64 * (0.18 + 0.12 * t[2]);
        let (oy, ox) = (rng.uniform_range(-1.5, 1.5), rng.uniform_range(-1.5, 1.5));
        let reflect = 0.3 + 0.12 * (c % 5) as f64;
        let mut depth = vec![0.0; plane];
        let mut intensity = vec![0.0; plane];
        for y in 0..s {
            for x in 0..s {
                let hit = in_motif(c, y as f64 - centre - oy, x as f64 - centre - ox, half_w, half_h);
                let (d, i) = if hit {
                    (0.1 + 0.7 * t[3], reflect)
                } else {
                    (0.95, 0.08)
                };
                let d = (d + 0.03 * rng.normal()).clamp(0.01, 1.0);
                let i = (i + 0.05 * rng.normal()).clamp(0.01, 1.0);
                if rng.uniform() >= params.sparsity {
                    depth[y * s + x] = d;
                    intensity[y * s + x] = i;
                }
            }
        }
        feats.extend(depth);
        feats.extend(intensity);
        locs.extend(t);
    }
    Dataset::new(
        Tensor::new(vec![n, PATCH_CHANNELS, s, s], feats)?,
        labels,
        Tensor::new(vec![n, LOC_DIM], locs)?,
        vec![true; n],
        profile.names(),
    )
}
