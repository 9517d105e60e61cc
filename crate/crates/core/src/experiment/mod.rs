//! Experiment configuration, data sourcing, run orchestration and the emitted tables.

pub mod csvio;
pub mod plotdata;
pub mod report;
mod run;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use run::{run_experiment, RunSummary};

use crate::al_loop::{LoopConfig, StopRule};
use crate::datagen::{
    container, gen_cluster_dataset, gen_patch_dataset, simulate_proposals, ClassProfile, ClusterParams,
    LocationCaps, PatchParams, ProposalProfile, Split,
};
use crate::error::{Error, Result};
use crate::nn::{InputShape, NetworkConfig};
use crate::rng::RngStream;
use crate::uncertainty::Strategy;
use crate::Dataset;

/// Stream ids under the master seed.
pub const DATA_STREAM: u64 = 1;
pub const LOOP_STREAM: u64 = 2;
pub const REFERENCE_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Five classes in KITTI proportions.
    KittiRatios,
    /// Small Vehicle and Human objects passed through the proposal simulator, plus Background.
    Proposals,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Clusters,
    Patches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Container root holding `train/` and `test/`; when set the generator fields are ignored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub preset: Preset,
    pub generator: Generator,
    pub n_train: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub separation: f64,
    pub loc_coupling: f64,
    pub patch_size: usize,
    pub sparsity: f64,
    pub proposals: ProposalProfile,
    /// Data seed; defaults to the master seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            preset: Preset::KittiRatios,
            generator: Generator::Clusters,
            n_train: 4000,
            n_test: 2000,
            feature_dim: 8,
            separation: 4.0,
            loc_coupling: 1.0,
            patch_size: 12,
            sparsity: 0.6,
            proposals: ProposalProfile::rgb_detector(),
            seed: None,
        }
    }
}

/// A train/test pair with the location caps used to encode it.
#[derive(Clone, Debug)]
pub struct DataPair {
    pub train: Dataset,
    pub test: Dataset,
    pub caps: LocationCaps,
}

impl DataConfig {
    fn profile(&self) -> ClassProfile {
        match self.preset {
            Preset::KittiRatios => ClassProfile::kitti(),
            Preset::Proposals => ClassProfile::proposal_objects(),
        }
    }

    /// Generates (or loads) the datasets. Generation uses stream [`DATA_STREAM`] of the data seed.
    pub fn materialize(&self, master_seed: u64) -> Result<DataPair> {
        if let Some(root) = &self.path {
            let (train, mt) = container::read_dataset(&root.join("train"))?;
            let (test, ms) = container::read_dataset(&root.join("test"))?;
            if mt.classes != ms.classes || mt.feature_shape != ms.feature_shape {
                return Err(Error::Config(format!(
                    "{}: train and test containers disagree on classes or feature shape",
                    root.display()
                )));
            }
            return Ok(DataPair {
                train,
                test,
                caps: mt.caps,
            });
        }
        let profile = self.profile();
        let caps = profile.caps();
        let stream = RngStream::new(self.seed.unwrap_or(master_seed), DATA_STREAM);
        let (train, test) = match self.generator {
            Generator::Clusters => gen_cluster_dataset(
                &profile,
                self.n_train,
                self.n_test,
                &ClusterParams {
                    feature_dim: self.feature_dim,
                    separation: self.separation,
                    loc_coupling: self.loc_coupling,
                },
                &stream,
            )?,
            Generator::Patches => {
                let p = PatchParams {
                    size: self.patch_size,
                    sparsity: self.sparsity,
                };
                (
                    gen_patch_dataset(&profile, &p, self.n_train, &stream.named("train"))?,
                    gen_patch_dataset(&profile, &p, self.n_test, &stream.named("test"))?,
                )
            }
        };
        if self.preset == Preset::Proposals {
            let ps = stream.named("proposals");
            let train = simulate_proposals(&train, &self.proposals, Split::Train, &ps.named("train"))?.dataset;
            let test = simulate_proposals(&test, &self.proposals, Split::Test, &ps.named("test"))?.dataset;
            return Ok(DataPair { train, test, caps });
        }
        Ok(DataPair { train, test, caps })
    }

    /// Generator parameters recorded in container manifests.
    pub fn generator_table(&self) -> toml::Table {
        let mut t = toml::Table::new();
        let mut put = |k: &str, v: toml::Value| {
            t.insert(k.to_string(), v);
        };
        put("preset", toml::Value::String(kebab(&self.preset)));
        put("generator", toml::Value::String(kebab(&self.generator)));
        match self.generator {
            Generator::Clusters => {
                put("feature_dim", toml::Value::Integer(self.feature_dim as i64));
                put("separation", toml::Value::Float(self.separation));
                put("loc_coupling", toml::Value::Float(self.loc_coupling));
            }
            Generator::Patches => {
                put("patch_size", toml::Value::Integer(self.patch_size as i64));
                put("sparsity", toml::Value::Float(self.sparsity));
            }
        }
        t
    }
}

fn kebab<T: Serialize>(v: &T) -> String {
    toml::Value::try_from(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkPreset {
    Desk,
    Paper,
}

/// A network preset plus optional overrides; input shape and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub preset: NetworkPreset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_kernels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fc_widths: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loc_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            preset: NetworkPreset::Desk,
            conv_layers: None,
            conv_kernels: None,
            fc_widths: None,
            dropout: None,
            loc_weight: None,
            weight_decay: None,
            lr: None,
            epochs: None,
            batch_size: None,
        }
    }
}

impl NetworkSpec {
    pub fn resolve(&self, feature_shape: &[usize], num_classes: usize) -> Result<NetworkConfig> {
        let input = InputShape::from_dims(feature_shape)?;
        let mut c = match self.preset {
            NetworkPreset::Desk => NetworkConfig::desk(input, num_classes),
            NetworkPreset::Paper => NetworkConfig::paper(input, num_classes),
        };
        if let Some(v) = self.conv_layers {
            c.conv_layers = v;
            c.pool_after = v.checked_sub(1);
        }
        if let Some(v) = self.conv_kernels {
            c.conv_kernels = v;
        }
        if let Some(v) = &self.fc_widths {
            c.fc_widths = v.clone();
        }
        if let Some(v) = self.dropout {
            c.dropout = v;
        }
        if let Some(v) = self.loc_weight {
            c.loc_weight = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.lr {
            c.adam.lr = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub seed_per_class: usize,
    pub query_size: usize,
    pub max_steps: usize,
    pub passes: usize,
    pub ensemble: usize,
    pub stop: StopRule,
    pub calibration_bins: usize,
    pub sparsification_steps: usize,
    /// Write every step's pool scores and predictive distributions.
    pub dump_predictions: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            seed_per_class: 50,
            query_size: 50,
            max_steps: 15,
            passes: 20,
            ensemble: 5,
            stop: StopRule::MaxSteps,
            calibration_bins: 10,
            sparsification_steps: 20,
            dump_predictions: false,
        }
    }
}

impl Protocol {
    pub fn loop_config(&self, strategy: Strategy) -> LoopConfig {
        LoopConfig {
            seed_per_class: self.seed_per_class,
            query_size: self.query_size,
            max_steps: self.max_steps,
            strategy,
            passes: self.passes,
            ensemble: self.ensemble,
            stop: self.stop,
            calibration_bins: self.calibration_bins,
            sparsification_steps: self.sparsification_steps,
            keep_predictions: self.dump_predictions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; repetition `r` runs under `seed + r`.
    pub seed: u64,
    pub repetitions: usize,
    pub strategies: Vec<Strategy>,
    /// Strategy the others are compared against in reports.
    pub baseline: Strategy,
    /// Output directory; not part of the comparison hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub network: NetworkSpec,
    pub protocol: Protocol,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repetitions: 3,
            strategies: vec![Strategy::Random],
            baseline: Strategy::Random,
            out: None,
            data: DataConfig::default(),
            network: NetworkSpec::default(),
            protocol: Protocol::default(),
        }
    }
}

/// The parts of a config that make two runs comparable.
#[derive(Serialize)]
struct Comparable<'a> {
    seed: u64,
    data: &'a DataConfig,
    network: &'a NetworkSpec,
    protocol: &'a Protocol,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Encoding(e.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(source, e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        to_toml(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies to run".into()));
        }
        let mut seen = self.strategies.clone();
        seen.sort_by_key(|s| s.name());
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return Err(Error::Config("strategies are listed more than once".into()));
        }
        if self.seed.checked_add(self.repetitions as u64).is_none() {
            return Err(Error::Config("seed + repetitions overflows".into()));
        }
        self.protocol.loop_config(Strategy::Random).validate()
    }

    /// First 16 hex digits of the SHA-256 of the seed, data, network and protocol sections.
    /// Repetition count, strategy list and output directory do not enter it.
    pub fn comparison_hash(&self) -> Result<String> {
        let text = to_toml(&Comparable {
            seed: self.seed,
            data: &self.data,
            network: &self.network,
            protocol: &self.protocol,
        })?;
        Ok(hex(&Sha256::digest(text.as_bytes()))[..16].to_string())
    }
}

/// SHA-256 over every tensor and label of a dataset, in hex.
pub fn dataset_hash(d: &Dataset) -> String {
    let mut h = Sha256::new();
    for v in d.features().data().iter().chain(d.locations().data()) {
        h.update(v.to_le_bytes());
    }
    for &l in d.labels() {
        h.update((l as u64).to_le_bytes());
    }
    for &m in d.loc_mask() {
        h.update([m as u8]);
    }
    for s in d.features().shape() {
        h.update((*s as u64).to_le_bytes());
    }
    for n in d.class_names() {
        h.update(n.as_bytes());
        h.update([0]);
    }
    hex(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.strategies = vec![Strategy::Random, Strategy::EnsMi];
        c.protocol.stop = StopRule::Convergence {
            window: 3,
            epsilon: 0.01,
        };
        c.network.fc_widths = Some(vec![16, 8]);
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text, "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.comparison_hash().unwrap(), c.comparison_hash().unwrap());
    }

    #[test]
    fn partial_files_take_defaults_and_unknown_keys_fail() {
        let c = ExperimentConfig::from_toml("seed = 9\n[protocol]\nquery_size = 7\n", "x").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.protocol.query_size, 7);
        assert_eq!(c.protocol.max_steps, 15);
        assert!(ExperimentConfig::from_toml("sede = 9\n", "x").is_err());
        let c = ExperimentConfig::from_toml("strategies = [\"mc-mi\", \"random\"]\n", "x").unwrap();
        assert_eq!(c.strategies, vec![Strategy::McMi, Strategy::Random]);
        assert!(ExperimentConfig::from_toml("strategies = [\"nope\"]\n", "x").is_err());
    }

    #[test]
    fn hash_ignores_repetitions_and_strategies() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.repetitions = 7;
        b.strategies = vec![Strategy::McEntropy];
        b.out = Some("elsewhere".into());
        assert_eq!(a.comparison_hash().unwrap(), b.comparison_hash().unwrap());
        b.protocol.query_size += 1;
        assert_ne!(a.comparison_hash().unwrap(), b.comparison_hash().unwrap());
        assert_eq!(a.comparison_hash().unwrap().len(), 16);
    }

    #[test]
    fn network_overrides_apply() {
        let spec = NetworkSpec {
            fc_widths: Some(vec![5]),
            dropout: Some(0.0),
            epochs: Some(3),
            ..NetworkSpec::default()
        };
        let c = spec.resolve(&[8], 5).unwrap();
        assert_eq!(c.fc_widths, vec![5]);
        assert_eq!(c.dropout, 0.0);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.input, InputShape::Flat { dim: 8 });
        assert!(NetworkSpec {
            dropout: Some(1.5),
            ..NetworkSpec::default()
        }
        .resolve(&[8], 5)
        .is_err());
    }

    #[test]
    fn generated_data_is_deterministic_and_proposals_add_background() {
        let mut d = DataConfig {
            n_train: 300,
            n_test: 100,
            ..DataConfig::default()
        };
        let a = d.materialize(4).unwrap();
        let b = d.materialize(4).unwrap();
        assert_eq!(dataset_hash(&a.train), dataset_hash(&b.train));
        assert_ne!(dataset_hash(&a.train), dataset_hash(&d.materialize(5).unwrap().train));
        d.seed = Some(4);
        assert_eq!(dataset_hash(&a.test), dataset_hash(&d.materialize(99).unwrap().test));
        d.preset = Preset::Proposals;
        let p = d.materialize(4).unwrap();
        assert_eq!(p.train.class_names().last().map(String::as_str), Some(crate::datagen::BACKGROUND));
    }
}
