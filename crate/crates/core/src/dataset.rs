use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the encoded location target `(w, l, h, d)`.
pub const LOC_DIM: usize = 4;

/// Features, class labels and masked location targets for `n` samples.
///
/// `features` has shape `[n, ...feature_shape]`; `locations` is `[n, 4]`. Samples whose
/// `loc_mask` bit is unset (background proposals) carry no location ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    locations: Tensor,
    loc_mask: Vec<bool>,
    class_names: Vec<String>,
}

/// A gathered subset ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub locations: Tensor,
    pub loc_mask: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        locations: Tensor,
        loc_mask: Vec<bool>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let n = labels.len();
        if features.rank() < 2 || features.rows() != n {
            return Err(Error::Dimension(format!(
                "features {:?} do not hold {n} samples",
                features.shape()
            )));
        }
        if locations.shape() != [n, LOC_DIM] {
            return Err(Error::Dimension(format!(
                "locations {:?}, expected [{n}, {LOC_DIM}]",
                locations.shape()
            )));
        }
        if loc_mask.len() != n {
            return Err(Error::Dimension(format!(
                "{} mask bits for {n} samples",
                loc_mask.len()
            )));
        }
        if class_names.is_empty() {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Contract(format!(
                "label {bad} outside {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            locations,
            loc_mask,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn locations(&self) -> &Tensor {
        &self.locations
    }

    pub fn loc_mask(&self) -> &[bool] {
        &self.loc_mask
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Shape of a single sample's features.
    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            locations: self.locations.select_rows(indices),
            loc_mask: indices.iter().map(|&i| self.loc_mask[i]).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.gather(indices);
        Dataset {
            features: b.features,
            labels: b.labels,
            locations: b.locations,
            loc_mask: b.loc_mask,
            class_names: self.class_names.clone(),
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
            locations: self.locations.clone(),
            loc_mask: self.loc_mask.clone(),
        }
    }
}
