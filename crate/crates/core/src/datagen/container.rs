//! On-disk formats.
//!
//! A tensor file is: 8-byte magic `ALF0TENS`, one element-type byte (`0x01` f64 LE, `0x02` i32
//! LE), one rank byte, `rank` little-endian u64 dimensions, then the row-major payload.
//!
//! A dataset container is a directory holding `manifest` (TOML) plus `features.bin`,
//! `labels.bin`, `locations.bin` and `locmask.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LocationCaps;
use crate::dataset::{Dataset, LOC_DIM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ALF0TENS";
pub const TYPE_F64: u8 = 0x01;
pub const TYPE_I32: u8 = 0x02;
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F64 { shape, .. } | TensorData::I32 { shape, .. } => shape,
        }
    }

    pub fn into_f64(self, what: &str) -> Result<Tensor> {
        match self {
            TensorData::F64 { shape, data } => Tensor::new(shape, data),
            TensorData::I32 { .. } => Err(Error::Format {
                offset: 8,
                reason: format!("{what}: expected f64 elements, found i32"),
            }),
        }
    }

    pub fn into_i32(self, what: &str) -> Result<(Vec<usize>, Vec<i32>)> {
        match self {
            TensorData::I32 { shape, data } => Ok((shape, data)),
            TensorData::F64 { .. } => Err(Error::Format {
                offset: 8,
                reason: format!("{what}: expected i32 elements, found f64"),
            }),
        }
    }
}

impl From<&Tensor> for TensorData {
    fn from(t: &Tensor) -> Self {
        TensorData::F64 {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

pub fn encode_tensor(t: &TensorData) -> Result<Vec<u8>> {
    let shape = t.shape();
    let rank = u8::try_from(shape.len())
        .map_err(|_| Error::Dimension(format!("rank {} does not fit in a byte", shape.len())))?;
    let mut out = Vec::with_capacity(10 + 8 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(match t {
        TensorData::F64 { .. } => TYPE_F64,
        TensorData::I32 { .. } => TYPE_I32,
    });
    out.push(rank);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t {
        TensorData::F64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        TensorData::I32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorData> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err(0, "bad magic, not an ALF0TENS tensor file"));
    }
    let mut pos = MAGIC.len();
    let header = |pos: usize| bytes.get(pos).copied().ok_or_else(|| format_err(pos, "truncated header"));
    let kind = header(pos)?;
    let elem = match kind {
        TYPE_F64 => 8,
        TYPE_I32 => 4,
        other => return Err(format_err(pos, format!("unknown element type 0x{other:02x}"))),
    };
    pos += 1;
    let rank = header(pos)? as usize;
    pos += 1;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| format_err(pos, "truncated dimension list"))?;
        let d = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        let d = usize::try_from(d).map_err(|_| format_err(pos, format!("dimension {d} overflows")))?;
        shape.push(d);
        pos += 8;
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|c| c.checked_mul(elem).map(|b| (c, b)));
    let (count, payload) = count.ok_or_else(|| format_err(10, format!("dimensions {shape:?} overflow")))?;
    let body = &bytes[pos..];
    if body.len() < payload {
        return Err(format_err(
            pos + body.len(),
            format!("truncated payload: {} of {payload} bytes", body.len()),
        ));
    }
    if body.len() > payload {
        return Err(format_err(pos + payload, "trailing bytes after payload"));
    }
    Ok(match kind {
        TYPE_F64 => TensorData::F64 {
            data: body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            shape,
        },
        _ => TensorData::I32 {
            data: body
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            shape,
        },
    })
    .inspect(|t| debug_assert_eq!(t.shape().iter().product::<usize>(), count))
}

pub fn write_tensor_file(path: &Path, t: &TensorData) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub samples: usize,
    pub classes: Vec<String>,
    pub feature_shape: Vec<usize>,
    pub caps: LocationCaps,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Free-form generator parameters recorded for provenance.
    #[serde(default)]
    pub generator: toml::Table,
}

impl Manifest {
    pub fn for_dataset(d: &Dataset, caps: LocationCaps, seed: Option<u64>, generator: toml::Table) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            samples: d.len(),
            classes: d.class_names().to_vec(),
            feature_shape: d.feature_shape().to_vec(),
            caps,
            seed,
            generator,
        }
    }
}

fn to_i32(values: impl Iterator<Item = usize>) -> Result<Vec<i32>> {
    values
        .map(|v| i32::try_from(v).map_err(|_| Error::Encoding(format!("{v} does not fit in i32"))))
        .collect()
}

pub fn write_dataset(dir: &Path, d: &Dataset, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = toml::to_string(manifest).map_err(|e| Error::Encoding(e.to_string()))?;
    let mpath = dir.join("manifest");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    write_tensor_file(&dir.join("features.bin"), &d.features().into())?;
    let n = d.len();
    write_tensor_file(
        &dir.join("labels.bin"),
        &TensorData::I32 {
            shape: vec![n],
            data: to_i32(d.labels().iter().copied())?,
        },
    )?;
    write_tensor_file(&dir.join("locations.bin"), &d.locations().into())?;
    write_tensor_file(
        &dir.join("locmask.bin"),
        &TensorData::I32 {
            shape: vec![n],
            data: d.loc_mask().iter().map(|&m| m as i32).collect(),
        },
    )
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join("manifest");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    toml::from_str(&text).map_err(|e| Error::parse(mpath.display().to_string(), e.to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest = read_manifest(dir)?;
    let features = read_tensor_file(&dir.join("features.bin"))?.into_f64("features.bin")?;
    let (lshape, labels) = read_tensor_file(&dir.join("labels.bin"))?.into_i32("labels.bin")?;
    let locations = read_tensor_file(&dir.join("locations.bin"))?.into_f64("locations.bin")?;
    let (mshape, mask) = read_tensor_file(&dir.join("locmask.bin"))?.into_i32("locmask.bin")?;
    let n = manifest.samples;
    if lshape != [n] || mshape != [n] || locations.shape() != [n, LOC_DIM] {
        return Err(Error::Dimension(format!(
            "{}: tensors disagree with manifest sample count {n}",
            dir.display()
        )));
    }
    if features.shape()[1..] != manifest.feature_shape[..] {
        return Err(Error::Dimension(format!(
            "{}: features {:?} disagree with manifest shape {:?}",
            dir.display(),
            features.shape(),
            manifest.feature_shape
        )));
    }
    let labels = labels
        .into_iter()
        .map(|l| usize::try_from(l).map_err(|_| Error::Encoding(format!("negative label {l}"))))
        .collect::<Result<Vec<_>>>()?;
    let mask = mask
        .into_iter()
        .map(|m| match m {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Encoding(format!("mask value {other} is not 0/1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let d = Dataset::new(features, labels, locations, mask, manifest.classes.clone())?;
    Ok((d, manifest))
}
