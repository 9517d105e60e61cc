//! Parameter checkpoints: `network.toml` (config + tensor list) and one tensor file per entry.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig, NetworkParams};
use crate::datagen::container::{read_tensor_file, write_tensor_file, TensorData};
use crate::error::{Error, Result};

const HEADER: &str = "network.toml";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    entries: Vec<String>,
    config: NetworkConfig,
}

pub fn save_checkpoint(net: &Network, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = net.params().names();
    for (name, t) in names.iter().zip(net.params().tensors()) {
        write_tensor_file(&dir.join(format!("{name}.bin")), &TensorData::from(t))?;
    }
    let header = Header {
        entries: names,
        config: net.config().clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Encoding(e.to_string()))?;
    let path = dir.join(HEADER);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Network> {
    let path = dir.join(HEADER);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: Header = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    header.config.validate()?;
    let mut params = NetworkParams::zeros(&header.config);
    if params.names() != header.entries {
        return Err(Error::Config(format!(
            "{}: entry list does not match the stored config",
            path.display()
        )));
    }
    for (name, slot) in header.entries.iter().zip(params.tensors_mut()) {
        let t = read_tensor_file(&dir.join(format!("{name}.bin")))?.into_f64(name)?;
        if t.shape() != slot.shape() {
            return Err(Error::Dimension(format!(
                "{name}: stored shape {:?}, config expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Network::new(header.config, params)
}
