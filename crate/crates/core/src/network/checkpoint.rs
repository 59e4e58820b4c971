//! Checkpoint files: one JSON document whose parameter blocks are base64
//! strings of little-endian `f64` values. The schema is described in
//! `docs/checkpoint.md`.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{InitScheme, LayerSpec, Linear, Network, ParamGroup};

pub const CHECKPOINT_FORMAT: &str = "genlayer-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamBlock {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
    weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct File {
    format: String,
    version: u32,
    seed: u64,
    init_scheme: InitScheme,
    specs: Vec<LayerSpec>,
    skip_strengths: Vec<f64>,
    params: Vec<ParamBlock>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A loaded checkpoint: the network plus free-form metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: serde_json::Value,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(s: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Checkpoint(format!("{what}: bad base64: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {expected} values, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn to_json(net: &Network, meta: serde_json::Value) -> Result<String> {
        let params = net
            .linears()
            .iter()
            .zip(net.param_names())
            .map(|(l, name)| ParamBlock {
                name,
                group: l.group,
                shape: [l.weight.rows(), l.weight.cols()],
                weight: encode(l.weight.data()),
                bias: l.bias.as_deref().map(encode),
            })
            .collect();
        let file = File {
            format: CHECKPOINT_FORMAT.into(),
            version: VERSION,
            seed: net.seed(),
            init_scheme: net.init_scheme(),
            specs: net.specs().to_vec(),
            skip_strengths: net.skip_strengths(),
            params,
            meta,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: File = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", file.format)));
        }
        if file.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
        }
        // The template fixes the layout; the stored blocks overwrite every value.
        let mut net = Network::init(file.specs, file.seed, file.init_scheme)?;
        let count = net.linears().len();
        if count != file.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {count} parameter blocks, found {}",
                file.params.len()
            )));
        }
        for (lin, block) in net.linears_mut().into_iter().zip(&file.params) {
            load_block(lin, block)?;
        }
        net.set_skip_strengths(&file.skip_strengths)?;
        Ok(Checkpoint {
            network: net,
            meta: file.meta,
        })
    }
}

fn load_block(lin: &mut Linear, block: &ParamBlock) -> Result<()> {
    let (r, c) = lin.weight.shape();
    if block.shape != [r, c] {
        return Err(Error::Checkpoint(format!(
            "{}: shape {:?} does not match spec ({r}, {c})",
            block.name, block.shape
        )));
    }
    lin.weight = Matrix::new(r, c, decode(&block.weight, r * c, &block.name)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", block.name)))?;
    lin.group = block.group;
    match (&mut lin.bias, &block.bias) {
        (Some(b), Some(s)) => {
            let v = decode(s, b.len(), &block.name)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Checkpoint(format!("{}: non-finite bias", block.name)));
            }
            *b = v;
        }
        (None, None) => {}
        _ => {
            return Err(Error::Checkpoint(format!(
                "{}: bias presence does not match spec",
                block.name
            )))
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, net: &Network, meta: serde_json::Value) -> Result<()> {
    std::fs::write(path, Checkpoint::to_json(net, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, LayerParams};

    #[test]
    fn round_trip_is_exact() {
        let specs = vec![
            LayerSpec::dense(2, 4, Activation::Relu),
            LayerSpec::gen_skip(4, Activation::Relu),
            LayerSpec::gen_dropout(4, 3, 1, Activation::Identity, 0.5),
        ];
        let mut net = Network::init(specs, 9, InitScheme::He).unwrap();
        net.set_scheduled_nu(0.37);
        if let LayerParams::Dense(l) = &mut net.layers_mut()[0] {
            l.bias.as_mut().unwrap()[1] = -0.125;
        }
        let text = Checkpoint::to_json(&net, serde_json::json!({"epoch": 3})).unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back.network, net);
        assert_eq!(back.meta["epoch"], 3);
    }

    #[test]
    fn rejects_truncated_block() {
        let net = Network::init(vec![LayerSpec::dense(2, 2, Activation::Relu)], 1, InitScheme::He).unwrap();
        let text = Checkpoint::to_json(&net, serde_json::Value::Null).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["params"][0]["weight"] = serde_json::Value::String(encode(&[1.0]));
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }
}
