//! Binary checkpoints: an 8-byte magic, a little-endian `u32` version, a
//! `u64` header length and JSON header, then every parameter and (when
//! present) both ADAM moment vectors as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use crate::enhancer::{NetworkConfig, NetworkParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NLCLSTM\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct LayerShape {
    weight: [usize; 4],
    bias: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    layers: Vec<LayerShape>,
    parameter_count: usize,
    adam: Option<AdamHeader>,
}

fn shapes(params: &NetworkParams) -> Vec<LayerShape> {
    params
        .layers()
        .iter()
        .map(|l| LayerShape {
            weight: [
                l.weight.out_channels(),
                l.weight.in_channels(),
                l.weight.size(),
                l.weight.size(),
            ],
            bias: l.bias.len(),
        })
        .collect()
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = &ckpt.params;
    let n = params.parameter_count();
    if let Some(a) = &ckpt.adam {
        if a.len() != n || a.v.len() != n {
            return Err(Error::Checkpoint(format!(
                "optimiser holds {} moments for {n} parameters",
                a.len()
            )));
        }
    }
    let header = Header {
        network: params.config,
        layers: shapes(params),
        parameter_count: n,
        adam: ckpt.adam.as_ref().map(|a| AdamHeader {
            config: a.config,
            step: a.step,
        }),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(24 + json.len() + 24 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |values: &[f64]| {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(&params.to_flat());
    if let Some(a) = &ckpt.adam {
        put(&a.m);
        put(&a.v);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    let mut params = NetworkParams::zeros(header.network)?;
    if shapes(&params) != header.layers || params.parameter_count() != header.parameter_count {
        return Err(bad("layer shapes disagree with the network config".into()));
    }
    let n = header.parameter_count;
    let vectors = if header.adam.is_some() { 3 } else { 1 };
    let payload = &body[hlen..];
    if payload.len() != vectors * n * 8 {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            vectors * n * 8,
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    params.set_flat(&values[..n])?;
    let adam = header.adam.map(|h| AdamState {
        config: h.config,
        step: h.step,
        m: values[n..2 * n].to_vec(),
        v: values[2 * n..].to_vec(),
    });
    Ok(Checkpoint { params, adam })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(with_adam: bool) -> Checkpoint {
        let config = NetworkConfig {
            feature_channels: 3,
            hidden_channels: 2,
            ..Default::default()
        };
        let params = NetworkParams::init(config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let adam = with_adam.then(|| {
            let n = params.parameter_count();
            let mut a = AdamState::new(n, AdamConfig::default());
            a.update(&mut params.to_flat(), &vec![0.25; n]).unwrap();
            a
        });
        Checkpoint { params, adam }
    }

    #[test]
    fn round_trip() {
        for with_adam in [false, true] {
            let c = sample(with_adam);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            save_checkpoint(&path, &c).unwrap();
            assert_eq!(load_checkpoint(&path).unwrap(), c);
        }
    }

    #[test]
    fn values_are_little_endian_after_header() {
        let c = sample(false);
        let bytes = encode_checkpoint(&c).unwrap();
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let first = f64::from_le_bytes(bytes[20 + hlen..28 + hlen].try_into().unwrap());
        assert_eq!(first, c.params.to_flat()[0]);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_checkpoint(&sample(true)).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(decode_checkpoint(&wrong_magic).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(decode_checkpoint(&wrong_version).is_err());
        assert!(load_checkpoint(Path::new("/nonexistent/x.ckpt")).is_err());
    }
}
