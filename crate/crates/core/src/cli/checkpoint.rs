//! Adapter checkpoints.
//!
//! Layout: the 8-byte magic `LSTCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u32` header length, a JSON header, then every
//! tensor of the tunable set as little-endian `f64` in header order
//! (adapters by insertion point, then the label-word head columns).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBlock, AdapterConfig, AdapterParams, TunableParams};
use crate::diffcore::Tensor;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LSTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub encoder_fingerprint: String,
    pub encoder_hash: String,
    pub adapter: AdapterConfig,
    pub n_labels: usize,
    /// `(name, shape)` of each payload tensor, in payload order.
    pub tensors: Vec<(String, Vec<usize>)>,
}

fn named_tensors(t: &TunableParams) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (point, b) in &t.adapters.blocks {
        for (name, tensor) in ["down", "down_bias", "up", "up_bias"].iter().zip(b.tensors()) {
            out.push((format!("{point}.{name}"), tensor));
        }
    }
    out.push(("head".to_string(), &t.head));
    out
}

pub fn to_bytes(t: &TunableParams, adapter: &AdapterConfig, enc: &EncoderParams) -> Vec<u8> {
    let named = named_tensors(t);
    let header = CheckpointHeader {
        encoder_fingerprint: enc.config.fingerprint(),
        encoder_hash: enc.hash(),
        adapter: adapter.clone(),
        n_labels: t.head.shape()[1],
        tensors: named.iter().map(|(n, x)| (n.clone(), x.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * t.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, x) in named {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn load_err(msg: impl Into<String>) -> Error {
    Error::Load(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b: [u8; 4] = bytes
        .get(at..at + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| load_err("checkpoint truncated in preamble"))?;
    Ok(u32::from_le_bytes(b))
}

/// Parses a checkpoint and checks it against `enc`.
pub fn from_bytes(bytes: &[u8], enc: &EncoderParams) -> Result<(TunableParams, AdapterConfig)> {
    if bytes.get(..8) != Some(MAGIC.as_slice()) {
        return Err(load_err("not an adapter checkpoint"));
    }
    let version = read_u32(bytes, 8)?;
    if version != CHECKPOINT_VERSION {
        return Err(load_err(format!("unsupported checkpoint version {version}")));
    }
    let hlen = read_u32(bytes, 12)? as usize;
    let hjson = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| load_err("checkpoint truncated in header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(hjson).map_err(|e| load_err(format!("bad checkpoint header: {e}")))?;
    if header.encoder_fingerprint != enc.config.fingerprint() || header.encoder_hash != enc.hash() {
        return Err(load_err("checkpoint was saved for a different encoder"));
    }
    header
        .adapter
        .validate(&enc.config)
        .map_err(|e| load_err(format!("checkpoint adapter config: {e}")))?;

    let payload = &bytes[16 + hlen..];
    let expected: usize = header.tensors.iter().map(|(_, s)| 8 * s.iter().product::<usize>()).sum();
    if payload.len() != expected {
        return Err(load_err(format!(
            "checkpoint payload has {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    let mut tensors = BTreeMap::new();
    let mut offset = 0;
    for (name, shape) in &header.tensors {
        let n: usize = shape.iter().product();
        let data = payload[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset += 8 * n;
        let t = Tensor::new(shape.clone(), data).map_err(|e| load_err(format!("{name}: {e}")))?;
        tensors.insert(name.clone(), t);
    }

    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| load_err(format!("checkpoint lacks tensor {name}")))?;
        if t.shape() != shape {
            return Err(load_err(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let d = header.adapter.bottleneck_dim;
    let mut blocks = BTreeMap::new();
    for &point in &header.adapter.placements {
        let h = point.host_dim(&enc.config);
        blocks.insert(
            point,
            AdapterBlock {
                down: take(&format!("{point}.down"), &[h, d])?,
                down_bias: take(&format!("{point}.down_bias"), &[d])?,
                up: take(&format!("{point}.up"), &[d, h])?,
                up_bias: take(&format!("{point}.up_bias"), &[h])?,
            },
        );
    }
    let head = take("head", &[enc.config.d_model, header.n_labels])?;
    if let Some(extra) = tensors.keys().next() {
        return Err(load_err(format!("checkpoint has unexpected tensor {extra}")));
    }
    Ok((
        TunableParams {
            adapters: AdapterParams { blocks },
            head,
        },
        header.adapter,
    ))
}

pub fn save(path: &Path, t: &TunableParams, adapter: &AdapterConfig, enc: &EncoderParams) -> Result<()> {
    std::fs::write(path, to_bytes(t, adapter, enc))?;
    Ok(())
}

pub fn load(path: &Path, enc: &EncoderParams) -> Result<(TunableParams, AdapterConfig)> {
    let bytes =
        std::fs::read(path).map_err(|e| load_err(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes, enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::random_tensor;
    use crate::encoder::EncoderConfig;
    use crate::prompting::{ClozeInstance, Denominator, PromptModel, Verbalizer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained(enc: &EncoderParams) -> (TunableParams, AdapterConfig) {
        let cfg = AdapterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = TunableParams {
            adapters: crate::adapter::init_adapters(&cfg, &enc.config, 5).unwrap(),
            head: random_tensor(&mut rng, &[enc.config.d_model, 2]),
        };
        for x in t.tensors_mut() {
            *x = random_tensor(&mut rng, x.shape());
        }
        (t, cfg)
    }

    #[test]
    fn round_trip_reproduces_probabilities_bit_exactly() {
        let enc = EncoderParams::init(&EncoderConfig::default(), 1).unwrap();
        let (t, cfg) = trained(&enc);
        let (back, cfg2) = from_bytes(&to_bytes(&t, &cfg, &enc), &enc).unwrap();
        assert_eq!(back, t);
        assert_eq!(cfg2, cfg);
        let model = PromptModel::new(&enc, Verbalizer::new(vec![4, 5], 64).unwrap(), Denominator::Restricted).unwrap();
        let probe = vec![ClozeInstance {
            tokens: vec![1, 20, 30, 3],
            mask_pos: 3,
        }];
        assert_eq!(
            model.probs(&t, &probe).unwrap().data(),
            model.probs(&back, &probe).unwrap().data()
        );
    }

    #[test]
    fn corrupt_or_foreign_checkpoints_are_rejected() {
        let enc = EncoderParams::init(&EncoderConfig::default(), 1).unwrap();
        let (t, cfg) = trained(&enc);
        let bytes = to_bytes(&t, &cfg, &enc);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 8], &enc), Err(Error::Load(_))));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(matches!(from_bytes(&longer, &enc), Err(Error::Load(_))));
        assert!(matches!(from_bytes(b"garbage", &enc), Err(Error::Load(_))));
        let other = EncoderParams::init(&EncoderConfig::default(), 2).unwrap();
        assert!(matches!(from_bytes(&bytes, &other), Err(Error::Load(_))));
    }
}
