//! Checkpoint layout: an 8-byte little-endian header length, a UTF-8 JSON
//! header, then every weight as a little-endian f64 in storage order.

use serde::{Deserialize, Serialize};

use super::{CalibNet, NetConfig, Normalization};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mechdsl::NUM_CHANNELS;

pub const CHECKPOINT_FORMAT: &str = "epitwin-calibnet-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    config: NetConfig,
    input_dim: usize,
    seed: u64,
    bounds: Vec<(f64, f64)>,
    normalization: Normalization,
    shapes: Vec<Vec<usize>>,
}

impl CalibNet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config,
            input_dim: self.input_dim,
            seed: self.seed,
            bounds: self.bounds.to_vec(),
            normalization: self.normalization.clone(),
            shapes: self.weights.iter().map(|w| w.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + self.num_weights() * 8);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for w in &self.weights {
            for v in w.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(&format!("unknown format `{}`", header.format)));
        }
        let bounds: [(f64, f64); NUM_CHANNELS] = header
            .bounds
            .clone()
            .try_into()
            .map_err(|_| bad("expected 8 channel bounds"))?;
        let mut net = CalibNet::new(header.config, header.input_dim, bounds, header.seed)?;
        let expected: Vec<Vec<usize>> = net.weights.iter().map(|w| w.shape().to_vec()).collect();
        if expected != header.shapes {
            return Err(bad("weight shapes do not match the network configuration"));
        }
        let mut body = bytes[8 + len..].chunks_exact(8);
        for w in &mut net.weights {
            let mut data = Vec::with_capacity(w.numel());
            for _ in 0..w.numel() {
                let chunk = body.next().ok_or_else(|| bad("truncated weights"))?;
                data.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
            }
            *w = Tensor::new(w.shape().to_vec(), data)?;
        }
        if body.next().is_some() || !body.remainder().is_empty() {
            return Err(bad("trailing bytes"));
        }
        net.set_normalization(header.normalization)?;
        Ok(net)
    }
}
