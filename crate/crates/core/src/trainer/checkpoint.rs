//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GBNT" | u32 version | u64 config hash
//! u64 len | config text (UTF-8, canonical key = value form)
//! u64 iteration
//! 3 × network: u8 role | u32 layers | per layer: u8 activation, u32 out, u32 in,
//!              out·in f64 weights, out f64 biases
//! 3 × adam:    f64 lr, beta1, beta2, eps | u64 steps | first then second moments
//!              (shapes follow the matching network)
//! sha256 of everything above (32 bytes)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainState;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{Activation, Layer, NetParams, Networks, Role};
use crate::optim::{AdamConfig, AdamState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GBNT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// First eight bytes of the SHA-256 of the config text.
pub fn config_hash(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub iteration: u64,
    pub nets: Networks,
    pub adam: [AdamState; 3],
}

impl Checkpoint {
    pub fn from_state(config_text: &str, s: &TrainState) -> Self {
        Self {
            config_text: config_text.to_string(),
            iteration: s.iteration,
            nets: s.nets.clone(),
            adam: [s.adam_encoder.clone(), s.adam_decoder.clone(), s.adam_discriminator.clone()],
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        let [adam_encoder, adam_decoder, adam_discriminator] = self.adam;
        Ok(TrainState {
            nets: self.nets,
            adam_encoder,
            adam_decoder,
            adam_discriminator,
            iteration: self.iteration,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.extend_from_slice(&config_hash(&self.config_text).to_le_bytes());
        w.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        w.extend_from_slice(self.config_text.as_bytes());
        w.extend_from_slice(&self.iteration.to_le_bytes());
        for net in self.nets.iter() {
            w.push(net.role().tag());
            w.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
            for (layer, act) in net.layers().iter().zip(net.activations()) {
                w.push(match act {
                    Activation::LeakyRelu => 0,
                    Activation::Identity => 1,
                });
                let s = layer.weight.shape();
                w.extend_from_slice(&(s[0] as u32).to_le_bytes());
                w.extend_from_slice(&(s[1] as u32).to_le_bytes());
                put_f64s(&mut w, layer.weight.data());
                put_f64s(&mut w, layer.bias.data());
            }
        }
        for a in &self.adam {
            for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                w.extend_from_slice(&v.to_le_bytes());
            }
            w.extend_from_slice(&a.step_count.to_le_bytes());
            for t in a.first_moment.iter().chain(&a.second_moment) {
                put_f64s(&mut w, t.data());
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic or too short)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, at: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint version {version}")));
        }
        let hash = r.u64()?;
        let len = r.u64()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Corrupt("config text is not UTF-8".into()))?;
        if config_hash(&config_text) != hash {
            return Err(Error::Corrupt("config hash mismatch".into()));
        }
        let iteration = r.u64()?;
        let mut nets = Vec::with_capacity(3);
        for expected in [Role::Encoder, Role::Decoder, Role::Discriminator] {
            let role = Role::from_tag(r.u8()?).ok_or_else(|| Error::Corrupt("unknown network role".into()))?;
            if role != expected {
                return Err(Error::Corrupt(format!("expected {expected:?} network, found {role:?}")));
            }
            let n = r.u32()? as usize;
            let mut layers = Vec::with_capacity(n);
            let mut acts = Vec::with_capacity(n);
            for _ in 0..n {
                acts.push(match r.u8()? {
                    0 => Activation::LeakyRelu,
                    1 => Activation::Identity,
                    t => return Err(Error::Corrupt(format!("unknown activation tag {t}"))),
                });
                let out = r.u32()? as usize;
                let inp = r.u32()? as usize;
                let weight = Tensor::new(vec![out, inp], r.f64s(out * inp)?)?;
                let bias = Tensor::new(vec![out], r.f64s(out)?)?;
                layers.push(Layer { weight, bias });
            }
            nets.push(NetParams::new(role, layers, acts).map_err(|e| Error::Corrupt(e.to_string()))?);
        }
        let discriminator = nets.pop().expect("three nets");
        let decoder = nets.pop().expect("three nets");
        let encoder = nets.pop().expect("three nets");
        let mut adam = Vec::with_capacity(3);
        for net in [&encoder, &decoder, &discriminator] {
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let step_count = r.u64()?;
            let moments = |r: &mut Reader| -> Result<Vec<Tensor>> {
                net.tensors()
                    .iter()
                    .map(|t| Tensor::new(t.shape().to_vec(), r.f64s(t.len())?))
                    .collect()
            };
            let first_moment = moments(&mut r)?;
            let second_moment = moments(&mut r)?;
            adam.push(AdamState {
                config,
                first_moment,
                second_moment,
                step_count,
            });
        }
        if r.at != body.len() {
            return Err(Error::Corrupt("trailing bytes in checkpoint".into()));
        }
        let adam: [AdamState; 3] = adam.try_into().expect("three optimizer states");
        Ok(Self {
            config_text,
            iteration,
            nets: Networks {
                encoder,
                decoder,
                discriminator,
            },
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("checkpoint truncated".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
