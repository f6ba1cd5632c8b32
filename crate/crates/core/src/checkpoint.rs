//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ADSVCKPT"
//! version  u32
//! config   u32 length + UTF-8 text (the run or pre-training config)
//! step     u64
//! count    u32
//! per parameter:
//!   name       u32 length + UTF-8 bytes
//!   component  u8
//!   trainable  u8
//!   rank       u32, then rank × u64 dims
//!   values     f64 × numel
//! hash     u64  FNV-1a over the values of every backbone record
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::param::{fnv1a64, Component, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADSVCKPT";
pub const VERSION: u32 = 1;

const COMPONENT_CODES: [Component; 8] = [
    Component::Featurizer,
    Component::Transformer,
    Component::InnerAdapter,
    Component::InterAdapter,
    Component::LayerWeights,
    Component::Scale,
    Component::SvHead,
    Component::Classifier,
];

fn component_code(c: Component) -> u8 {
    COMPONENT_CODES.iter().position(|x| *x == c).expect("listed") as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub component: Component,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub params: Vec<ParamRecord>,
    pub backbone_hash: u64,
}

impl Checkpoint {
    /// Snapshot of every parameter in `store` except the training-only
    /// classifier.
    pub fn from_store(config: String, step: u64, store: &ParamStore) -> Self {
        let params = store
            .iter()
            .filter(|(_, p)| p.component != Component::Classifier)
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                component: p.component,
                trainable: p.trainable,
                value: p.value.clone(),
            })
            .collect();
        Checkpoint {
            config,
            step,
            params,
            backbone_hash: store.backbone_hash(),
        }
    }

    /// Only the featurizer and transformer stack.
    pub fn backbone_only(config: String, step: u64, store: &ParamStore) -> Self {
        let mut c = Self::from_store(config, step, store);
        c.params.retain(|p| p.component.is_backbone());
        c
    }

    pub fn compute_backbone_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| p.component.is_backbone()) {
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// Copy every record into the same-named parameter of `store`. Values
    /// only; trainable flags stay as the caller's freeze policy set them.
    pub fn restore_into(&self, store: &mut ParamStore, components: impl Fn(Component) -> bool) -> Result<()> {
        for rec in self.params.iter().filter(|r| components(r.component)) {
            let id = store
                .find(&rec.name)
                .ok_or_else(|| Error::Data(format!("checkpoint parameter '{}' has no counterpart in the model", rec.name)))?;
            if store.get(id).component != rec.component {
                return Err(Error::Data(format!("checkpoint parameter '{}' changed component", rec.name)));
            }
            store.set_value(id, rec.value.clone()).map_err(|_| {
                Error::Data(format!(
                    "checkpoint parameter '{}' has shape {:?}, model expects {:?}",
                    rec.name,
                    rec.value.shape(),
                    store.value(id).shape()
                ))
            })?;
        }
        for (_, p) in store.iter().filter(|(_, p)| components(p.component)) {
            if p.component != Component::Classifier && !self.params.iter().any(|r| r.name == p.name) {
                return Err(Error::Data(format!("checkpoint lacks parameter '{}'", p.name)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.push(component_code(p.component));
            out.push(u8::from(p.trainable));
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.backbone_hash.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                what: "checkpoint",
                found: version.to_string(),
                expected: VERSION.to_string(),
            });
        }
        let config = r.string()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let code = r.take(1)?[0] as usize;
            let component = *COMPONENT_CODES
                .get(code)
                .ok_or_else(|| r.err(format!("unknown component code {code}")))?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(r.err(format!("bad trainable flag {b}"))),
            };
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.err(format!("parameter '{name}' shape {shape:?} exceeds file size")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| r.err(format!("parameter '{name}': {e}")))?;
            params.push(ParamRecord {
                name,
                component,
                trainable,
                value,
            });
        }
        let backbone_hash = r.u64()?;
        if r.remaining() != 0 {
            return Err(r.err(format!("{} trailing bytes", r.remaining())));
        }
        let ckpt = Checkpoint {
            config,
            step,
            params,
            backbone_hash,
        };
        let actual = ckpt.compute_backbone_hash();
        if actual != backbone_hash {
            return Err(Error::Data(format!(
                "{path}: backbone hash mismatch (stored {backbone_hash:016x}, computed {actual:016x})"
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Data(format!("{}: byte {}: {}", self.path, self.pos, msg.into()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Encoder, EncoderConfig};
    use crate::head::ClassifierHead;

    fn store() -> ParamStore {
        let cfg = EncoderConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            input_dim: 5,
            seed: 3,
        };
        let (_, mut s) = Encoder::build(&cfg).unwrap();
        ClassifierHead::declare(&mut s, 8, 4, 1);
        s
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let s = store();
        let c = Checkpoint::from_store("mode = \"inner\"\n".into(), 42, &s);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "c").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.backbone_hash, s.backbone_hash());
    }

    #[test]
    fn classifier_is_never_saved() {
        let c = Checkpoint::from_store(String::new(), 0, &store());
        assert!(c.params.iter().all(|p| p.component != Component::Classifier));
        assert!(!c.params.is_empty());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::from_store(String::new(), 1, &store()).to_bytes();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], "c"), Err(Error::Data(_))));
        }
        let mut flipped = bytes.clone();
        let k = bytes.len() - 20;
        flipped[k] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped, "c").is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2, "c"),
            Err(Error::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn restore_copies_values_by_name() {
        let src = store();
        let c = Checkpoint::backbone_only(String::new(), 0, &src);
        let mut dst = store();
        for id in dst.ids().collect::<Vec<_>>() {
            let shape = dst.value(id).shape().to_vec();
            dst.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        c.restore_into(&mut dst, Component::is_backbone).unwrap();
        assert_eq!(dst.backbone_hash(), src.backbone_hash());
    }
}
