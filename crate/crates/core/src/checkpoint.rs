//! `MTCK` named-tensor checkpoints.
//!
//! Layout, little-endian: magic `MTCK`, `u32` version, `u32` record count,
//! then per record `u32` name length, UTF-8 name, `u8` dtype (0 = f32),
//! `u32` rank, `rank × u64` dims and the raw values.

use std::collections::HashSet;
use std::path::Path;

use crate::codec::{atomic_write, Reader};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Role};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
/// Prefix of classification-head tensors that fine-tuning discards.
pub const CLASSIFY_HEAD_PREFIX: &str = "cls_head.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadPolicy {
    /// Names and shapes must match the store one to one.
    Exact,
    /// Fill every backbone tensor; classification-head records are ignored.
    BackboneOnly,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Checkpoint {
        Checkpoint {
            tensors: store
                .entries()
                .iter()
                .map(|e| {
                    (
                        e.name.clone(),
                        Tensor::from_vec(e.tensor.shape(), e.tensor.data().to_vec()).expect("valid shape"),
                    )
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(DTYPE_F32);
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let n = r.u32()?;
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor {name}: unsupported dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| {
                    let d = r.u64()?;
                    usize::try_from(d).map_err(|_| Error::Format(format!("tensor {name}: dim {d} too large")))
                })
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name}: element count overflows")))?;
            let data = r.f32s(count)?;
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if !r.finished() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&crate::codec::read(path)?)
    }

    /// Copies values into `store` under `policy`. Everything is validated
    /// before the first tensor is written.
    pub fn apply(&self, store: &mut ParamStore, policy: LoadPolicy) -> Result<usize> {
        let mut unknown = Vec::new();
        let mut plan = Vec::new();
        for (name, t) in &self.tensors {
            match store.find(name) {
                None if policy == LoadPolicy::BackboneOnly && name.starts_with(CLASSIFY_HEAD_PREFIX) => {}
                None => unknown.push(name.as_str()),
                Some(id) => {
                    let live = store.get(id);
                    if live.shape() != t.shape() {
                        return Err(Error::Config(format!(
                            "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                            t.shape(),
                            live.shape()
                        )));
                    }
                    if policy == LoadPolicy::Exact || store.entry(id).role == Role::Backbone {
                        plan.push((id, t));
                    }
                }
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown tensors in checkpoint: {}",
                unknown.join(", ")
            )));
        }
        let loaded: HashSet<_> = plan.iter().map(|(id, _)| id.index()).collect();
        let missing: Vec<&str> = store
            .entries()
            .iter()
            .enumerate()
            .filter(|(i, e)| !loaded.contains(i) && (policy == LoadPolicy::Exact || e.role == Role::Backbone))
            .map(|(_, e)| e.name.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint lacks tensors: {}",
                missing.join(", ")
            )));
        }
        for (id, t) in &plan {
            store.get_mut(*id).data_mut().copy_from_slice(t.data());
        }
        Ok(plan.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "a",
            Role::Backbone,
            Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE]).unwrap(),
        )
        .unwrap();
        s.add(
            "decoder.bias",
            Role::Decoder,
            Tensor::from_vec(&[3], vec![0.5, 0.25, 0.0]).unwrap(),
        )
        .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let ck = Checkpoint::from_store(&s);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mtck");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), ck.encode());
        let mut t = store();
        t.get_mut(t.find("a").unwrap()).data_mut().fill(0.0);
        assert_eq!(back.apply(&mut t, LoadPolicy::Exact).unwrap(), 2);
        assert_eq!(Checkpoint::from_store(&t), ck);
    }

    #[test]
    fn failures_leave_store_untouched() {
        let ck = Checkpoint::from_store(&store());
        let bytes = ck.encode();
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));

        let mut extra = ck.clone();
        extra.tensors.push(("ghost.weight".into(), Tensor::scalar(1.0)));
        extra.tensors[0].1.data_mut()[0] = 99.0;
        let mut s = store();
        let err = extra.apply(&mut s, LoadPolicy::Exact).unwrap_err();
        assert!(err.to_string().contains("ghost.weight"));
        assert_eq!(s.get(s.find("a").unwrap()).data()[0], 1.0);

        let mut wrong = ck.clone();
        wrong.tensors[0].1 = Tensor::zeros(&[4]).unwrap();
        assert!(matches!(wrong.apply(&mut s, LoadPolicy::Exact), Err(Error::Config(_))));
    }

    #[test]
    fn backbone_only_skips_heads() {
        let mut ck = Checkpoint::from_store(&store());
        ck.tensors.retain(|(n, _)| n == "a");
        ck.tensors.push(("cls_head.weight".into(), Tensor::scalar(3.0)));
        let mut s = store();
        assert_eq!(ck.apply(&mut s, LoadPolicy::BackboneOnly).unwrap(), 1);
        assert!(ck.apply(&mut s, LoadPolicy::Exact).is_err());
    }
}
