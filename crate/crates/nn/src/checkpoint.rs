//! Binary parameter checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  b"DPNN"
//! u32    format version
//! u32    entry count
//! entry* u32 name length, name bytes (utf-8), u8 dtype (0 = f64, 1 = f32),
//!        u32 rank, u64 extents[rank], raw element data
//! ```

use std::io::{Read, Write};

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

pub const MAGIC: &[u8; 4] = b"DPNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            other => Err(NnError::Checkpoint(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

pub fn write_tensors<W: Write>(mut w: W, entries: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.dtype.code()])?;
        let shape = e.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match e.dtype {
            DType::F64 => {
                for v in e.tensor.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            DType::F32 => {
                for v in e.tensor.data() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NnError::Checkpoint("parameter name is not utf-8".into()))?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let dtype = DType::from_code(code[0])?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(NnError::Checkpoint(format!("{name}: invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            DType::F64 => {
                let mut b = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut b)?;
                    data.push(f64::from_le_bytes(b));
                }
            }
            DType::F32 => {
                let mut b = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut b)?;
                    data.push(f32::from_le_bytes(b) as f64);
                }
            }
        }
        out.push(NamedTensor {
            name,
            dtype,
            tensor: Tensor::new(shape, data),
        });
    }
    Ok(out)
}

impl ParamStore {
    /// Snapshot of every parameter value as checkpoint entries.
    pub fn to_entries(&self, dtype: DType) -> Vec<NamedTensor> {
        self.ids()
            .map(|id| NamedTensor {
                name: self.name(id).to_string(),
                dtype,
                tensor: self.value(id).clone(),
            })
            .collect()
    }

    pub fn save<W: Write>(&self, w: W, dtype: DType) -> Result<()> {
        write_tensors(w, &self.to_entries(dtype))
    }

    /// Overwrites values of parameters named in `entries`; every parameter
    /// of the store must be present with a matching shape.
    pub fn load_entries(&mut self, entries: &[NamedTensor]) -> Result<()> {
        let ids: Vec<_> = self.ids().collect();
        for id in ids {
            let name = self.name(id).to_string();
            let e = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing parameter {name}")))?;
            if e.tensor.shape() != self.value(id).shape() {
                return Err(NnError::Checkpoint(format!(
                    "{name}: checkpoint shape {:?} != {:?}",
                    e.tensor.shape(),
                    self.value(id).shape()
                )));
            }
            *self.value_mut(id) = e.tensor.clone();
        }
        Ok(())
    }

    pub fn load<R: Read>(&mut self, r: R) -> Result<()> {
        let entries = read_tensors(r)?;
        self.load_entries(&entries)
    }

    /// Values plus Adam moments (`<name>#m`, `<name>#v`) and step counts
    /// (`<name>#steps`), always in f64.
    pub fn to_entries_with_optimizer(&self) -> Vec<NamedTensor> {
        let mut out = self.to_entries(DType::F64);
        for id in self.ids() {
            let p = self.param(id);
            let (m, v) = p.adam_moments();
            let steps = Tensor::new(vec![1], vec![p.adam_steps() as f64]);
            for (suffix, t) in [("m", m.clone()), ("v", v.clone()), ("steps", steps)] {
                out.push(NamedTensor {
                    name: format!("{}#{suffix}", p.name),
                    dtype: DType::F64,
                    tensor: t,
                });
            }
        }
        out
    }

    pub fn load_entries_with_optimizer(&mut self, entries: &[NamedTensor]) -> Result<()> {
        self.load_entries(entries)?;
        let ids: Vec<_> = self.ids().collect();
        for id in ids {
            let name = self.name(id).to_string();
            let get = |suffix: &str| {
                let key = format!("{name}#{suffix}");
                entries
                    .iter()
                    .find(|e| e.name == key)
                    .map(|e| e.tensor.clone())
                    .ok_or_else(|| NnError::Checkpoint(format!("missing optimizer state {key}")))
            };
            let steps = get("steps")?.item() as u64;
            self.set_adam_state(id, get("m")?, get("v")?, steps)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimizer_state_round_trip() {
        let mut s = sample_store();
        let ids: Vec<_> = s.ids().collect();
        for &id in &ids {
            s.grad_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, g)| *g = i as f64 - 1.5);
        }
        crate::Adam::default().step_all(&mut s).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &s.to_entries_with_optimizer()).unwrap();
        let mut t = sample_store();
        t.load_entries_with_optimizer(&read_tensors(buf.as_slice()).unwrap()).unwrap();
        for &id in &ids {
            assert_eq!(s.value(id), t.value(id));
            assert_eq!(s.param(id).adam_moments(), t.param(id).adam_moments());
            assert_eq!(t.param(id).adam_steps(), 1);
        }
    }

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -3.25, 0.1]));
        s.add("a.bias", Tensor::new(vec![3], vec![0.5, 0.25, -0.125]));
        s
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.save(&mut buf, DType::F64).unwrap();
        let mut t = sample_store();
        for id in t.ids().collect::<Vec<_>>() {
            t.value_mut(id).data_mut().fill(9.0);
        }
        t.load(buf.as_slice()).unwrap();
        for id in s.ids() {
            let a: Vec<u64> = s.value(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t.value(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let mut again = Vec::new();
        t.save(&mut again, DType::F64).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn f32_round_trip_is_stable() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.save(&mut buf, DType::F32).unwrap();
        let entries = read_tensors(buf.as_slice()).unwrap();
        assert!(entries.iter().all(|e| e.dtype == DType::F32));
        let mut again = Vec::new();
        write_tensors(&mut again, &entries).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_wrong_version_and_magic() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.save(&mut buf, DType::F64).unwrap();
        let mut bad = buf.clone();
        bad[4] = 99;
        assert!(read_tensors(bad.as_slice()).unwrap_err().to_string().contains("version"));
        bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensors(bad.as_slice()).is_err());
    }

    #[test]
    fn load_checks_shapes() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.save(&mut buf, DType::F64).unwrap();
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[3, 2]));
        other.add("a.bias", Tensor::zeros(&[3]));
        assert!(other.load(buf.as_slice()).is_err());
    }
}
