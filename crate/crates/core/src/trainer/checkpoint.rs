//! The `PXK1` checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "PXK1"  u16 version
//! u32 len, config text (key=value lines)
//! u32 len, state text  (key=value lines: step, rng positions, ...)
//! u32 tensor count
//! per tensor: u16 name len, name (UTF-8), u8 dtype, u8 rank, u64 dims[rank], raw data
//! ```
//!
//! dtype codes: 0 = f64, 1 = f32, 2 = i8, 3 = u32.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{PoetError, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"PXK1";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I8(Vec<i8>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::F32(_) => 1,
            TensorData::I8(_) => 2,
            TensorData::U32(_) => 3,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F64(_) => "f64",
            TensorData::F32(_) => "f32",
            TensorData::I8(_) => "i8",
            TensorData::U32(_) => "u32",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn elem_bytes(code: u8) -> Result<usize> {
        Ok(match code {
            0 => 8,
            1 | 3 => 4,
            2 => 1,
            other => return Err(PoetError::Format(format!("unknown dtype code {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub state: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: TensorData) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u64).collect(),
            data,
        });
    }

    pub fn push_float<T: Scalar>(&mut self, name: impl Into<String>, dims: &[usize], data: &[T]) {
        let data = if T::DTYPE_CODE == 0 {
            TensorData::F64(data.iter().map(|x| x.as_f64()).collect())
        } else {
            TensorData::F32(data.iter().map(|x| x.as_f64() as f32).collect())
        };
        self.push(name, dims, data);
    }

    pub fn set_state(&mut self, key: &str, value: impl ToString) {
        self.state.insert(key.to_string(), value.to_string());
    }

    pub fn state_value(&self, key: &str) -> Result<&str> {
        self.state
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| PoetError::Format(format!("checkpoint state is missing '{key}'")))
    }

    pub fn state_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let v = self.state_value(key)?;
        v.parse().map_err(|_| PoetError::Format(format!("checkpoint state '{key}' has bad value '{v}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| PoetError::Format(format!("checkpoint has no tensor '{name}'")))
    }

    /// Float tensor as `T`; the stored dtype must match `T` exactly.
    pub fn float<T: Scalar>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let t = self.tensor(name)?;
        let dims = t.dims.iter().map(|&d| d as usize).collect();
        let data = match (&t.data, T::DTYPE_CODE) {
            (TensorData::F64(v), 0) => v.iter().map(|&x| T::from_f64(x)).collect(),
            (TensorData::F32(v), 1) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            (d, _) => {
                return Err(PoetError::Format(format!("tensor '{name}' has dtype {}, expected {}", d.dtype_name(), T::NAME)));
            }
        };
        Ok((dims, data))
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match &self.tensor(name)?.data {
            TensorData::U32(v) => Ok(v),
            d => Err(PoetError::Format(format!("tensor '{name}' has dtype {}, expected u32", d.dtype_name()))),
        }
    }

    pub fn i8s(&self, name: &str) -> Result<&[i8]> {
        match &self.tensor(name)?.data {
            TensorData::I8(v) => Ok(v),
            d => Err(PoetError::Format(format!("tensor '{name}' has dtype {}, expected i8", d.dtype_name()))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let state: String = self.state.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        for text in [&self.config, &state] {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype_code());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(PoetError::Format("bad magic (not a PXK1 checkpoint)".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(PoetError::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let config = r.text()?;
        let state_text = r.text()?;
        let mut state = BTreeMap::new();
        for line in state_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| PoetError::Format(format!("bad state line '{line}'")))?;
            state.insert(k.to_string(), v.to_string());
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| PoetError::Format("tensor name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(r.array()?));
            }
            let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).ok_or_else(|| PoetError::Format(format!("tensor '{name}' dims overflow")))? as usize;
            let eb = TensorData::elem_bytes(code)?;
            let raw = r.take(n.checked_mul(eb).ok_or_else(|| PoetError::Format("tensor size overflow".into()))?)?;
            let data = match code {
                0 => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
                1 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
                2 => TensorData::I8(raw.iter().map(|&b| b as i8).collect()),
                _ => TensorData::U32(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4"))).collect()),
            };
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(PoetError::Format(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, state, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(PoetError::Format(format!("truncated checkpoint at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn text(&mut self) -> Result<String> {
        let n = u32::from_le_bytes(self.array()?) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| PoetError::Format("text section is not UTF-8".into()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| PoetError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| PoetError::io(path.display().to_string(), e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Human-readable summary of a container.
pub fn describe(ckpt: &Checkpoint) -> String {
    let mut s = format!("format PXK1 v{VERSION}\n[config]\n{}", ckpt.config);
    s.push_str("[state]\n");
    for (k, v) in &ckpt.state {
        s.push_str(&format!("{k}={v}\n"));
    }
    s.push_str(&format!("[tensors] {}\n", ckpt.tensors.len()));
    for t in &ckpt.tensors {
        let norm = match &t.data {
            TensorData::F64(v) => Some(v.iter().map(|x| x * x).sum::<f64>().sqrt()),
            TensorData::F32(v) => Some(v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()),
            _ => None,
        };
        let dims: Vec<String> = t.dims.iter().map(u64::to_string).collect();
        s.push_str(&format!("{:<28} {:>4} [{}]", t.name, t.data.dtype_name(), dims.join("x")));
        if let Some(n) = norm {
            s.push_str(&format!(" |.|_F={n:.6e}"));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint { config: "task=regression\n".into(), ..Default::default() };
        c.set_state("step", 12);
        c.push("a", &[2, 2], TensorData::F64(vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]));
        c.push("b", &[3], TensorData::F32(vec![1.5, 2.5, -7.0]));
        c.push("c", &[2], TensorData::I8(vec![-127, 127]));
        c.push("d", &[3], TensorData::U32(vec![2, 0, 1]));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"PXK1");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let mut bytes = sample().to_bytes();
        let full = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(PoetError::Format(m)) if m.contains("magic")));
        let mut v = full.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(PoetError::Format(m)) if m.contains("version")));
        for cut in [3, 10, full.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&full[..cut]), Err(PoetError::Format(_))));
        }
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let c = sample();
        assert!(c.float::<f64>("a").is_ok());
        assert!(matches!(c.float::<f32>("a"), Err(PoetError::Format(m)) if m.contains("dtype")));
        assert!(c.u32s("b").is_err());
        assert!(c.tensor("zzz").is_err());
    }
}
