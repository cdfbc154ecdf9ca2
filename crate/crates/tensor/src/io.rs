//! Binary container for named tensors.
//!
//! Layout (little endian): magic `KSPT`, `u32` version, `u8` dtype byte
//! count, `u32` entry count, then per entry: `u32` name length, UTF-8 name,
//! `u32` rank, `u64` dims, raw element bytes.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::nn::ParamStore;
use crate::{Float, Tensor};

const MAGIC: &[u8; 4] = b"KSPT";
const VERSION: u32 = 1;

pub fn write_store<T: Float, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + store.numel() * T::BYTES);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(T::BYTES as u8);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        T::to_le_bytes_vec(t.data(), &mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_store<T: Float, R: Read>(mut r: R) -> Result<ParamStore<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let width = c.take(1)?[0] as usize;
    if width != T::BYTES {
        return Err(TensorError::Format(format!(
            "file stores {width}-byte elements, reader expects {}",
            T::DTYPE
        )));
    }
    let count = c.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| TensorError::Format(e.to_string()))?
            .to_owned();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = T::from_le_bytes_slice(c.take(n * T::BYTES)?);
        store.add(name, Tensor::from_vec(data, &shape)?);
    }
    if c.pos != bytes.len() {
        return Err(TensorError::Format("trailing bytes".into()));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(any::<f32>(), 1..40), split in 0usize..40) {
            let split = split.min(vals.len());
            let mut store = ParamStore::<f32>::new();
            store.add("a.weight", Tensor::from_vec(vals[..split].to_vec(), &[split]).unwrap());
            store.add("b", Tensor::from_vec(vals[split..].to_vec(), &[1, vals.len() - split]).unwrap());
            let mut buf = Vec::new();
            write_store(&store, &mut buf).unwrap();
            let back: ParamStore<f32> = read_store(&buf[..]).unwrap();
            prop_assert_eq!(back.names(), store.names());
            for (a, b) in back.tensors().iter().zip(store.tensors()) {
                prop_assert_eq!(a.shape(), b.shape());
                let ab: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
                let bb: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }

    #[test]
    fn dtype_mismatch_and_truncation_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::ones(&[4]));
        let mut buf = Vec::new();
        write_store(&store, &mut buf).unwrap();
        assert!(read_store::<f64, _>(&buf[..]).is_err());
        assert!(read_store::<f32, _>(&buf[..buf.len() - 1]).is_err());
    }
}
