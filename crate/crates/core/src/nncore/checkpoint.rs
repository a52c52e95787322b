//! Parameter checkpoint file.
//!
//! Layout (little endian):
//!
//! ```text
//! magic        8 bytes  "CSMCKPT\0"
//! version      u32      currently 1
//! header_len   u64
//! header       JSON     {"meta": <caller metadata>, "tensors": [{"name", "shape", "row_sparse"}]}
//! data         f64 × Σ|tensor|, tensors in header order, row-major
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    row_sparse: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

pub fn write_params<W: Write>(mut w: W, params: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        tensors: params
            .ids()
            .map(|id| TensorHeader {
                name: params.name(id).to_string(),
                shape: params.get(id).shape().to_vec(),
                row_sparse: params.is_row_sparse(id),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for id in params.ids() {
        buf.clear();
        for v in params.get(id).data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version} not supported")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
    let mut params = ParamStore::new();
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(&t.shape, data)?;
        if t.row_sparse {
            params.add_row_sparse(t.name, tensor);
        } else {
            params.add(t.name, tensor);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint data".into()));
    }
    Ok((params, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let mut p = ParamStore::new();
        p.add("a", Tensor::vector(vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]));
        p.add_row_sparse("t", Tensor::from_fn(&[3, 2], |i| (i as f64).sqrt() / 7.0));
        let meta = serde_json::json!({"d": 4});
        let mut buf = Vec::new();
        write_params(&mut buf, &p, &meta).unwrap();
        let (back, m) = read_params(buf.as_slice()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.len(), 2);
        for id in p.ids() {
            let bits = |s: &ParamStore| s.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&p));
            assert_eq!(back.name(id), p.name(id));
            assert_eq!(back.is_row_sparse(id), p.is_row_sparse(id));
        }
        let mut again = Vec::new();
        write_params(&mut again, &back, &m).unwrap();
        assert_eq!(again, buf);

        assert!(read_params(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(read_params(bad.as_slice()).is_err());
    }
}
