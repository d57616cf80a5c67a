//! Binary parameter checkpoints shared by every network.
//!
//! Layout: `b"LADA"`, format version (u32 LE), then records until end of file:
//! name length (u32), name bytes (UTF-8), rank (u32), dims (u32 each), payload
//! (f32 LE). Records appear in parameter declaration order.

use std::fs;
use std::path::Path;

use crate::diffcore::{Params, Tensor};
use crate::error::{LadaError, Result};

pub const MAGIC: &[u8; 4] = b"LADA";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &Params) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.element_count() * 4 + params.len() * 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Params, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let mut params = Params::new();
    while r.pos < bytes.len() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let payload = r.take(count.checked_mul(4).ok_or("overflowing dims")?)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.get(&name).is_some() {
            return Err(format!("duplicate record {name}"));
        }
        params.insert(name, Tensor::new(&dims, data).map_err(|e| e.to_string())?);
    }
    Ok(params)
}

pub fn save(params: &Params, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| LadaError::io(dir, e))?;
        }
    }
    fs::write(path, encode(params)).map_err(|e| LadaError::io(path, e))
}

pub fn load(path: &Path) -> Result<Params> {
    let bytes = fs::read(path).map_err(|e| LadaError::io(path, e))?;
    decode(&bytes).map_err(|reason| LadaError::Format {
        path: path.to_path_buf(),
        reason,
    })
}

/// Checks that `loaded` has exactly the names and shapes of `template`, in order.
pub fn check_layout(template: &Params, loaded: &Params, path: &Path) -> Result<()> {
    let bad = |reason: String| {
        Err(LadaError::Format {
            path: path.to_path_buf(),
            reason,
        })
    };
    if template.len() != loaded.len() {
        return bad(format!("{} records, expected {}", loaded.len(), template.len()));
    }
    for ((a, ta), (b, tb)) in template.iter().zip(loaded.iter()) {
        if a != b || ta.dims() != tb.dims() {
            return bad(format!("record {b}{:?} where {a}{:?} was expected", tb.dims(), ta.dims()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Params {
        let mut p = Params::new();
        p.insert("conv.w", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.25 - 1.0));
        p.insert("bias", Tensor::new(&[1], vec![f32::MIN_POSITIVE]).unwrap());
        p
    }

    #[test]
    fn layout_is_as_documented() {
        let b = encode(&sample());
        assert_eq!(&b[..4], b"LADA");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 6);
        assert_eq!(&b[12..18], b"conv.w");
        assert_eq!(b.len(), 8 + (4 + 6 + 4 + 16 + 72) + (4 + 4 + 4 + 4 + 4));
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let b = encode(&sample());
        let back = decode(&b).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back), b);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let b = encode(&sample());
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut m = b.clone();
        m[0] = b'X';
        assert!(decode(&m).is_err());
        let mut v = b;
        v[4] = 9;
        assert!(decode(&v).is_err());
    }
}
