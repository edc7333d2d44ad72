//! Checkpoint files: one header line `name f32 d0 d1 …` per tensor, a
//! blank line, then every tensor's values as little-endian `f32`, in
//! header order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut out = String::new();
    for (name, t) in params.iter() {
        out.push_str(name);
        out.push_str(" f32");
        for d in t.shape() {
            out.push(' ');
            out.push_str(&d.to_string());
        }
        out.push('\n');
    }
    out.push('\n');
    let mut bytes = out.into_bytes();
    for t in params.tensors() {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    let split = bytes.windows(2).position(|w| w == b"\n\n").ok_or_else(|| bad("missing header terminator"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not utf-8"))?;
    let payload = &bytes[split + 2..];
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in header.lines() {
        let mut parts = line.split(' ');
        let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| bad("empty tensor name"))?;
        if parts.next() != Some("f32") {
            return Err(bad(&format!("unsupported dtype for `{name}`")));
        }
        let shape = parts
            .map(|d| d.parse::<usize>().map_err(|_| bad(&format!("bad dimension `{d}` for `{name}`"))))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if shape.is_empty() || end > payload.len() {
            return Err(bad(&format!("payload too short for `{name}`")));
        }
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        entries.push((name.to_string(), Tensor::new(shape, data)?));
        offset = end;
    }
    if offset != payload.len() {
        return Err(bad(&format!("{} trailing payload bytes", payload.len() - offset)));
    }
    Ok(entries)
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Copies checkpoint values into `params`, which must have exactly the
/// same names and shapes in the same order. Nothing is written on error.
pub fn restore(params: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
    if entries.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model has {}",
            entries.len(),
            params.len()
        )));
    }
    for ((name, t), (want, cur)) in entries.iter().zip(params.iter()) {
        if name != want || t.shape() != cur.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor `{name}` {:?} does not match `{want}` {:?}",
                t.shape(),
                cur.shape()
            )));
        }
    }
    for (dst, (_, src)) in params.tensors_mut().iter_mut().zip(entries) {
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn store() -> ParamStore {
        let mut rng = SplitMix64::new(4);
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::trunc_normal(&[3, 4], 0.5, &mut rng));
        s.add("a.bias", Tensor::trunc_normal(&[4], 0.5, &mut rng));
        s
    }

    #[test]
    fn roundtrip_within_f32() {
        let s = store();
        let bytes = encode_checkpoint(&s);
        assert!(bytes.starts_with(b"a.weight f32 3 4\na.bias f32 4\n\n"));
        let entries = decode_checkpoint(&bytes).unwrap();
        let mut back = s.clone();
        back.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        restore(&mut back, &entries).unwrap();
        for (a, b) in s.tensors().iter().zip(back.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, f64::from(*x as f32));
                let ulp = f64::from(f32::EPSILON) * x.abs().max(f64::from(f32::MIN_POSITIVE));
                assert!((x - y).abs() <= ulp);
            }
        }
    }

    #[test]
    fn truncated_is_format_error() {
        let bytes = encode_checkpoint(&store());
        for cut in [bytes.len() - 1, bytes.len() - 4, 10] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn restore_rejects_mismatch_without_writing() {
        let s = store();
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[3, 4]));
        other.add("a.bias", Tensor::zeros(&[5]));
        let entries = decode_checkpoint(&encode_checkpoint(&s)).unwrap();
        assert!(restore(&mut other, &entries).is_err());
        assert!(other.tensors()[0].data().iter().all(|&v| v == 0.0));
    }
}
