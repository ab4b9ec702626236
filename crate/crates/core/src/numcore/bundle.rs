use std::path::Path;

use super::params::ByteReader;
use super::ParamVector;
use crate::{Error, Result};

const BUNDLE_MAGIC: &[u8; 5] = b"CORB1";

/// Named parameter vectors plus string records, stored in one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub records: Vec<(String, String)>,
    pub params: Vec<(String, ParamVector)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut ByteReader<'_>) -> Result<String> {
    let n = r.u32()? as usize;
    std::str::from_utf8(r.take(n)?)
        .map(str::to_string)
        .map_err(|_| Error::Format("bundle string is not utf-8".into()))
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Later records with the same key replace earlier ones.
    pub fn record(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.records.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.records.push((key.to_string(), value)),
        }
    }

    pub fn insert(&mut self, tag: &str, params: ParamVector) {
        match self.params.iter_mut().find(|(t, _)| t == tag) {
            Some(slot) => slot.1 = params,
            None => self.params.push((tag.to_string(), params)),
        }
    }

    pub fn get_record(&self, key: &str) -> Result<&str> {
        self.records
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Missing(format!("bundle record `{key}`")))
    }

    pub fn get(&self, tag: &str) -> Result<&ParamVector> {
        self.params
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Missing(format!("bundle parameters `{tag}`")))
    }

    /// Entries whose tag starts with `prefix`, in insertion order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a ParamVector)> + 'a {
        self.params
            .iter()
            .filter(move |(t, _)| t.starts_with(prefix))
            .map(|(t, p)| (t.as_str(), p))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (k, v) in &self.records {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (t, p) in &self.params {
            put_str(&mut out, t);
            out.extend_from_slice(&p.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(5)? != BUNDLE_MAGIC {
            return Err(Error::Format("bad bundle magic".into()));
        }
        let mut b = Self::new();
        for _ in 0..r.u32()? {
            let k = get_str(&mut r)?;
            let v = get_str(&mut r)?;
            b.records.push((k, v));
        }
        for _ in 0..r.u32()? {
            let t = get_str(&mut r)?;
            let (p, used) = ParamVector::from_bytes(&bytes[r.pos..])?;
            r.take(used)?;
            b.params.push((t, p));
        }
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after bundle".into()));
        }
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Layout;
    use std::sync::Arc;

    fn pv(values: Vec<f64>) -> ParamVector {
        let layout = Layout::new([("w", vec![values.len()])]).unwrap();
        ParamVector::new(Arc::new(layout), values).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut b = Bundle::new();
        b.record("mode", "corro");
        b.record("family", "line-vel");
        b.insert("a", pv(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        b.insert("b.c", pv(vec![std::f64::consts::PI]));
        let back = Bundle::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.get("a").unwrap().values()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.with_prefix("b.").count(), 1);
    }

    #[test]
    fn replacement_and_lookup_errors() {
        let mut b = Bundle::new();
        b.record("k", "1");
        b.record("k", "2");
        assert_eq!(b.get_record("k").unwrap(), "2");
        assert_eq!(b.records.len(), 1);
        assert!(matches!(b.get("nope"), Err(Error::Missing(_))));
        assert!(matches!(b.get_record("nope"), Err(Error::Missing(_))));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut b = Bundle::new();
        b.insert("a", pv(vec![1.0, 2.0]));
        let bytes = b.to_bytes();
        assert!(Bundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Bundle::from_bytes(&extra).is_err());
        assert!(Bundle::from_bytes(b"XXXXX").is_err());
    }
}
