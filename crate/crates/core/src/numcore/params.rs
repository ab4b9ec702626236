use std::sync::Arc;

use rand::Rng;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered `(name, shape)` partition of a flat parameter array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, Vec<usize>)>) -> Result<Self> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (name, shape) in entries {
            let name = name.into();
            if shape.is_empty() || shape.contains(&0) {
                return Err(Error::Layout(format!("entry `{name}` has shape {shape:?}")));
            }
            if out.iter().any(|e: &LayoutEntry| e.name == name) {
                return Err(Error::Layout(format!("duplicate entry `{name}`")));
            }
            let entry = LayoutEntry {
                name,
                shape,
                offset,
            };
            offset += entry.len();
            out.push(entry);
        }
        Ok(Self {
            entries: out,
            total: offset,
        })
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Name of the entry containing flat index `index`.
    pub fn name_at(&self, index: usize) -> &str {
        self.entries
            .iter()
            .find(|e| e.range().contains(&index))
            .map(|e| e.name.as_str())
            .unwrap_or("<out of range>")
    }
}

/// Flat `f64` parameters with an immutable layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if layout.total_len() != values.len() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: layout.total_len(),
                actual: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { values, layout }
    }

    /// Glorot-uniform weights for every rank-2 entry, zeros elsewhere.
    pub fn glorot<R: Rng + ?Sized>(layout: Arc<Layout>, rng: &mut R) -> Self {
        let mut values = vec![0.0; layout.total_len()];
        for e in layout.entries() {
            if let [fan_out, fan_in] = e.shape[..] {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in &mut values[e.range()] {
                    *v = rng.gen_range(-limit..=limit);
                }
            }
        }
        Self { values, layout }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout.entry(name).map(|e| &self.values[e.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.entry(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    /// Errors with the first parameter name holding a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite {
                name: self.layout.name_at(i).to_string(),
            }),
        }
    }

    /// Header (entry count, then per entry: name length, name bytes, rank,
    /// dims) followed by the values, all little-endian. Counts, lengths and
    /// ranks are `u32`; dims are `u64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(&(self.layout.entries.len() as u32).to_le_bytes());
        for e in self.layout.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`ParamVector::to_bytes`]; returns the vector and the number
    /// of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = ByteReader::new(bytes);
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("parameter name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            entries.push((name, shape));
        }
        let layout = Arc::new(Layout::new(entries)?);
        let mut values = Vec::with_capacity(layout.total_len());
        for _ in 0..layout.total_len() {
            values.push(r.f64()?);
        }
        Ok((Self { values, layout }, r.pos))
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
