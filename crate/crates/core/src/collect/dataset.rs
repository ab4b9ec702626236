use std::path::Path;

use rand::Rng;

use crate::envs::{Family, TaskSpec};
use crate::numcore::params::ByteReader;
use crate::taskenc::Context;
use crate::{Error, Result};

/// One `(s, a, r, s')` record.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTuple {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

impl TransitionTuple {
    /// `[s, a, r, s']`, the transition-encoder input.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.s.len() + self.a.len() + 1);
        self.write_features(&mut out);
        out
    }

    pub fn write_features(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.s);
        out.extend_from_slice(&self.a);
        out.push(self.r);
        out.extend_from_slice(&self.s_next);
    }

    pub fn feature_dim(obs_dim: usize, action_dim: usize) -> usize {
        2 * obs_dim + action_dim + 1
    }

    pub fn is_finite(&self) -> bool {
        self.r.is_finite()
            && self
                .s
                .iter()
                .chain(&self.a)
                .chain(&self.s_next)
                .all(|v| v.is_finite())
    }
}

/// Transitions of one task in collection order. `done` marks episode ends.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub task: TaskSpec,
    pub tuples: Vec<TransitionTuple>,
}

const DATASET_MAGIC: &[u8; 5] = b"CORO1";

impl OfflineDataset {
    pub fn new(task: TaskSpec, tuples: Vec<TransitionTuple>) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let (od, ad) = (task.obs_dim(), task.action_dim());
        for t in &tuples {
            if t.s.len() != od || t.s_next.len() != od || t.a.len() != ad {
                return Err(Error::DimensionMismatch {
                    context: "dataset tuple",
                    expected: TransitionTuple::feature_dim(od, ad),
                    actual: t.features().len(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    name: "dataset tuple".into(),
                });
            }
        }
        Ok(Self { task, tuples })
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.task.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.task.action_dim()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        let name = self.task.family.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(self.task.params.len() as u32).to_le_bytes());
        for p in &self.task.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&(self.obs_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.action_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for t in &self.tuples {
            for v in t.s.iter().chain(&t.a).chain([&t.r]).chain(&t.s_next) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(t.done as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(5)? != DATASET_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("family name is not utf-8".into()))?;
        let family = Family::from_name(name)?;
        let n_params = r.u32()? as usize;
        let params = (0..n_params).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let task = TaskSpec::new(family, params)?;
        let od = r.u32()? as usize;
        let ad = r.u32()? as usize;
        if od != task.obs_dim() || ad != task.action_dim() {
            return Err(Error::Format(format!(
                "dims ({od}, {ad}) do not match family {family}"
            )));
        }
        let k = r.u64()? as usize;
        let vec = |n: usize, r: &mut ByteReader| (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>();
        let mut tuples = Vec::with_capacity(k.min(1 << 20));
        for _ in 0..k {
            let s = vec(od, &mut r)?;
            let a = vec(ad, &mut r)?;
            let rew = r.f64()?;
            let s_next = vec(od, &mut r)?;
            let done = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("bad done byte {b}"))),
            };
            tuples.push(TransitionTuple {
                s,
                a,
                r: rew,
                s_next,
                done,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after dataset".into()));
        }
        Self::new(task, tuples)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// A contiguous window `tuples[j..j+length]` with `j` uniform over valid starts.
pub fn sample_context<R: Rng + ?Sized>(
    dataset: &OfflineDataset,
    length: usize,
    rng: &mut R,
) -> Result<Context> {
    if length == 0 {
        return Err(Error::Empty("context length"));
    }
    if dataset.len() < length {
        return Err(Error::DatasetTooSmall {
            available: dataset.len(),
            requested: length,
        });
    }
    let start = rng.gen_range(0..=dataset.len() - length);
    Context::new(dataset.tuples[start..start + length].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_dataset(n: usize) -> OfflineDataset {
        let task = TaskSpec::new(Family::PointRobot, vec![0.5, -0.5]).unwrap();
        let tuples = (0..n)
            .map(|i| TransitionTuple {
                s: vec![i as f64, 0.0],
                a: vec![0.1, -0.1],
                r: -(i as f64),
                s_next: vec![i as f64 + 1.0, 0.0],
                done: (i + 1) % 20 == 0,
            })
            .collect();
        OfflineDataset::new(task, tuples).unwrap()
    }

    #[test]
    fn full_length_context_is_whole_dataset() {
        let d = toy_dataset(30);
        let c = sample_context(&d, 30, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(c.tuples, d.tuples);
    }

    #[test]
    fn oversized_context_errors() {
        let d = toy_dataset(30);
        match sample_context(&d, 31, &mut ChaCha8Rng::seed_from_u64(0)) {
            Err(Error::DatasetTooSmall {
                available,
                requested,
            }) => assert_eq!((available, requested), (30, 31)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn contexts_are_contiguous() {
        let d = toy_dataset(100);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = sample_context(&d, 7, &mut rng).unwrap();
            let first = c.tuples[0].s[0];
            for (k, t) in c.tuples.iter().enumerate() {
                assert_eq!(t.s[0], first + k as f64);
            }
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let task = TaskSpec::new(Family::LineVel, vec![1.0]).unwrap();
        assert!(OfflineDataset::new(task, vec![]).is_err());
    }

    #[test]
    fn corrupt_bytes_rejected() {
        let mut bytes = toy_dataset(3).to_bytes();
        bytes[0] = b'X';
        assert!(OfflineDataset::from_bytes(&bytes).is_err());
        let bytes = toy_dataset(3).to_bytes();
        assert!(OfflineDataset::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    proptest! {
        #[test]
        fn dataset_bytes_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 7 * 5), dones in proptest::collection::vec(any::<bool>(), 5)) {
            let task = TaskSpec::new(Family::PointRobot, vec![0.25, -0.75]).unwrap();
            let tuples: Vec<_> = values.chunks(7).zip(&dones).map(|(v, &done)| TransitionTuple {
                s: v[0..2].to_vec(), a: v[2..4].to_vec(), r: v[4], s_next: v[5..7].to_vec(), done,
            }).collect();
            let d = OfflineDataset::new(task, tuples).unwrap();
            let back = OfflineDataset::from_bytes(&d.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), d.to_bytes());
            prop_assert_eq!(back, d);
        }
    }
}
