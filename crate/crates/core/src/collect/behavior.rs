use std::path::Path;

use rand::Rng;

use super::dataset::{OfflineDataset, TransitionTuple};
use super::sac::{SacBatch, SacConfig, SacLearner, SacNetworks};
use crate::envs::{env_reset, env_step, Family, TaskSpec};
use crate::numcore::params::ByteReader;
use crate::numcore::ParamVector;
use crate::{Error, Result};

/// Actor snapshot of task `task_index` after `epoch` gradient updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub task_index: usize,
    pub epoch: usize,
    pub actor: ParamVector,
}

/// Behavior policies saved during collection, used as OOD context collectors.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointPool {
    pub family: Family,
    pub hidden_widths: Vec<usize>,
    pub entries: Vec<Checkpoint>,
}

const POOL_MAGIC: &[u8; 5] = b"CORK1";

impl CheckpointPool {
    pub fn new(family: Family, hidden_widths: Vec<usize>) -> Self {
        Self {
            family,
            hidden_widths,
            entries: Vec::new(),
        }
    }

    pub fn networks(&self) -> Result<SacNetworks> {
        let m = self.family.model();
        SacNetworks::new(m.obs_dim(), 0, m.action_dim(), m.action_bound(), &self.hidden_widths)
    }

    pub fn get(&self, task_index: usize, epoch: usize) -> Option<&Checkpoint> {
        self.entries
            .iter()
            .find(|c| c.task_index == task_index && c.epoch == epoch)
    }

    pub fn merge(&mut self, other: CheckpointPool) -> Result<()> {
        if other.family != self.family || other.hidden_widths != self.hidden_widths {
            return Err(Error::Format("checkpoint pools describe different networks".into()));
        }
        self.entries.extend(other.entries);
        Ok(())
    }

    /// Magic, family name, hidden widths, then `(task_index, epoch, params)` entries.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(POOL_MAGIC);
        let name = self.family.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(self.hidden_widths.len() as u32).to_le_bytes());
        for w in &self.hidden_widths {
            out.extend_from_slice(&(*w as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for c in &self.entries {
            out.extend_from_slice(&(c.task_index as u64).to_le_bytes());
            out.extend_from_slice(&(c.epoch as u64).to_le_bytes());
            out.extend_from_slice(&c.actor.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(5)? != POOL_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("family name is not utf-8".into()))?;
        let family = Family::from_name(name)?;
        let depth = r.u32()? as usize;
        let hidden_widths = (0..depth).map(|_| r.u64().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let count = r.u64()? as usize;
        let mut pool = Self::new(family, hidden_widths);
        let expected = pool.networks()?.actor.layout().clone();
        for _ in 0..count {
            let task_index = r.u64()? as usize;
            let epoch = r.u64()? as usize;
            let (actor, used) = ParamVector::from_bytes(&bytes[r.pos..])?;
            r.take(used)?;
            if actor.layout().as_ref() != expected.as_ref() {
                return Err(Error::Format("checkpoint layout does not match its network".into()));
            }
            pool.entries.push(Checkpoint {
                task_index,
                epoch,
                actor,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after checkpoints".into()));
        }
        Ok(pool)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn uniform_action<R: Rng + ?Sized>(task: &TaskSpec, rng: &mut R) -> Vec<f64> {
    let b = task.model().action_bound();
    (0..task.action_dim()).map(|_| rng.gen_range(-b..=b)).collect()
}

pub(crate) fn batch_from_tuples<'a>(tuples: impl IntoIterator<Item = &'a TransitionTuple>) -> SacBatch {
    let mut b = SacBatch::default();
    for t in tuples {
        b.rows += 1;
        b.obs.extend_from_slice(&t.s);
        b.actions.extend_from_slice(&t.a);
        b.rewards.push(t.r);
        b.next_obs.extend_from_slice(&t.s_next);
        b.dones.push(if t.done { 1.0 } else { 0.0 });
    }
    b
}

/// Trains SAC from scratch on `task`. Returns actor checkpoints (epoch 0 and
/// every `checkpoint_interval` updates) and the full replay buffer as the
/// offline dataset, in collection order.
pub fn train_behavior_policy<R: Rng + ?Sized>(
    task: &TaskSpec,
    task_index: usize,
    cfg: &SacConfig,
    rng: &mut R,
) -> Result<(CheckpointPool, OfflineDataset)> {
    let m = task.model();
    let nets = SacNetworks::new(m.obs_dim(), 0, m.action_dim(), m.action_bound(), &cfg.hidden_widths)?;
    let mut learner = SacLearner::new(nets, cfg.clone(), rng)?;
    let mut pool = CheckpointPool::new(task.family, cfg.hidden_widths.clone());
    let mut snapshot = |learner: &SacLearner, epoch: usize| {
        pool.entries.push(Checkpoint {
            task_index,
            epoch,
            actor: learner.params.actor.clone(),
        })
    };
    snapshot(&learner, 0);

    let total = cfg.warmup_steps + cfg.training_steps * cfg.env_steps_per_update;
    let mut buffer: Vec<TransitionTuple> = Vec::with_capacity(total);
    let mut state = env_reset(task);
    let env_steps = |buffer: &mut Vec<TransitionTuple>, action: Vec<f64>, state: &mut crate::envs::EnvState| -> Result<()> {
        let s = state.observation.clone();
        let out = env_step(task, state, &action)?;
        buffer.push(TransitionTuple {
            s,
            a: action,
            r: out.reward,
            s_next: out.next_observation,
            done: out.done,
        });
        if out.done {
            *state = env_reset(task);
        }
        Ok(())
    };

    for _ in 0..cfg.warmup_steps {
        let a = uniform_action(task, rng);
        env_steps(&mut buffer, a, &mut state)?;
    }
    for step in 0..cfg.training_steps {
        for _ in 0..cfg.env_steps_per_update {
            let a = learner
                .nets
                .sample_action(learner.params.actor.values(), &state.observation, rng);
            env_steps(&mut buffer, a, &mut state)?;
        }
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..buffer.len())).collect();
        let batch = batch_from_tuples(idx.iter().map(|&i| &buffer[i]));
        learner.update(&batch, false, rng).map_err(|e| match e {
            Error::Diverged { what, .. } => Error::Diverged { step, what },
            other => other,
        })?;
        if (step + 1) % cfg.checkpoint_interval == 0 {
            snapshot(&learner, step + 1);
        }
    }
    let dataset = OfflineDataset::new(task.clone(), buffer)?;
    Ok((pool, dataset))
}

/// Undiscounted return of one episode under a checkpoint's deterministic actions.
pub fn checkpoint_return(pool: &CheckpointPool, checkpoint: &Checkpoint, task: &TaskSpec) -> Result<f64> {
    let nets = pool.networks()?;
    let mut state = env_reset(task);
    let mut total = 0.0;
    for _ in 0..task.horizon() {
        let a = nets.deterministic_action(checkpoint.actor.values(), &state.observation);
        total += env_step(task, &mut state, &a)?.reward;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(training_steps: usize) -> SacConfig {
        SacConfig {
            batch_size: 32,
            training_steps,
            checkpoint_interval: 7,
            warmup_steps: 40,
            ..SacConfig::default()
        }
    }

    #[test]
    fn zero_training_steps_keeps_warmup_only() {
        let task = TaskSpec::new(Family::PointRobot, vec![0.5, 0.5]).unwrap();
        let (pool, data) = train_behavior_policy(&task, 0, &small_cfg(0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(pool.entries.len(), 1);
        assert_eq!(data.len(), 40);
    }

    #[test]
    fn checkpoint_count_and_dataset_size() {
        let task = TaskSpec::new(Family::PointRobot, vec![-0.5, 0.5]).unwrap();
        let cfg = small_cfg(30);
        let (pool, data) = train_behavior_policy(&task, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(pool.entries.len(), 1 + 30 / 7);
        assert_eq!(data.len(), 40 + 30 * 2);
        assert!(pool.entries.iter().all(|c| c.task_index == 3));
        assert_eq!(pool.entries.last().unwrap().epoch, 28);
    }

    #[test]
    fn replay_buffer_is_faithful() {
        let task = TaskSpec::new(Family::PointRobotDyn, vec![1.2, 0.3]).unwrap();
        let (_, data) = train_behavior_policy(&task, 0, &small_cfg(10), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let m = task.model();
        for (k, t) in data.tuples.iter().enumerate() {
            let (next, r) = m.transition(&task.params, &t.s, &t.a);
            assert_eq!(next, t.s_next);
            assert_eq!(r, t.r);
            assert_eq!(t.done, (k + 1) % 20 == 0);
            if t.done {
                if let Some(n) = data.tuples.get(k + 1) {
                    assert_eq!(n.s, vec![0.0, 0.0]);
                }
            } else if let Some(n) = data.tuples.get(k + 1) {
                assert_eq!(n.s, t.s_next);
            }
        }
    }

    #[test]
    fn seeded_collection_is_bit_identical() {
        let task = TaskSpec::new(Family::LineVel, vec![2.0]).unwrap();
        let a = train_behavior_policy(&task, 0, &small_cfg(12), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = train_behavior_policy(&task, 0, &small_cfg(12), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.1.to_bytes(), b.1.to_bytes());
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
    }

    #[test]
    fn pool_bytes_round_trip() {
        let task = TaskSpec::new(Family::PointRobot, vec![0.1, 0.2]).unwrap();
        let (pool, _) = train_behavior_policy(&task, 1, &small_cfg(14), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let back = CheckpointPool::from_bytes(&pool.to_bytes()).unwrap();
        assert_eq!(back, pool);
        assert!(back.get(1, 7).is_some());
    }

    #[test]
    fn later_checkpoints_improve_on_point_robot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = SacConfig::default();
        let mut gains = Vec::new();
        for i in 0..4 {
            let task = crate::envs::sample_task(Family::PointRobot, &mut rng);
            let (pool, _) = train_behavior_policy(&task, i, &cfg, &mut rng).unwrap();
            let first = checkpoint_return(&pool, &pool.entries[0], &task).unwrap();
            let last = checkpoint_return(&pool, pool.entries.last().unwrap(), &task).unwrap();
            gains.push(last - first);
        }
        let mean = gains.iter().sum::<f64>() / gains.len() as f64;
        assert!(mean >= 0.5, "{gains:?}");
    }
}
