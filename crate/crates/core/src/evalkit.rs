//! Evaluation protocols (in-distribution contexts, behavior-checkpoint
//! contexts, uniform-random contexts), episode rollout, and the embedding
//! export used for visual analysis.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collect::{sample_context, uniform_action, CheckpointPool, OfflineDataset, TransitionTuple};
use crate::envs::{env_reset, env_step, TaskSpec};
use crate::metarl::MetaPolicy;
use crate::numcore::ParamVector;
use crate::taskenc::{Context, TaskEncoder};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Iid,
    Ood,
    Random,
}

const PROTOCOLS: [(&str, Protocol); 3] = [("iid", Protocol::Iid), ("ood", Protocol::Ood), ("random", Protocol::Random)];

impl Protocol {
    pub fn names() -> Vec<&'static str> {
        PROTOCOLS.iter().map(|(n, _)| *n).collect()
    }

    pub fn from_name(name: &str) -> Result<Self> {
        PROTOCOLS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::unknown("protocol", name, &Self::names()))
    }

    pub fn name(self) -> &'static str {
        PROTOCOLS.iter().find(|(_, p)| *p == self).map(|(n, _)| *n).unwrap()
    }
}

/// Where an evaluation context came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextSource {
    Dataset,
    Checkpoint { task_index: usize, epoch: usize },
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub task_index: usize,
    pub task_params: Vec<f64>,
    pub source: ContextSource,
    pub episode_return: f64,
}

/// One protocol run. For the checkpoint protocol there is one entry per
/// (checkpoint sample, test task) pair; otherwise one per test task.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn returns(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.episode_return).collect()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.returns())
    }

    /// Population standard deviation over entries.
    pub fn std(&self) -> f64 {
        std(&self.returns())
    }

    /// Mean return per test task, indexed by task.
    pub fn per_task_returns(&self) -> Vec<f64> {
        let n = self.entries.iter().map(|e| e.task_index + 1).max().unwrap_or(0);
        (0..n)
            .map(|i| {
                let r: Vec<f64> = self.entries.iter().filter(|e| e.task_index == i).map(|e| e.episode_return).collect();
                mean(&r)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("protocol {} seed {}\n", self.protocol.name(), self.seed);
        for e in &self.entries {
            let params: Vec<String> = e.task_params.iter().map(|p| format!("{p:?}")).collect();
            let source = match e.source {
                ContextSource::Dataset => "dataset".to_string(),
                ContextSource::Random => "random".to_string(),
                ContextSource::Checkpoint { task_index, epoch } => format!("checkpoint {task_index} {epoch}"),
            };
            let _ = writeln!(
                out,
                "task {} params {} source {} return {:?}",
                e.task_index,
                params.join(","),
                source,
                e.episode_return
            );
        }
        let _ = writeln!(out, "mean {:?} std {:?}", self.mean(), self.std());
        out
    }

    /// Inverse of [`EvalReport::to_text`]. The summary line must agree with
    /// the entries.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()));
        let bad = |line: usize, message: &str| Error::Parse { line, message: message.to_string() };
        let (protocol, seed) = match lines.next() {
            Some((_, t)) if t.len() == 4 && t[0] == "protocol" && t[2] == "seed" => {
                (Protocol::from_name(t[1])?, t[3].parse::<u64>().map_err(|_| bad(1, "bad seed"))?)
            }
            _ => return Err(bad(1, "expected `protocol <name> seed <n>`")),
        };
        let mut report = Self { protocol, seed, entries: Vec::new() };
        let num = |line: usize, s: &str| s.parse::<f64>().map_err(|_| bad(line, &format!("bad number `{s}`")));
        let int = |line: usize, s: &str| s.parse::<usize>().map_err(|_| bad(line, &format!("bad integer `{s}`")));
        for (line, t) in lines {
            match t.as_slice() {
                ["task", i, "params", p, "source", rest @ .., "return", r] => {
                    let source = match rest {
                        ["dataset"] => ContextSource::Dataset,
                        ["random"] => ContextSource::Random,
                        ["checkpoint", ti, ep] => ContextSource::Checkpoint {
                            task_index: int(line, ti)?,
                            epoch: int(line, ep)?,
                        },
                        _ => return Err(bad(line, "unknown context source")),
                    };
                    report.entries.push(EvalEntry {
                        task_index: int(line, i)?,
                        task_params: p.split(',').map(|x| num(line, x)).collect::<Result<_>>()?,
                        source,
                        episode_return: num(line, r)?,
                    });
                }
                ["mean", m, "std", s] => {
                    let (m, s) = (num(line, m)?, num(line, s)?);
                    if m.to_bits() != report.mean().to_bits() || s.to_bits() != report.std().to_bits() {
                        return Err(bad(line, "summary disagrees with entries"));
                    }
                    return Ok(report);
                }
                _ => return Err(bad(line, "unrecognized line")),
            }
        }
        Err(Error::Format("report has no summary line".into()))
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Mean and population standard deviation of per-seed report means.
pub fn aggregate(reports: &[EvalReport]) -> (f64, f64) {
    let means: Vec<f64> = reports.iter().map(EvalReport::mean).collect();
    (mean(&means), std(&means))
}

pub struct Episode {
    pub episode_return: f64,
    pub tuples: Vec<TransitionTuple>,
}

/// Runs one episode of at most `max_steps` steps with actions from `policy`.
pub fn run_episode(
    task: &TaskSpec,
    max_steps: usize,
    mut policy: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Episode> {
    let mut state = env_reset(task);
    let mut ep = Episode { episode_return: 0.0, tuples: Vec::new() };
    for _ in 0..max_steps.min(task.horizon()) {
        let s = state.observation.clone();
        let a = policy(&s)?;
        let out = env_step(task, &mut state, &a)?;
        ep.episode_return += out.reward;
        ep.tuples.push(TransitionTuple {
            s,
            a,
            r: out.reward,
            s_next: out.next_observation,
            done: out.done,
        });
        if out.done {
            break;
        }
    }
    Ok(ep)
}

/// Undiscounted return with deterministic actions and `z` held fixed.
pub fn rollout(task: &TaskSpec, policy: &MetaPolicy, z: &[f64], max_steps: usize) -> Result<f64> {
    Ok(run_episode(task, max_steps, |s| policy.mean_action(s, z))?.episode_return)
}

/// Returns of `episodes` uniform-random-action episodes.
pub fn random_policy_returns(task: &TaskSpec, episodes: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    (0..episodes)
        .map(|_| Ok(run_episode(task, task.horizon(), |_| Ok(uniform_action(task, &mut *rng)))?.episode_return))
        .collect()
}

fn check_family(tasks: &[TaskSpec], policy: &MetaPolicy) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Empty("test tasks"));
    }
    if tasks.iter().any(|t| t.family != policy.params.family) {
        return Err(Error::Config("test tasks do not match the policy's family".into()));
    }
    Ok(())
}

fn evaluate(task: &TaskSpec, policy: &MetaPolicy, context: &Context) -> Result<f64> {
    let z = policy.encode(context)?;
    rollout(task, policy, &z.0, task.horizon())
}

/// Contexts are windows of `context_length` tuples from each task's own dataset.
pub fn iid_test(
    tasks: &[TaskSpec],
    datasets: &[OfflineDataset],
    policy: &MetaPolicy,
    context_length: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_family(tasks, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let data = datasets
            .get(i)
            .filter(|d| d.task == *task)
            .ok_or_else(|| Error::Missing(format!("dataset for test task {i}")))?;
        let context = sample_context(data, context_length.min(data.len()), &mut rng)?;
        entries.push(EvalEntry {
            task_index: i,
            task_params: task.params.clone(),
            source: ContextSource::Dataset,
            episode_return: evaluate(task, policy, &context)?,
        });
    }
    Ok(EvalReport { protocol: Protocol::Iid, seed, entries })
}

/// Draws `samples` checkpoints uniformly (with replacement) from the pool; each
/// collects one stochastic context episode in every test task.
pub fn ood_test(
    tasks: &[TaskSpec],
    pool: &CheckpointPool,
    policy: &MetaPolicy,
    samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_family(tasks, policy)?;
    if pool.entries.is_empty() {
        return Err(Error::Empty("checkpoint pool"));
    }
    if samples == 0 {
        return Err(Error::Config("checkpoint samples must be positive".into()));
    }
    if pool.family != policy.params.family {
        return Err(Error::Config("checkpoint pool does not match the policy's family".into()));
    }
    let nets = pool.networks()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(samples * tasks.len());
    for _ in 0..samples {
        let cp = &pool.entries[rng.gen_range(0..pool.entries.len())];
        for (i, task) in tasks.iter().enumerate() {
            let actor = cp.actor.values();
            let ep = run_episode(task, task.horizon(), |s| Ok(nets.sample_action(actor, s, &mut rng)))?;
            entries.push(EvalEntry {
                task_index: i,
                task_params: task.params.clone(),
                source: ContextSource::Checkpoint {
                    task_index: cp.task_index,
                    epoch: cp.epoch,
                },
                episode_return: evaluate(task, policy, &Context::new(ep.tuples)?)?,
            });
        }
    }
    Ok(EvalReport { protocol: Protocol::Ood, seed, entries })
}

/// Contexts are single episodes of uniform-random actions.
pub fn random_context_test(tasks: &[TaskSpec], policy: &MetaPolicy, seed: u64) -> Result<EvalReport> {
    check_family(tasks, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let ep = run_episode(task, task.horizon(), |_| Ok(uniform_action(task, &mut rng)))?;
        entries.push(EvalEntry {
            task_index: i,
            task_params: task.params.clone(),
            source: ContextSource::Random,
            episode_return: evaluate(task, policy, &Context::new(ep.tuples)?)?,
        });
    }
    Ok(EvalReport { protocol: Protocol::Random, seed, entries })
}

/// Projects centered points onto the top two principal axes. Axis signs are
/// fixed so the largest-magnitude component of each axis is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    let d = points.first().ok_or(Error::Empty("points"))?.len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Format("points have different dimensions".into()));
    }
    let mut centered = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    for j in 0..d {
        let m = centered.column(j).mean();
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
            v.into_iter().map(|x| if pivot < 0.0 { -x } else { x }).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let mut c = [0.0; 2];
            for (slot, axis) in c.iter_mut().zip(&axes) {
                *slot = row.iter().zip(axis).map(|(x, a)| x * a).sum();
            }
            c
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPoint {
    pub task_index: usize,
    pub task_params: Vec<f64>,
    pub coords: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub points: Vec<EmbeddingPoint>,
}

impl EmbeddingTable {
    /// One line per point: task parameters, then the two coordinates.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            for v in &p.task_params {
                let _ = write!(out, "{v:?} ");
            }
            let _ = writeln!(out, "{:?} {:?}", p.coords[0], p.coords[1]);
        }
        out
    }

    /// Per-task mean coordinates, in task order.
    pub fn task_means(&self) -> Vec<(Vec<f64>, [f64; 2])> {
        let n = self.points.iter().map(|p| p.task_index + 1).max().unwrap_or(0);
        (0..n)
            .filter_map(|i| {
                let pts: Vec<&EmbeddingPoint> = self.points.iter().filter(|p| p.task_index == i).collect();
                let first = pts.first()?;
                let c = |k: usize| pts.iter().map(|p| p.coords[k]).sum::<f64>() / pts.len() as f64;
                Some((first.task_params.clone(), [c(0), c(1)]))
            })
            .collect()
    }
}

/// Encodes `samples_per_task` distinct tuples per dataset with the transition
/// encoder and projects all latents onto their top two principal axes.
pub fn export_embeddings(
    encoder: &TaskEncoder,
    theta1: &ParamVector,
    datasets: &[OfflineDataset],
    samples_per_task: usize,
    rng: &mut dyn RngCore,
) -> Result<EmbeddingTable> {
    if samples_per_task == 0 {
        return Err(Error::Config("samples per task must be positive".into()));
    }
    let mut latents = Vec::new();
    let mut owners = Vec::new();
    for (i, d) in datasets.iter().enumerate() {
        if d.len() < samples_per_task {
            return Err(Error::DatasetTooSmall {
                available: d.len(),
                requested: samples_per_task,
            });
        }
        for j in index::sample(rng, d.len(), samples_per_task) {
            latents.push(encoder.encode_transition(theta1, &d.tuples[j])?.0);
            owners.push(i);
        }
    }
    let coords = pca_2d(&latents)?;
    Ok(EmbeddingTable {
        points: owners
            .into_iter()
            .zip(coords)
            .map(|(i, coords)| EmbeddingPoint {
                task_index: i,
                task_params: datasets[i].task.params.clone(),
                coords,
            })
            .collect(),
    })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "spearman",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Empty("spearman needs two points"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::DegenerateRepresentation);
    }
    Ok(cov / (vx * vy).sqrt())
}
