use rand::Rng;

use crate::collect::{uniform_action, OfflineDataset, TransitionTuple};
use crate::envs::{env_reset, env_step, TaskSpec};

fn roll<R: Rng>(task: &TaskSpec, n: usize, rng: &mut R, mut policy: impl FnMut(&[f64], &mut R) -> Vec<f64>) -> OfflineDataset {
    let mut tuples = Vec::with_capacity(n);
    let mut state = env_reset(task);
    while tuples.len() < n {
        let s = state.observation.clone();
        let a = policy(&s, rng);
        let step = env_step(task, &mut state, &a).unwrap();
        tuples.push(TransitionTuple { s, a, r: step.reward, s_next: step.next_observation, done: step.done });
        if step.done {
            state = env_reset(task);
        }
    }
    OfflineDataset::new(task.clone(), tuples).unwrap()
}

/// Uniform-random behaviour.
pub(crate) fn random_dataset<R: Rng>(task: &TaskSpec, n: usize, rng: &mut R) -> OfflineDataset {
    roll(task, n, rng, |_, rng| uniform_action(task, rng))
}

/// Noisy goal-seeking behaviour on point-robot tasks.
pub(crate) fn seeking_dataset<R: Rng>(task: &TaskSpec, n: usize, rng: &mut R) -> OfflineDataset {
    roll(task, n, rng, |s, rng| {
        let (dx, dy) = (task.params[0] - s[0], task.params[1] - s[1]);
        let norm = (dx * dx + dy * dy).sqrt().max(1e-9);
        vec![0.1 * dx / norm + rng.gen_range(-0.1..0.1), 0.1 * dy / norm + rng.gen_range(-0.1..0.1)]
    })
}
