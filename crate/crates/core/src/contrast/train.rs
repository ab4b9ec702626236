use rand::seq::index;
use rand::{Rng, RngCore};

use super::infonce::info_nce_with_grad;
use super::strategies::NegativeSampler;
use crate::collect::{OfflineDataset, TransitionTuple};
use crate::numcore::{AdamState, ParamVector};
use crate::taskenc::TaskEncoder;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastConfig {
    pub task_batch_size: usize,
    /// Anchors per step, spread evenly over the sampled tasks.
    pub contrastive_batch_size: usize,
    pub negatives_per_anchor: usize,
    pub training_steps: usize,
    pub temperature: f64,
    pub learning_rate: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            task_batch_size: 16,
            contrastive_batch_size: 64,
            negatives_per_anchor: 16,
            training_steps: 2000,
            temperature: 1.0,
            learning_rate: 3e-4,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.task_batch_size, self.contrastive_batch_size, self.negatives_per_anchor];
        if counts.contains(&0) || !(self.temperature > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "contrastive batch sizes, negatives, temperature and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }

    fn anchors_per_task(&self) -> usize {
        (self.contrastive_batch_size / self.task_batch_size).max(1)
    }
}

/// One anchor with its positive and negatives.
#[derive(Clone, Debug)]
pub struct ContrastSample {
    pub anchor: TransitionTuple,
    pub positive: TransitionTuple,
    pub negatives: Vec<TransitionTuple>,
}

#[derive(Clone, Debug)]
pub struct ContrastOutcome {
    pub theta1: ParamVector,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

/// Anchor and positive drawn independently and uniformly from one dataset.
pub fn sample_contrast_batch(
    datasets: &[OfflineDataset],
    sampler: &dyn NegativeSampler,
    tasks: &[usize],
    anchors_per_task: usize,
    negatives: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<ContrastSample>> {
    let mut out = Vec::with_capacity(tasks.len() * anchors_per_task);
    for &t in tasks {
        let d = &datasets[t];
        for _ in 0..anchors_per_task {
            let anchor = d.tuples[rng.gen_range(0..d.len())].clone();
            let positive = d.tuples[rng.gen_range(0..d.len())].clone();
            let negatives = sampler.negatives(&anchor, t, datasets, negatives, rng)?;
            out.push(ContrastSample { anchor, positive, negatives });
        }
    }
    Ok(out)
}

/// Mean InfoNCE over `batch` and its gradient with respect to `theta1`.
pub fn contrastive_loss_and_grad(
    encoder: &TaskEncoder,
    theta1: &ParamVector,
    batch: &[ContrastSample],
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    encoder.transition.check_params(theta1)?;
    if batch.is_empty() {
        return Err(Error::Empty("contrastive batch"));
    }
    let mut features = Vec::new();
    let mut rows = 0;
    for b in batch {
        for x in std::iter::once(&b.anchor).chain(std::iter::once(&b.positive)).chain(&b.negatives) {
            if x.s.len() != encoder.obs_dim || x.a.len() != encoder.action_dim || x.s_next.len() != encoder.obs_dim {
                return Err(Error::DimensionMismatch {
                    context: "contrastive tuple",
                    expected: encoder.feature_dim(),
                    actual: TransitionTuple::feature_dim(x.s.len(), x.a.len()),
                });
            }
            x.write_features(&mut features);
            rows += 1;
        }
    }
    let cache = encoder.encode_features(theta1, &features, rows);
    let l = encoder.latent_dim;
    let z = |row: usize| &cache.output[row * l..(row + 1) * l];
    let scale = 1.0 / batch.len() as f64;
    let mut grad_z = vec![0.0; rows * l];
    let mut total = 0.0;
    let mut row = 0;
    for b in batch {
        let k = b.negatives.len();
        if k > 0 {
            let negs: Vec<Vec<f64>> = (0..k).map(|j| z(row + 2 + j).to_vec()).collect();
            let g = info_nce_with_grad(z(row), z(row + 1), &negs, temperature)?;
            total += g.loss;
            let mut put = |r: usize, grad: &[f64]| {
                for (acc, v) in grad_z[r * l..(r + 1) * l].iter_mut().zip(grad) {
                    *acc += scale * v;
                }
            };
            put(row, &g.grad_anchor);
            put(row + 1, &g.grad_positive);
            for (j, gn) in g.grad_negatives.iter().enumerate() {
                put(row + 2 + j, gn);
            }
        }
        row += 2 + k;
    }
    let mut grad = vec![0.0; theta1.len()];
    encoder.transition.backward(theta1.values(), &cache, &grad_z, &mut grad, None);
    Ok((total * scale, grad))
}

fn sample_tasks(n: usize, k: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    if k <= n {
        index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Trains the transition encoder by descending the mean InfoNCE loss.
pub fn train_transition_encoder(
    encoder: &TaskEncoder,
    theta1: ParamVector,
    datasets: &[OfflineDataset],
    sampler: &dyn NegativeSampler,
    cfg: &ContrastConfig,
    rng: &mut dyn RngCore,
) -> Result<ContrastOutcome> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Empty("training datasets"));
    }
    let mut theta1 = theta1;
    let mut opt = AdamState::new(theta1.len(), cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.training_steps);
    let mut grad_norms = Vec::with_capacity(cfg.training_steps);
    for step in 0..cfg.training_steps {
        let tasks = sample_tasks(datasets.len(), cfg.task_batch_size, rng);
        let batch = sample_contrast_batch(datasets, sampler, &tasks, cfg.anchors_per_task(), cfg.negatives_per_anchor, rng)?;
        let (loss, grad) = contrastive_loss_and_grad(encoder, &theta1, &batch, cfg.temperature)
            .map_err(|e| Error::Diverged { step, what: format!("transition encoder: {e}") })?;
        opt.update(theta1.values_mut(), &grad)
            .map_err(|e| Error::Diverged { step, what: format!("transition encoder: {e}") })?;
        losses.push(loss);
        grad_norms.push(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
    }
    Ok(ContrastOutcome { theta1, losses, grad_norms })
}

/// Mean InfoNCE of `theta1` over `anchors` fresh anchors (no update).
pub fn mean_contrastive_loss(
    encoder: &TaskEncoder,
    theta1: &ParamVector,
    datasets: &[OfflineDataset],
    sampler: &dyn NegativeSampler,
    cfg: &ContrastConfig,
    anchors: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let tasks: Vec<usize> = (0..anchors).map(|_| rng.gen_range(0..datasets.len())).collect();
    let batch = sample_contrast_batch(datasets, sampler, &tasks, 1, cfg.negatives_per_anchor, rng)?;
    Ok(contrastive_loss_and_grad(encoder, theta1, &batch, cfg.temperature)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrast::{CrossTaskNegatives, RandomizeNegatives};
    use crate::envs::{Family, TaskSpec};
    use crate::numcore::grad_check_fn;
    use crate::taskenc::{score, EncoderConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::testutil::{random_dataset, seeking_dataset};

    fn opposite_tasks() -> [TaskSpec; 2] {
        [
            TaskSpec::new(Family::PointRobot, vec![0.7, 0.7]).unwrap(),
            TaskSpec::new(Family::PointRobot, vec![-0.7, -0.7]).unwrap(),
        ]
    }

    fn small_encoder() -> TaskEncoder {
        let cfg = EncoderConfig { transition_hidden: vec![8, 8], scorer_hidden: vec![4], ..EncoderConfig::default() };
        TaskEncoder::new(2, 2, &cfg).unwrap()
    }

    #[test]
    fn zero_steps_leave_encoder_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d: Vec<_> = opposite_tasks().iter().map(|t| random_dataset(t, 50, &mut rng)).collect();
        let enc = small_encoder();
        let theta = enc.init(&mut rng).theta1;
        let cfg = ContrastConfig { training_steps: 0, ..ContrastConfig::default() };
        let out = train_transition_encoder(&enc, theta.clone(), &d, &CrossTaskNegatives, &cfg, &mut rng).unwrap();
        assert_eq!(out.theta1, theta);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn single_task_without_negatives_is_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = vec![random_dataset(&opposite_tasks()[0], 60, &mut rng)];
        let enc = small_encoder();
        let theta = enc.init(&mut rng).theta1;
        let cfg = ContrastConfig { training_steps: 20, ..ContrastConfig::default() };
        let out = train_transition_encoder(&enc, theta.clone(), &d, &CrossTaskNegatives, &cfg, &mut rng).unwrap();
        assert!(out.losses.iter().all(|l| *l == 0.0));
        assert!(out.grad_norms.iter().all(|g| *g == 0.0));
        assert_eq!(out.theta1, theta);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d: Vec<_> = opposite_tasks().iter().map(|t| random_dataset(t, 40, &mut rng)).collect();
        let enc = small_encoder();
        let sampler = RandomizeNegatives::new(0.5, Family::PointRobot).unwrap();
        let batch = sample_contrast_batch(&d, &sampler, &[0, 1], 3, 4, &mut rng).unwrap();
        for _ in 0..3 {
            let theta = enc.init(&mut rng).theta1;
            let (_, g) = contrastive_loss_and_grad(&enc, &theta, &batch, 0.7).unwrap();
            let err = grad_check_fn(
                theta.values(),
                |v| Ok(contrastive_loss_and_grad(&enc, &theta.with_values(v.to_vec())?, &batch, 0.7)?.0),
                &g,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn separates_opposite_goal_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tasks = opposite_tasks();
        let train: Vec<_> = tasks.iter().map(|t| seeking_dataset(t, 400, &mut rng)).collect();
        let held: Vec<_> = tasks.iter().map(|t| seeking_dataset(t, 400, &mut rng)).collect();
        let enc = TaskEncoder::new(2, 2, &EncoderConfig::default()).unwrap();
        let theta = enc.init(&mut rng).theta1;
        let sampler = RandomizeNegatives::new(0.5, Family::PointRobot).unwrap();
        // at temperature 1 the bounded cosine logits leave near-duplicate negatives
        // almost indistinguishable and the probe stalls around 0.7
        let cfg = ContrastConfig {
            task_batch_size: 2,
            contrastive_batch_size: 16,
            temperature: 0.1,
            ..ContrastConfig::default()
        };
        let out = train_transition_encoder(&enc, theta, &train, &sampler, &cfg, &mut rng).unwrap();
        let z = |x: &TransitionTuple| enc.encode_transition(&out.theta1, x).unwrap().0;
        let (mut wins, mut total) = (0, 0);
        for own in 0..2 {
            for _ in 0..200 {
                let a = z(&held[own].tuples[rng.gen_range(0..400)]);
                let p = z(&held[own].tuples[rng.gen_range(0..400)]);
                let n = z(&held[1 - own].tuples[rng.gen_range(0..400)]);
                if score(&a, &p, 1.0).unwrap() > score(&a, &n, 1.0).unwrap() {
                    wins += 1;
                }
                total += 1;
            }
        }
        let frac = wins as f64 / total as f64;
        assert!(frac >= 0.9, "probe accuracy {frac}");
    }

    #[test]
    fn untrained_loss_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d: Vec<_> = opposite_tasks().iter().map(|t| seeking_dataset(t, 400, &mut rng)).collect();
        let enc = TaskEncoder::new(2, 2, &EncoderConfig::default()).unwrap();
        let sampler = RandomizeNegatives::new(0.5, Family::PointRobot).unwrap();
        let cfg = ContrastConfig::default();
        let loss = mean_contrastive_loss(&enc, &enc.init(&mut rng).theta1, &d, &sampler, &cfg, 2000, &mut rng).unwrap();
        let chance = 17f64.ln();
        assert!((loss - chance).abs() < 0.1 * chance, "{loss}");
    }
}
