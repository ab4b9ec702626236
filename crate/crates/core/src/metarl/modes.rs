//! Representation-learning modes behind one trait, looked up by name. They
//! differ only in whether the transition encoder is pretrained and frozen and
//! in the extra loss put on per-context embeddings.

use crate::{Error, Result};

pub trait ReprMode: Send + Sync {
    fn name(&self) -> &'static str;

    /// Pretrained contrastively and frozen during policy training.
    fn contrastive(&self) -> bool {
        false
    }

    /// Contexts drawn per sampled task (the first one conditions the RL batch).
    fn contexts_per_task(&self) -> usize {
        1
    }

    /// Extra loss on per-context embeddings `z` belonging to tasks `tasks`,
    /// with ground-truth descriptors `descriptors` (one per context). Adds
    /// `d loss / d z` into `grad`.
    fn encoder_loss(&self, _z: &[Vec<f64>], _tasks: &[usize], _descriptors: &[Vec<f64>], _grad: &mut [Vec<f64>]) -> Result<f64> {
        Ok(0.0)
    }
}

/// Distance metric loss for one pair: `||qi - qj||^2` within a task,
/// `beta / (||qi - qj||^n + eps)` across tasks.
pub fn focal_dml_loss(qi: &[f64], qj: &[f64], same_task: bool, beta: f64, n: f64, eps: f64) -> f64 {
    focal_dml_with_grad(qi, qj, same_task, beta, n, eps).0
}

/// Loss and its gradient with respect to `qi` (the one for `qj` is the negation).
pub fn focal_dml_with_grad(qi: &[f64], qj: &[f64], same_task: bool, beta: f64, n: f64, eps: f64) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = qi.iter().zip(qj).map(|(a, b)| a - b).collect();
    let d2: f64 = diff.iter().map(|v| v * v).sum();
    if same_task {
        return (d2, diff.iter().map(|v| 2.0 * v).collect());
    }
    let d = d2.sqrt();
    let denom = d.powf(n) + eps;
    let loss = beta / denom;
    // d/dqi of d^n is n d^(n-2) diff; guard the d = 0 case for n < 2
    let dn = if d > 0.0 { n * d.powf(n - 2.0) } else if n == 2.0 { 2.0 } else { 0.0 };
    let scale = -beta * dn / (denom * denom);
    (loss, diff.iter().map(|v| scale * v).collect())
}

/// Identity on the first `min(latent, descriptor)` coordinates, zero elsewhere.
pub fn project_descriptor(descriptor: &[f64], latent_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; latent_dim];
    for (o, d) in out.iter_mut().zip(descriptor) {
        *o = *d;
    }
    out
}

/// `||z - target||^2` where `target` is already projected to the latent size.
pub fn supervised_encoder_loss(z: &[f64], target: &[f64]) -> Result<f64> {
    if z.len() != target.len() {
        return Err(Error::DimensionMismatch {
            context: "supervised target",
            expected: z.len(),
            actual: target.len(),
        });
    }
    Ok(z.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Contrastively pretrained, frozen transition encoder.
pub struct Corro;

/// End-to-end through the RL loss only.
pub struct OfflinePearl;

/// Distance metric learning on per-context embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Focal {
    pub beta: f64,
    pub power: f64,
    pub epsilon: f64,
}

impl Default for Focal {
    fn default() -> Self {
        Self { beta: 1.0, power: 2.0, epsilon: 0.1 }
    }
}

/// Squared error to the projected task descriptor.
pub struct Supervised;

impl ReprMode for Corro {
    fn name(&self) -> &'static str {
        "corro"
    }

    fn contrastive(&self) -> bool {
        true
    }
}

impl ReprMode for OfflinePearl {
    fn name(&self) -> &'static str {
        "offline-pearl"
    }
}

impl ReprMode for Focal {
    fn name(&self) -> &'static str {
        "focal"
    }

    // a second context per task supplies the same-task pairs
    fn contexts_per_task(&self) -> usize {
        2
    }

    fn encoder_loss(&self, z: &[Vec<f64>], tasks: &[usize], _descriptors: &[Vec<f64>], grad: &mut [Vec<f64>]) -> Result<f64> {
        let m = z.len();
        if m < 2 {
            return Ok(0.0);
        }
        let pairs = (m * (m - 1) / 2) as f64;
        let mut total = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                let (l, g) = focal_dml_with_grad(&z[i], &z[j], tasks[i] == tasks[j], self.beta, self.power, self.epsilon);
                total += l;
                for (k, gk) in g.iter().enumerate() {
                    grad[i][k] += gk / pairs;
                    grad[j][k] -= gk / pairs;
                }
            }
        }
        Ok(total / pairs)
    }
}

impl ReprMode for Supervised {
    fn name(&self) -> &'static str {
        "supervised"
    }

    fn encoder_loss(&self, z: &[Vec<f64>], _tasks: &[usize], descriptors: &[Vec<f64>], grad: &mut [Vec<f64>]) -> Result<f64> {
        let m = z.len() as f64;
        let mut total = 0.0;
        for ((zi, d), g) in z.iter().zip(descriptors).zip(grad.iter_mut()) {
            let target = project_descriptor(d, zi.len());
            total += supervised_encoder_loss(zi, &target)?;
            for ((gk, a), b) in g.iter_mut().zip(zi).zip(&target) {
                *gk += 2.0 * (a - b) / m;
            }
        }
        Ok(total / m)
    }
}

/// Settings consulted when building modes from the registry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModeSettings {
    pub focal: Focal,
}

type Builder = fn(&ModeSettings) -> Box<dyn ReprMode>;

const REGISTRY: [(&str, Builder); 4] = [
    ("corro", |_| Box::new(Corro)),
    ("offline-pearl", |_| Box::new(OfflinePearl)),
    ("focal", |s| Box::new(s.focal.clone())),
    ("supervised", |_| Box::new(Supervised)),
];

pub fn mode_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn build_mode(name: &str, settings: &ModeSettings) -> Result<Box<dyn ReprMode>> {
    REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, b)| b(settings))
        .ok_or_else(|| Error::unknown("representation mode", name, &mode_names()))
}
