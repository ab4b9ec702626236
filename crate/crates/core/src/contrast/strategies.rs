//! Negative-pair strategies behind one trait, looked up by name.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::cvae::{train_cvae, Cvae, CvaeConfig, CvaeParams};
use super::relabel::{train_relabel_models, RelabelConfig, RelabelModels};
use crate::collect::{OfflineDataset, TransitionTuple};
use crate::envs::{Family, Variation};
use crate::numcore::ParamVector;
use crate::{Error, Result};

/// Produces counterfactual tuples that act as negatives for an anchor.
pub trait NegativeSampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// Up to `count` negatives for `anchor`, which was drawn from
    /// `datasets[anchor_task]`. Returns fewer (possibly none) only when no
    /// other task exists.
    fn negatives(
        &self,
        anchor: &TransitionTuple,
        anchor_task: usize,
        datasets: &[OfflineDataset],
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<TransitionTuple>>;

    /// Trained models to persist, as named parameter vectors.
    fn artifacts(&self) -> Vec<(String, ParamVector)> {
        Vec::new()
    }

    /// Per-step losses from fitting the strategy's models, if any.
    fn fit_losses(&self) -> &[f64] {
        &[]
    }
}

/// Knobs used when building strategies from the registry.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategySettings {
    /// Std of the reward perturbation used by `randomize`.
    pub randomize_std: f64,
    pub cvae: CvaeConfig,
    pub relabel: RelabelConfig,
}

impl Default for StrategySettings {
    fn default() -> Self {
        Self {
            randomize_std: 0.5,
            cvae: CvaeConfig::default(),
            relabel: RelabelConfig::default(),
        }
    }
}

fn other_task(anchor_task: usize, n: usize, rng: &mut dyn RngCore) -> usize {
    let j = rng.gen_range(0..n - 1);
    if j >= anchor_task {
        j + 1
    } else {
        j
    }
}

/// `r* = r + nu`, `nu ~ N(0, std^2)`; `(s, a, s')` are kept.
pub struct RandomizeNegatives {
    noise: Normal<f64>,
}

impl RandomizeNegatives {
    pub fn new(std: f64, family: Family) -> Result<Self> {
        if family.model().variation() != Variation::Reward {
            return Err(Error::StrategyInapplicable(format!(
                "randomize perturbs rewards only, but {family} tasks differ in dynamics"
            )));
        }
        let noise = Normal::new(0.0, std).map_err(|e| Error::Config(format!("randomize std: {e}")))?;
        Ok(Self { noise })
    }
}

impl NegativeSampler for RandomizeNegatives {
    fn name(&self) -> &'static str {
        "randomize"
    }

    fn negatives(
        &self,
        anchor: &TransitionTuple,
        _anchor_task: usize,
        _datasets: &[OfflineDataset],
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<TransitionTuple>> {
        Ok((0..count)
            .map(|_| TransitionTuple {
                r: anchor.r + self.noise.sample(rng),
                ..anchor.clone()
            })
            .collect())
    }
}

/// Outcomes drawn from a CVAE fitted to the union of all datasets.
pub struct GenerativeNegatives {
    cvae: Cvae,
    params: CvaeParams,
    noise: f64,
    noisy_next_state: bool,
    losses: Vec<f64>,
}

impl GenerativeNegatives {
    pub fn new(params: CvaeParams, noise: f64, family: Family, losses: Vec<f64>) -> Result<Self> {
        Ok(Self {
            cvae: Cvae::for_params(&params)?,
            params,
            noise,
            noisy_next_state: family.model().variation() == Variation::Transition,
            losses,
        })
    }

    pub fn params(&self) -> &CvaeParams {
        &self.params
    }
}

impl NegativeSampler for GenerativeNegatives {
    fn name(&self) -> &'static str {
        "generative"
    }

    fn negatives(
        &self,
        anchor: &TransitionTuple,
        _anchor_task: usize,
        _datasets: &[OfflineDataset],
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<TransitionTuple>> {
        Ok((0..count)
            .map(|_| {
                let (r, s_next) = self.cvae.generate(&self.params, &anchor.s, &anchor.a, self.noise, self.noisy_next_state, rng);
                TransitionTuple { r, s_next, ..anchor.clone() }
            })
            .collect())
    }

    fn artifacts(&self) -> Vec<(String, ParamVector)> {
        vec![("cvae.omega".into(), self.params.omega.clone()), ("cvae.xi".into(), self.params.xi.clone())]
    }

    fn fit_losses(&self) -> &[f64] {
        &self.losses
    }
}

/// Another task's learned models relabel the anchor's `(s, a)`.
pub struct RelabelNegatives {
    models: RelabelModels,
}

impl RelabelNegatives {
    pub fn new(models: RelabelModels) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Missing("relabel models".into()));
        }
        Ok(Self { models })
    }
}

impl NegativeSampler for RelabelNegatives {
    fn name(&self) -> &'static str {
        "relabel"
    }

    fn negatives(
        &self,
        anchor: &TransitionTuple,
        anchor_task: usize,
        datasets: &[OfflineDataset],
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<TransitionTuple>> {
        let n = self.models.len();
        if n != datasets.len() {
            return Err(Error::Missing(format!("relabel models for {} tasks (have {n})", datasets.len())));
        }
        if n < 2 {
            return Ok(Vec::new());
        }
        Ok((0..count)
            .map(|_| {
                let (r, s_next) = self.models.predict(other_task(anchor_task, n, rng), &anchor.s, &anchor.a);
                TransitionTuple { r, s_next, ..anchor.clone() }
            })
            .collect())
    }

    fn artifacts(&self) -> Vec<(String, ParamVector)> {
        let mut out = Vec::new();
        for (i, (r, t)) in self.models.reward.iter().zip(&self.models.transition).enumerate() {
            out.push((format!("relabel.reward.{i}"), r.clone()));
            out.push((format!("relabel.transition.{i}"), t.clone()));
        }
        out
    }
}

/// Raw tuples from other tasks: a uniformly chosen other task, then a
/// uniformly chosen tuple of it.
pub struct CrossTaskNegatives;

impl NegativeSampler for CrossTaskNegatives {
    fn name(&self) -> &'static str {
        "none"
    }

    fn negatives(
        &self,
        _anchor: &TransitionTuple,
        anchor_task: usize,
        datasets: &[OfflineDataset],
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<TransitionTuple>> {
        let n = datasets.len();
        if n < 2 {
            return Ok(Vec::new());
        }
        Ok((0..count)
            .map(|_| {
                let d = &datasets[other_task(anchor_task, n, rng)];
                d.tuples[rng.gen_range(0..d.len())].clone()
            })
            .collect())
    }
}

type Builder = fn(&[OfflineDataset], &StrategySettings, &mut dyn RngCore) -> Result<Box<dyn NegativeSampler>>;

fn family_of(datasets: &[OfflineDataset]) -> Result<Family> {
    let first = datasets.first().ok_or(Error::Empty("training datasets"))?;
    Ok(first.task.family)
}

fn build_generative(d: &[OfflineDataset], s: &StrategySettings, rng: &mut dyn RngCore) -> Result<Box<dyn NegativeSampler>> {
    let family = family_of(d)?;
    let (params, losses) = train_cvae(d, &s.cvae, rng)?;
    Ok(Box::new(GenerativeNegatives::new(params, s.cvae.generation_noise, family, losses)?))
}

fn build_randomize(d: &[OfflineDataset], s: &StrategySettings, _: &mut dyn RngCore) -> Result<Box<dyn NegativeSampler>> {
    Ok(Box::new(RandomizeNegatives::new(s.randomize_std, family_of(d)?)?))
}

fn build_relabel(d: &[OfflineDataset], s: &StrategySettings, rng: &mut dyn RngCore) -> Result<Box<dyn NegativeSampler>> {
    Ok(Box::new(RelabelNegatives::new(train_relabel_models(d, &s.relabel, rng)?)?))
}

fn build_none(d: &[OfflineDataset], _: &StrategySettings, _: &mut dyn RngCore) -> Result<Box<dyn NegativeSampler>> {
    family_of(d)?;
    Ok(Box::new(CrossTaskNegatives))
}

const REGISTRY: [(&str, Builder); 4] = [
    ("generative", build_generative),
    ("randomize", build_randomize),
    ("relabel", build_relabel),
    ("none", build_none),
];

pub fn strategy_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

/// Builds (and, where needed, trains) the strategy registered as `name`.
pub fn build_strategy(
    name: &str,
    datasets: &[OfflineDataset],
    settings: &StrategySettings,
    rng: &mut dyn RngCore,
) -> Result<Box<dyn NegativeSampler>> {
    let (_, build) = REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::unknown("negative strategy", name, &strategy_names()))?;
    build(datasets, settings, rng)
}

pub fn default_strategy(family: Family) -> &'static str {
    match family {
        Family::PointRobot => "randomize",
        Family::LineVel => "generative",
        Family::PointRobotDyn => "none",
    }
}
