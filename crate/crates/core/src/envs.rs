//! Desk-scale parametric task families with analytic dynamics and rewards.
//!
//! * `point-robot`: 2D navigation to a goal in `[-1,1]^2`; tasks differ in reward.
//! * `line-vel`: 1D double integrator tracking a target velocity in `[0,3]`;
//!   tasks differ in reward.
//! * `point-robot-dyn`: 2D navigation to a fixed goal with a task-specific
//!   action gain and rotation; tasks differ in transition dynamics.

use std::f64::consts::FRAC_PI_4;

use rand::{Rng, RngCore};

use crate::{Error, Result};

/// Which part of the MDP the task parameters change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variation {
    Reward,
    Transition,
}

pub trait TaskFamily: Send + Sync {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Actions live in `[-bound, bound]^action_dim`.
    fn action_bound(&self) -> f64;
    fn variation(&self) -> Variation;
    fn sample_params(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn initial_observation(&self) -> Vec<f64>;
    /// Next observation and reward; `action` has already been dimension-checked.
    fn transition(&self, params: &[f64], obs: &[f64], action: &[f64]) -> (Vec<f64>, f64);
}

pub struct PointRobot;
pub struct LineVel;
pub struct PointRobotDyn;

const POINT_STEP: f64 = 0.1;
const DYN_GOAL: [f64; 2] = [0.75, 0.0];

fn clip(x: f64, bound: f64) -> f64 {
    x.clamp(-bound, bound)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl TaskFamily for PointRobot {
    fn name(&self) -> &'static str {
        "point-robot"
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        20
    }
    fn action_bound(&self) -> f64 {
        POINT_STEP
    }
    fn variation(&self) -> Variation {
        Variation::Reward
    }
    fn sample_params(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]
    }
    fn initial_observation(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn transition(&self, goal: &[f64], obs: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        let next: Vec<f64> = obs
            .iter()
            .zip(action)
            .map(|(s, a)| s + clip(*a, POINT_STEP))
            .collect();
        let r = -distance(&next, goal);
        (next, r)
    }
}

impl TaskFamily for LineVel {
    fn name(&self) -> &'static str {
        "line-vel"
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        50
    }
    fn action_bound(&self) -> f64 {
        1.0
    }
    fn variation(&self) -> Variation {
        Variation::Reward
    }
    fn sample_params(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.gen_range(0.0..=3.0)]
    }
    fn initial_observation(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn transition(&self, target: &[f64], obs: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        let a = clip(action[0], 1.0);
        let v = (obs[1] + 0.2 * a).clamp(-4.0, 4.0);
        let x = obs[0] + 0.05 * v;
        let r = -(v - target[0]).abs() - 0.05 * a * a;
        (vec![x, v], r)
    }
}

impl TaskFamily for PointRobotDyn {
    fn name(&self) -> &'static str {
        "point-robot-dyn"
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        20
    }
    fn action_bound(&self) -> f64 {
        POINT_STEP
    }
    fn variation(&self) -> Variation {
        Variation::Transition
    }
    /// `(gain, angle)` with gain `1.5^mu`, `mu ~ U[-1,1]`, angle `~ U[-pi/4, pi/4]`.
    fn sample_params(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let mu: f64 = rng.gen_range(-1.0..=1.0);
        vec![1.5f64.powf(mu), rng.gen_range(-FRAC_PI_4..=FRAC_PI_4)]
    }
    fn initial_observation(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn transition(&self, params: &[f64], obs: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        let (gain, angle) = (params[0], params[1]);
        let (ax, ay) = (clip(action[0], POINT_STEP), clip(action[1], POINT_STEP));
        let (sin, cos) = angle.sin_cos();
        let next = vec![
            obs[0] + gain * (cos * ax - sin * ay),
            obs[1] + gain * (sin * ax + cos * ay),
        ];
        let r = -distance(&next, &DYN_GOAL);
        (next, r)
    }
}

static POINT_ROBOT: PointRobot = PointRobot;
static LINE_VEL: LineVel = LineVel;
static POINT_ROBOT_DYN: PointRobotDyn = PointRobotDyn;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    PointRobot,
    LineVel,
    PointRobotDyn,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::PointRobot, Family::LineVel, Family::PointRobotDyn];

    pub fn model(self) -> &'static dyn TaskFamily {
        match self {
            Family::PointRobot => &POINT_ROBOT,
            Family::LineVel => &LINE_VEL,
            Family::PointRobotDyn => &POINT_ROBOT_DYN,
        }
    }

    pub fn name(self) -> &'static str {
        self.model().name()
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::unknown("task family", name, &Self::ALL.map(Family::name)))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub family: Family,
    pub params: Vec<f64>,
}

impl TaskSpec {
    pub fn new(family: Family, params: Vec<f64>) -> Result<Self> {
        let expected = family.model().param_dim();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "task parameters",
                expected,
                actual: params.len(),
            });
        }
        Ok(Self { family, params })
    }

    pub fn model(&self) -> &'static dyn TaskFamily {
        self.family.model()
    }

    pub fn obs_dim(&self) -> usize {
        self.model().obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.model().action_dim()
    }

    pub fn horizon(&self) -> usize {
        self.model().horizon()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub fn sample_task<R: Rng>(family: Family, rng: &mut R) -> TaskSpec {
    TaskSpec {
        family,
        params: family.model().sample_params(rng),
    }
}

pub fn sample_task_by_name<R: Rng>(family: &str, rng: &mut R) -> Result<TaskSpec> {
    Ok(sample_task(Family::from_name(family)?, rng))
}

pub fn env_reset(task: &TaskSpec) -> EnvState {
    EnvState {
        observation: task.model().initial_observation(),
        step_index: 0,
    }
}

/// Advances `state` by one step.
pub fn env_step(task: &TaskSpec, state: &mut EnvState, action: &[f64]) -> Result<StepResult> {
    let model = task.model();
    if state.step_index >= model.horizon() {
        return Err(Error::EpisodeFinished);
    }
    if action.len() != model.action_dim() {
        return Err(Error::DimensionMismatch {
            context: "action",
            expected: model.action_dim(),
            actual: action.len(),
        });
    }
    let (next, reward) = model.transition(&task.params, &state.observation, action);
    state.observation.clone_from(&next);
    state.step_index += 1;
    Ok(StepResult {
        next_observation: next,
        reward,
        done: state.step_index == model.horizon(),
    })
}
