//! Soft actor-critic with twin critics, Polyak-averaged targets and a
//! tanh-squashed Gaussian actor. Inputs may carry a conditioning vector
//! (the task representation) appended to the observation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numcore::{AdamState, ForwardCache, Mlp, MlpSpec, ParamVector};
use crate::{Error, Result};

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq)]
pub enum EntropyCoefficient {
    Fixed(f64),
    /// Tuned towards entropy `-action_dim`, starting from the given value.
    Auto(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacConfig {
    pub gamma: f64,
    pub alpha: EntropyCoefficient,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Gradient updates.
    pub training_steps: usize,
    pub checkpoint_interval: usize,
    /// Uniform-random environment steps before the first update.
    pub warmup_steps: usize,
    pub env_steps_per_update: usize,
    pub hidden_widths: Vec<usize>,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: EntropyCoefficient::Fixed(0.2),
            tau: 0.005,
            learning_rate: 3e-4,
            batch_size: 256,
            training_steps: 1000,
            checkpoint_interval: 100,
            warmup_steps: 100,
            env_steps_per_update: 2,
            hidden_widths: vec![32, 32],
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 || self.env_steps_per_update == 0 {
            return bad("batch_size, checkpoint_interval and env_steps_per_update must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        match self.alpha {
            EntropyCoefficient::Fixed(a) | EntropyCoefficient::Auto(a) if a >= 0.0 => Ok(()),
            _ => bad("alpha must be non-negative"),
        }
    }

    pub fn initial_alpha(&self) -> f64 {
        match self.alpha {
            EntropyCoefficient::Fixed(a) | EntropyCoefficient::Auto(a) => a,
        }
    }
}

/// Soft Bellman target `r + gamma (1 - done) (min target Q - alpha log pi')`.
pub fn sac_critic_target(
    r: f64,
    done: bool,
    gamma: f64,
    alpha: f64,
    target_q_min: f64,
    log_pi_next: f64,
) -> f64 {
    let mask = if done { 0.0 } else { 1.0 };
    r + gamma * mask * (target_q_min - alpha * log_pi_next)
}

/// Row-major transition batch. Observation rows already include any
/// conditioning vector.
#[derive(Clone, Debug, Default)]
pub struct SacBatch {
    pub rows: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub dones: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SacNetworks {
    pub obs_dim: usize,
    pub cond_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
    pub actor: Mlp,
    pub critic: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacParams {
    pub actor: ParamVector,
    pub q1: ParamVector,
    pub q2: ParamVector,
    pub q1_target: ParamVector,
    pub q2_target: ParamVector,
    pub log_alpha: f64,
}

pub struct PolicySample {
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    cache: ForwardCache,
    u: Vec<f64>,
    std: Vec<f64>,
    eps: Vec<f64>,
}

pub struct CriticLoss {
    pub value: f64,
    pub grad_q1: Vec<f64>,
    pub grad_q2: Vec<f64>,
    /// `d loss / d obs` for the online critics' observation rows.
    pub grad_obs: Vec<f64>,
}

pub struct ActorLoss {
    pub value: f64,
    pub grad_actor: Vec<f64>,
    pub mean_log_prob: f64,
}

impl SacNetworks {
    pub fn new(
        obs_dim: usize,
        cond_dim: usize,
        action_dim: usize,
        action_bound: f64,
        hidden: &[usize],
    ) -> Result<Self> {
        let input = obs_dim + cond_dim;
        Ok(Self {
            obs_dim,
            cond_dim,
            action_dim,
            action_bound,
            actor: Mlp::new(MlpSpec::new(input, hidden, 2 * action_dim).with_activation(crate::numcore::Activation::Relu))?,
            critic: Mlp::new(MlpSpec::new(input + action_dim, hidden, 1).with_activation(crate::numcore::Activation::Relu))?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.cond_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, alpha: f64, rng: &mut R) -> SacParams {
        let q1 = self.critic.init(rng);
        let q2 = self.critic.init(rng);
        SacParams {
            actor: self.actor.init(rng),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            log_alpha: alpha.max(1e-12).ln(),
        }
    }

    fn split_head<'a>(&self, raw: &'a [f64], row: usize) -> (&'a [f64], &'a [f64]) {
        let a = self.action_dim;
        let r = &raw[row * 2 * a..(row + 1) * 2 * a];
        (&r[..a], &r[a..])
    }

    /// Reparameterized sample `bound * tanh(mean + std * eps)` with its log density.
    pub fn sample_policy(&self, actor: &[f64], obs: &[f64], rows: usize, eps: &[f64]) -> PolicySample {
        let a_dim = self.action_dim;
        assert_eq!(eps.len(), rows * a_dim, "noise length");
        let cache = self.actor.forward_batch(actor, obs, rows);
        let mut actions = vec![0.0; rows * a_dim];
        let mut log_probs = vec![0.0; rows];
        let mut u = vec![0.0; rows * a_dim];
        let mut std = vec![0.0; rows * a_dim];
        let log_bound = self.action_bound.ln();
        for r in 0..rows {
            let (mean, raw_ls) = self.split_head(&cache.output, r);
            let mut lp = 0.0;
            for i in 0..a_dim {
                let k = r * a_dim + i;
                let log_std = squash_log_std(raw_ls[i]);
                let sd = log_std.exp();
                let ui = mean[i] + sd * eps[k];
                let t = ui.tanh();
                actions[k] = self.action_bound * t;
                lp += -0.5 * eps[k] * eps[k] - log_std - HALF_LOG_2PI - log_bound - log_one_minus_tanh_sq(ui);
                u[k] = ui;
                std[k] = sd;
            }
            log_probs[r] = lp;
        }
        PolicySample {
            actions,
            log_probs,
            cache,
            u,
            std,
            eps: eps.to_vec(),
        }
    }

    /// Pulls `d loss / d action` and `d loss / d log pi` back to actor parameters.
    fn policy_backward(
        &self,
        actor: &[f64],
        sample: &PolicySample,
        grad_actions: &[f64],
        grad_log_probs: &[f64],
        grad_actor: &mut [f64],
    ) {
        let a_dim = self.action_dim;
        let rows = sample.cache.rows;
        let mut grad_raw = vec![0.0; rows * 2 * a_dim];
        for r in 0..rows {
            let (_, raw_ls) = self.split_head(&sample.cache.output, r);
            for i in 0..a_dim {
                let k = r * a_dim + i;
                let t = sample.u[k].tanh();
                let g_u = grad_actions[k] * self.action_bound * (1.0 - t * t) + grad_log_probs[r] * 2.0 * t;
                let g_log_std = g_u * sample.std[k] * sample.eps[k] - grad_log_probs[r];
                let th = raw_ls[i].tanh();
                grad_raw[r * 2 * a_dim + i] = g_u;
                grad_raw[r * 2 * a_dim + a_dim + i] = g_log_std * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - th * th);
            }
        }
        self.actor.backward(actor, &sample.cache, &grad_raw, grad_actor, None);
    }

    pub fn deterministic_action(&self, actor: &[f64], obs: &[f64]) -> Vec<f64> {
        let out = self.actor.forward(actor, obs);
        out[..self.action_dim]
            .iter()
            .map(|m| self.action_bound * m.tanh())
            .collect()
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, actor: &[f64], obs: &[f64], rng: &mut R) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.action_dim).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_policy(actor, obs, 1, &eps).actions
    }

    fn critic_inputs(&self, obs: &[f64], actions: &[f64], rows: usize) -> Vec<f64> {
        let (d, a) = (self.input_dim(), self.action_dim);
        let mut out = Vec::with_capacity(rows * (d + a));
        for r in 0..rows {
            out.extend_from_slice(&obs[r * d..(r + 1) * d]);
            out.extend_from_slice(&actions[r * a..(r + 1) * a]);
        }
        out
    }

    /// Soft Bellman targets computed from target critics only.
    pub fn targets(&self, params: &SacParams, batch: &SacBatch, eps_next: &[f64], gamma: f64) -> Vec<f64> {
        let alpha = params.log_alpha.exp();
        let n = batch.rows;
        let next = self.sample_policy(params.actor.values(), &batch.next_obs, n, eps_next);
        let x = self.critic_inputs(&batch.next_obs, &next.actions, n);
        let t1 = self.critic.forward_batch(params.q1_target.values(), &x, n).output;
        let t2 = self.critic.forward_batch(params.q2_target.values(), &x, n).output;
        (0..n)
            .map(|i| sac_critic_target(batch.rewards[i], batch.dones[i] > 0.5, gamma, alpha, t1[i].min(t2[i]), next.log_probs[i]))
            .collect()
    }

    /// `mean 0.5 [(Q1 - y)^2 + (Q2 - y)^2]` with fixed targets `y`.
    pub fn critic_loss(&self, params: &SacParams, batch: &SacBatch, targets: &[f64], want_obs_grad: bool) -> CriticLoss {
        let n = batch.rows;
        let x = self.critic_inputs(&batch.obs, &batch.actions, n);
        let d_in = self.input_dim() + self.action_dim;
        let mut value = 0.0;
        let mut grad_q = [vec![0.0; params.q1.len()], vec![0.0; params.q2.len()]];
        let mut grad_obs = if want_obs_grad { vec![0.0; n * self.input_dim()] } else { Vec::new() };
        for (k, q) in [&params.q1, &params.q2].into_iter().enumerate() {
            let cache = self.critic.forward_batch(q.values(), &x, n);
            let mut g = vec![0.0; n];
            for i in 0..n {
                let diff = cache.output[i] - targets[i];
                value += 0.5 * diff * diff / n as f64;
                g[i] = diff / n as f64;
            }
            if want_obs_grad {
                let mut gx = vec![0.0; n * d_in];
                self.critic.backward(q.values(), &cache, &g, &mut grad_q[k], Some(&mut gx));
                for r in 0..n {
                    for (o, gi) in grad_obs[r * self.input_dim()..(r + 1) * self.input_dim()]
                        .iter_mut()
                        .zip(&gx[r * d_in..])
                    {
                        *o += gi;
                    }
                }
            } else {
                self.critic.backward(q.values(), &cache, &g, &mut grad_q[k], None);
            }
        }
        let [grad_q1, grad_q2] = grad_q;
        CriticLoss {
            value,
            grad_q1,
            grad_q2,
            grad_obs,
        }
    }

    /// `mean [alpha log pi(a|s) - min(Q1, Q2)(s, a)]`, `a` reparameterized by `eps`.
    pub fn actor_loss(&self, params: &SacParams, obs: &[f64], rows: usize, eps: &[f64]) -> ActorLoss {
        let alpha = params.log_alpha.exp();
        let sample = self.sample_policy(params.actor.values(), obs, rows, eps);
        let x = self.critic_inputs(obs, &sample.actions, rows);
        let c1 = self.critic.forward_batch(params.q1.values(), &x, rows);
        let c2 = self.critic.forward_batch(params.q2.values(), &x, rows);
        let inv = 1.0 / rows as f64;
        let mut value = 0.0;
        let (mut g1, mut g2) = (vec![0.0; rows], vec![0.0; rows]);
        for i in 0..rows {
            let (q1, q2) = (c1.output[i], c2.output[i]);
            value += inv * (alpha * sample.log_probs[i] - q1.min(q2));
            if q1 <= q2 {
                g1[i] = -inv;
            } else {
                g2[i] = -inv;
            }
        }
        let d_in = self.input_dim() + self.action_dim;
        let mut scratch = vec![0.0; params.q1.len()];
        let mut gx1 = vec![0.0; rows * d_in];
        let mut gx2 = vec![0.0; rows * d_in];
        self.critic.backward(params.q1.values(), &c1, &g1, &mut scratch, Some(&mut gx1));
        self.critic.backward(params.q2.values(), &c2, &g2, &mut scratch, Some(&mut gx2));
        let a = self.action_dim;
        let mut grad_actions = vec![0.0; rows * a];
        for r in 0..rows {
            for i in 0..a {
                let col = r * d_in + self.input_dim() + i;
                grad_actions[r * a + i] = gx1[col] + gx2[col];
            }
        }
        let grad_lp = vec![alpha * inv; rows];
        let mut grad_actor = vec![0.0; params.actor.len()];
        self.policy_backward(params.actor.values(), &sample, &grad_actions, &grad_lp, &mut grad_actor);
        ActorLoss {
            value,
            grad_actor,
            mean_log_prob: sample.log_probs.iter().sum::<f64>() * inv,
        }
    }
}

fn squash_log_std(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

/// `log(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub struct UpdateInfo {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    /// `d critic loss / d obs` rows, present when requested.
    pub grad_obs: Vec<f64>,
}

/// Networks, parameters and optimizer state of one SAC run.
pub struct SacLearner {
    pub nets: SacNetworks,
    pub params: SacParams,
    cfg: SacConfig,
    actor_opt: AdamState,
    q1_opt: AdamState,
    q2_opt: AdamState,
    alpha_opt: Option<AdamState>,
    updates: usize,
}

impl SacLearner {
    pub fn new<R: Rng + ?Sized>(nets: SacNetworks, cfg: SacConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let params = nets.init(cfg.initial_alpha(), rng);
        let lr = cfg.learning_rate;
        Ok(Self {
            actor_opt: AdamState::new(params.actor.len(), lr),
            q1_opt: AdamState::new(params.q1.len(), lr),
            q2_opt: AdamState::new(params.q2.len(), lr),
            alpha_opt: matches!(cfg.alpha, EntropyCoefficient::Auto(_)).then(|| AdamState::new(1, lr)),
            nets,
            params,
            cfg,
            updates: 0,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn alpha(&self) -> f64 {
        self.params.log_alpha.exp()
    }

    /// One critic step, one actor step, an optional temperature step, then
    /// Polyak averaging of the target critics.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &SacBatch, want_obs_grad: bool, rng: &mut R) -> Result<UpdateInfo> {
        let n = batch.rows;
        let a = self.nets.action_dim;
        let step = self.updates;
        let eps_next: Vec<f64> = (0..n * a).map(|_| rng.sample(StandardNormal)).collect();
        let eps_now: Vec<f64> = (0..n * a).map(|_| rng.sample(StandardNormal)).collect();

        let targets = self.nets.targets(&self.params, batch, &eps_next, self.cfg.gamma);
        let critic = self.nets.critic_loss(&self.params, batch, &targets, want_obs_grad);
        if !critic.value.is_finite() {
            return Err(Error::Diverged { step, what: "critic loss".into() });
        }
        let diverged = |_| Error::Diverged { step, what: "critic gradient".into() };
        self.q1_opt.update(self.params.q1.values_mut(), &critic.grad_q1).map_err(diverged)?;
        self.q2_opt.update(self.params.q2.values_mut(), &critic.grad_q2).map_err(diverged)?;

        let actor = self.nets.actor_loss(&self.params, &batch.obs, n, &eps_now);
        if !actor.value.is_finite() {
            return Err(Error::Diverged { step, what: "actor loss".into() });
        }
        self.actor_opt
            .update(self.params.actor.values_mut(), &actor.grad_actor)
            .map_err(|_| Error::Diverged { step, what: "actor gradient".into() })?;

        if let Some(opt) = &mut self.alpha_opt {
            let target_entropy = -(a as f64);
            let g = -(actor.mean_log_prob + target_entropy);
            let mut la = [self.params.log_alpha];
            opt.update(&mut la, &[g])
                .map_err(|_| Error::Diverged { step, what: "temperature".into() })?;
            self.params.log_alpha = la[0];
        }

        polyak(self.params.q1_target.values_mut(), self.params.q1.values(), self.cfg.tau);
        polyak(self.params.q2_target.values_mut(), self.params.q2.values(), self.cfg.tau);
        self.updates += 1;
        Ok(UpdateInfo {
            critic_loss: critic.value,
            actor_loss: actor.value,
            alpha: self.alpha(),
            grad_obs: critic.grad_obs,
        })
    }
}

/// `target <- (1 - tau) target + tau online`.
pub fn polyak(target: &mut [f64], online: &[f64], tau: f64) {
    for (t, o) in target.iter_mut().zip(online) {
        *t = (1.0 - tau) * *t + tau * o;
    }
}
