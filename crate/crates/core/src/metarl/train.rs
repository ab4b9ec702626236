use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, RngCore};

use super::modes::ReprMode;
use crate::collect::{OfflineDataset, SacBatch, SacConfig, SacLearner, SacNetworks, SacParams};
use crate::envs::Family;
use crate::numcore::{AdamState, Bundle, ForwardCache, Layout, MlpSpec, ParamVector};
use crate::taskenc::{Aggregation, Context, EncoderConfig, EncoderParams, TaskEncoder, TaskRepresentation};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    /// `batch_size` is the total number of RL rows per step, split evenly
    /// over the sampled tasks.
    pub sac: SacConfig,
    pub task_batch_size: usize,
    pub context_length: usize,
    pub encoder: EncoderConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            sac: SacConfig {
                hidden_widths: vec![64, 64],
                training_steps: 2000,
                ..SacConfig::default()
            },
            task_batch_size: 16,
            context_length: 200,
            encoder: EncoderConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        self.sac.validate()?;
        if self.task_batch_size == 0 || self.context_length == 0 {
            return Err(Error::Config("task batch size and context length must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder, actor and twin critics (with targets) of a trained meta-policy.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPolicyParams {
    pub family: Family,
    pub mode: String,
    pub encoder: EncoderParams,
    pub sac: SacParams,
}

const PARAM_TAGS: [&str; 7] = [
    "encoder.theta1",
    "encoder.theta2",
    "sac.actor",
    "sac.q1",
    "sac.q2",
    "sac.q1_target",
    "sac.q2_target",
];

impl MetaPolicyParams {
    /// Tagged parameter vectors plus `family` and `mode` records. The
    /// entropy coefficient is stored as a one-element vector.
    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        b.record("family", self.family.name());
        b.record("mode", self.mode.clone());
        let p = [
            &self.encoder.theta1,
            &self.encoder.theta2,
            &self.sac.actor,
            &self.sac.q1,
            &self.sac.q2,
            &self.sac.q1_target,
            &self.sac.q2_target,
        ];
        for (tag, v) in PARAM_TAGS.iter().zip(p) {
            b.insert(tag, v.clone());
        }
        b.insert("sac.log_alpha", scalar_param("log_alpha", self.sac.log_alpha));
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let family = Family::from_name(b.get_record("family")?)?;
        let mode = b.get_record("mode")?.to_string();
        let [theta1, theta2, actor, q1, q2, q1_target, q2_target] = PARAM_TAGS.map(|t| b.get(t).cloned());
        let log_alpha = b.get("sac.log_alpha")?;
        if log_alpha.len() != 1 {
            return Err(Error::Format("log_alpha must hold one value".into()));
        }
        let params = Self {
            family,
            mode,
            encoder: EncoderParams { theta1: theta1?, theta2: theta2? },
            sac: SacParams {
                actor: actor?,
                q1: q1?,
                q2: q2?,
                q1_target: q1_target?,
                q2_target: q2_target?,
                log_alpha: log_alpha.values()[0],
            },
        };
        MetaPolicy::new(params.clone())?;
        Ok(params)
    }
}

pub(crate) fn scalar_param(name: &str, value: f64) -> ParamVector {
    let layout = Layout::new([(name, vec![1])]).expect("non-empty shape");
    ParamVector::new(Arc::new(layout), vec![value]).expect("one value")
}

/// Parameters together with the networks that interpret them.
#[derive(Clone, Debug)]
pub struct MetaPolicy {
    pub params: MetaPolicyParams,
    pub encoder: TaskEncoder,
    pub nets: SacNetworks,
}

impl MetaPolicy {
    pub fn new(params: MetaPolicyParams) -> Result<Self> {
        let model = params.family.model();
        let (obs, act) = (model.obs_dim(), model.action_dim());
        let encoder = TaskEncoder::for_params(obs, act, &params.encoder)?;
        let hidden = MlpSpec::from_layout(params.sac.actor.layout())?.hidden_widths;
        let nets = SacNetworks::new(obs, encoder.latent_dim, act, model.action_bound(), &hidden)?;
        for (net, p) in [
            (&nets.actor, &params.sac.actor),
            (&nets.critic, &params.sac.q1),
            (&nets.critic, &params.sac.q2),
            (&nets.critic, &params.sac.q1_target),
            (&nets.critic, &params.sac.q2_target),
        ] {
            net.check_params(p)?;
        }
        Ok(Self { params, encoder, nets })
    }

    pub fn encode(&self, context: &Context) -> Result<TaskRepresentation> {
        self.encoder.encode_context(&self.params.encoder, context)
    }

    fn input(&self, s: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.nets.obs_dim || z.len() != self.nets.cond_dim {
            return Err(Error::DimensionMismatch {
                context: "policy input",
                expected: self.nets.input_dim(),
                actual: s.len() + z.len(),
            });
        }
        Ok([s, z].concat())
    }

    pub fn mean_action(&self, s: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let input = self.input(s, z)?;
        Ok(self.nets.deterministic_action(self.params.sac.actor.values(), &input))
    }

    /// Squashed mean action when `deterministic`, otherwise a policy sample.
    pub fn act(&self, s: &[f64], z: &[f64], deterministic: bool, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        if deterministic {
            return self.mean_action(s, z);
        }
        let input = self.input(s, z)?;
        Ok(self.nets.sample_action(self.params.sac.actor.values(), &input, rng))
    }
}

pub fn act(policy: &MetaPolicy, s: &[f64], z: &[f64], deterministic: bool, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    policy.act(s, z, deterministic, rng)
}

/// One logged scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub name: &'static str,
    pub value: f64,
}

pub struct MetaTraining {
    pub params: MetaPolicyParams,
    pub metrics: Vec<MetricRecord>,
}

fn check_datasets(datasets: &[OfflineDataset]) -> Result<Family> {
    let first = datasets.first().ok_or(Error::Empty("training datasets"))?;
    let family = first.task.family;
    if datasets.iter().any(|d| d.task.family != family) {
        return Err(Error::Config("training datasets mix task families".into()));
    }
    Ok(family)
}

struct Encoded {
    latents: Vec<f64>,
    cache: Option<ForwardCache>,
    agg: Aggregation,
}

/// Step-wise meta-policy training: actor, critics and aggregator learn from
/// offline batches whose states are augmented with the representation of a
/// context from the same task. The transition encoder is frozen for
/// contrastive modes and trained end-to-end otherwise.
pub struct MetaTrainer<'a> {
    datasets: &'a [OfflineDataset],
    mode: &'a dyn ReprMode,
    cfg: MetaConfig,
    family: Family,
    encoder: TaskEncoder,
    enc_params: EncoderParams,
    learner: SacLearner,
    opt_theta1: Option<AdamState>,
    opt_theta2: AdamState,
    // a frozen transition encoder lets every tuple's latent be computed once
    cached: Option<Vec<Vec<f64>>>,
    steps_done: usize,
    metrics: Vec<MetricRecord>,
}

impl<'a> MetaTrainer<'a> {
    /// Initializes the encoder, then the SAC networks, from `rng`.
    pub fn new(
        datasets: &'a [OfflineDataset],
        mode: &'a dyn ReprMode,
        pretrained_theta1: Option<&ParamVector>,
        cfg: &MetaConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        cfg.validate()?;
        let family = check_datasets(datasets)?;
        let model = family.model();
        let (obs_dim, act_dim) = (model.obs_dim(), model.action_dim());
        if let Some(d) = datasets.iter().find(|d| d.len() < cfg.context_length) {
            return Err(Error::DatasetTooSmall { available: d.len(), requested: cfg.context_length });
        }
        let encoder = TaskEncoder::new(obs_dim, act_dim, &cfg.encoder)?;
        let init = encoder.init(rng);
        let theta1 = match (pretrained_theta1, mode.contrastive()) {
            (Some(t), _) => {
                encoder.transition.check_params(t)?;
                t.clone()
            }
            (None, true) => return Err(Error::Missing("pretrained transition encoder for contrastive mode".into())),
            (None, false) => init.theta1,
        };
        let enc_params = EncoderParams { theta1, theta2: init.theta2 };
        let nets = SacNetworks::new(obs_dim, encoder.latent_dim, act_dim, model.action_bound(), &cfg.sac.hidden_widths)?;
        let learner = SacLearner::new(nets, cfg.sac.clone(), rng)?;
        let train_theta1 = !mode.contrastive();
        let lr = cfg.sac.learning_rate;
        let cached = (!train_theta1).then(|| {
            datasets
                .iter()
                .map(|d| {
                    let mut feats = Vec::with_capacity(d.len() * encoder.feature_dim());
                    d.tuples.iter().for_each(|t| t.write_features(&mut feats));
                    encoder.encode_features(&enc_params.theta1, &feats, d.len()).output
                })
                .collect()
        });
        Ok(Self {
            datasets,
            mode,
            cfg: cfg.clone(),
            family,
            opt_theta1: train_theta1.then(|| AdamState::new(enc_params.theta1.len(), lr)),
            opt_theta2: AdamState::new(enc_params.theta2.len(), lr),
            encoder,
            enc_params,
            learner,
            cached,
            steps_done: 0,
            metrics: Vec::with_capacity(3 * cfg.sac.training_steps),
        })
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn metrics(&self) -> &[MetricRecord] {
        &self.metrics
    }

    /// Snapshot of the current parameters.
    pub fn params(&self) -> MetaPolicyParams {
        MetaPolicyParams {
            family: self.family,
            mode: self.mode.name().to_string(),
            encoder: self.enc_params.clone(),
            sac: self.learner.params.clone(),
        }
    }

    pub fn finish(self) -> MetaTraining {
        let params = self.params();
        MetaTraining { params, metrics: self.metrics }
    }

    /// One update of the critics, actor and encoder.
    pub fn step(&mut self, rng: &mut dyn RngCore) -> Result<()> {
        let step = self.steps_done;
        let (datasets, encoder, cfg) = (self.datasets, &self.encoder, &self.cfg);
        let (obs_dim, l, k, n_tasks) = (encoder.obs_dim, encoder.latent_dim, cfg.context_length, datasets.len());
        let train_theta1 = self.opt_theta1.is_some();
        let rows_per_task = (cfg.sac.batch_size / cfg.task_batch_size).max(1);
        let cpt = self.mode.contexts_per_task().max(1);
        let tasks: Vec<usize> = if cfg.task_batch_size <= n_tasks {
            index::sample(rng, n_tasks, cfg.task_batch_size).into_vec()
        } else {
            (0..cfg.task_batch_size).map(|_| rng.gen_range(0..n_tasks)).collect()
        };

        let mut encoded = Vec::with_capacity(tasks.len() * cpt);
        let mut owners = Vec::with_capacity(tasks.len() * cpt);
        let mut descriptors = Vec::with_capacity(tasks.len() * cpt);
        for &t in &tasks {
            let d = &datasets[t];
            for _ in 0..cpt {
                let start = rng.gen_range(0..=d.len() - k);
                let (latents, cache) = match &self.cached {
                    Some(c) => (c[t][start * l..(start + k) * l].to_vec(), None),
                    None => {
                        let mut feats = Vec::with_capacity(k * encoder.feature_dim());
                        d.tuples[start..start + k].iter().for_each(|x| x.write_features(&mut feats));
                        let fc = encoder.encode_features(&self.enc_params.theta1, &feats, k);
                        (fc.output.clone(), Some(fc))
                    }
                };
                let agg = encoder.aggregate_forward(&self.enc_params.theta2, &latents, k);
                encoded.push(Encoded { latents, cache, agg });
                owners.push(t);
                descriptors.push(d.task.params.clone());
            }
        }

        let mut batch = SacBatch::default();
        for (p, &t) in tasks.iter().enumerate() {
            let z = &encoded[p * cpt].agg.z;
            let d = &datasets[t];
            for _ in 0..rows_per_task {
                let x = &d.tuples[rng.gen_range(0..d.len())];
                batch.rows += 1;
                batch.obs.extend_from_slice(&x.s);
                batch.obs.extend_from_slice(z);
                batch.actions.extend_from_slice(&x.a);
                batch.rewards.push(x.r);
                batch.next_obs.extend_from_slice(&x.s_next);
                batch.next_obs.extend_from_slice(z);
                batch.dones.push(if x.done { 1.0 } else { 0.0 });
            }
        }
        let info = self.learner.update(&batch, true, rng).map_err(|e| match e {
            Error::Diverged { what, .. } => Error::Diverged { step, what },
            other => other,
        })?;

        let width = obs_dim + l;
        let mut grad_z = vec![vec![0.0; l]; encoded.len()];
        for p in 0..tasks.len() {
            let g = &mut grad_z[p * cpt];
            for r in p * rows_per_task..(p + 1) * rows_per_task {
                for (acc, v) in g.iter_mut().zip(&info.grad_obs[r * width + obs_dim..(r + 1) * width]) {
                    *acc += v;
                }
            }
        }
        let zs: Vec<Vec<f64>> = encoded.iter().map(|e| e.agg.z.clone()).collect();
        let enc_loss = self
            .mode
            .encoder_loss(&zs, &owners, &descriptors, &mut grad_z)
            .map_err(|e| Error::Diverged { step, what: format!("encoder loss: {e}") })?;
        if !enc_loss.is_finite() {
            return Err(Error::Diverged { step, what: "encoder loss".into() });
        }

        let theta2 = &self.enc_params.theta2;
        let mut g_theta2 = vec![0.0; theta2.len()];
        let mut g_theta1 = if train_theta1 { vec![0.0; self.enc_params.theta1.len()] } else { Vec::new() };
        for (e, gz) in encoded.iter().zip(&grad_z) {
            match &e.cache {
                Some(fc) if train_theta1 => {
                    let mut g_lat = vec![0.0; e.latents.len()];
                    encoder.aggregate_backward(theta2, &e.agg, &e.latents, gz, &mut g_theta2, Some(&mut g_lat));
                    encoder.transition.backward(self.enc_params.theta1.values(), fc, &g_lat, &mut g_theta1, None);
                }
                _ => encoder.aggregate_backward(theta2, &e.agg, &e.latents, gz, &mut g_theta2, None),
            }
        }
        let diverged = |_| Error::Diverged { step, what: "encoder gradient".into() };
        self.opt_theta2.update(self.enc_params.theta2.values_mut(), &g_theta2).map_err(diverged)?;
        if let Some(opt) = &mut self.opt_theta1 {
            opt.update(self.enc_params.theta1.values_mut(), &g_theta1).map_err(diverged)?;
        }

        self.metrics.push(MetricRecord { step, name: "critic", value: info.critic_loss });
        self.metrics.push(MetricRecord { step, name: "actor", value: info.actor_loss });
        self.metrics.push(MetricRecord { step, name: "encoder", value: enc_loss });
        self.steps_done += 1;
        Ok(())
    }
}

/// Runs [`MetaTrainer`] for `cfg.sac.training_steps` steps.
pub fn train_meta_policy(
    datasets: &[OfflineDataset],
    mode: &dyn ReprMode,
    pretrained_theta1: Option<&ParamVector>,
    cfg: &MetaConfig,
    rng: &mut dyn RngCore,
) -> Result<MetaTraining> {
    let mut trainer = MetaTrainer::new(datasets, mode, pretrained_theta1, cfg, rng)?;
    for _ in 0..cfg.sac.training_steps {
        trainer.step(rng)?;
    }
    Ok(trainer.finish())
}
