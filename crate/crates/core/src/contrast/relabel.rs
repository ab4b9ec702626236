use rand::Rng;

use crate::collect::OfflineDataset;
use crate::numcore::{AdamState, Mlp, MlpSpec, ParamVector};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RelabelConfig {
    pub hidden_widths: Vec<usize>,
    pub training_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![32, 32],
            training_steps: 500,
            batch_size: 32,
            learning_rate: 1e-3,
        }
    }
}

/// Per-task reward model `(s, a) -> r` and transition model `(s, a) -> s'`.
/// The transition model predicts the displacement `s' - s`.
#[derive(Clone, Debug)]
pub struct RelabelModels {
    pub reward: Vec<ParamVector>,
    pub transition: Vec<ParamVector>,
    reward_net: Mlp,
    transition_net: Mlp,
}

impl RelabelModels {
    pub fn from_params(reward: Vec<ParamVector>, transition: Vec<ParamVector>) -> Result<Self> {
        if reward.is_empty() || reward.len() != transition.len() {
            return Err(Error::Missing("relabel models".into()));
        }
        let reward_net = Mlp::new(MlpSpec::from_layout(reward[0].layout())?)?;
        let transition_net = Mlp::new(MlpSpec::from_layout(transition[0].layout())?)?;
        for (r, t) in reward.iter().zip(&transition) {
            reward_net.check_params(r)?;
            transition_net.check_params(t)?;
        }
        Ok(Self { reward, transition, reward_net, transition_net })
    }

    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    /// Relabels `(s, a)` with task `task`'s models.
    pub fn predict(&self, task: usize, s: &[f64], a: &[f64]) -> (f64, Vec<f64>) {
        let mut x = s.to_vec();
        x.extend_from_slice(a);
        let r = self.reward_net.forward(self.reward[task].values(), &x)[0];
        let delta = self.transition_net.forward(self.transition[task].values(), &x);
        (r, s.iter().zip(&delta).map(|(a, b)| a + b).collect())
    }
}

fn fit<R: Rng + ?Sized>(
    net: &Mlp,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &RelabelConfig,
    rng: &mut R,
) -> Result<ParamVector> {
    let mut params = net.init(rng);
    let mut opt = AdamState::new(params.len(), cfg.learning_rate);
    let mut xs = Vec::with_capacity(cfg.batch_size);
    let mut ys = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.training_steps {
        xs.clear();
        ys.clear();
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..inputs.len());
            xs.push(inputs[i].clone());
            ys.push(&targets[i]);
        }
        let mse = |i: usize, out: &[f64], g: &mut [f64]| {
            let mut l = 0.0;
            for ((gi, o), y) in g.iter_mut().zip(out).zip(ys[i]) {
                *gi = o - y;
                l += 0.5 * (o - y) * (o - y);
            }
            l
        };
        let (_, grads) = net
            .loss_and_gradients(&params, &mse, &xs)
            .map_err(|e| Error::Diverged { step, what: format!("relabel model: {e}") })?;
        opt.update(params.values_mut(), grads.values())?;
    }
    Ok(params)
}

/// Fits one reward and one transition model per dataset by squared error.
pub fn train_relabel_models<R: Rng + ?Sized>(
    datasets: &[OfflineDataset],
    cfg: &RelabelConfig,
    rng: &mut R,
) -> Result<RelabelModels> {
    let first = datasets.first().ok_or(Error::Empty("training datasets"))?;
    let (obs, act) = (first.obs_dim(), first.action_dim());
    let reward_net = Mlp::new(MlpSpec::new(obs + act, &cfg.hidden_widths, 1))?;
    let transition_net = Mlp::new(MlpSpec::new(obs + act, &cfg.hidden_widths, obs))?;
    let mut reward = Vec::with_capacity(datasets.len());
    let mut transition = Vec::with_capacity(datasets.len());
    for d in datasets {
        if d.obs_dim() != obs || d.action_dim() != act {
            return Err(Error::Config("datasets mix observation/action sizes".into()));
        }
        let inputs: Vec<Vec<f64>> = d.tuples.iter().map(|t| [t.s.as_slice(), &t.a].concat()).collect();
        let rewards: Vec<Vec<f64>> = d.tuples.iter().map(|t| vec![t.r]).collect();
        let deltas: Vec<Vec<f64>> = d
            .tuples
            .iter()
            .map(|t| t.s_next.iter().zip(&t.s).map(|(a, b)| a - b).collect())
            .collect();
        reward.push(fit(&reward_net, &inputs, &rewards, cfg, rng)?);
        transition.push(fit(&transition_net, &inputs, &deltas, cfg, rng)?);
    }
    Ok(RelabelModels { reward, transition, reward_net, transition_net })
}
