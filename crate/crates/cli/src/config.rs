//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use corro_core::collect::{EntropyCoefficient, SacConfig};
use corro_core::contrast::{default_strategy, strategy_names, ContrastConfig, StrategySettings};
use corro_core::envs::Family;
use corro_core::metarl::{mode_names, Focal, MetaConfig, ModeSettings};
use corro_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub family: Family,
    pub seed: u64,
    pub num_train_tasks: usize,
    pub num_test_tasks: usize,
    pub strategy: String,
    pub mode: String,
    pub collect: SacConfig,
    pub contrast: ContrastConfig,
    pub strategies: StrategySettings,
    pub meta: MetaConfig,
    pub focal: Focal,
    pub eval_seeds: usize,
    pub ood_samples: usize,
    pub embedding_samples: usize,
    pub out_dir: PathBuf,
}

/// Every recognized key, in echo order.
pub const KEYS: &[&str] = &[
    "family",
    "seed",
    "num_train_tasks",
    "num_test_tasks",
    "strategy",
    "mode",
    "out_dir",
    "gamma",
    "sac_tau",
    "alpha",
    "alpha_tuning",
    "collect_hidden",
    "collect_learning_rate",
    "collect_batch_size",
    "collect_steps",
    "collect_warmup",
    "collect_env_steps_per_update",
    "collect_checkpoint_interval",
    "latent_dim",
    "encoder_hidden",
    "scorer_hidden",
    "contrast_task_batch_size",
    "contrastive_batch_size",
    "negatives_per_anchor",
    "contrast_steps",
    "temperature",
    "contrast_learning_rate",
    "randomize_std",
    "cvae_latent_dim",
    "cvae_hidden",
    "cvae_steps",
    "cvae_batch_size",
    "cvae_learning_rate",
    "cvae_likelihood_std",
    "generation_noise",
    "relabel_hidden",
    "relabel_steps",
    "relabel_batch_size",
    "relabel_learning_rate",
    "meta_hidden",
    "meta_learning_rate",
    "meta_batch_size",
    "meta_steps",
    "meta_task_batch_size",
    "context_length",
    "focal_beta",
    "focal_power",
    "focal_epsilon",
    "eval_seeds",
    "ood_samples",
    "embedding_samples",
];

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value `{value}` for `{key}`"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn widths(key: &str, value: &str) -> Result<Vec<usize>> {
    let v = value
        .split(',')
        .map(|w| w.trim().parse::<usize>().ok().filter(|&w| w > 0))
        .collect::<Option<Vec<_>>>();
    v.filter(|v| !v.is_empty()).ok_or_else(|| bad(key, value))
}

impl ExperimentConfig {
    /// Defaults for a family. Collection budgets depend on the family.
    pub fn defaults(family: Family) -> Self {
        let (warmup, steps) = match family {
            Family::PointRobot => (100, 1000),
            Family::LineVel | Family::PointRobotDyn => (1000, 4500),
        };
        let collect = SacConfig {
            warmup_steps: warmup,
            training_steps: steps,
            ..SacConfig::default()
        };
        let mut meta = MetaConfig::default();
        meta.sac.alpha = collect.alpha.clone();
        Self {
            family,
            seed: 0,
            num_train_tasks: 20,
            num_test_tasks: 20,
            strategy: default_strategy(family).to_string(),
            mode: "corro".into(),
            collect,
            contrast: ContrastConfig::default(),
            strategies: StrategySettings::default(),
            meta,
            focal: Focal::default(),
            eval_seeds: 1,
            ood_samples: 20,
            embedding_samples: 200,
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn mode_settings(&self) -> ModeSettings {
        ModeSettings { focal: self.focal.clone() }
    }

    /// Parses `key = value` lines; `#` starts a comment. Family defaults are
    /// applied first, so `family` may appear anywhere.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        let mut order = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(err(format!("unknown key `{k}`")));
            }
            if pairs.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
            order.push(k.to_string());
        }
        let family = match pairs.get("family") {
            Some((_, v)) => Family::from_name(v)?,
            None => Family::PointRobot,
        };
        let mut cfg = Self::defaults(family);
        for k in order {
            let (line, v) = &pairs[&k];
            cfg.set(&k, v).map_err(|e| Error::Parse { line: *line, message: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let c = &mut self.collect;
        let m = &mut self.meta;
        let s = &mut self.strategies;
        match key {
            "family" => self.family = Family::from_name(v)?,
            "seed" => self.seed = num(key, v)?,
            "num_train_tasks" => self.num_train_tasks = num(key, v)?,
            "num_test_tasks" => self.num_test_tasks = num(key, v)?,
            "strategy" => self.strategy = v.to_string(),
            "mode" => self.mode = v.to_string(),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "gamma" => {
                c.gamma = num(key, v)?;
                m.sac.gamma = c.gamma;
            }
            "sac_tau" => {
                c.tau = num(key, v)?;
                m.sac.tau = c.tau;
            }
            "alpha" | "alpha_tuning" => {
                let (mut a, mut auto) = match c.alpha {
                    EntropyCoefficient::Fixed(a) => (a, false),
                    EntropyCoefficient::Auto(a) => (a, true),
                };
                if key == "alpha" {
                    a = num(key, v)?;
                } else {
                    auto = match v {
                        "fixed" => false,
                        "auto" => true,
                        _ => return Err(bad(key, v)),
                    };
                }
                c.alpha = if auto { EntropyCoefficient::Auto(a) } else { EntropyCoefficient::Fixed(a) };
                m.sac.alpha = c.alpha.clone();
            }
            "collect_hidden" => c.hidden_widths = widths(key, v)?,
            "collect_learning_rate" => c.learning_rate = num(key, v)?,
            "collect_batch_size" => c.batch_size = num(key, v)?,
            "collect_steps" => c.training_steps = num(key, v)?,
            "collect_warmup" => c.warmup_steps = num(key, v)?,
            "collect_env_steps_per_update" => c.env_steps_per_update = num(key, v)?,
            "collect_checkpoint_interval" => c.checkpoint_interval = num(key, v)?,
            "latent_dim" => m.encoder.latent_dim = num(key, v)?,
            "encoder_hidden" => m.encoder.transition_hidden = widths(key, v)?,
            "scorer_hidden" => m.encoder.scorer_hidden = widths(key, v)?,
            "contrast_task_batch_size" => self.contrast.task_batch_size = num(key, v)?,
            "contrastive_batch_size" => self.contrast.contrastive_batch_size = num(key, v)?,
            "negatives_per_anchor" => self.contrast.negatives_per_anchor = num(key, v)?,
            "contrast_steps" => self.contrast.training_steps = num(key, v)?,
            "temperature" => self.contrast.temperature = num(key, v)?,
            "contrast_learning_rate" => self.contrast.learning_rate = num(key, v)?,
            "randomize_std" => s.randomize_std = num(key, v)?,
            "cvae_latent_dim" => s.cvae.latent_dim = num(key, v)?,
            "cvae_hidden" => s.cvae.hidden_widths = widths(key, v)?,
            "cvae_steps" => s.cvae.training_steps = num(key, v)?,
            "cvae_batch_size" => s.cvae.batch_size = num(key, v)?,
            "cvae_learning_rate" => s.cvae.learning_rate = num(key, v)?,
            "cvae_likelihood_std" => s.cvae.likelihood_std = num(key, v)?,
            "generation_noise" => s.cvae.generation_noise = num(key, v)?,
            "relabel_hidden" => s.relabel.hidden_widths = widths(key, v)?,
            "relabel_steps" => s.relabel.training_steps = num(key, v)?,
            "relabel_batch_size" => s.relabel.batch_size = num(key, v)?,
            "relabel_learning_rate" => s.relabel.learning_rate = num(key, v)?,
            "meta_hidden" => m.sac.hidden_widths = widths(key, v)?,
            "meta_learning_rate" => m.sac.learning_rate = num(key, v)?,
            "meta_batch_size" => m.sac.batch_size = num(key, v)?,
            "meta_steps" => m.sac.training_steps = num(key, v)?,
            "meta_task_batch_size" => m.task_batch_size = num(key, v)?,
            "context_length" => m.context_length = num(key, v)?,
            "focal_beta" => self.focal.beta = num(key, v)?,
            "focal_power" => self.focal.power = num(key, v)?,
            "focal_epsilon" => self.focal.epsilon = num(key, v)?,
            "eval_seeds" => self.eval_seeds = num(key, v)?,
            "ood_samples" => self.ood_samples = num(key, v)?,
            "embedding_samples" => self.embedding_samples = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let c = &self.collect;
        let m = &self.meta;
        let s = &self.strategies;
        Some(match key {
            "family" => self.family.name().to_string(),
            "seed" => self.seed.to_string(),
            "num_train_tasks" => self.num_train_tasks.to_string(),
            "num_test_tasks" => self.num_test_tasks.to_string(),
            "strategy" => self.strategy.clone(),
            "mode" => self.mode.clone(),
            "out_dir" => self.out_dir.display().to_string(),
            "gamma" => c.gamma.to_string(),
            "sac_tau" => c.tau.to_string(),
            "alpha" => c.initial_alpha().to_string(),
            "alpha_tuning" => match c.alpha {
                EntropyCoefficient::Fixed(_) => "fixed".into(),
                EntropyCoefficient::Auto(_) => "auto".into(),
            },
            "collect_hidden" => list(&c.hidden_widths),
            "collect_learning_rate" => c.learning_rate.to_string(),
            "collect_batch_size" => c.batch_size.to_string(),
            "collect_steps" => c.training_steps.to_string(),
            "collect_warmup" => c.warmup_steps.to_string(),
            "collect_env_steps_per_update" => c.env_steps_per_update.to_string(),
            "collect_checkpoint_interval" => c.checkpoint_interval.to_string(),
            "latent_dim" => m.encoder.latent_dim.to_string(),
            "encoder_hidden" => list(&m.encoder.transition_hidden),
            "scorer_hidden" => list(&m.encoder.scorer_hidden),
            "contrast_task_batch_size" => self.contrast.task_batch_size.to_string(),
            "contrastive_batch_size" => self.contrast.contrastive_batch_size.to_string(),
            "negatives_per_anchor" => self.contrast.negatives_per_anchor.to_string(),
            "contrast_steps" => self.contrast.training_steps.to_string(),
            "temperature" => self.contrast.temperature.to_string(),
            "contrast_learning_rate" => self.contrast.learning_rate.to_string(),
            "randomize_std" => s.randomize_std.to_string(),
            "cvae_latent_dim" => s.cvae.latent_dim.to_string(),
            "cvae_hidden" => list(&s.cvae.hidden_widths),
            "cvae_steps" => s.cvae.training_steps.to_string(),
            "cvae_batch_size" => s.cvae.batch_size.to_string(),
            "cvae_learning_rate" => s.cvae.learning_rate.to_string(),
            "cvae_likelihood_std" => s.cvae.likelihood_std.to_string(),
            "generation_noise" => s.cvae.generation_noise.to_string(),
            "relabel_hidden" => list(&s.relabel.hidden_widths),
            "relabel_steps" => s.relabel.training_steps.to_string(),
            "relabel_batch_size" => s.relabel.batch_size.to_string(),
            "relabel_learning_rate" => s.relabel.learning_rate.to_string(),
            "meta_hidden" => list(&m.sac.hidden_widths),
            "meta_learning_rate" => m.sac.learning_rate.to_string(),
            "meta_batch_size" => m.sac.batch_size.to_string(),
            "meta_steps" => m.sac.training_steps.to_string(),
            "meta_task_batch_size" => m.task_batch_size.to_string(),
            "context_length" => m.context_length.to_string(),
            "focal_beta" => self.focal.beta.to_string(),
            "focal_power" => self.focal.power.to_string(),
            "focal_epsilon" => self.focal.epsilon.to_string(),
            "eval_seeds" => self.eval_seeds.to_string(),
            "ood_samples" => self.ood_samples.to_string(),
            "embedding_samples" => self.embedding_samples.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_train_tasks == 0 || self.num_test_tasks == 0 {
            return Err(Error::Config("task counts must be positive".into()));
        }
        if self.eval_seeds == 0 || self.ood_samples == 0 || self.embedding_samples == 0 {
            return Err(Error::Config("eval_seeds, ood_samples and embedding_samples must be positive".into()));
        }
        if !strategy_names().contains(&self.strategy.as_str()) {
            return Err(Error::UnknownName {
                kind: "strategy",
                name: self.strategy.clone(),
                valid: strategy_names().join(", "),
            });
        }
        if !mode_names().contains(&self.mode.as_str()) {
            return Err(Error::UnknownName {
                kind: "representation mode",
                name: self.mode.clone(),
                valid: mode_names().join(", "),
            });
        }
        if self.meta.encoder.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        self.collect.validate()?;
        self.contrast.validate()?;
        self.meta.validate()
    }

    /// Fully resolved configuration, one `key = value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key has a value")))
            .collect()
    }
}
