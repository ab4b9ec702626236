use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use corro_core::collect::{train_behavior_policy, CheckpointPool, OfflineDataset};
use corro_core::contrast::{build_strategy, mi_oracle, train_transition_encoder, OracleResult, Tabulation};
use corro_core::envs::{sample_task, TaskSpec};
use corro_core::evalkit::{
    aggregate, export_embeddings, iid_test, ood_test, random_context_test, spearman, EvalReport, Protocol,
};
use corro_core::metarl::{build_mode, train_meta_policy, MetaPolicy, MetaPolicyParams};
use corro_core::numcore::{Bundle, ParamVector};
use corro_core::taskenc::TaskEncoder;
use corro_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts::ArtifactWriter;
use crate::config::ExperimentConfig;

const TASK_STREAM: u64 = 0;
const NEGATIVES_STREAM: u64 = 1;
const ENCODER_STREAM: u64 = 2;
const POLICY_STREAM: u64 = 3;
const EMBEDDING_STREAM: u64 = 4;
const COLLECT_STREAM_BASE: u64 = 1000;

pub const POLICY_FILE: &str = "model/policy.bundle";
pub const THETA1_FILE: &str = "model/theta1.bundle";
pub const METRICS_FILE: &str = "metrics.txt";

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn split_file(dir: &str, split: &str, i: usize, ext: &str) -> String {
    format!("{dir}/{split}-{i:03}.{ext}")
}

fn begin(cfg: &ExperimentConfig, command: &str) -> Result<ArtifactWriter> {
    let mut w = ArtifactWriter::new(&cfg.out_dir)?;
    w.write(&format!("config-{command}.txt"), cfg.to_text().as_bytes())?;
    Ok(w)
}

/// Training and test tasks for a config, fixed by the seed alone.
pub fn sample_tasks(cfg: &ExperimentConfig) -> (Vec<TaskSpec>, Vec<TaskSpec>) {
    let mut rng = stream(cfg.seed, TASK_STREAM);
    let train = (0..cfg.num_train_tasks).map(|_| sample_task(cfg.family, &mut rng)).collect();
    let test = (0..cfg.num_test_tasks).map(|_| sample_task(cfg.family, &mut rng)).collect();
    (train, test)
}

/// Trains one behavior policy per training and test task; writes each
/// replay buffer and checkpoint series.
pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let mut w = begin(cfg, "collect")?;
    let (train, test) = sample_tasks(cfg);
    let mut listing = String::new();
    let splits = [("train", &train), ("test", &test)];
    let mut job = 0;
    for (split, tasks) in splits {
        for (i, task) in tasks.iter().enumerate() {
            let mut rng = stream(cfg.seed, COLLECT_STREAM_BASE + job);
            job += 1;
            let (pool, data) = train_behavior_policy(task, i, &cfg.collect, &mut rng)?;
            w.write(&split_file("data", split, i, "ds"), &data.to_bytes())?;
            w.write(&split_file("checkpoints", split, i, "pool"), &pool.to_bytes())?;
            let params: Vec<String> = task.params.iter().map(|p| format!("{p:?}")).collect();
            let _ = writeln!(listing, "{split} {i} {} {}", task.family, params.join(" "));
        }
    }
    w.write("tasks.txt", listing.as_bytes())?;
    w.finish("collect")
}

fn load_split(cfg: &ExperimentConfig, split: &str, n: usize) -> Result<Vec<OfflineDataset>> {
    (0..n)
        .map(|i| {
            let path = cfg.out_dir.join(split_file("data", split, i, "ds"));
            if !path.exists() {
                return Err(Error::Missing(format!("collect output {} (run `collect` first)", path.display())));
            }
            let d = OfflineDataset::load(&path)?;
            if d.task.family != cfg.family {
                return Err(Error::Config(format!("{} holds a {} task", path.display(), d.task.family)));
            }
            Ok(d)
        })
        .collect()
}

pub fn load_train_data(cfg: &ExperimentConfig) -> Result<Vec<OfflineDataset>> {
    load_split(cfg, "train", cfg.num_train_tasks)
}

pub fn load_test_data(cfg: &ExperimentConfig) -> Result<Vec<OfflineDataset>> {
    load_split(cfg, "test", cfg.num_test_tasks)
}

pub fn load_policy(cfg: &ExperimentConfig) -> Result<MetaPolicy> {
    let path = cfg.out_dir.join(POLICY_FILE);
    if !path.exists() {
        return Err(Error::Missing(format!("train output {} (run `train` first)", path.display())));
    }
    MetaPolicy::new(MetaPolicyParams::from_bundle(&Bundle::load(&path)?)?)
}

/// Metric lines `step name value`; steps continue across stages.
struct Metrics {
    text: String,
    offset: usize,
}

impl Metrics {
    fn stage<'a>(&mut self, records: impl IntoIterator<Item = (usize, &'a str, f64)>) {
        let mut last = None;
        for (step, name, value) in records {
            let _ = writeln!(self.text, "{} {name} {value:?}", self.offset + step);
            last = Some(step);
        }
        if let Some(l) = last {
            self.offset += l + 1;
        }
    }
}

/// Runs the training stages: negative-pair models and the transition encoder
/// (contrastive modes only), then the meta-policy.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let datasets = load_train_data(cfg)?;
    let mut w = begin(cfg, "train")?;
    let mode = build_mode(&cfg.mode, &cfg.mode_settings())?;
    let mut metrics = Metrics { text: String::new(), offset: 0 };
    let theta1 = if mode.contrastive() {
        let sampler = build_strategy(&cfg.strategy, &datasets, &cfg.strategies, &mut stream(cfg.seed, NEGATIVES_STREAM))?;
        let fit_name = match sampler.name() {
            "generative" => "cvae",
            other => other,
        };
        metrics.stage(sampler.fit_losses().iter().enumerate().map(|(i, v)| (i, fit_name, *v)));
        let artifacts = sampler.artifacts();
        if !artifacts.is_empty() {
            let mut b = Bundle::new();
            b.record("strategy", sampler.name());
            for (tag, p) in artifacts {
                b.insert(&tag, p);
            }
            w.write(&format!("model/{fit_name}.bundle"), &b.to_bytes())?;
        }

        let (obs, act) = (cfg.family.model().obs_dim(), cfg.family.model().action_dim());
        let encoder = TaskEncoder::new(obs, act, &cfg.meta.encoder)?;
        let mut rng = stream(cfg.seed, ENCODER_STREAM);
        let init = encoder.init(&mut rng).theta1;
        let out = train_transition_encoder(&encoder, init, &datasets, sampler.as_ref(), &cfg.contrast, &mut rng)?;
        metrics.stage(out.losses.iter().enumerate().map(|(i, v)| (i, "contrastive", *v)));
        let mut b = Bundle::new();
        b.record("family", cfg.family.name());
        b.record("strategy", sampler.name());
        b.insert("encoder.theta1", out.theta1.clone());
        w.write(THETA1_FILE, &b.to_bytes())?;
        Some(out.theta1)
    } else {
        None
    };

    let trained = train_meta_policy(
        &datasets,
        mode.as_ref(),
        theta1.as_ref(),
        &cfg.meta,
        &mut stream(cfg.seed, POLICY_STREAM),
    )?;
    metrics.stage(trained.metrics.iter().map(|m| (m.step, m.name, m.value)));
    w.write(POLICY_FILE, &trained.params.to_bundle().to_bytes())?;
    w.write(METRICS_FILE, metrics.text.as_bytes())?;
    w.finish("train")
}

/// Checkpoints of every training task's behavior policy.
pub fn load_train_pool(cfg: &ExperimentConfig) -> Result<CheckpointPool> {
    let mut pool: Option<CheckpointPool> = None;
    for i in 0..cfg.num_train_tasks {
        let path = cfg.out_dir.join(split_file("checkpoints", "train", i, "pool"));
        if !path.exists() {
            return Err(Error::Missing(format!("checkpoint pool {} (run `collect` first)", path.display())));
        }
        let p = CheckpointPool::load(&path)?;
        match pool.as_mut() {
            Some(acc) => acc.merge(p)?,
            None => pool = Some(p),
        }
    }
    pool.ok_or(Error::Empty("checkpoint pool"))
}

/// Evaluation seeds: `seed, seed + 1, ...`.
pub fn eval_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.eval_seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect()
}

/// Runs one protocol for every evaluation seed; returns the reports.
pub fn evaluate(cfg: &ExperimentConfig, protocol: Protocol) -> Result<Vec<EvalReport>> {
    let policy = load_policy(cfg)?;
    let data = load_test_data(cfg)?;
    let tasks: Vec<TaskSpec> = data.iter().map(|d| d.task.clone()).collect();
    let pool = match protocol {
        Protocol::Ood => Some(load_train_pool(cfg)?),
        _ => None,
    };
    eval_seeds(cfg)
        .into_iter()
        .map(|seed| match protocol {
            Protocol::Iid => iid_test(&tasks, &data, &policy, cfg.meta.context_length, seed),
            Protocol::Ood => ood_test(&tasks, pool.as_ref().unwrap(), &policy, cfg.ood_samples, seed),
            Protocol::Random => random_context_test(&tasks, &policy, seed),
        })
        .collect()
}

pub fn cmd_eval(cfg: &ExperimentConfig, protocol: Protocol) -> Result<PathBuf> {
    let reports = evaluate(cfg, protocol)?;
    let mut w = begin(cfg, &format!("eval-{}", protocol.name()))?;
    for r in &reports {
        w.write(&format!("reports/{}-seed{}.txt", protocol.name(), r.seed), r.to_text().as_bytes())?;
    }
    let (mean, std) = aggregate(&reports);
    let seeds: Vec<String> = reports.iter().map(|r| r.seed.to_string()).collect();
    let line = format!("protocol {} seeds {} mean {mean:?} std {std:?}\n", protocol.name(), seeds.join(","));
    w.write(&format!("reports/{}-aggregate.txt", protocol.name()), line.as_bytes())?;
    w.finish(&format!("eval-{}", protocol.name()))
}

fn oracle_text(r: &OracleResult) -> String {
    let verdict = if r.holds(1e-9) { "holds" } else { "violated" };
    format!(
        "exact_mi {:?}\ninfonce_bound {:?}\nlog_tasks {:?}\nbound {verdict}\n",
        r.exact_mi,
        r.infonce_bound,
        (r.n_tasks as f64).ln()
    )
}

/// Evaluates a tabulation file, or a random 4-task tabulation drawn from the
/// seed when no file is given. Returns the printed summary.
pub fn cmd_oracle(cfg: &ExperimentConfig, tabulation: Option<&Path>) -> Result<String> {
    let mut w = begin(cfg, "oracle")?;
    let tab = match tabulation {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Tabulation::parse(&text)?
        }
        None => {
            let t = Tabulation::random(4, 2, 3, 3, &mut stream(cfg.seed, TASK_STREAM))?;
            w.write("oracle/tabulation.txt", t.to_text().as_bytes())?;
            t
        }
    };
    let text = oracle_text(&mi_oracle(&tab));
    w.write("oracle/result.txt", text.as_bytes())?;
    w.finish("oracle")?;
    Ok(text)
}

fn parse_aggregate(text: &str) -> Option<(String, String, f64, f64)> {
    match text.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["protocol", p, "seeds", s, "mean", m, "std", d] => Some((p.to_string(), s.to_string(), m.parse().ok()?, d.parse().ok()?)),
        _ => None,
    }
}

/// Summarizes the evaluation aggregates present in the output directory and,
/// when a trained encoder is available, exports the embedding table.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let mut summary = format!("family {} mode {} seed {}\n", cfg.family, cfg.mode, cfg.seed);
    let mut found = 0;
    for p in Protocol::names() {
        let path = cfg.out_dir.join(format!("reports/{p}-aggregate.txt"));
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let (protocol, seeds, mean, std) =
            parse_aggregate(&text).ok_or_else(|| Error::Format(format!("{}: malformed aggregate", path.display())))?;
        let _ = writeln!(summary, "{protocol:<8} seeds {seeds:<12} mean {mean:>10.4} std {std:>8.4}");
        found += 1;
    }
    if found == 0 {
        return Err(Error::Missing("evaluation reports (run `eval` first)".into()));
    }
    let mut w = begin(cfg, "report")?;
    if cfg.out_dir.join(POLICY_FILE).exists() {
        let policy = load_policy(cfg)?;
        let data = load_test_data(cfg)?;
        let table = embedding_table(&policy, &data, cfg)?;
        w.write("embeddings.txt", table.0.as_bytes())?;
        if let Some(rho) = table.1 {
            let _ = writeln!(summary, "spearman(first coordinate, task param 0) {rho:.4}");
        }
    }
    w.write("summary.txt", summary.as_bytes())?;
    w.finish("report")?;
    Ok(summary)
}

/// Embedding table text and the rank correlation between the first principal
/// coordinate of per-task means and the first task parameter.
pub fn embedding_table(policy: &MetaPolicy, data: &[OfflineDataset], cfg: &ExperimentConfig) -> Result<(String, Option<f64>)> {
    embedding_table_with(&policy.encoder, &policy.params.encoder.theta1, data, cfg)
}

pub fn embedding_table_with(
    encoder: &TaskEncoder,
    theta1: &ParamVector,
    data: &[OfflineDataset],
    cfg: &ExperimentConfig,
) -> Result<(String, Option<f64>)> {
    let mut rng = stream(cfg.seed, EMBEDDING_STREAM);
    let table = export_embeddings(encoder, theta1, data, cfg.embedding_samples, &mut rng)?;
    let means = table.task_means();
    let first: Vec<f64> = means.iter().map(|(_, c)| c[0]).collect();
    let param: Vec<f64> = means.iter().map(|(p, _)| p[0]).collect();
    Ok((table.to_text(), spearman(&first, &param).ok()))
}
