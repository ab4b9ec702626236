//! Exact enumeration of the contrastive mutual-information bound on finite
//! task/tuple/symbol spaces.
//!
//! A tuple is identified by a state-action key `sa` and an outcome index
//! (standing for the `(r, s')` part). Tasks share the `sa` space, so a
//! counterfactual outcome under another task is well defined.
//!
//! Text format, one probability entry per line, `#` starts a comment:
//!
//! ```text
//! task   <m> <P(M = m)>
//! tuple  <m> <sa> <outcome> <P(x = (sa, outcome) | M = m)>
//! encode <sa> <outcome> <symbol> <P(z = symbol | x = (sa, outcome))>
//! ```
//!
//! Entries that are not listed are zero.

use std::fmt::Write as _;

use rand::RngCore;
use rand_distr::{Dirichlet, Distribution};

use crate::{Error, Result};

const NORM_TOL: f64 = 1e-9;

/// Fully tabulated discrete instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Tabulation {
    task_probs: Vec<f64>,
    // [task][sa][outcome]
    tuple_probs: Vec<Vec<Vec<f64>>>,
    // [sa][outcome][symbol]
    encoder: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleResult {
    pub exact_mi: f64,
    pub infonce_bound: f64,
    pub n_tasks: usize,
}

impl OracleResult {
    /// `I(z; M) - log N >= bound - tol`.
    pub fn holds(&self, tol: f64) -> bool {
        self.exact_mi - (self.n_tasks as f64).ln() >= self.infonce_bound - tol
    }
}

fn check_distribution(what: impl FnOnce() -> String, probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::NotNormalized(format!("{}: negative or non-finite entry", what())));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > NORM_TOL {
        return Err(Error::NotNormalized(format!("{} sums to {total}", what())));
    }
    Ok(())
}

impl Tabulation {
    pub fn new(task_probs: Vec<f64>, tuple_probs: Vec<Vec<Vec<f64>>>, encoder: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if task_probs.is_empty() {
            return Err(Error::Empty("task table"));
        }
        if tuple_probs.len() != task_probs.len() {
            return Err(Error::Format(format!(
                "{} task probabilities but {} tuple tables",
                task_probs.len(),
                tuple_probs.len()
            )));
        }
        let n_sa = encoder.len();
        let n_out = encoder.first().map_or(0, Vec::len);
        let n_sym = encoder.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if n_sa == 0 || n_out == 0 || n_sym == 0 {
            return Err(Error::Empty("encoder table"));
        }
        let rect = encoder.iter().all(|r| r.len() == n_out && r.iter().all(|p| p.len() == n_sym))
            && tuple_probs.iter().all(|t| t.len() == n_sa && t.iter().all(|r| r.len() == n_out));
        if !rect {
            return Err(Error::Format("ragged probability tables".into()));
        }
        check_distribution(|| "task probabilities".into(), &task_probs)?;
        for (m, table) in tuple_probs.iter().enumerate() {
            let flat: Vec<f64> = table.iter().flatten().copied().collect();
            check_distribution(|| format!("tuple distribution of task {m}"), &flat)?;
        }
        for (sa, row) in encoder.iter().enumerate() {
            for (o, probs) in row.iter().enumerate() {
                let reachable = tuple_probs.iter().any(|t| t[sa][o] > 0.0);
                if reachable || probs.iter().any(|p| *p != 0.0) {
                    check_distribution(|| format!("encoder row for tuple ({sa}, {o})"), probs)?;
                }
            }
        }
        let tab = Self { task_probs, tuple_probs, encoder };
        for m in 0..tab.n_tasks() {
            for sa in 0..n_sa {
                if tab.task_probs[m] > 0.0 && tab.sa_prob(m, sa) > 0.0 {
                    if let Some(other) = (0..tab.n_tasks()).find(|&j| j != m && tab.sa_prob(j, sa) == 0.0) {
                        return Err(Error::Format(format!(
                            "state-action {sa} is reachable under task {m} but not under task {other}"
                        )));
                    }
                }
            }
        }
        Ok(tab)
    }

    pub fn n_tasks(&self) -> usize {
        self.task_probs.len()
    }

    pub fn n_state_actions(&self) -> usize {
        self.encoder.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.encoder[0].len()
    }

    pub fn n_symbols(&self) -> usize {
        self.encoder[0][0].len()
    }

    fn sa_prob(&self, task: usize, sa: usize) -> f64 {
        self.tuple_probs[task][sa].iter().sum()
    }

    /// Random instance: uniform task prior, a state-action marginal shared by
    /// all tasks, per-task outcome distributions and a stochastic encoder.
    pub fn random(n_tasks: usize, n_sa: usize, n_outcomes: usize, n_symbols: usize, rng: &mut dyn RngCore) -> Result<Self> {
        let draw = |k: usize, conc: f64, rng: &mut dyn RngCore| -> Result<Vec<f64>> {
            if k == 1 {
                return Ok(vec![1.0]);
            }
            let d = Dirichlet::new_with_size(conc, k).map_err(|e| Error::Config(e.to_string()))?;
            let mut p = d.sample(rng);
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            Ok(p)
        };
        let sa = draw(n_sa, 1.0, rng)?;
        let mut tuple_probs = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let mut t = Vec::with_capacity(n_sa);
            for p_sa in &sa {
                t.push(draw(n_outcomes, 1.0, rng)?.into_iter().map(|p| p * p_sa).collect());
            }
            tuple_probs.push(t);
        }
        let mut encoder = Vec::with_capacity(n_sa);
        for _ in 0..n_sa {
            let mut row = Vec::with_capacity(n_outcomes);
            for _ in 0..n_outcomes {
                row.push(draw(n_symbols, 0.5, rng)?);
            }
            encoder.push(row);
        }
        let task_probs = vec![1.0 / n_tasks as f64; n_tasks];
        Self::new(task_probs, tuple_probs, encoder)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tasks: Vec<(usize, f64)> = Vec::new();
        let mut tuples: Vec<(usize, usize, usize, f64)> = Vec::new();
        let mut enc: Vec<(usize, usize, usize, f64)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let idx = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad index {s:?}")));
            let prob = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad probability {s:?}")));
            match (fields[0], fields.len()) {
                ("task", 3) => tasks.push((idx(fields[1])?, prob(fields[2])?)),
                ("tuple", 5) => tuples.push((idx(fields[1])?, idx(fields[2])?, idx(fields[3])?, prob(fields[4])?)),
                ("encode", 5) => enc.push((idx(fields[1])?, idx(fields[2])?, idx(fields[3])?, prob(fields[4])?)),
                ("task" | "tuple" | "encode", n) => return Err(err(format!("{} expects more fields, got {n}", fields[0]))),
                (other, _) => return Err(err(format!("unknown record {other:?}"))),
            }
        }
        let n_tasks = tasks.iter().map(|t| t.0 + 1).max().unwrap_or(0);
        let n_sa = tuples.iter().map(|t| t.1 + 1).chain(enc.iter().map(|e| e.0 + 1)).max().unwrap_or(0);
        let n_out = tuples.iter().map(|t| t.2 + 1).chain(enc.iter().map(|e| e.1 + 1)).max().unwrap_or(0);
        let n_sym = enc.iter().map(|e| e.2 + 1).max().unwrap_or(0);
        if tuples.iter().any(|t| t.0 >= n_tasks) {
            return Err(Error::Format("tuple entry for a task without a probability".into()));
        }
        let mut task_probs = vec![0.0; n_tasks];
        for (m, p) in tasks {
            task_probs[m] += p;
        }
        let mut tuple_probs = vec![vec![vec![0.0; n_out]; n_sa]; n_tasks];
        for (m, sa, o, p) in tuples {
            tuple_probs[m][sa][o] += p;
        }
        let mut encoder = vec![vec![vec![0.0; n_sym]; n_out]; n_sa];
        for (sa, o, k, p) in enc {
            encoder[sa][o][k] += p;
        }
        Self::new(task_probs, tuple_probs, encoder)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# task <m> <p>; tuple <m> <sa> <outcome> <p>; encode <sa> <outcome> <symbol> <p>\n");
        for (m, p) in self.task_probs.iter().enumerate() {
            let _ = writeln!(out, "task {m} {p:e}");
        }
        for (m, t) in self.tuple_probs.iter().enumerate() {
            for (sa, row) in t.iter().enumerate() {
                for (o, p) in row.iter().enumerate() {
                    if *p != 0.0 {
                        let _ = writeln!(out, "tuple {m} {sa} {o} {p:e}");
                    }
                }
            }
        }
        for (sa, row) in self.encoder.iter().enumerate() {
            for (o, probs) in row.iter().enumerate() {
                for (k, p) in probs.iter().enumerate() {
                    if *p != 0.0 {
                        let _ = writeln!(out, "encode {sa} {o} {k} {p:e}");
                    }
                }
            }
        }
        out
    }
}

/// Exact `I(z; M)` and the exact right-hand side of the InfoNCE bound,
/// `E log( h(x,z) / (h(x,z) + sum_{M* != M} h(x*, z)) )` with
/// `h = P(z|x) / P(z)`, `z ~ P(z|M)`, `x ~ P(x|M)` and each `x*` drawn from
/// `M*` at the state-action of `x`.
pub fn mi_oracle(tab: &Tabulation) -> OracleResult {
    let n = tab.n_tasks();
    let (n_sa, n_out, n_sym) = (tab.n_state_actions(), tab.n_outcomes(), tab.n_symbols());
    let mut p_z_given_m = vec![vec![0.0; n_sym]; n];
    for (m, row) in p_z_given_m.iter_mut().enumerate() {
        for sa in 0..n_sa {
            for o in 0..n_out {
                let px = tab.tuple_probs[m][sa][o];
                for (k, acc) in row.iter_mut().enumerate() {
                    *acc += px * tab.encoder[sa][o][k];
                }
            }
        }
    }
    let p_z: Vec<f64> = (0..n_sym).map(|k| (0..n).map(|m| tab.task_probs[m] * p_z_given_m[m][k]).sum()).collect();

    let mut exact_mi = 0.0;
    for m in 0..n {
        for k in 0..n_sym {
            let p = p_z_given_m[m][k];
            if p > 0.0 && tab.task_probs[m] > 0.0 {
                exact_mi += tab.task_probs[m] * p * (p / p_z[k]).ln();
            }
        }
    }

    let h = |sa: usize, o: usize, k: usize| if p_z[k] > 0.0 { tab.encoder[sa][o][k] / p_z[k] } else { 0.0 };
    let mut bound = 0.0;
    for m in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != m).collect();
        for sa in 0..n_sa {
            // conditional outcome laws of the other tasks at this state-action
            let cond: Vec<Vec<f64>> = others
                .iter()
                .map(|&j| {
                    let total = tab.sa_prob(j, sa);
                    tab.tuple_probs[j][sa].iter().map(|p| if total > 0.0 { p / total } else { 0.0 }).collect()
                })
                .collect();
            for o in 0..n_out {
                for k in 0..n_sym {
                    let w = tab.task_probs[m] * tab.tuple_probs[m][sa][o] * p_z_given_m[m][k];
                    if w == 0.0 {
                        continue;
                    }
                    let h0 = h(sa, o, k);
                    if h0 == 0.0 {
                        bound = f64::NEG_INFINITY;
                        continue;
                    }
                    bound += w * expected_log_ratio(h0, &cond, &|o2| h(sa, o2, k), 0, 1.0, 0.0);
                }
            }
        }
    }
    OracleResult { exact_mi, infonce_bound: bound, n_tasks: n }
}

// E over independent outcomes of the remaining tasks of log(h0 / (h0 + sum h)).
fn expected_log_ratio(h0: f64, cond: &[Vec<f64>], h: &dyn Fn(usize) -> f64, depth: usize, prob: f64, acc: f64) -> f64 {
    if depth == cond.len() {
        return prob * (h0 / (h0 + acc)).ln();
    }
    let mut total = 0.0;
    for (o, p) in cond[depth].iter().enumerate() {
        if *p > 0.0 {
            total += expected_log_ratio(h0, cond, h, depth + 1, prob * p, acc + h(o));
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bijective() -> Tabulation {
        // one state-action, task m always yields outcome m, encoder is the identity
        let tuples = (0..4)
            .map(|m| vec![(0..4).map(|o| if o == m { 1.0 } else { 0.0 }).collect()])
            .collect();
        let enc = vec![(0..4).map(|o| (0..4).map(|k| if k == o { 1.0 } else { 0.0 }).collect()).collect()];
        Tabulation::new(vec![0.25; 4], tuples, enc).unwrap()
    }

    #[test]
    fn bijective_code_has_log_n_information() {
        let r = mi_oracle(&bijective());
        assert!((r.exact_mi - 4f64.ln()).abs() < 1e-12);
        assert!((r.exact_mi - 1.38629).abs() < 1e-5);
        assert!(r.infonce_bound.abs() < 1e-12);
        assert!(r.holds(1e-9));
    }

    #[test]
    fn constant_encoder_has_no_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tabulation::random(4, 2, 3, 1, &mut rng).unwrap();
        let r = mi_oracle(&t);
        assert!(r.exact_mi.abs() < 1e-12);
        // every h is 1, so each term is log(1 / N)
        assert!((r.infonce_bound + 4f64.ln()).abs() < 1e-12);
        assert!(r.holds(1e-9));
    }

    #[test]
    fn random_instances_satisfy_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t = Tabulation::random(4, 2, 3, 3, &mut rng).unwrap();
            let r = mi_oracle(&t);
            assert!(r.holds(1e-9), "{r:?}");
            assert!(r.exact_mi >= -1e-12 && r.exact_mi <= 4f64.ln() + 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tabulation::random(3, 2, 2, 4, &mut rng).unwrap();
        let back = Tabulation::parse(&t.to_text()).unwrap();
        let (a, b) = (mi_oracle(&t), mi_oracle(&back));
        assert!((a.exact_mi - b.exact_mi).abs() < 1e-12);
        assert!((a.infonce_bound - b.infonce_bound).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_and_malformed() {
        let text = "task 0 0.5\ntask 1 0.4\ntuple 0 0 0 1\ntuple 1 0 0 1\nencode 0 0 0 1\n";
        assert!(matches!(Tabulation::parse(text), Err(Error::NotNormalized(_))));
        let text = "task 0 1\ntuple 0 0 0 1\nencode 0 0 0 0.7\n";
        assert!(matches!(Tabulation::parse(text), Err(Error::NotNormalized(_))));
        assert!(matches!(Tabulation::parse("task 0 x\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(Tabulation::parse("# c\nbogus 1 2\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn rejects_unshared_state_actions() {
        let text = "task 0 0.5\ntask 1 0.5\ntuple 0 0 0 1\ntuple 1 1 0 1\nencode 0 0 0 1\nencode 1 0 0 1\n";
        assert!(matches!(Tabulation::parse(text), Err(Error::Format(_))));
    }
}
