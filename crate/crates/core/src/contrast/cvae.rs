//! Conditional VAE over `(r, s')` given `(s, a)`, trained on the union of the
//! offline datasets and used to generate counterfactual outcomes.

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::collect::{OfflineDataset, TransitionTuple};
use crate::numcore::{AdamState, Mlp, MlpSpec, ParamVector};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub training_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Std of the Gaussian likelihood of `(r, s')` around the generator output.
    pub likelihood_std: f64,
    /// Std of the noise added to generated rewards (and next states for
    /// transition-varying families). Zero disables it.
    pub generation_noise: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            hidden_widths: vec![64, 64],
            training_steps: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            likelihood_std: 0.1,
            generation_noise: 0.1,
        }
    }
}

/// Encoder `q(z | s, a, r, s')` (outputs mean then log-variance) and
/// generator `p(r, s' | s, a, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CvaeParams {
    pub omega: ParamVector,
    pub xi: ParamVector,
    pub latent_dim: usize,
    pub likelihood_std: f64,
}

/// Networks of a CVAE with fixed dimensions.
#[derive(Clone, Debug)]
pub struct Cvae {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    encoder: Mlp,
    generator: Mlp,
}

/// Per-batch loss split into its two terms (both batch means).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvaeLoss {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
}

pub struct CvaeGradients {
    pub loss: CvaeLoss,
    pub omega: Vec<f64>,
    pub xi: Vec<f64>,
}

impl Cvae {
    pub fn new(obs_dim: usize, action_dim: usize, latent_dim: usize, hidden: &[usize]) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Config("cvae latent dim must be positive".into()));
        }
        let x_dim = TransitionTuple::feature_dim(obs_dim, action_dim);
        Ok(Self {
            obs_dim,
            action_dim,
            latent_dim,
            encoder: Mlp::new(MlpSpec::new(x_dim, hidden, 2 * latent_dim))?,
            generator: Mlp::new(MlpSpec::new(obs_dim + action_dim + latent_dim, hidden, 1 + obs_dim))?,
        })
    }

    /// Rebuilds the networks from stored parameters.
    pub fn for_params(params: &CvaeParams) -> Result<Self> {
        let enc = MlpSpec::from_layout(params.omega.layout())?;
        let gen = MlpSpec::from_layout(params.xi.layout())?;
        let l = params.latent_dim;
        if enc.output_dim != 2 * l || gen.output_dim < 2 || gen.input_dim <= l || enc.hidden_widths != gen.hidden_widths {
            return Err(Error::Layout("cvae networks do not fit together".into()));
        }
        let obs = gen.output_dim - 1;
        let act = gen.input_dim - l - obs;
        let cvae = Self::new(obs, act, l, &enc.hidden_widths)?;
        if cvae.encoder.spec() != &enc {
            return Err(Error::Layout("cvae encoder input does not match generator".into()));
        }
        Ok(cvae)
    }

    pub fn init<R: Rng + ?Sized>(&self, likelihood_std: f64, rng: &mut R) -> CvaeParams {
        CvaeParams {
            omega: self.encoder.init(rng),
            xi: self.generator.init(rng),
            latent_dim: self.latent_dim,
            likelihood_std,
        }
    }

    fn check(&self, params: &CvaeParams, batch: &[TransitionTuple]) -> Result<()> {
        self.encoder.check_params(&params.omega)?;
        self.generator.check_params(&params.xi)?;
        if batch.is_empty() {
            return Err(Error::Empty("cvae batch"));
        }
        if !(params.likelihood_std > 0.0 && params.likelihood_std.is_finite()) {
            return Err(Error::Config("cvae likelihood std must be positive".into()));
        }
        for x in batch {
            if x.s.len() != self.obs_dim || x.a.len() != self.action_dim || x.s_next.len() != self.obs_dim {
                return Err(Error::DimensionMismatch {
                    context: "cvae tuple",
                    expected: self.encoder.input_dim(),
                    actual: TransitionTuple::feature_dim(x.s.len(), x.a.len()),
                });
            }
        }
        Ok(())
    }

    /// Loss and gradients for fixed reparameterization noise `eps`
    /// (`batch.len() * latent_dim` standard normals).
    pub fn loss_and_gradients(&self, params: &CvaeParams, batch: &[TransitionTuple], eps: &[f64]) -> Result<CvaeGradients> {
        self.check(params, batch)?;
        let (b, l, o) = (batch.len(), self.latent_dim, self.obs_dim);
        if eps.len() != b * l {
            return Err(Error::DimensionMismatch { context: "cvae noise", expected: b * l, actual: eps.len() });
        }
        let mut x = Vec::with_capacity(b * self.encoder.input_dim());
        for t in batch {
            t.write_features(&mut x);
        }
        let enc = self.encoder.forward_batch(params.omega.values(), &x, b);
        let mut z = vec![0.0; b * l];
        let mut gen_in = Vec::with_capacity(b * self.generator.input_dim());
        for (i, t) in batch.iter().enumerate() {
            let row = &enc.output[i * 2 * l..(i + 1) * 2 * l];
            for j in 0..l {
                z[i * l + j] = row[j] + (0.5 * row[l + j]).exp() * eps[i * l + j];
            }
            gen_in.extend_from_slice(&t.s);
            gen_in.extend_from_slice(&t.a);
            gen_in.extend_from_slice(&z[i * l..(i + 1) * l]);
        }
        let gen = self.generator.forward_batch(params.xi.values(), &gen_in, b);

        let d = 1 + o;
        let inv_b = 1.0 / b as f64;
        let inv_var = 1.0 / (params.likelihood_std * params.likelihood_std);
        let mut nll = 0.0;
        let mut kl = 0.0;
        let mut g_out = vec![0.0; b * d];
        for (i, t) in batch.iter().enumerate() {
            let pred = &gen.output[i * d..(i + 1) * d];
            let target = std::iter::once(t.r).chain(t.s_next.iter().copied());
            for (k, (p, y)) in pred.iter().zip(target).enumerate() {
                nll += 0.5 * (p - y) * (p - y) * inv_var;
                g_out[i * d + k] = (p - y) * inv_var * inv_b;
            }
            let row = &enc.output[i * 2 * l..(i + 1) * 2 * l];
            for j in 0..l {
                let (mu, lv) = (row[j], row[l + j]);
                kl += 0.5 * (lv.exp() + mu * mu - 1.0 - lv);
            }
        }
        nll = nll * inv_b + d as f64 * (params.likelihood_std.ln() + 0.5 * (2.0 * PI).ln());
        kl *= inv_b;
        let loss = CvaeLoss { loss: nll + kl, nll, kl };
        if !loss.loss.is_finite() {
            return Err(Error::NonFinite { name: "cvae loss".into() });
        }

        let mut g_xi = vec![0.0; params.xi.len()];
        let mut g_gen_in = vec![0.0; gen_in.len()];
        self.generator.backward(params.xi.values(), &gen, &g_out, &mut g_xi, Some(&mut g_gen_in));
        let gi_dim = self.generator.input_dim();
        let mut g_enc = vec![0.0; b * 2 * l];
        for i in 0..b {
            let row = &enc.output[i * 2 * l..(i + 1) * 2 * l];
            for j in 0..l {
                let gz = g_gen_in[i * gi_dim + o + self.action_dim + j];
                let (mu, lv) = (row[j], row[l + j]);
                let sd = (0.5 * lv).exp();
                g_enc[i * 2 * l + j] = gz + mu * inv_b;
                g_enc[i * 2 * l + l + j] = gz * eps[i * l + j] * 0.5 * sd + 0.5 * (lv.exp() - 1.0) * inv_b;
            }
        }
        let mut g_omega = vec![0.0; params.omega.len()];
        self.encoder.backward(params.omega.values(), &enc, &g_enc, &mut g_omega, None);
        if g_omega.iter().chain(&g_xi).any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { name: "cvae gradient".into() });
        }
        Ok(CvaeGradients { loss, omega: g_omega, xi: g_xi })
    }

    /// Single-sample estimate of the negative ELBO.
    pub fn loss<R: Rng + ?Sized>(&self, params: &CvaeParams, batch: &[TransitionTuple], rng: &mut R) -> Result<CvaeLoss> {
        let eps: Vec<f64> = (0..batch.len() * self.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(self.loss_and_gradients(params, batch, &eps)?.loss)
    }

    /// Generator mean at `(s, a, z)`: `[r, s']`.
    pub fn decode(&self, params: &CvaeParams, s: &[f64], a: &[f64], z: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.generator.input_dim());
        input.extend_from_slice(s);
        input.extend_from_slice(a);
        input.extend_from_slice(z);
        self.generator.forward(params.xi.values(), &input)
    }

    /// Draws `(r, s')` at `(s, a)` with `z` from the prior. `noise` is added
    /// to `r`, and to `s'` when `noisy_next_state` is set.
    pub fn generate(
        &self,
        params: &CvaeParams,
        s: &[f64],
        a: &[f64],
        noise: f64,
        noisy_next_state: bool,
        rng: &mut dyn RngCore,
    ) -> (f64, Vec<f64>) {
        let z: Vec<f64> = (0..self.latent_dim).map(|_| StandardNormal.sample(rng)).collect();
        let mut out = self.decode(params, s, a, &z);
        let mut jitter = |v: &mut f64| {
            if noise > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                *v += noise * e;
            }
        };
        jitter(&mut out[0]);
        if noisy_next_state {
            out[1..].iter_mut().for_each(&mut jitter);
        }
        let r = out[0];
        out.remove(0);
        (r, out)
    }
}

/// Mean negative ELBO of `batch` with one reparameterized sample per tuple.
pub fn cvae_loss(params: &CvaeParams, batch: &[TransitionTuple], rng: &mut dyn RngCore) -> Result<f64> {
    Ok(Cvae::for_params(params)?.loss(params, batch, rng)?.loss)
}

/// Fits a CVAE by Adam on minibatches drawn uniformly from the union of the
/// datasets. Returns the parameters and the per-step losses.
pub fn train_cvae<R: Rng + ?Sized>(
    datasets: &[OfflineDataset],
    cfg: &CvaeConfig,
    rng: &mut R,
) -> Result<(CvaeParams, Vec<f64>)> {
    let first = datasets.first().ok_or(Error::Empty("training datasets"))?;
    let (obs, act) = (first.obs_dim(), first.action_dim());
    if datasets.iter().any(|d| d.obs_dim() != obs || d.action_dim() != act) {
        return Err(Error::Config("datasets mix observation/action sizes".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.likelihood_std > 0.0) || !(cfg.generation_noise >= 0.0) {
        return Err(Error::Config("cvae batch size, learning rate and likelihood std must be positive".into()));
    }
    let cvae = Cvae::new(obs, act, cfg.latent_dim, &cfg.hidden_widths)?;
    let mut params = cvae.init(cfg.likelihood_std, rng);
    let mut opt_omega = AdamState::new(params.omega.len(), cfg.learning_rate);
    let mut opt_xi = AdamState::new(params.xi.len(), cfg.learning_rate);
    let union = UnionIndex::new(datasets);
    let mut losses = Vec::with_capacity(cfg.training_steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.training_steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(union.sample(datasets, rng).clone());
        }
        let eps: Vec<f64> = (0..cfg.batch_size * cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let g = cvae
            .loss_and_gradients(&params, &batch, &eps)
            .map_err(|e| Error::Diverged { step, what: format!("cvae: {e}") })?;
        opt_omega
            .update(params.omega.values_mut(), &g.omega)
            .and_then(|_| opt_xi.update(params.xi.values_mut(), &g.xi))
            .map_err(|e| Error::Diverged { step, what: format!("cvae: {e}") })?;
        losses.push(g.loss.loss);
    }
    Ok((params, losses))
}

/// Uniform sampling over the concatenation of several datasets.
pub(crate) struct UnionIndex {
    ends: Vec<usize>,
}

impl UnionIndex {
    pub(crate) fn new(datasets: &[OfflineDataset]) -> Self {
        let mut total = 0;
        let ends = datasets
            .iter()
            .map(|d| {
                total += d.len();
                total
            })
            .collect();
        Self { ends }
    }

    pub(crate) fn locate(&self, global: usize) -> (usize, usize) {
        let d = self.ends.partition_point(|&e| e <= global);
        let start = if d == 0 { 0 } else { self.ends[d - 1] };
        (d, global - start)
    }

    pub(crate) fn sample<'a, R: Rng + ?Sized>(&self, datasets: &'a [OfflineDataset], rng: &mut R) -> &'a TransitionTuple {
        let (d, i) = self.locate(rng.gen_range(0..*self.ends.last().unwrap()));
        &datasets[d].tuples[i]
    }
}
