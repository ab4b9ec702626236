//! Bi-level task encoder: a transition encoder over single tuples and a
//! softmax-attention aggregator over a context, plus the cosine score.

use rand::Rng;

use crate::collect::TransitionTuple;
use crate::numcore::{pairwise_sum, Activation, ForwardCache, Mlp, MlpSpec, ParamVector};
use crate::{Error, Result};

/// A context: ordered tuples from one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub tuples: Vec<TransitionTuple>,
}

impl Context {
    pub fn new(tuples: Vec<TransitionTuple>) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::Empty("context"));
        }
        Ok(Self { tuples })
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.tuples {
            t.write_features(&mut out);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRepresentation(pub Vec<f64>);

impl TaskRepresentation {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub transition_hidden: Vec<usize>,
    pub scorer_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 5,
            transition_hidden: vec![64, 64],
            scorer_hidden: vec![64],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub theta1: ParamVector,
    pub theta2: ParamVector,
}

#[derive(Clone, Debug)]
pub struct TaskEncoder {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub transition: Mlp,
    pub scorer: Mlp,
}

/// Forward state of one aggregation, kept for the reverse pass.
pub struct Aggregation {
    pub z: Vec<f64>,
    pub weights: Vec<f64>,
    scorer_cache: ForwardCache,
}

impl TaskEncoder {
    pub fn new(obs_dim: usize, action_dim: usize, cfg: &EncoderConfig) -> Result<Self> {
        let input = TransitionTuple::feature_dim(obs_dim, action_dim);
        Ok(Self {
            obs_dim,
            action_dim,
            latent_dim: cfg.latent_dim,
            transition: Mlp::new(
                MlpSpec::new(input, &cfg.transition_hidden, cfg.latent_dim).with_activation(cfg.activation),
            )?,
            // softmax ignores a shared offset, so the scorer carries no output bias
            scorer: Mlp::new(
                MlpSpec::new(cfg.latent_dim, &cfg.scorer_hidden, 1)
                    .with_activation(cfg.activation)
                    .without_output_bias(),
            )?,
        })
    }

    /// Rebuilds a tanh encoder whose shapes match stored parameters.
    pub fn for_params(obs_dim: usize, action_dim: usize, params: &EncoderParams) -> Result<Self> {
        let t = MlpSpec::from_layout(params.theta1.layout())?;
        let s = MlpSpec::from_layout(params.theta2.layout())?;
        let cfg = EncoderConfig {
            latent_dim: t.output_dim,
            transition_hidden: t.hidden_widths,
            scorer_hidden: s.hidden_widths,
            activation: Activation::Tanh,
        };
        let enc = Self::new(obs_dim, action_dim, &cfg)?;
        enc.check_params(params)?;
        Ok(enc)
    }

    pub fn feature_dim(&self) -> usize {
        self.transition.input_dim()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> EncoderParams {
        EncoderParams {
            theta1: self.transition.init(rng),
            theta2: self.scorer.init(rng),
        }
    }

    pub fn check_params(&self, params: &EncoderParams) -> Result<()> {
        self.transition.check_params(&params.theta1)?;
        self.scorer.check_params(&params.theta2)
    }

    fn check_tuple(&self, x: &TransitionTuple) -> Result<()> {
        let got = TransitionTuple::feature_dim(x.s.len(), x.a.len());
        if x.s.len() != self.obs_dim || x.s_next.len() != self.obs_dim || x.a.len() != self.action_dim {
            return Err(Error::DimensionMismatch {
                context: "transition tuple",
                expected: self.feature_dim(),
                actual: got,
            });
        }
        Ok(())
    }

    /// Latents for `rows` stacked feature vectors.
    pub fn encode_features(&self, theta1: &ParamVector, features: &[f64], rows: usize) -> ForwardCache {
        self.transition.forward_batch(theta1.values(), features, rows)
    }

    pub fn encode_transition(&self, theta1: &ParamVector, x: &TransitionTuple) -> Result<TaskRepresentation> {
        self.transition.check_params(theta1)?;
        self.check_tuple(x)?;
        Ok(TaskRepresentation(self.transition.forward(theta1.values(), &x.features())))
    }

    /// `z = sum_j softmax(score(z_i))_j z_j` over `k` stacked latents. The
    /// reductions use a pairwise tree whose shape depends only on `k`.
    pub fn aggregate_forward(&self, theta2: &ParamVector, latents: &[f64], k: usize) -> Aggregation {
        let d = self.latent_dim;
        assert_eq!(latents.len(), k * d, "latent block length");
        let scorer_cache = self.scorer.forward_batch(theta2.values(), latents, k);
        let logits = &scorer_cache.output;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let norm = pairwise_sum(&e);
        let weights: Vec<f64> = e.iter().map(|v| v / norm).collect();
        let mut column = vec![0.0; k];
        let z = (0..d)
            .map(|c| {
                for (i, slot) in column.iter_mut().enumerate() {
                    *slot = weights[i] * latents[i * d + c];
                }
                pairwise_sum(&column)
            })
            .collect();
        Aggregation {
            z,
            weights,
            scorer_cache,
        }
    }

    /// Accumulates `d loss / d theta2` and optionally `d loss / d latents`.
    pub fn aggregate_backward(
        &self,
        theta2: &ParamVector,
        agg: &Aggregation,
        latents: &[f64],
        grad_z: &[f64],
        grad_theta2: &mut [f64],
        grad_latents: Option<&mut [f64]>,
    ) {
        let d = self.latent_dim;
        let k = agg.weights.len();
        let dw: Vec<f64> = (0..k)
            .map(|i| crate::numcore::mlp_dot(grad_z, &latents[i * d..(i + 1) * d]))
            .collect();
        let mean_dw: f64 = agg.weights.iter().zip(&dw).map(|(w, g)| w * g).sum();
        let dlogits: Vec<f64> = agg
            .weights
            .iter()
            .zip(&dw)
            .map(|(w, g)| w * (g - mean_dw))
            .collect();
        match grad_latents {
            Some(out) => {
                let mut via_scorer = vec![0.0; k * d];
                self.scorer
                    .backward(theta2.values(), &agg.scorer_cache, &dlogits, grad_theta2, Some(&mut via_scorer));
                for i in 0..k {
                    for c in 0..d {
                        out[i * d + c] += via_scorer[i * d + c] + agg.weights[i] * grad_z[c];
                    }
                }
            }
            None => self
                .scorer
                .backward(theta2.values(), &agg.scorer_cache, &dlogits, grad_theta2, None),
        }
    }

    pub fn aggregate(&self, theta2: &ParamVector, latents: &[TaskRepresentation]) -> Result<TaskRepresentation> {
        self.scorer.check_params(theta2)?;
        if latents.is_empty() {
            return Err(Error::Empty("latent set"));
        }
        let mut flat = Vec::with_capacity(latents.len() * self.latent_dim);
        for z in latents {
            if z.dim() != self.latent_dim {
                return Err(Error::DimensionMismatch {
                    context: "latent",
                    expected: self.latent_dim,
                    actual: z.dim(),
                });
            }
            flat.extend_from_slice(&z.0);
        }
        Ok(TaskRepresentation(self.aggregate_forward(theta2, &flat, latents.len()).z))
    }

    pub fn encode_context(&self, params: &EncoderParams, c: &Context) -> Result<TaskRepresentation> {
        self.check_params(params)?;
        if c.is_empty() {
            return Err(Error::Empty("context"));
        }
        for x in &c.tuples {
            self.check_tuple(x)?;
        }
        let latents = self.encode_features(&params.theta1, &c.features(), c.len()).output;
        Ok(TaskRepresentation(self.aggregate_forward(&params.theta2, &latents, c.len()).z))
    }
}

/// Cosine similarity divided by `temperature`.
pub fn score(z: &[f64], z2: &[f64], temperature: f64) -> Result<f64> {
    Ok(score_with_grad(z, z2, temperature)?.0)
}

/// Score plus its gradients with respect to both arguments.
pub fn score_with_grad(a: &[f64], b: &[f64], temperature: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "score",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateRepresentation);
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| (y / (na * nb) - cos * x / (na * na)) / temperature)
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x / (na * nb) - cos * y / (nb * nb)) / temperature)
        .collect();
    Ok((cos / temperature, ga, gb))
}
