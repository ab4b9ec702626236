use std::sync::Arc;

use rand::Rng;

use super::params::{Layout, ParamVector};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputTransform {
    Identity,
    TanhSquash,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub output_transform: OutputTransform,
    pub output_bias: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_widths: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_widths: hidden_widths.to_vec(),
            activation: Activation::Tanh,
            output_transform: OutputTransform::Identity,
            output_bias: true,
        }
    }

    pub fn without_output_bias(mut self) -> Self {
        self.output_bias = false;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_output(mut self, transform: OutputTransform) -> Self {
        self.output_transform = transform;
        self
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_widths);
        w.push(self.output_dim);
        w
    }

    pub fn layout(&self) -> Result<Layout> {
        let w = self.widths();
        if w.contains(&0) {
            return Err(Error::Layout(format!("zero width in {w:?}")));
        }
        let last = w.len() - 2;
        let mut entries = Vec::new();
        for (l, pair) in w.windows(2).enumerate() {
            entries.push((format!("layer{l}.weight"), vec![pair[1], pair[0]]));
            if l < last || self.output_bias {
                entries.push((format!("layer{l}.bias"), vec![pair[1]]));
            }
        }
        Layout::new(entries)
    }

    /// Recovers widths and the output-bias flag from a layout produced by
    /// [`MlpSpec::layout`]. Activation and output transform are not stored in
    /// a layout and come back as the defaults.
    pub fn from_layout(layout: &Layout) -> Result<Self> {
        let mut widths = Vec::new();
        let mut l = 0;
        let mut output_bias = true;
        while let Some(w) = layout.entry(&format!("layer{l}.weight")) {
            if w.shape.len() != 2 || (l > 0 && widths.last() != Some(&w.shape[1])) {
                return Err(Error::Layout(format!("layer{l}.weight has shape {:?}", w.shape)));
            }
            if l == 0 {
                widths.push(w.shape[1]);
            }
            widths.push(w.shape[0]);
            output_bias = layout.entry(&format!("layer{l}.bias")).is_some();
            l += 1;
        }
        if widths.len() < 2 {
            return Err(Error::Layout("no dense layers".into()));
        }
        let n = widths.len();
        let spec = Self::new(widths[0], &widths[1..n - 1], widths[n - 1]);
        let spec = if output_bias { spec } else { spec.without_output_bias() };
        if spec.layout()? != *layout {
            return Err(Error::Layout("layout is not a dense network".into()));
        }
        Ok(spec)
    }

    pub fn param_count(&self) -> usize {
        let biases = if self.output_bias { 0 } else { self.output_dim };
        self.widths().windows(2).map(|p| p[1] * (p[0] + 1)).sum::<usize>() - biases
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: Option<usize>,
    fan_in: usize,
    fan_out: usize,
}

/// An [`MlpSpec`] with resolved parameter offsets.
///
/// The batched methods take row-major buffers and panic on shape misuse;
/// [`mlp_forward`] and [`loss_gradients`] are the checked entry points.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layout: Arc<Layout>,
    layers: Vec<Dense>,
}

/// Per-layer activations kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub rows: usize,
    // acts[0] is the input, acts[l] the post-activation input of layer l,
    // acts[last] the pre-transform output.
    acts: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        let layout = Arc::new(spec.layout()?);
        let w = spec.widths();
        let layers = w
            .windows(2)
            .enumerate()
            .map(|(l, p)| Dense {
                w: layout.entry(&format!("layer{l}.weight")).unwrap().offset,
                b: layout.entry(&format!("layer{l}.bias")).map(|e| e.offset),
                fan_in: p[0],
                fan_out: p[1],
            })
            .collect();
        Ok(Self {
            spec,
            layout,
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        ParamVector::glorot(self.layout.clone(), rng)
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(self.layout.clone())
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout().as_ref() != self.layout.as_ref() {
            return Err(Error::DimensionMismatch {
                context: "mlp parameters",
                expected: self.layout.total_len(),
                actual: params.len(),
            });
        }
        Ok(())
    }

    pub fn forward_batch(&self, params: &[f64], inputs: &[f64], rows: usize) -> ForwardCache {
        assert_eq!(params.len(), self.layout.total_len(), "parameter length");
        assert_eq!(inputs.len(), rows * self.spec.input_dim, "input length");
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let x = &acts[l];
            let mut y = vec![0.0; rows * layer.fan_out];
            let w = &params[layer.w..layer.w + layer.fan_in * layer.fan_out];
            let zeros;
            let b = match layer.b {
                Some(b) => &params[b..b + layer.fan_out],
                None => {
                    zeros = vec![0.0; layer.fan_out];
                    &zeros[..]
                }
            };
            for r in 0..rows {
                let xr = &x[r * layer.fan_in..(r + 1) * layer.fan_in];
                let yr = &mut y[r * layer.fan_out..(r + 1) * layer.fan_out];
                for (o, out) in yr.iter_mut().enumerate() {
                    let wr = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    *out = b[o] + dot(wr, xr);
                }
            }
            if l < last {
                match self.spec.activation {
                    Activation::Tanh => y.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => y.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
            acts.push(y);
        }
        let mut output = acts.last().unwrap().clone();
        match self.spec.output_transform {
            OutputTransform::Identity => {}
            OutputTransform::TanhSquash => output.iter_mut().for_each(|v| *v = v.tanh()),
            OutputTransform::Softmax => {
                for row in output.chunks_mut(self.spec.output_dim) {
                    softmax_in_place(row);
                }
            }
        }
        ForwardCache { rows, acts, output }
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        self.forward_batch(params, input, 1).output
    }

    /// Accumulates `d loss / d params` into `grad_params` given
    /// `d loss / d output`, and optionally writes `d loss / d input`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        grad_output: &[f64],
        grad_params: &mut [f64],
        grad_input: Option<&mut [f64]>,
    ) {
        let rows = cache.rows;
        assert_eq!(grad_output.len(), rows * self.spec.output_dim, "output grad length");
        assert_eq!(grad_params.len(), params.len(), "parameter grad length");
        let mut g = grad_output.to_vec();
        match self.spec.output_transform {
            OutputTransform::Identity => {}
            OutputTransform::TanhSquash => {
                for (gi, y) in g.iter_mut().zip(&cache.output) {
                    *gi *= 1.0 - y * y;
                }
            }
            OutputTransform::Softmax => {
                let d = self.spec.output_dim;
                for (gr, yr) in g.chunks_mut(d).zip(cache.output.chunks(d)) {
                    let s = dot(gr, yr);
                    for (gi, y) in gr.iter_mut().zip(yr) {
                        *gi = y * (*gi - s);
                    }
                }
            }
        }
        let want_input = grad_input.is_some();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.acts[l];
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            {
                let gw = &mut grad_params[layer.w..layer.w + fi * fo];
                for r in 0..rows {
                    let xr = &x[r * fi..(r + 1) * fi];
                    let gr = &g[r * fo..(r + 1) * fo];
                    for (o, &go) in gr.iter().enumerate() {
                        if go != 0.0 {
                            axpy(go, xr, &mut gw[o * fi..(o + 1) * fi]);
                        }
                    }
                }
                if let Some(b) = layer.b {
                    let gb = &mut grad_params[b..b + fo];
                    for gr in g.chunks(fo) {
                        for (acc, go) in gb.iter_mut().zip(gr) {
                            *acc += go;
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let w = &params[layer.w..layer.w + fi * fo];
            let mut gx = vec![0.0; rows * fi];
            for r in 0..rows {
                let gr = &g[r * fo..(r + 1) * fo];
                let gxr = &mut gx[r * fi..(r + 1) * fi];
                for (o, &go) in gr.iter().enumerate() {
                    if go != 0.0 {
                        axpy(go, &w[o * fi..(o + 1) * fi], gxr);
                    }
                }
            }
            if l > 0 {
                match self.spec.activation {
                    Activation::Tanh => {
                        for (gi, a) in gx.iter_mut().zip(x) {
                            *gi *= 1.0 - a * a;
                        }
                    }
                    Activation::Relu => {
                        for (gi, a) in gx.iter_mut().zip(x) {
                            if *a <= 0.0 {
                                *gi = 0.0;
                            }
                        }
                    }
                }
            }
            g = gx;
        }
        if let Some(out) = grad_input {
            assert_eq!(out.len(), g.len(), "input grad length");
            out.copy_from_slice(&g);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Checked single-input forward pass.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    let mlp = Mlp::new(spec.clone())?;
    mlp.check_params(params)?;
    if input.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "mlp input",
            expected: spec.input_dim,
            actual: input.len(),
        });
    }
    Ok(mlp.forward(params.values(), input))
}

/// Per-sample loss on network outputs. Writes `d loss / d output` into `grad`.
pub trait SampleLoss {
    fn eval(&self, index: usize, output: &[f64], grad: &mut [f64]) -> f64;
}

impl<F> SampleLoss for F
where
    F: Fn(usize, &[f64], &mut [f64]) -> f64,
{
    fn eval(&self, index: usize, output: &[f64], grad: &mut [f64]) -> f64 {
        self(index, output, grad)
    }
}

impl Mlp {
    /// Mean batch loss and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        params: &ParamVector,
        loss: &dyn SampleLoss,
        batch: &[Vec<f64>],
    ) -> Result<(f64, ParamVector)> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        let d_in = self.spec.input_dim;
        let d_out = self.spec.output_dim;
        let mut inputs = Vec::with_capacity(batch.len() * d_in);
        for x in batch {
            if x.len() != d_in {
                return Err(Error::DimensionMismatch {
                    context: "mlp input",
                    expected: d_in,
                    actual: x.len(),
                });
            }
            inputs.extend_from_slice(x);
        }
        let cache = self.forward_batch(params.values(), &inputs, batch.len());
        let scale = 1.0 / batch.len() as f64;
        let mut grad_out = vec![0.0; batch.len() * d_out];
        let mut total = 0.0;
        for (i, (out, g)) in cache
            .output
            .chunks(d_out)
            .zip(grad_out.chunks_mut(d_out))
            .enumerate()
        {
            total += loss.eval(i, out, g);
            g.iter_mut().for_each(|v| *v *= scale);
        }
        let value = total * scale;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                name: "loss".into(),
            });
        }
        let mut grads = vec![0.0; params.len()];
        self.backward(params.values(), &cache, &grad_out, &mut grads, None);
        let grads = params.with_values(grads)?;
        grads.check_finite()?;
        Ok((value, grads))
    }
}

/// Gradient of the mean batch loss, laid out like `params`.
pub fn loss_gradients(
    spec: &MlpSpec,
    params: &ParamVector,
    loss: &dyn SampleLoss,
    batch: &[Vec<f64>],
) -> Result<ParamVector> {
    Ok(Mlp::new(spec.clone())?.loss_and_gradients(params, loss, batch)?.1)
}
