//! Fully connected ε-prediction network with hand-written backpropagation.
//!
//! input = [x_t | sinusoidal(t) | silu(W_cond·y + b_cond)]
//! h_1 = silu(W_0·input + b_0), h_{i+1} = silu(W_i·h_i + b_i), ε̂ = W_last·h_L + b_last
//!
//! Layer ids: 0 is the condition projection, 1..=L are the hidden layers
//! `w0..w{L-1}`, and L+1 is the output layer `last`. Any of them may carry a
//! LoRA delta. The network is generic over the float type so gradient
//! checks can run in f64 while training runs in f32.

use std::fmt::Debug;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lora::{LoraAdapter, LoraLayer};
use crate::error::{Result, TifError};
use crate::rng::{fill_normal_f64, rng_for, stream};

pub trait Scalar:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static
{
}

pub(crate) fn cast<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId(pub u16);

impl LayerId {
    pub const COND: LayerId = LayerId(0);
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub image_len: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            image_len: 256,
            time_dim: 32,
            cond_dim: 16,
            hidden: vec![512, 512],
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_len == 0 || self.cond_dim == 0 || self.hidden.is_empty() {
            return Err(TifError::InvalidArgument(
                "architecture needs image_len, cond_dim and at least one hidden layer".into(),
            ));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(TifError::InvalidArgument(format!(
                "time_dim must be even and positive, got {}",
                self.time_dim
            )));
        }
        if self.hidden.contains(&0) {
            return Err(TifError::InvalidArgument("empty hidden layer".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 2
    }

    pub fn last(&self) -> LayerId {
        LayerId((self.hidden.len() + 1) as u16)
    }

    pub fn input_dim(&self) -> usize {
        self.image_len + self.time_dim + self.cond_dim
    }

    /// (out, in) of a layer.
    pub fn layer_dims(&self, id: LayerId) -> Option<(usize, usize)> {
        let i = id.0 as usize;
        let l = self.hidden.len();
        match i {
            0 => Some((self.cond_dim, self.cond_dim)),
            1 => Some((self.hidden[0], self.input_dim())),
            _ if i <= l => Some((self.hidden[i - 1], self.hidden[i - 2])),
            _ if i == l + 1 => Some((self.image_len, self.hidden[l - 1])),
            _ => None,
        }
    }

    pub fn layer_name(&self, id: LayerId) -> String {
        match id.0 as usize {
            0 => "cond".into(),
            i if i == self.hidden.len() + 1 => "last".into(),
            i => format!("w{}", i - 1),
        }
    }

    pub fn layer_by_name(&self, name: &str) -> Result<LayerId> {
        (0..self.num_layers() as u16)
            .map(LayerId)
            .find(|&id| self.layer_name(id) == name)
            .ok_or_else(|| TifError::InvalidArgument(format!("unknown layer {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<F> {
    /// out × in.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    fn apply(
        &self,
        x: ArrayView2<F>,
        lora: Option<(&LoraLayer<F>, F)>,
    ) -> (Array2<F>, Option<Array2<F>>) {
        let mut z = x.dot(&self.weight.t()) + &self.bias;
        let u = lora.map(|(l, scale)| {
            let u = x.dot(&l.a.t());
            z.scaled_add(scale, &u.dot(&l.b.t()));
            u
        });
        (z, u)
    }
}

/// Weights of the denoiser, including the learned condition vector y.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<F> {
    pub arch: ArchSpec,
    pub layers: Vec<Dense<F>>,
    pub cond_embed: Array1<F>,
}

impl<F: Scalar> DenoiserParams<F> {
    /// Uniform(±1/√in) weights, zero biases, standard-normal y.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let layers = (0..arch.num_layers() as u16)
            .map(|i| {
                let (out, inp) = arch.layer_dims(LayerId(i)).expect("layer in range");
                let bound = 1.0 / (inp as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((out, inp), |_| cast(rng.gen_range(-bound..bound)));
                Dense {
                    weight,
                    bias: Array1::zeros(out),
                }
            })
            .collect();
        let mut y = vec![0.0; arch.cond_dim];
        fill_normal_f64(&mut rng, &mut y);
        Ok(Self {
            arch: arch.clone(),
            layers,
            cond_embed: y.into_iter().map(cast).collect(),
        })
    }

    pub fn layer(&self, id: LayerId) -> &Dense<F> {
        &self.layers[id.0 as usize]
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>()
            + self.cond_embed.len()
    }
}

pub fn time_embedding<F: Scalar>(ts: &[usize], dim: usize) -> Array2<F> {
    let half = dim / 2;
    let mut out = Array2::zeros((ts.len(), dim));
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[[r, i]] = cast(arg.sin());
            out[[r, half + i]] = cast(arg.cos());
        }
    }
    out
}

fn sigmoid<F: Scalar>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

fn silu<F: Scalar>(z: &Array2<F>) -> Array2<F> {
    z.mapv(|v| v * sigmoid(v))
}

fn silu_grad<F: Scalar>(z: &Array2<F>) -> Array2<F> {
    z.mapv(|v| {
        let s = sigmoid(v);
        s * (F::one() + v * (F::one() - s))
    })
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache<F> {
    cond_in: Array2<F>,
    cond_pre: Array2<F>,
    /// Input of layer i (index = layer id); index 0 is `cond_in`'s slot and unused.
    inputs: Vec<Array2<F>>,
    /// Pre-activation of layer i for i in 1..=L.
    pres: Vec<Array2<F>>,
    lora_u: Vec<Option<Array2<F>>>,
    pub output: Array2<F>,
}

fn adapter_slots<'a, F>(
    params: &DenoiserParams<F>,
    adapter: Option<&'a LoraAdapter<F>>,
) -> Vec<Option<&'a LoraLayer<F>>> {
    let mut slots = vec![None; params.arch.num_layers()];
    if let Some(a) = adapter {
        for l in &a.layers {
            slots[l.id.0 as usize] = Some(l);
        }
    }
    slots
}

/// ε̂ for a batch of noisy images (rows of `xt`) at the given steps.
pub fn forward<F: Scalar>(
    params: &DenoiserParams<F>,
    adapter: Option<&LoraAdapter<F>>,
    xt: ArrayView2<F>,
    ts: &[usize],
) -> Result<ForwardCache<F>> {
    let arch = &params.arch;
    if xt.ncols() != arch.image_len || xt.nrows() != ts.len() {
        return Err(TifError::InvalidArgument(format!(
            "batch is {}x{} with {} steps, network expects width {}",
            xt.nrows(),
            xt.ncols(),
            ts.len(),
            arch.image_len
        )));
    }
    let slots = adapter_slots(params, adapter);
    let scale = adapter.map_or(F::zero(), |a| cast(a.scale));
    let with_scale = |i: usize| slots[i].map(|l| (l, scale));
    let n = arch.num_layers();
    let mut lora_u = vec![None; n];

    let cond_in = params.cond_embed.view().insert_axis(Axis(0)).to_owned();
    let (cond_pre, u) = params.layers[0].apply(cond_in.view(), with_scale(0));
    lora_u[0] = u;
    let cond_h = silu(&cond_pre);

    let batch = xt.nrows();
    let temb = time_embedding::<F>(ts, arch.time_dim);
    let cond_rows = cond_h
        .broadcast((batch, arch.cond_dim))
        .expect("broadcast condition");
    let input0 =
        concatenate(Axis(1), &[xt.view(), temb.view(), cond_rows]).expect("concatenate input");

    let mut inputs = Vec::with_capacity(n);
    inputs.push(Array2::zeros((0, 0)));
    inputs.push(input0);
    let mut pres = Vec::with_capacity(n);
    pres.push(Array2::zeros((0, 0)));
    for i in 1..n {
        let (z, u) = params.layers[i].apply(inputs[i].view(), with_scale(i));
        lora_u[i] = u;
        if i + 1 < n {
            inputs.push(silu(&z));
            pres.push(z);
        } else {
            return Ok(ForwardCache {
                cond_in,
                cond_pre,
                inputs,
                pres,
                lora_u,
                output: z,
            });
        }
    }
    unreachable!("architecture has an output layer")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// All base weights and the condition vector.
    Base,
    /// Only the adapter's A and B matrices.
    Adapter,
}

#[derive(Clone, Debug)]
pub struct DenseGrad<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Clone, Debug)]
pub struct LoraGrad<F> {
    pub id: LayerId,
    pub a: Array2<F>,
    pub b: Array2<F>,
}

#[derive(Clone, Debug, Default)]
pub struct Grads<F> {
    /// Indexed by layer id; empty unless the target is `Base`.
    pub layers: Vec<DenseGrad<F>>,
    pub cond_embed: Option<Array1<F>>,
    /// One entry per adapted layer, in the adapter's layer order.
    pub lora: Vec<LoraGrad<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn sq_norm(&self) -> f64 {
        let sq = |a: &dyn Fn() -> F| a().to_f64().unwrap_or(f64::NAN);
        let mut total = 0.0;
        for g in &self.layers {
            total += sq(&|| g.weight.iter().fold(F::zero(), |acc, &v| acc + v * v));
            total += sq(&|| g.bias.iter().fold(F::zero(), |acc, &v| acc + v * v));
        }
        if let Some(y) = &self.cond_embed {
            total += sq(&|| y.iter().fold(F::zero(), |acc, &v| acc + v * v));
        }
        for g in &self.lora {
            total += sq(&|| g.a.iter().fold(F::zero(), |acc, &v| acc + v * v));
            total += sq(&|| g.b.iter().fold(F::zero(), |acc, &v| acc + v * v));
        }
        total
    }
}

/// Backpropagates `d_out` (gradient of the loss w.r.t. the output).
pub fn backward<F: Scalar>(
    params: &DenoiserParams<F>,
    adapter: Option<&LoraAdapter<F>>,
    cache: &ForwardCache<F>,
    d_out: &Array2<F>,
    target: GradTarget,
) -> Grads<F> {
    let arch = &params.arch;
    let n = arch.num_layers();
    let slots = adapter_slots(params, adapter);
    let scale: F = adapter.map_or(F::zero(), |a| cast(a.scale));
    let base = target == GradTarget::Base;
    let need_cond = base || slots[0].is_some() && target == GradTarget::Adapter;

    let mut layer_grads: Vec<Option<DenseGrad<F>>> = vec![None; n];
    let mut lora_grads: Vec<Option<LoraGrad<F>>> = vec![None; n];

    let mut dz = d_out.clone();
    let mut d_cond_h = None;
    for i in (1..n).rev() {
        let x = &cache.inputs[i];
        let layer = &params.layers[i];
        if base {
            layer_grads[i] = Some(DenseGrad {
                weight: dz.t().dot(x),
                bias: dz.sum_axis(Axis(0)),
            });
        }
        let dz_b = slots[i].map(|l| dz.dot(&l.b));
        if let (Some(l), Some(dz_b), GradTarget::Adapter) = (slots[i], &dz_b, target) {
            let u = cache.lora_u[i].as_ref().expect("cached LoRA projection");
            lora_grads[i] = Some(LoraGrad {
                id: l.id,
                a: dz_b.t().dot(x) * scale,
                b: dz.t().dot(u) * scale,
            });
        }
        if i == 1 && !need_cond {
            break;
        }
        let mut dx = dz.dot(&layer.weight);
        if let (Some(l), Some(dz_b)) = (slots[i], &dz_b) {
            dx.scaled_add(scale, &dz_b.dot(&l.a));
        }
        if i > 1 {
            dz = dx * silu_grad(&cache.pres[i - 1]);
        } else {
            let start = arch.image_len + arch.time_dim;
            d_cond_h = Some(
                dx.slice(s![.., start..])
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0)),
            );
        }
    }

    let mut cond_embed = None;
    if let Some(dh) = d_cond_h {
        let dz0 = dh * silu_grad(&cache.cond_pre);
        let layer = &params.layers[0];
        if base {
            layer_grads[0] = Some(DenseGrad {
                weight: dz0.t().dot(&cache.cond_in),
                bias: dz0.sum_axis(Axis(0)),
            });
            cond_embed = Some(dz0.dot(&layer.weight).remove_axis(Axis(0)));
        }
        if let (Some(l), GradTarget::Adapter) = (slots[0], target) {
            let u = cache.lora_u[0].as_ref().expect("cached LoRA projection");
            lora_grads[0] = Some(LoraGrad {
                id: l.id,
                a: dz0.dot(&l.b).t().dot(&cache.cond_in) * scale,
                b: dz0.t().dot(u) * scale,
            });
        }
    }

    let lora = match (adapter, target) {
        (Some(a), GradTarget::Adapter) => a
            .layers
            .iter()
            .map(|l| {
                lora_grads[l.id.0 as usize]
                    .take()
                    .expect("gradient for adapted layer")
            })
            .collect(),
        _ => Vec::new(),
    };
    Grads {
        layers: if base {
            layer_grads
                .into_iter()
                .map(|g| g.expect("base gradient"))
                .collect()
        } else {
            Vec::new()
        },
        cond_embed,
        lora,
    }
}

/// Mean squared ε error over all elements, with its gradient w.r.t. the output.
pub fn eps_mse<F: Scalar>(pred: &Array2<F>, eps: ArrayView2<F>) -> (f64, Array2<F>) {
    let diff = pred - &eps;
    let count = diff.len() as f64;
    let loss = diff
        .iter()
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        / count;
    let grad = diff * cast::<F>(2.0 / count);
    (loss, grad)
}

/// ε-MSE loss on one batch and its gradient for `target`.
pub fn loss_and_grads<F: Scalar>(
    params: &DenoiserParams<F>,
    adapter: Option<&LoraAdapter<F>>,
    xt: ArrayView2<F>,
    ts: &[usize],
    eps: ArrayView2<F>,
    target: GradTarget,
) -> Result<(f64, Grads<F>)> {
    let cache = forward(params, adapter, xt, ts)?;
    let (loss, d_out) = eps_mse(&cache.output, eps);
    Ok((loss, backward(params, adapter, &cache, &d_out, target)))
}
