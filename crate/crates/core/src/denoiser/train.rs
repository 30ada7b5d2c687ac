//! ε-prediction training for the base network and for per-class adapters.

use ndarray::{Array, Array2, Dimension, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lora::LoraAdapter;
use super::network::{cast, loss_and_grads, ArchSpec, DenoiserParams, GradTarget, Grads, Scalar};
use crate::error::{Result, TifError};
use crate::rng::{rng_for, stream, TifRng};
use crate::schedule::Schedule;
use crate::tensor::ImageTensor;

/// SGD with heavy-ball momentum and a fixed step budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Rescale the gradient when its global norm exceeds this value.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl OptimConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == 0 {
            return Err(TifError::InvalidArgument(format!(
                "bad optimizer config: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn mean_first(&self, n: usize) -> f64 {
        Self::mean(&self.losses[..n.min(self.losses.len())])
    }

    pub fn mean_last(&self, n: usize) -> f64 {
        Self::mean(&self.losses[self.losses.len().saturating_sub(n)..])
    }
}

/// A minibatch of (x_t, t, ε) built from clean images.
pub(crate) struct Batch<F> {
    pub xt: Array2<F>,
    pub ts: Vec<usize>,
    pub eps: Array2<F>,
}

pub(crate) fn draw_batch<F: Scalar>(
    images: &[&ImageTensor],
    s: &Schedule,
    batch_size: usize,
    rng: &mut TifRng,
) -> Batch<F> {
    let d = images[0].shape().len();
    let mut xt = Array2::zeros((batch_size, d));
    let mut eps = Array2::zeros((batch_size, d));
    let mut ts = Vec::with_capacity(batch_size);
    for r in 0..batch_size {
        let img = images[rng.gen_range(0..images.len())];
        let t = rng.gen_range(1..=s.steps());
        let (a, b) = s.mix_coefficients(t);
        for (j, &x) in img.data().iter().enumerate() {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            eps[[r, j]] = cast(e);
            xt[[r, j]] = cast(a * f64::from(x) + b * e);
        }
        ts.push(t);
    }
    Batch { xt, ts, eps }
}

fn clip_factor<F: Scalar>(grads: &Grads<F>, max_norm: Option<f64>) -> F {
    match max_norm {
        Some(m) => {
            let norm = grads.sq_norm().sqrt();
            if norm > m {
                cast(m / norm)
            } else {
                F::one()
            }
        }
        None => F::one(),
    }
}

fn momentum_update<F: Scalar, D: Dimension>(
    param: &mut Array<F, D>,
    velocity: &mut Array<F, D>,
    grad: &Array<F, D>,
    lr: F,
    momentum: F,
    gscale: F,
) {
    Zip::from(param)
        .and(velocity)
        .and(grad)
        .for_each(|p, v, &g| {
            *v = momentum * *v + g * gscale;
            *p = *p - lr * *v;
        });
}

fn check_images(images: &[&ImageTensor], image_len: usize) -> Result<()> {
    if images.is_empty() {
        return Err(TifError::InvalidArgument("no training images".into()));
    }
    if let Some(bad) = images.iter().find(|i| i.shape().len() != image_len) {
        return Err(TifError::LengthMismatch {
            expected: image_len,
            got: bad.shape().len(),
        });
    }
    Ok(())
}

fn finite_or_diverged(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TifError::Diverged {
            step,
            detail: format!("loss became {loss}"),
        })
    }
}

/// Trains a fresh base network on `pool` with uniformly sampled t.
pub fn pretrain_base<F: Scalar>(
    arch: &ArchSpec,
    pool: &[&ImageTensor],
    s: &Schedule,
    opt: &OptimConfig,
    seed: u64,
) -> Result<(DenoiserParams<F>, TrainLog)> {
    opt.validate()?;
    check_images(pool, arch.image_len)?;
    let mut params = DenoiserParams::<F>::init(arch, seed)?;
    let mut vel_layers: Vec<_> = params
        .layers
        .iter()
        .map(|l| {
            (
                Array2::zeros(l.weight.raw_dim()),
                Array::zeros(l.bias.raw_dim()),
            )
        })
        .collect();
    let mut vel_y = Array::zeros(params.cond_embed.raw_dim());
    let (lr, mu) = (cast::<F>(opt.lr), cast::<F>(opt.momentum));
    let mut rng = rng_for(seed, &[stream::PRETRAIN]);
    let mut log = TrainLog::default();

    for step in 0..opt.steps {
        let batch = draw_batch::<F>(pool, s, opt.batch_size, &mut rng);
        let (loss, grads) = loss_and_grads(
            &params,
            None,
            batch.xt.view(),
            &batch.ts,
            batch.eps.view(),
            GradTarget::Base,
        )?;
        finite_or_diverged(loss, step)?;
        log.losses.push(loss);
        let g = clip_factor(&grads, opt.max_grad_norm);
        for ((layer, (vw, vb)), lg) in params
            .layers
            .iter_mut()
            .zip(&mut vel_layers)
            .zip(&grads.layers)
        {
            momentum_update(&mut layer.weight, vw, &lg.weight, lr, mu, g);
            momentum_update(&mut layer.bias, vb, &lg.bias, lr, mu, g);
        }
        if let Some(gy) = &grads.cond_embed {
            momentum_update(&mut params.cond_embed, &mut vel_y, gy, lr, mu, g);
        }
    }
    Ok((params, log))
}

/// Fits one class adapter on that class's images; the base is only read.
pub fn train_adapter<F: Scalar>(
    params: &DenoiserParams<F>,
    adapter: &LoraAdapter<F>,
    class_images: &[&ImageTensor],
    s: &Schedule,
    opt: &OptimConfig,
    seed: u64,
) -> Result<(LoraAdapter<F>, TrainLog)> {
    opt.validate()?;
    check_images(class_images, params.arch.image_len)?;
    let mut adapter = adapter.clone();
    let mut vel: Vec<_> = adapter
        .layers
        .iter()
        .map(|l| (Array2::zeros(l.a.raw_dim()), Array2::zeros(l.b.raw_dim())))
        .collect();
    let (lr, mu) = (cast::<F>(opt.lr), cast::<F>(opt.momentum));
    let mut rng = rng_for(seed, &[stream::ADAPTER]);
    let mut log = TrainLog::default();

    for step in 0..opt.steps {
        let batch = draw_batch::<F>(class_images, s, opt.batch_size, &mut rng);
        let (loss, grads) = loss_and_grads(
            params,
            Some(&adapter),
            batch.xt.view(),
            &batch.ts,
            batch.eps.view(),
            GradTarget::Adapter,
        )?;
        finite_or_diverged(loss, step)?;
        log.losses.push(loss);
        let g = clip_factor(&grads, opt.max_grad_norm);
        for ((layer, (va, vb)), lg) in adapter.layers.iter_mut().zip(&mut vel).zip(&grads.lora) {
            debug_assert_eq!(layer.id, lg.id);
            momentum_update(&mut layer.a, va, &lg.a, lr, mu, g);
            momentum_update(&mut layer.b, vb, &lg.b, lr, mu, g);
        }
    }
    Ok((adapter, log))
}
