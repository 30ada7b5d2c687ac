//! Inference with a (possibly adapted) denoiser: x̂0 prediction,
//! reconstruction loss and ancestral sampling.

use ndarray::{Array2, ArrayView2};

use super::lora::LoraAdapter;
use super::network::{forward, DenoiserParams};
use super::train::draw_batch;
use crate::error::{Result, TifError};
use crate::rng::{fill_normal_f32, rng_for, stream};
use crate::schedule::Schedule;
use crate::tensor::{ImageTensor, Shape};

pub const X0_CLAMP: f32 = 1.5;

pub fn predict_eps(
    params: &DenoiserParams<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    xt: ArrayView2<f32>,
    ts: &[usize],
) -> Result<Array2<f32>> {
    Ok(forward(params, adapter, xt, ts)?.output)
}

/// (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t, clamped to ±`limit`, row by row.
pub fn eps_to_x0(
    xt: ArrayView2<f32>,
    eps: ArrayView2<f32>,
    ts: &[usize],
    s: &Schedule,
    limit: f32,
) -> Array2<f32> {
    let mut out = Array2::zeros(xt.raw_dim());
    for (r, &t) in ts.iter().enumerate() {
        let (a, b) = s.mix_coefficients(t);
        for j in 0..xt.ncols() {
            let v = (f64::from(xt[[r, j]]) - b * f64::from(eps[[r, j]])) / a;
            out[[r, j]] = (v as f32).clamp(-limit, limit);
        }
    }
    out
}

fn check_ts(s: &Schedule, ts: &[usize]) -> Result<()> {
    ts.iter().try_for_each(|&t| s.check_t(t))
}

pub fn predict_x0(
    params: &DenoiserParams<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    x_t: &ImageTensor,
    t: usize,
    s: &Schedule,
) -> Result<ImageTensor> {
    s.check_t(t)?;
    if x_t.shape().len() != params.arch.image_len {
        return Err(TifError::LengthMismatch {
            expected: params.arch.image_len,
            got: x_t.shape().len(),
        });
    }
    let xt = ArrayView2::from_shape((1, x_t.shape().len()), x_t.data()).expect("row view");
    let eps = predict_eps(params, adapter, xt, &[t])?;
    let x0 = eps_to_x0(xt, eps.view(), &[t], s, X0_CLAMP);
    ImageTensor::new(x_t.shape(), x0.into_raw_vec())
}

/// ‖x0 − x̂0‖² for each row, where row r noises `x0` at `ts[r]` with `noise` row r.
pub fn recon_errors_with_noise(
    params: &DenoiserParams<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    x0: &ImageTensor,
    ts: &[usize],
    noise: ArrayView2<f32>,
    s: &Schedule,
) -> Result<Vec<f64>> {
    check_ts(s, ts)?;
    let d = x0.shape().len();
    if d != params.arch.image_len || noise.ncols() != d || noise.nrows() != ts.len() {
        return Err(TifError::InvalidArgument(format!(
            "noise batch {}x{} does not match {} steps of width {}",
            noise.nrows(),
            noise.ncols(),
            ts.len(),
            params.arch.image_len
        )));
    }
    let mut xt = Array2::zeros((ts.len(), d));
    for (r, &t) in ts.iter().enumerate() {
        let (a, b) = s.mix_coefficients(t);
        for (j, &x) in x0.data().iter().enumerate() {
            xt[[r, j]] = (a * f64::from(x) + b * f64::from(noise[[r, j]])) as f32;
        }
    }
    let eps = predict_eps(params, adapter, xt.view(), ts)?;
    let x0_hat = eps_to_x0(xt.view(), eps.view(), ts, s, X0_CLAMP);
    Ok(x0_hat
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(x0.data())
                .map(|(&p, &x)| {
                    let e = f64::from(x) - f64::from(p);
                    e * e
                })
                .sum()
        })
        .collect())
}

/// L_t without the w_t factor: mean over `n_noise` draws of ‖x0 − x̂0‖².
pub fn recon_loss(
    params: &DenoiserParams<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    x0: &ImageTensor,
    t: usize,
    s: &Schedule,
    n_noise: usize,
    seed: u64,
) -> Result<f64> {
    if n_noise == 0 {
        return Err(TifError::InvalidArgument("n_noise must be >= 1".into()));
    }
    let d = x0.shape().len();
    let mut noise = Array2::zeros((n_noise, d));
    let mut rng = rng_for(seed, &[stream::SCORE, t as u64]);
    fill_normal_f32(&mut rng, noise.as_slice_mut().expect("contiguous"));
    let errs = recon_errors_with_noise(params, adapter, x0, &vec![t; n_noise], noise.view(), s)?;
    Ok(errs.iter().sum::<f64>() / n_noise as f64)
}

/// Mean ε-MSE per element over random (t, ε) draws on `images`.
pub fn eps_mse_on(
    params: &DenoiserParams<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    images: &[&ImageTensor],
    s: &Schedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if images.is_empty() || draws == 0 {
        return Err(TifError::InvalidArgument(
            "eps_mse_on needs images and draws".into(),
        ));
    }
    let mut rng = rng_for(seed, &[stream::HELDOUT]);
    let batch = draw_batch::<f32>(images, s, draws, &mut rng);
    let eps = predict_eps(params, adapter, batch.xt.view(), &batch.ts)?;
    let diff = eps - &batch.eps;
    Ok(diff.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>() / diff.len() as f64)
}

/// Ancestral sampling over `steps` evenly respaced time-steps ending at T,
/// starting from pure noise. Returns `count` images clamped to [−1, 1].
pub fn sample_images(
    params: &DenoiserParams<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    s: &Schedule,
    shape: Shape,
    steps: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    let big_t = s.steps();
    if steps == 0 || steps > big_t {
        return Err(TifError::InvalidArgument(format!(
            "steps must be in 1..={big_t}, got {steps}"
        )));
    }
    if shape.len() != params.arch.image_len {
        return Err(TifError::LengthMismatch {
            expected: params.arch.image_len,
            got: shape.len(),
        });
    }
    let d = shape.len();
    let taus: Vec<usize> = (1..=steps)
        .map(|i| ((i * big_t) as f64 / steps as f64).round() as usize)
        .collect();
    let mut rng = rng_for(seed, &[stream::SAMPLE]);
    let mut x = Array2::zeros((count, d));
    fill_normal_f32(&mut rng, x.as_slice_mut().expect("contiguous"));
    let mut z = Array2::<f32>::zeros((count, d));

    for i in (0..steps).rev() {
        let t = taus[i];
        let ts = vec![t; count];
        let ab_t = s.alpha_bar(t);
        let ab_prev = if i == 0 {
            1.0
        } else {
            s.alpha_bar(taus[i - 1])
        };
        let eps = predict_eps(params, adapter, x.view(), &ts)?;
        let x0 = eps_to_x0(x.view(), eps.view(), &ts, s, 1.0);
        if i == 0 {
            x = x0;
            break;
        }
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt();
        fill_normal_f32(&mut rng, z.as_slice_mut().expect("contiguous"));
        ndarray::Zip::from(&mut x)
            .and(&x0)
            .and(&z)
            .for_each(|xv, &x0v, &zv| {
                let mean = c0 * f64::from(x0v) + ct * f64::from(*xv);
                *xv = (mean + sigma * f64::from(zv)) as f32;
            });
    }
    x.rows()
        .into_iter()
        .map(|row| {
            let data = row.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            ImageTensor::new(shape, data)
        })
        .collect()
}

pub fn sample_image(
    params: &DenoiserParams<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    s: &Schedule,
    shape: Shape,
    steps: usize,
    seed: u64,
) -> Result<ImageTensor> {
    Ok(sample_images(params, adapter, s, shape, steps, 1, seed)?.remove(0))
}
