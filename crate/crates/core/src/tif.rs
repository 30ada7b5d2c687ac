//! Time-step weighted inference: δ* estimation, per-step weights, the
//! weighted reconstruction score and the argmax decision.

use std::fmt;
use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{recon_errors_with_noise, AdapterBank, DenoiserParams};
use crate::error::{Result, TifError};
use crate::rng::{fill_normal_f32, rng_for, stream};
use crate::schedule::Schedule;
use crate::special::{erfcx, ierfcx};
use crate::tensor::ImageTensor;
use crate::worldgen::Sample;

/// sqrt of the per-pixel minimum, over cross-class train pairs, of the
/// squared channel difference, summed over pixels.
pub fn estimate_delta_star(train: &[Sample]) -> Result<f64> {
    let first = train
        .first()
        .ok_or_else(|| TifError::InvalidArgument("empty train split".into()))?;
    if train.iter().all(|s| s.class == first.class) {
        return Err(TifError::InvalidArgument(
            "delta* needs at least two classes".into(),
        ));
    }
    let shape = first.image.shape();
    for s in train {
        first.image.check_same_shape(&s.image)?;
    }
    let pixels = shape.height * shape.width;
    let mut mins = vec![f64::INFINITY; pixels];
    for (i, a) in train.iter().enumerate() {
        for b in &train[i + 1..] {
            if a.class == b.class {
                continue;
            }
            for (p, m) in mins.iter_mut().enumerate() {
                let d = pixel_sq_diff(&a.image, &b.image, p);
                if d < *m {
                    *m = d;
                }
            }
        }
    }
    Ok(mins.iter().sum::<f64>().sqrt())
}

fn pixel_sq_diff(a: &ImageTensor, b: &ImageTensor, pixel: usize) -> f64 {
    let shape = a.shape();
    let plane = shape.height * shape.width;
    (0..shape.channels)
        .map(|c| {
            let d = f64::from(a.data()[c * plane + pixel]) - f64::from(b.data()[c * plane + pixel]);
            d * d
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Tif,
    Uniform,
    /// Weights ∝ (ᾱ_t/(1−ᾱ_t))^γ.
    SnrGamma(f64),
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tif => write!(f, "tif"),
            Self::Uniform => write!(f, "uniform"),
            Self::SnrGamma(g) => write!(f, "snr_gamma({g})"),
        }
    }
}

/// t_k = round(k·T/G) for k = 1..=G: G evenly spaced steps ending at T.
pub fn default_grid(s: &Schedule, points: usize) -> Result<Vec<usize>> {
    let big_t = s.steps();
    if points == 0 || points > big_t {
        return Err(TifError::InvalidArgument(format!(
            "grid size must be in 1..={big_t}, got {points}"
        )));
    }
    Ok((1..=points)
        .map(|k| ((k * big_t) as f64 / points as f64).round() as usize)
        .collect())
}

/// γ_t·erfcx(z) / ierfcx(z) with z = γ_t·δ*.
pub fn tif_weight_raw(gamma: f64, delta_star: f64) -> f64 {
    let z = gamma * delta_star;
    gamma * erfcx(z) / ierfcx(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepWeights {
    pub scheme: WeightScheme,
    pub grid: Vec<usize>,
    /// Before normalisation.
    pub raw: Vec<f64>,
    /// Sums to 1.
    pub weights: Vec<f64>,
}

impl TimestepWeights {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn write_csv<W: Write>(&self, s: &Schedule, mut w: W) -> Result<()> {
        writeln!(w, "t,alpha_bar,gamma,weight_raw,weight_normalized")?;
        for ((&t, r), n) in self.grid.iter().zip(&self.raw).zip(&self.weights) {
            writeln!(w, "{t},{},{},{r},{n}", s.alpha_bar(t), s.gamma(t))?;
        }
        Ok(())
    }
}

pub fn timestep_weights(
    s: &Schedule,
    delta_star: f64,
    grid: &[usize],
    scheme: WeightScheme,
) -> Result<TimestepWeights> {
    if !(delta_star >= 0.0) || !delta_star.is_finite() {
        return Err(TifError::InvalidArgument(format!(
            "delta* must be finite and >= 0, got {delta_star}"
        )));
    }
    if grid.is_empty() {
        return Err(TifError::InvalidArgument("empty time-step grid".into()));
    }
    for &t in grid {
        s.check_t(t)?;
    }
    let raw: Vec<f64> = grid
        .iter()
        .map(|&t| match scheme {
            WeightScheme::Tif => tif_weight_raw(s.gamma(t), delta_star),
            WeightScheme::Uniform => 1.0,
            WeightScheme::SnrGamma(g) => {
                let ab = s.alpha_bar(t);
                (ab / (1.0 - ab)).powf(g)
            }
        })
        .collect();
    if let Some((t, v)) = grid
        .iter()
        .zip(&raw)
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(TifError::Numerical(format!(
            "{scheme} weight at t = {t} is {v}"
        )));
    }
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(TifError::Numerical(format!(
            "{scheme} weights sum to {total}"
        )));
    }
    let weights = raw.iter().map(|v| v / total).collect();
    Ok(TimestepWeights {
        scheme,
        grid: grid.to_vec(),
        raw,
        weights,
    })
}

/// Per-class scores for one image together with the per-step losses they
/// were built from, so other weightings can be applied without rescoring.
#[derive(Clone, Debug, PartialEq)]
pub struct TifScore {
    pub scores: Vec<f64>,
    /// classes × grid, each entry L_t = ᾱ_t/(1−ᾱ_t) · mean ‖x0 − x̂0‖² over
    /// the noise draws.
    pub losses: Array2<f64>,
}

impl TifScore {
    pub fn from_losses(losses: Array2<f64>, w: &TimestepWeights) -> Result<Self> {
        if losses.ncols() != w.len() {
            return Err(TifError::LengthMismatch {
                expected: w.len(),
                got: losses.ncols(),
            });
        }
        let scores = losses
            .rows()
            .into_iter()
            .map(|row| -row.iter().zip(&w.weights).map(|(l, w)| l * w).sum::<f64>())
            .collect();
        Ok(Self { scores, losses })
    }

    pub fn reweighted(&self, w: &TimestepWeights) -> Result<Self> {
        Self::from_losses(self.losses.clone(), w)
    }
}

/// L_t for every class in the bank at every grid step, with the standard
/// weight ᾱ_t/(1−ᾱ_t) that puts the x0 error on the ε scale the network was
/// trained on. The same noise draw is used for all classes at a given (t, draw).
pub fn class_losses(
    params: &DenoiserParams<f32>,
    bank: &AdapterBank<f32>,
    x: &ImageTensor,
    s: &Schedule,
    grid: &[usize],
    n_noise: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if n_noise == 0 {
        return Err(TifError::InvalidArgument("n_noise must be >= 1".into()));
    }
    let d = x.shape().len();
    let rows = grid.len() * n_noise;
    let mut noise = Array2::<f32>::zeros((rows, d));
    let mut rng = rng_for(seed, &[stream::SCORE]);
    fill_normal_f32(&mut rng, noise.as_slice_mut().expect("contiguous"));
    let ts: Vec<usize> = grid
        .iter()
        .flat_map(|&t| std::iter::repeat(t).take(n_noise))
        .collect();

    let per_class: Vec<Vec<f64>> = (0..bank.len())
        .into_par_iter()
        .map(|c| {
            let errs =
                recon_errors_with_noise(params, Some(bank.get(c)?), x, &ts, noise.view(), s)?;
            Ok(errs
                .chunks(n_noise)
                .map(|ch| ch.iter().sum::<f64>() / n_noise as f64)
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((bank.len(), grid.len()));
    for (c, row) in per_class.iter().enumerate() {
        for ((g, v), &t) in row.iter().enumerate().zip(grid) {
            out[[c, g]] = standard_weight(s, t) * v;
        }
    }
    Ok(out)
}

pub fn standard_weight(s: &Schedule, t: usize) -> f64 {
    let ab = s.alpha_bar(t);
    ab / (1.0 - ab)
}

pub fn tif_score(
    params: &DenoiserParams<f32>,
    bank: &AdapterBank<f32>,
    x: &ImageTensor,
    s: &Schedule,
    w: &TimestepWeights,
    n_noise: usize,
    seed: u64,
) -> Result<TifScore> {
    let losses = class_losses(params, bank, x, s, &w.grid, n_noise, seed)?;
    TifScore::from_losses(losses, w)
}

/// Index of the largest score; the smallest index wins ties.
pub fn classify(score: &TifScore) -> usize {
    argmax(&score.scores)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
