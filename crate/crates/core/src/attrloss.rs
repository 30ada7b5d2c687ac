//! Attribute loss under the forward process.
//!
//! For two clean images at distance δ, the best achievable error when
//! telling their noisy versions apart at step t is ½·erfc(γ_t·δ). This module
//! evaluates that closed form, a Monte Carlo estimate of the same quantity
//! from the likelihood-ratio decision rule, the onset step at which an
//! attribute becomes lost, and first-order stochastic dominance checks on
//! distance samples.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Result, TifError};
use crate::rng::{derive_seed, fill_normal_f64, rng_for, stream, TifRng};
use crate::schedule::Schedule;
use crate::special;
use crate::tensor::ImageTensor;

/// e^{z²}·erfc(z) for finite z ≥ 0.
pub fn erfc_scaled(z: f64) -> Result<f64> {
    if !z.is_finite() || z < 0.0 {
        return Err(TifError::InvalidArgument(format!(
            "erfc_scaled needs a finite z >= 0, got {z}"
        )));
    }
    Ok(special::erfcx(z))
}

/// ½·erfc(γ_t·distance).
pub fn err_at_distance(distance: f64, s: &Schedule, t: usize) -> f64 {
    0.5 * special::erfc(s.gamma(t) * distance)
}

pub fn reconstruction_err(
    x0: &ImageTensor,
    x0p: &ImageTensor,
    s: &Schedule,
    t: usize,
) -> Result<f64> {
    s.check_t(t)?;
    let d = x0.distance(x0p)?;
    Ok(err_at_distance(d, s, t))
}

const MC_CHUNK: usize = 4096;

/// Empirical two-sided error of the nearest-scaled-mean rule.
///
/// Noisy samples are drawn from q(x_t|x0) and q(x_t′|x0′); each is assigned
/// to whichever of √ᾱ_t·x0 and √ᾱ_t·x0′ is closer, which is the Bayes rule for
/// two isotropic Gaussians of equal covariance. Exact ties count as half an
/// error. The result averages both directions.
pub fn mc_reconstruction_err(
    x0: &ImageTensor,
    x0p: &ImageTensor,
    s: &Schedule,
    t: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    s.check_t(t)?;
    x0.check_same_shape(x0p)?;
    if n_samples == 0 {
        return Err(TifError::InvalidArgument(
            "mc_reconstruction_err needs n_samples > 0".into(),
        ));
    }
    let (a, b) = s.mix_coefficients(t);
    let mean0: Vec<f64> = x0.data().iter().map(|&v| a * f64::from(v)).collect();
    let mean1: Vec<f64> = x0p.data().iter().map(|&v| a * f64::from(v)).collect();
    let base = derive_seed(seed, &[stream::MONTE_CARLO, t as u64]);

    let chunks = n_samples.div_ceil(MC_CHUNK);
    let errors: f64 = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let count = MC_CHUNK.min(n_samples - chunk * MC_CHUNK);
            let mut rng = rng_for(base, &[chunk as u64]);
            let mut noise = vec![0.0; mean0.len()];
            let mut errs = 0.0;
            for _ in 0..count {
                errs += misassigned(&mean0, &mean1, b, &mut noise, &mut rng);
                errs += misassigned(&mean1, &mean0, b, &mut noise, &mut rng);
            }
            errs
        })
        .sum();
    Ok(errors / (2.0 * n_samples as f64))
}

/// 1 if a sample around `own` lands nearer to `other`, ½ on a tie.
fn misassigned(own: &[f64], other: &[f64], sd: f64, noise: &mut [f64], rng: &mut TifRng) -> f64 {
    fill_normal_f64(rng, noise);
    let (mut d_own, mut d_other) = (0.0, 0.0);
    for ((&m, &o), &n) in own.iter().zip(other).zip(noise.iter()) {
        let x = m + sd * n;
        d_own += (x - m) * (x - m);
        d_other += (x - o) * (x - o);
    }
    if d_other < d_own {
        1.0
    } else if d_other == d_own {
        0.5
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Onset {
    At(usize),
    Never,
}

impl Onset {
    pub fn step(self) -> Option<usize> {
        match self {
            Onset::At(t) => Some(t),
            Onset::Never => None,
        }
    }
}

/// Smallest t with ½·erfc(γ_t·distance) ≥ tau.
///
/// Binary search is valid because the error is monotone in t for any
/// schedule with strictly decreasing ᾱ.
pub fn loss_onset(distance: f64, s: &Schedule, tau: f64) -> Result<Onset> {
    if !(tau > 0.0 && tau < 0.5) {
        return Err(TifError::InvalidArgument(format!(
            "tau must lie in (0, 0.5), got {tau}"
        )));
    }
    if !(distance >= 0.0) {
        return Err(TifError::InvalidArgument(format!(
            "distance must be non-negative, got {distance}"
        )));
    }
    let (mut lo, mut hi) = (1usize, s.steps() + 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if err_at_distance(distance, s, mid) >= tau {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(if lo > s.steps() {
        Onset::Never
    } else {
        Onset::At(lo)
    })
}

/// Produces image pairs that differ only in one designated attribute.
pub trait PairSampler {
    fn sample_pair(&self, rng: &mut TifRng) -> Result<(ImageTensor, ImageTensor)>;

    /// True when the sampler cannot produce any pair.
    fn is_empty(&self) -> bool {
        false
    }
}

/// Mean pairwise error over `n_pairs` sampled pairs at each step of `ts`.
///
/// The same pairs are used for every step, so for a fixed seed the curve
/// inherits per-pair monotonicity in t.
pub fn attribute_loss_curve<P: PairSampler + ?Sized>(
    sampler: &P,
    s: &Schedule,
    ts: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if sampler.is_empty() || n_pairs == 0 {
        return Err(TifError::InvalidArgument(
            "attribute loss needs a non-empty sampler and n_pairs > 0".into(),
        ));
    }
    for &t in ts {
        s.check_t(t)?;
    }
    let mut rng = rng_for(seed, &[stream::FLIP]);
    let mut distances = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let (a, b) = sampler.sample_pair(&mut rng)?;
        distances.push(a.distance(&b)?);
    }
    Ok(ts
        .iter()
        .map(|&t| {
            distances
                .iter()
                .map(|&d| err_at_distance(d, s, t))
                .sum::<f64>()
                / n_pairs as f64
        })
        .collect())
}

pub fn attribute_loss_degree<P: PairSampler + ?Sized>(
    sampler: &P,
    s: &Schedule,
    t: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    Ok(attribute_loss_curve(sampler, s, &[t], n_pairs, seed)?[0])
}

/// True iff the empirical CDF of `a` is at or below that of `b` at every
/// pooled sample point, i.e. `a` first-order stochastically dominates `b`.
pub fn fosd_check(samples_a: &[f64], samples_b: &[f64]) -> Result<bool> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(TifError::InvalidArgument(
            "fosd_check needs two non-empty sample sets".into(),
        ));
    }
    if samples_a.iter().chain(samples_b).any(|v| v.is_nan()) {
        return Err(TifError::InvalidArgument("NaN in FOSD samples".into()));
    }
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (sorted(samples_a), sorted(samples_b));
    let cdf = |v: &[f64], x: f64| v.partition_point(|&s| s <= x) as f64 / v.len() as f64;
    Ok(a.iter().chain(&b).all(|&x| cdf(&a, x) <= cdf(&b, x)))
}

/// Err over a grid of distances × time-steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LossCurve {
    pub distances: Vec<f64>,
    pub steps: Vec<usize>,
    /// `errs[i][j]` is the error at `distances[i]`, `steps[j]`.
    pub errs: Vec<Vec<f64>>,
}

impl LossCurve {
    pub fn compute(distances: &[f64], s: &Schedule, steps: &[usize]) -> Result<Self> {
        for &t in steps {
            s.check_t(t)?;
        }
        if let Some(d) = distances.iter().find(|d| !(**d >= 0.0)) {
            return Err(TifError::InvalidArgument(format!("bad distance {d}")));
        }
        let errs = distances
            .iter()
            .map(|&d| steps.iter().map(|&t| err_at_distance(d, s, t)).collect())
            .collect();
        Ok(Self {
            distances: distances.to_vec(),
            steps: steps.to_vec(),
            errs,
        })
    }

    /// CSV with header `distance,t,err`, one row per cell.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "distance,t,err")?;
        for (d, row) in self.distances.iter().zip(&self.errs) {
            for (t, e) in self.steps.iter().zip(row) {
                writeln!(w, "{d},{t},{e:.17e}")?;
            }
        }
        Ok(())
    }
}
