//! Synthetic worlds: images rendered from a class attribute and an
//! environment attribute, and few-shot tasks with a controllable
//! class–environment correlation.
//!
//! Layout of an H×W world (H, W ≥ 8 and even):
//!
//! * a 4×4 plate at the centre carries the class glyph, a two-pixel domino
//!   at one of eight disjoint positions (bright stroke on a dark plate);
//! * everything outside the plate is background, split into four quadrants.
//!   Each environment is a binary code over the quadrants; a set bit lifts
//!   the quadrant to the bright level, a clear bit drops it to the dark one.
//!
//! Flipping the class therefore moves four pixels, flipping the environment
//! moves every background pixel of at least two quadrants. The background
//! contrast is derived from `footprint_ratio`, the target ratio of the mean
//! squared pixel change of an environment flip to that of a class flip.

mod io;

pub use io::{read_pgm, read_task_dir, write_pgm, write_task_dir, ManifestRow};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attrloss::{fosd_check, PairSampler};
use crate::error::{Result, TifError};
use crate::rng::{derive_seed, rng_for, stream, TifRng};
use crate::tensor::{ImageTensor, Shape};

const PLATE: usize = 4;
const MAX_GLYPHS: usize = 8;
/// Quadrant bit codes; the first four are pairwise at Hamming distance 2.
const ENV_CODES: [u8; 8] = [
    0b0000, 0b0011, 0b0101, 0b0110, 0b1001, 0b1010, 0b1100, 0b1111,
];
const PREMISE_SAMPLES: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub shape: Shape,
    /// Number of class glyphs |C| (at most 8).
    pub num_classes: usize,
    /// Number of environments |E| (at most 8).
    pub num_envs: usize,
    pub footprint_ratio: f64,
    /// Stroke-to-plate contrast of the glyph.
    pub glyph_contrast: f64,
    /// Amplitude of the uniform jitter added to non-stroke pixels.
    pub jitter: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            shape: Shape::new(1, 16, 16),
            num_classes: 8,
            num_envs: 4,
            footprint_ratio: 4.0,
            glyph_contrast: 1.0,
            jitter: 0.02,
        }
    }
}

impl WorldSpec {
    /// The excluded regime: class flips move more pixel mass than
    /// environment flips. Useful only as a negative control.
    pub fn negative_control() -> Self {
        Self {
            footprint_ratio: 0.25,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Nuance,
    Env,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMode {
    /// Test environments drawn uniformly.
    Balanced,
    /// Every test image carries an environment linked to another class.
    Anti,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    /// Task-level class index in 0..K.
    pub class: usize,
    pub env: usize,
}

#[derive(Clone, Debug)]
pub struct FewShotTask {
    pub k: usize,
    pub n: usize,
    pub rho: f64,
    pub test_mode: TestMode,
    /// World glyph rendered for each task class.
    pub class_glyphs: Vec<usize>,
    /// Environment each task class is correlated with in the train split.
    pub linked_envs: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl FewShotTask {
    pub fn train_of_class(&self, class: usize) -> impl Iterator<Item = &Sample> {
        self.train.iter().filter(move |s| s.class == class)
    }
}

/// A validated world with its derived pixel levels.
#[derive(Clone, Debug)]
pub struct World {
    spec: WorldSpec,
    env_contrast: f64,
}

impl World {
    /// Validates the spec and, when `footprint_ratio > 1`, asserts that
    /// environment-flip distances dominate class-flip distances.
    pub fn new(spec: WorldSpec) -> Result<Self> {
        let world = Self::new_unchecked(spec)?;
        let s = &world.spec;
        if s.footprint_ratio > 1.0 && s.num_classes > 1 && s.num_envs > 1 {
            let env = world.flip_distance_samples(Attribute::Env, PREMISE_SAMPLES, 0)?;
            let nuance = world.flip_distance_samples(Attribute::Nuance, PREMISE_SAMPLES, 1)?;
            if !fosd_check(&env, &nuance)? {
                return Err(TifError::PremiseViolated(format!(
                    "environment flips do not dominate class flips (ratio {})",
                    s.footprint_ratio
                )));
            }
        }
        Ok(world)
    }

    /// Validation without the dominance check.
    pub fn new_unchecked(spec: WorldSpec) -> Result<Self> {
        let Shape {
            channels,
            height,
            width,
        } = spec.shape;
        if channels == 0 || height < 8 || width < 8 || height % 2 != 0 || width % 2 != 0 {
            return Err(TifError::InvalidArgument(format!(
                "world images must have >= 1 channel and even sides >= 8, got {}",
                spec.shape
            )));
        }
        if !(1..=MAX_GLYPHS).contains(&spec.num_classes) {
            return Err(TifError::InvalidArgument(format!(
                "num_classes must be in 1..=8, got {}",
                spec.num_classes
            )));
        }
        if !(1..=ENV_CODES.len()).contains(&spec.num_envs) {
            return Err(TifError::InvalidArgument(format!(
                "num_envs must be in 1..=8, got {}",
                spec.num_envs
            )));
        }
        if !(spec.footprint_ratio > 0.0 && spec.footprint_ratio.is_finite()) {
            return Err(TifError::InvalidArgument(format!(
                "footprint_ratio must be positive, got {}",
                spec.footprint_ratio
            )));
        }
        if !(spec.glyph_contrast > 0.0 && spec.glyph_contrast <= 2.0) {
            return Err(TifError::InvalidArgument(format!(
                "glyph_contrast must be in (0, 2], got {}",
                spec.glyph_contrast
            )));
        }
        if !(0.0..0.5).contains(&spec.jitter) {
            return Err(TifError::InvalidArgument(format!(
                "jitter must be in [0, 0.5), got {}",
                spec.jitter
            )));
        }
        let env_contrast = derive_env_contrast(&spec);
        if env_contrast > 2.0 {
            return Err(TifError::InvalidArgument(format!(
                "footprint_ratio {} needs background contrast {env_contrast:.3} > 2",
                spec.footprint_ratio
            )));
        }
        Ok(Self { spec, env_contrast })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn shape(&self) -> Shape {
        self.spec.shape
    }

    /// Bright-minus-dark background level.
    pub fn env_contrast(&self) -> f64 {
        self.env_contrast
    }

    /// Pixels (y, x) lit by glyph `c`.
    pub fn glyph_pixels(&self, c: usize) -> [(usize, usize); 2] {
        glyph_pixels(self.spec.shape, c)
    }

    /// Deterministic render of Φ(c, e) with jitter drawn from `jitter_seed`.
    pub fn render(&self, c: usize, e: usize, jitter_seed: u64) -> Result<ImageTensor> {
        if c >= self.spec.num_classes {
            return Err(TifError::IndexOutOfRange(format!(
                "class {c} of {}",
                self.spec.num_classes
            )));
        }
        if e >= self.spec.num_envs {
            return Err(TifError::IndexOutOfRange(format!(
                "environment {e} of {}",
                self.spec.num_envs
            )));
        }
        let shape = self.spec.shape;
        let (h, w) = (shape.height, shape.width);
        let g = self.spec.glyph_contrast as f32;
        let a = self.env_contrast as f32;
        let code = ENV_CODES[e];
        let strokes = self.glyph_pixels(c);
        let mut rng = rng_for(jitter_seed, &[]);
        let amp = self.spec.jitter as f32;

        let mut img = ImageTensor::zeros(shape);
        for ch in 0..shape.channels {
            for y in 0..h {
                for x in 0..w {
                    // Drawn for every pixel so the jitter field does not depend on c.
                    let jit = if amp > 0.0 {
                        rng.gen_range(-amp..=amp)
                    } else {
                        0.0
                    };
                    let v = if strokes.contains(&(y, x)) {
                        g / 2.0
                    } else if in_plate(shape, y, x) {
                        -g / 2.0 + jit
                    } else if code & (1 << quadrant(shape, y, x)) != 0 {
                        a / 2.0 + jit
                    } else {
                        -a / 2.0 + jit
                    };
                    img.set(ch, y, x, v.clamp(-1.0, 1.0));
                }
            }
        }
        Ok(img)
    }

    /// Few-shot task with K classes and N shots each.
    ///
    /// Class k renders glyph k and is linked to environment k mod M. Each
    /// training image takes its linked environment with probability `rho`,
    /// otherwise an environment drawn uniformly from all M.
    pub fn sample_task(
        &self,
        k: usize,
        n: usize,
        rho: f64,
        test_size: usize,
        test_mode: TestMode,
        seed: u64,
    ) -> Result<FewShotTask> {
        let m = self.spec.num_envs;
        if k == 0 || k > self.spec.num_classes {
            return Err(TifError::InvalidArgument(format!(
                "K = {k} but the world has {} classes",
                self.spec.num_classes
            )));
        }
        if m < 2 {
            return Err(TifError::InvalidArgument(
                "task sampling needs at least 2 environments".into(),
            ));
        }
        if n == 0 {
            return Err(TifError::InvalidArgument("N must be positive".into()));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(TifError::InvalidArgument(format!(
                "rho must be in [0, 1], got {rho}"
            )));
        }
        let class_glyphs: Vec<usize> = (0..k).collect();
        let linked_envs: Vec<usize> = (0..k).map(|c| c % m).collect();
        let anti_envs = match test_mode {
            TestMode::Anti => Some(anti_environments(&linked_envs)?),
            TestMode::Balanced => None,
        };

        let mut rng = rng_for(seed, &[stream::TASK]);
        let mut train = Vec::with_capacity(k * n);
        for c in 0..k {
            for i in 0..n {
                let env = if rng.gen::<f64>() < rho {
                    linked_envs[c]
                } else {
                    rng.gen_range(0..m)
                };
                let jitter = derive_seed(seed, &[stream::JITTER_TRAIN, c as u64, i as u64]);
                train.push(Sample {
                    image: self.render(class_glyphs[c], env, jitter)?,
                    class: c,
                    env,
                });
            }
        }
        let mut test = Vec::with_capacity(k * test_size);
        for c in 0..k {
            for i in 0..test_size {
                let env = match &anti_envs {
                    Some(envs) => envs[c],
                    None => rng.gen_range(0..m),
                };
                let jitter = derive_seed(seed, &[stream::JITTER_TEST, c as u64, i as u64]);
                test.push(Sample {
                    image: self.render(class_glyphs[c], env, jitter)?,
                    class: c,
                    env,
                });
            }
        }
        Ok(FewShotTask {
            k,
            n,
            rho,
            test_mode,
            class_glyphs,
            linked_envs,
            train,
            test,
        })
    }

    /// Every (class, environment) combination `per_combo` times, with jitter
    /// streams disjoint from any task's.
    pub fn pool(&self, per_combo: usize, seed: u64) -> Result<Vec<Sample>> {
        self.pool_in_stream(per_combo, seed, stream::JITTER_POOL)
    }

    /// Like [`World::pool`] but from a separate stream, for held-out checks.
    pub fn heldout_pool(&self, per_combo: usize, seed: u64) -> Result<Vec<Sample>> {
        self.pool_in_stream(per_combo, seed, stream::HELDOUT)
    }

    fn pool_in_stream(&self, per_combo: usize, seed: u64, tag: u64) -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(self.spec.num_classes * self.spec.num_envs * per_combo);
        for c in 0..self.spec.num_classes {
            for e in 0..self.spec.num_envs {
                for i in 0..per_combo {
                    let jitter = derive_seed(seed, &[tag, c as u64, e as u64, i as u64]);
                    out.push(Sample {
                        image: self.render(c, e, jitter)?,
                        class: c,
                        env: e,
                    });
                }
            }
        }
        Ok(out)
    }

    /// A pair of renders that share jitter and all attributes but `which`,
    /// which is redrawn uniformly among the other values (left unchanged
    /// when there is no other value).
    pub fn flip_pair(
        &self,
        which: Attribute,
        rng: &mut TifRng,
    ) -> Result<(ImageTensor, ImageTensor)> {
        let c = rng.gen_range(0..self.spec.num_classes);
        let e = rng.gen_range(0..self.spec.num_envs);
        let jitter: u64 = rng.gen();
        let (c2, e2) = match which {
            Attribute::Nuance => (redraw(c, self.spec.num_classes, rng), e),
            Attribute::Env => (c, redraw(e, self.spec.num_envs, rng)),
        };
        Ok((self.render(c, e, jitter)?, self.render(c2, e2, jitter)?))
    }

    pub fn flip_distance_samples(&self, which: Attribute, n: usize, seed: u64) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(TifError::InvalidArgument("n must be positive".into()));
        }
        let mut rng = rng_for(seed, &[stream::FLIP, which as u64]);
        (0..n)
            .map(|_| {
                let (a, b) = self.flip_pair(which, &mut rng)?;
                a.distance(&b)
            })
            .collect()
    }

    pub fn flip_sampler(&self, which: Attribute) -> FlipSampler<'_> {
        FlipSampler { world: self, which }
    }
}

pub struct FlipSampler<'a> {
    world: &'a World,
    which: Attribute,
}

impl PairSampler for FlipSampler<'_> {
    fn sample_pair(&self, rng: &mut TifRng) -> Result<(ImageTensor, ImageTensor)> {
        self.world.flip_pair(self.which, rng)
    }
}

fn redraw(current: usize, count: usize, rng: &mut TifRng) -> usize {
    if count < 2 {
        return current;
    }
    let mut others: Vec<usize> = (0..count).filter(|&v| v != current).collect();
    others.shuffle(rng);
    others[0]
}

fn anti_environments(linked: &[usize]) -> Result<Vec<usize>> {
    let k = linked.len();
    (0..k)
        .map(|c| {
            (1..k)
                .map(|j| linked[(c + j) % k])
                .find(|&e| e != linked[c])
                .ok_or_else(|| {
                    TifError::InvalidArgument(
                        "anti-correlated test needs a class linked to another environment".into(),
                    )
                })
        })
        .collect()
}

fn plate_origin(shape: Shape) -> (usize, usize) {
    (shape.height / 2 - PLATE / 2, shape.width / 2 - PLATE / 2)
}

fn in_plate(shape: Shape, y: usize, x: usize) -> bool {
    let (y0, x0) = plate_origin(shape);
    (y0..y0 + PLATE).contains(&y) && (x0..x0 + PLATE).contains(&x)
}

fn quadrant(shape: Shape, y: usize, x: usize) -> u32 {
    (u32::from(y >= shape.height / 2) << 1) | u32::from(x >= shape.width / 2)
}

fn glyph_pixels(shape: Shape, c: usize) -> [(usize, usize); 2] {
    let (y0, x0) = plate_origin(shape);
    let row = y0 + c / 2;
    let col = x0 + 2 * (c % 2);
    [(row, col), (row, col + 1)]
}

/// Background contrast giving the requested ratio of mean squared flip
/// distances, computed without jitter.
fn derive_env_contrast(spec: &WorldSpec) -> f64 {
    let shape = spec.shape;
    let mut quadrant_px = [0usize; 4];
    for y in 0..shape.height {
        for x in 0..shape.width {
            if !in_plate(shape, y, x) {
                quadrant_px[quadrant(shape, y, x) as usize] += 1;
            }
        }
    }
    // Mean number of background pixels changed per unit contrast over
    // distinct environment pairs.
    let m = spec.num_envs.max(2);
    let mut env_units = 0.0;
    let mut pairs = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let diff = ENV_CODES[i] ^ ENV_CODES[j];
                env_units += (0..4)
                    .filter(|q| diff & (1 << q) != 0)
                    .map(|q| quadrant_px[q] as f64)
                    .sum::<f64>();
                pairs += 1.0;
            }
        }
    }
    env_units /= pairs;
    // Distinct glyphs never overlap, so a class flip moves 4 pixels.
    let nuance_units = 4.0;
    spec.glyph_contrast * (spec.footprint_ratio * nuance_units / env_units).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn world() -> World {
        World::new(WorldSpec::default()).unwrap()
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let w = world();
        let a = w.render(3, 2, 99).unwrap();
        assert_eq!(a, w.render(3, 2, 99).unwrap());
        assert_ne!(a, w.render(3, 2, 100).unwrap());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_indices() {
        let w = world();
        assert!(w.render(8, 0, 0).is_err());
        assert!(w.render(0, 4, 0).is_err());
    }

    #[test]
    fn classes_are_separable_for_every_environment() {
        let w = world();
        for e in 0..4 {
            for c in 0..8 {
                for c2 in 0..8 {
                    if c != c2 {
                        assert_ne!(w.render(c, e, 5).unwrap(), w.render(c2, e, 5).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn environment_flip_moves_more_than_class_flip() {
        let w = world();
        for c in 0..8 {
            for c2 in (0..8).filter(|&v| v != c) {
                for e in 0..4 {
                    for e2 in (0..4).filter(|&v| v != e) {
                        let base = w.render(c, e, 17).unwrap();
                        let env = base.distance(&w.render(c, e2, 17).unwrap()).unwrap();
                        let nuance = base.distance(&w.render(c2, e, 17).unwrap()).unwrap();
                        assert!(env > nuance, "c={c} c2={c2} e={e} e2={e2}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_jitter_flips_stay_inside_footprints() {
        let spec = WorldSpec {
            jitter: 0.0,
            ..WorldSpec::default()
        };
        let w = World::new(spec).unwrap();
        let shape = w.shape();
        let a = w.render(1, 0, 0).unwrap();
        let b = w.render(6, 0, 0).unwrap();
        for y in 0..shape.height {
            for x in 0..shape.width {
                if a.get(0, y, x) != b.get(0, y, x) {
                    assert!(
                        w.glyph_pixels(1).contains(&(y, x)) || w.glyph_pixels(6).contains(&(y, x))
                    );
                }
            }
        }
        let c = w.render(1, 3, 0).unwrap();
        for y in 0..shape.height {
            for x in 0..shape.width {
                if a.get(0, y, x) != c.get(0, y, x) {
                    assert!(!in_plate(shape, y, x));
                }
            }
        }
    }

    #[test]
    fn footprint_ratio_sets_mean_squared_flip_ratio() {
        let spec = WorldSpec {
            jitter: 0.0,
            ..WorldSpec::default()
        };
        let w = World::new(spec).unwrap();
        let env = w.flip_distance_samples(Attribute::Env, 400, 3).unwrap();
        let nuance = w.flip_distance_samples(Attribute::Nuance, 400, 4).unwrap();
        let msq = |v: &[f64]| v.iter().map(|d| d * d).sum::<f64>() / v.len() as f64;
        // All four default environments are pairwise two quadrants apart.
        assert!((msq(&env) / msq(&nuance) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn task_counts_and_linkage() {
        let w = world();
        let task = w.sample_task(2, 5, 1.0, 3, TestMode::Anti, 7).unwrap();
        assert_eq!(task.train.len(), 10);
        assert_eq!(task.test.len(), 6);
        for s in &task.train {
            assert_eq!(s.env, s.class);
        }
        for s in &task.test {
            assert_ne!(s.env, task.linked_envs[s.class]);
            assert!(task.linked_envs.contains(&s.env));
        }
        assert_eq!(task.train_of_class(1).count(), 5);
    }

    #[test]
    fn uncorrelated_task_has_near_zero_mutual_information() {
        let w = world();
        let task = w
            .sample_task(4, 250, 0.0, 1, TestMode::Balanced, 3)
            .unwrap();
        let mut joint = [[0.0f64; 4]; 4];
        for s in &task.train {
            joint[s.class][s.env] += 1.0;
        }
        let total = task.train.len() as f64;
        let pc: Vec<f64> = joint
            .iter()
            .map(|r| r.iter().sum::<f64>() / total)
            .collect();
        let pe: Vec<f64> = (0..4)
            .map(|e| joint.iter().map(|r| r[e]).sum::<f64>() / total)
            .collect();
        let mut mi = 0.0;
        for c in 0..4 {
            for e in 0..4 {
                let p = joint[c][e] / total;
                if p > 0.0 {
                    mi += p * (p / (pc[c] * pe[e])).ln();
                }
            }
        }
        // Plug-in bias is about (|C|-1)(|E|-1)/(2n) = 0.009 nats here.
        assert!(mi < 0.03, "mi = {mi}");
    }

    #[test]
    fn task_sampling_is_reproducible_and_checked() {
        let w = world();
        let a = w.sample_task(3, 2, 0.7, 2, TestMode::Balanced, 11).unwrap();
        let b = w.sample_task(3, 2, 0.7, 2, TestMode::Balanced, 11).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert!(w.sample_task(9, 1, 1.0, 1, TestMode::Anti, 0).is_err());
        assert!(w.sample_task(1, 1, 1.0, 1, TestMode::Anti, 0).is_err());
        assert!(w.sample_task(2, 1, 1.5, 1, TestMode::Anti, 0).is_err());
    }

    #[test]
    fn flip_distances() {
        let w = world();
        let env = w.flip_distance_samples(Attribute::Env, 200, 1).unwrap();
        let nuance = w.flip_distance_samples(Attribute::Nuance, 200, 2).unwrap();
        let min_env = env.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_nuance = nuance.iter().cloned().fold(0.0, f64::max);
        assert!(min_env > max_nuance);
        assert!(fosd_check(&env, &nuance).unwrap());

        let single = World::new(WorldSpec {
            num_classes: 1,
            ..WorldSpec::default()
        })
        .unwrap();
        let zeros = single
            .flip_distance_samples(Attribute::Nuance, 20, 0)
            .unwrap();
        assert!(zeros.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn negative_control_reverses_the_premise() {
        let w = World::new(WorldSpec::negative_control()).unwrap();
        let env = w.flip_distance_samples(Attribute::Env, 100, 1).unwrap();
        let nuance = w.flip_distance_samples(Attribute::Nuance, 100, 2).unwrap();
        assert!(fosd_check(&nuance, &env).unwrap());
    }

    #[test]
    fn flip_pair_differs_only_in_designated_attribute() {
        let w = world();
        let mut rng = rng_for(5, &[]);
        for _ in 0..20 {
            let (a, b) = w.flip_pair(Attribute::Env, &mut rng).unwrap();
            let shape = w.shape();
            for y in 0..shape.height {
                for x in 0..shape.width {
                    if in_plate(shape, y, x) {
                        assert_eq!(a.get(0, y, x), b.get(0, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = |f: fn(&mut WorldSpec)| {
            let mut s = WorldSpec::default();
            f(&mut s);
            World::new(s).is_err()
        };
        assert!(bad(|s| s.shape = Shape::new(1, 6, 6)));
        assert!(bad(|s| s.num_classes = 9));
        assert!(bad(|s| s.num_envs = 0));
        assert!(bad(|s| s.footprint_ratio = 0.0));
        assert!(bad(|s| s.footprint_ratio = 1e4));
    }
}
