//! Experiment building blocks shared by the CLI commands and the
//! acceptance suite.

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use tif_core::baseline::{classify_baseline, fit_baseline, BaselineMode};
use tif_core::denoiser::{
    inject_lora, pretrain_base, sample_images, train_adapter, AdapterBank, DenoiserParams,
    LayerSubset, TrainLog,
};
use tif_core::metrics::{accuracy, macro_f1};
use tif_core::rng::{derive_seed, stream};
use tif_core::tif::{
    class_losses, classify, default_grid, estimate_delta_star, timestep_weights, TifScore,
    WeightScheme,
};
use tif_core::worldgen::{FewShotTask, TestMode, World};
use tif_core::{ImageTensor, Schedule};

use crate::config::ExperimentConfig;
use crate::error::BenchResult;
use crate::results::ResultRow;

pub struct Lab {
    pub cfg: ExperimentConfig,
    pub schedule: Schedule,
    pub world: World,
}

/// Per-image loss tables for one trained adapter bank.
pub struct Scored {
    pub delta_star: f64,
    pub grid: Vec<usize>,
    /// One classes × grid table per test image.
    pub losses: Vec<Array2<f64>>,
    pub seconds: f64,
}

pub fn test_mode_name(mode: TestMode) -> &'static str {
    match mode {
        TestMode::Anti => "anti",
        TestMode::Balanced => "balanced",
    }
}

impl Lab {
    pub fn new(cfg: ExperimentConfig) -> BenchResult<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule.build()?;
        let world = World::new(cfg.world.clone())?;
        Ok(Self {
            cfg,
            schedule,
            world,
        })
    }

    pub fn task_id(&self, n: usize, seed: u64) -> String {
        let t = &self.cfg.task;
        format!(
            "k{}_n{}_rho{}_{}_s{}",
            t.k,
            n,
            t.rho,
            test_mode_name(t.test_mode),
            seed
        )
    }

    pub fn task(&self, n: usize, seed: u64) -> BenchResult<FewShotTask> {
        let t = &self.cfg.task;
        Ok(self
            .world
            .sample_task(t.k, n, t.rho, t.test_size, t.test_mode, seed)?)
    }

    pub fn pretrain(&self) -> BenchResult<(DenoiserParams<f32>, TrainLog)> {
        let d = &self.cfg.denoiser;
        let pool = self.world.pool(d.pool_per_combo, d.pretrain_seed)?;
        let images: Vec<&ImageTensor> = pool.iter().map(|s| &s.image).collect();
        Ok(pretrain_base(
            &d.arch,
            &images,
            &self.schedule,
            &d.pretrain,
            d.pretrain_seed,
        )?)
    }

    /// One adapter per task class, trained independently on that class's shots.
    pub fn train_bank(
        &self,
        base: &DenoiserParams<f32>,
        task: &FewShotTask,
        rank: usize,
        subset: &LayerSubset,
        seed: u64,
    ) -> BenchResult<AdapterBank<f32>> {
        let a = &self.cfg.adapter;
        let adapters = (0..task.k)
            .into_par_iter()
            .map(|c| {
                let images: Vec<&ImageTensor> = task.train_of_class(c).map(|s| &s.image).collect();
                let class_seed = derive_seed(seed, &[stream::ADAPTER, c as u64, rank as u64]);
                let init = inject_lora(base, rank, subset, a.scale, class_seed)?;
                Ok(train_adapter(base, &init, &images, &self.schedule, &a.optim, class_seed)?.0)
            })
            .collect::<BenchResult<Vec<_>>>()?;
        Ok(AdapterBank::new(adapters)?)
    }

    /// Loss tables for every test image; the noise for image i is shared by
    /// every class and every arm of an ablation that uses the same seed.
    pub fn score(
        &self,
        base: &DenoiserParams<f32>,
        bank: &AdapterBank<f32>,
        task: &FewShotTask,
        seed: u64,
    ) -> BenchResult<Scored> {
        let start = Instant::now();
        let inf = &self.cfg.inference;
        let grid = default_grid(&self.schedule, inf.grid_size)?;
        let delta_star = estimate_delta_star(&task.train)?;
        let losses = task
            .test
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let image_seed = derive_seed(seed, &[stream::SCORE, i as u64]);
                Ok(class_losses(
                    base,
                    bank,
                    &x.image,
                    &self.schedule,
                    &grid,
                    inf.n_noise,
                    image_seed,
                )?)
            })
            .collect::<BenchResult<Vec<_>>>()?;
        Ok(Scored {
            delta_star,
            grid,
            losses,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn row(
        &self,
        task: &FewShotTask,
        seed: u64,
        method: &str,
        pred: &[usize],
        seconds: f64,
    ) -> BenchResult<ResultRow> {
        let truth: Vec<usize> = task.test.iter().map(|s| s.class).collect();
        Ok(ResultRow {
            task_id: self.task_id(task.n, seed),
            method: method.to_string(),
            scheme: String::new(),
            rank: None,
            subset: String::new(),
            k: task.k,
            n: task.n,
            rho: task.rho,
            test_mode: test_mode_name(task.test_mode).to_string(),
            seed,
            accuracy: accuracy(pred, &truth)?,
            macro_f1: macro_f1(pred, &truth)?,
            wall_time_seconds: seconds,
        })
    }

    /// Predictions under one weight scheme, reusing the loss tables.
    pub fn tif_predictions(
        &self,
        scored: &Scored,
        scheme: WeightScheme,
    ) -> BenchResult<Vec<usize>> {
        let w = timestep_weights(&self.schedule, scored.delta_star, &scored.grid, scheme)?;
        scored
            .losses
            .iter()
            .map(|l| Ok(classify(&TifScore::from_losses(l.clone(), &w)?)))
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn tif_rows(
        &self,
        task: &FewShotTask,
        seed: u64,
        scored: &Scored,
        schemes: &[WeightScheme],
        rank: usize,
        subset: &LayerSubset,
        train_seconds: f64,
    ) -> BenchResult<Vec<ResultRow>> {
        schemes
            .iter()
            .map(|&scheme| {
                let pred = self.tif_predictions(scored, scheme)?;
                let mut row = self.row(task, seed, "tif", &pred, train_seconds + scored.seconds)?;
                row.scheme = scheme.to_string();
                row.rank = Some(rank);
                row.subset = subset.label();
                Ok(row)
            })
            .collect()
    }

    pub fn baseline_rows(&self, task: &FewShotTask, seed: u64) -> BenchResult<Vec<ResultRow>> {
        [BaselineMode::Prototype, BaselineMode::Linear]
            .into_iter()
            .map(|mode| {
                let start = Instant::now();
                let model = fit_baseline(task, mode, &self.cfg.baseline)?;
                let pred = task
                    .test
                    .iter()
                    .map(|s| classify_baseline(&model, &s.image))
                    .collect::<Result<Vec<_>, _>>()?;
                self.row(
                    task,
                    seed,
                    mode.method_name(),
                    &pred,
                    start.elapsed().as_secs_f64(),
                )
            })
            .collect()
    }

    /// Trains a bank, scores the test split and reports one row per scheme.
    pub fn evaluate(
        &self,
        base: &DenoiserParams<f32>,
        task: &FewShotTask,
        seed: u64,
        rank: usize,
        subset: &LayerSubset,
        schemes: &[WeightScheme],
    ) -> BenchResult<(Vec<ResultRow>, AdapterBank<f32>)> {
        let start = Instant::now();
        let bank = self.train_bank(base, task, rank, subset, seed)?;
        let train_seconds = start.elapsed().as_secs_f64();
        let scored = self.score(base, &bank, task, seed)?;
        let rows = self.tif_rows(task, seed, &scored, schemes, rank, subset, train_seconds)?;
        Ok((rows, bank))
    }

    /// `samples_per_class` generations from each class adapter.
    pub fn class_samples(
        &self,
        base: &DenoiserParams<f32>,
        bank: &AdapterBank<f32>,
        seed: u64,
    ) -> BenchResult<Vec<Vec<ImageTensor>>> {
        let ab = &self.cfg.ablation;
        (0..bank.len())
            .into_par_iter()
            .map(|c| {
                Ok(sample_images(
                    base,
                    Some(bank.get(c)?),
                    &self.schedule,
                    self.world.shape(),
                    ab.sample_steps,
                    ab.samples_per_class,
                    derive_seed(seed, &[stream::SAMPLE, c as u64]),
                )?)
            })
            .collect()
    }

    /// Glyph a generated image shows: the glyph whose two stroke pixels are
    /// brightest on average in the first channel.
    pub fn read_glyph(&self, img: &ImageTensor) -> usize {
        let brightness: Vec<f64> = (0..self.world.spec().num_classes)
            .map(|g| {
                self.world
                    .glyph_pixels(g)
                    .iter()
                    .map(|&(y, x)| f64::from(img.get(0, y, x)))
                    .sum::<f64>()
            })
            .collect();
        let mut best = 0;
        for (g, &b) in brightness.iter().enumerate() {
            if b > brightness[best] {
                best = g;
            }
        }
        best
    }

    /// Fraction of samples whose glyph is the one their class renders.
    pub fn glyph_fidelity(&self, task: &FewShotTask, samples: &[Vec<ImageTensor>]) -> f64 {
        let mut hits = 0;
        let mut total = 0;
        for (c, set) in samples.iter().enumerate() {
            for img in set {
                hits += usize::from(self.read_glyph(img) == task.class_glyphs[c]);
                total += 1;
            }
        }
        hits as f64 / total.max(1) as f64
    }
}

/// The visual rank criterion: the smallest rank whose glyph fidelity is
/// within `slack` of the best fidelity in the sweep.
pub fn select_rank(fidelity: &[(usize, f64)], slack: f64) -> Option<usize> {
    let best = fidelity
        .iter()
        .map(|&(_, f)| f)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut ok: Vec<usize> = fidelity
        .iter()
        .filter(|&&(_, f)| f >= best - slack)
        .map(|&(r, _)| r)
        .collect();
    ok.sort_unstable();
    ok.first().copied()
}
