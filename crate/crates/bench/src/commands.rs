//! The five subcommands. Each takes a validated config and an output
//! directory, writes CSV/JSON/PGM artifacts there and copies the config in.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tif_core::attrloss::{fosd_check, LossCurve};
use tif_core::denoiser::io::{base_hash, read_base, write_adapter, write_base};
use tif_core::denoiser::{AdapterBank, DenoiserParams};
use tif_core::tif::{default_grid, timestep_weights, WeightScheme};
use tif_core::worldgen::{read_task_dir, write_pgm, write_task_dir, Attribute, FewShotTask};

use crate::config::ExperimentConfig;
use crate::error::{BenchError, BenchResult};
use crate::pipeline::{select_rank, Lab};
use crate::results::{summarize, write_rows, ResultRow, RESULTS_FILE, SUMMARY_FILE};

pub const BASE_FILE: &str = "base.tifb";
pub const BASE_HASH_FILE: &str = "base.sha256";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.csv";
pub const WORLD_DIR: &str = "world";
pub const WORLD_CHECK_FILE: &str = "world_check.json";
pub const RANK_FIDELITY_FILE: &str = "rank_fidelity.csv";
const CHECK_SAMPLES: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum CurveKind {
    Err,
    Weights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationAxis {
    Weights,
    Rank,
    Subset,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Weights => "weights",
            Self::Rank => "rank",
            Self::Subset => "subset",
        }
    }
}

#[derive(Debug, Serialize)]
pub struct WorldCheck {
    pub samples: usize,
    pub nuance_median_distance: f64,
    pub env_median_distance: f64,
    pub env_dominates_nuance: bool,
    pub tasks: Vec<TaskSummary>,
}

#[derive(Debug, Serialize)]
pub struct TaskSummary {
    pub task_id: String,
    pub train_images: usize,
    pub test_images: usize,
    pub manifest_rows: usize,
}

#[derive(Debug, Serialize)]
struct RankFidelityRow {
    rank: usize,
    glyph_fidelity: f64,
    accuracy_mean: f64,
    selected: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn create(path: &Path) -> BenchResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn task_dir(out: &Path, task_id: &str) -> PathBuf {
    out.join(WORLD_DIR).join(task_id)
}

/// Renders every (N, seed) task to PGM plus manifest and records the
/// distance-dominance check the world was validated with.
pub fn gen_world(cfg: &ExperimentConfig, out: &Path) -> BenchResult<WorldCheck> {
    let lab = Lab::new(cfg.clone())?;
    cfg.save_into(out)?;
    let seed = cfg.seeds[0];
    let nuance = lab
        .world
        .flip_distance_samples(Attribute::Nuance, CHECK_SAMPLES, seed)?;
    let env = lab
        .world
        .flip_distance_samples(Attribute::Env, CHECK_SAMPLES, seed)?;
    let dominates = fosd_check(&env, &nuance)?;
    let mut tasks = Vec::new();
    for &n in &cfg.task.shots {
        for &seed in &cfg.seeds {
            let task = lab.task(n, seed)?;
            let id = lab.task_id(n, seed);
            let rows = write_task_dir(&task, &task_dir(out, &id))?;
            tasks.push(TaskSummary {
                task_id: id,
                train_images: task.train.len(),
                test_images: task.test.len(),
                manifest_rows: rows.len(),
            });
        }
    }
    let check = WorldCheck {
        samples: CHECK_SAMPLES,
        nuance_median_distance: median(nuance),
        env_median_distance: median(env),
        env_dominates_nuance: dominates,
        tasks,
    };
    let text = serde_json::to_string_pretty(&check).expect("world check serializes");
    fs::write(out.join(WORLD_CHECK_FILE), text + "\n")?;
    Ok(check)
}

/// Trains the shared base and writes it with its SHA-256 and loss log.
pub fn pretrain(cfg: &ExperimentConfig, out: &Path) -> BenchResult<String> {
    let lab = Lab::new(cfg.clone())?;
    cfg.save_into(out)?;
    let (base, log) = lab.pretrain()?;
    let mut w = create(&out.join(BASE_FILE))?;
    write_base(&base, &mut w)?;
    drop(w);
    let hash = hex::encode(base_hash(&base)?);
    fs::write(out.join(BASE_HASH_FILE), format!("{hash}\n"))?;
    let mut csv = csv::Writer::from_path(out.join(PRETRAIN_LOG_FILE))?;
    csv.write_record(["step", "loss"])?;
    for (i, loss) in log.losses.iter().enumerate() {
        csv.write_record([(i + 1).to_string(), loss.to_string()])?;
    }
    csv.flush()?;
    Ok(hash)
}

fn load_base(cfg: &ExperimentConfig, out: &Path) -> BenchResult<DenoiserParams<f32>> {
    let path = out.join(BASE_FILE);
    let file = File::open(&path).map_err(|_| BenchError::MissingArtifact {
        path: path.clone(),
        hint: format!("run `tif-bench pretrain --out {}` first", out.display()),
    })?;
    let base = read_base(std::io::BufReader::new(file))?;
    if base.arch != cfg.denoiser.arch {
        return Err(BenchError::Config(format!(
            "{} was trained for a different denoiser.arch; rerun pretrain",
            path.display()
        )));
    }
    Ok(base)
}

/// The task as persisted by `gen-world`; metadata comes from regenerating it.
fn load_task(lab: &Lab, out: &Path, n: usize, seed: u64) -> BenchResult<FewShotTask> {
    let id = lab.task_id(n, seed);
    let dir = task_dir(out, &id);
    if !dir.join("manifest.csv").is_file() {
        return Err(BenchError::MissingArtifact {
            path: dir,
            hint: format!("run `tif-bench gen-world --out {}` first", out.display()),
        });
    }
    let mut task = lab.task(n, seed)?;
    let (train, test) = read_task_dir(&dir, lab.world.shape().channels)?;
    if train.len() != task.train.len() || test.len() != task.test.len() {
        return Err(BenchError::Config(format!(
            "{} does not match the config; rerun gen-world",
            dir.display()
        )));
    }
    task.train = train;
    task.test = test;
    Ok(task)
}

fn save_bank(bank: &AdapterBank<f32>, dir: &Path) -> BenchResult<()> {
    fs::create_dir_all(dir)?;
    for c in 0..bank.len() {
        let mut w = create(&dir.join(format!("class_{c}.tifa")))?;
        write_adapter(bank.get(c)?, &mut w)?;
    }
    Ok(())
}

fn write_results(dir: &Path, rows: &[ResultRow]) -> BenchResult<()> {
    fs::create_dir_all(dir)?;
    write_rows(&dir.join(RESULTS_FILE), rows)?;
    write_rows(&dir.join(SUMMARY_FILE), &summarize(rows))
}

/// Adapters, TiF under the configured scheme and both baselines on every task.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> BenchResult<Vec<ResultRow>> {
    let lab = Lab::new(cfg.clone())?;
    let base = load_base(cfg, out)?;
    let a = &cfg.adapter;
    let mut rows = Vec::new();
    for &n in &cfg.task.shots {
        for &seed in &cfg.seeds {
            let task = load_task(&lab, out, n, seed)?;
            let (tif, bank) = lab.evaluate(
                &base,
                &task,
                seed,
                a.rank,
                &a.subset,
                &[cfg.inference.scheme],
            )?;
            save_bank(&bank, &out.join("adapters").join(lab.task_id(n, seed)))?;
            rows.extend(tif);
            rows.extend(lab.baseline_rows(&task, seed)?);
        }
    }
    cfg.save_into(out)?;
    write_results(out, &rows)?;
    Ok(rows)
}

/// Error curves over the configured distances, or weight curves for each δ*.
pub fn curves(cfg: &ExperimentConfig, which: CurveKind, out: &Path) -> BenchResult<Vec<PathBuf>> {
    cfg.validate()?;
    let s = cfg.schedule.build()?;
    let dir = out.join("curves");
    cfg.save_into(out)?;
    fs::create_dir_all(&dir)?;
    let c = &cfg.curves;
    let mut written = Vec::new();
    match which {
        CurveKind::Err => {
            let steps = default_grid(&s, c.err_points)?;
            let curve = LossCurve::compute(&c.distances, &s, &steps)?;
            let path = dir.join("err.csv");
            curve.write_csv(create(&path)?)?;
            written.push(path);
        }
        CurveKind::Weights => {
            let grid = default_grid(&s, c.weight_points)?;
            for &d in &c.delta_stars {
                let w = timestep_weights(&s, d, &grid, WeightScheme::Tif)?;
                let path = dir.join(format!("weights_delta_{d}.csv"));
                w.write_csv(&s, create(&path)?)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn write_samples(dir: &Path, seed: u64, samples: &[Vec<tif_core::ImageTensor>]) -> BenchResult<()> {
    fs::create_dir_all(dir)?;
    for (c, set) in samples.iter().enumerate() {
        for (i, img) in set.iter().enumerate() {
            write_pgm(
                img,
                create(&dir.join(format!("s{seed}_class{c}_{i:02}.pgm")))?,
            )?;
        }
    }
    Ok(())
}

/// Sweeps one axis with everything else fixed; one row per cell and seed.
pub fn ablate(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    out: &Path,
) -> BenchResult<Vec<ResultRow>> {
    let lab = Lab::new(cfg.clone())?;
    let base = load_base(cfg, out)?;
    let ab = &cfg.ablation;
    let a = &cfg.adapter;
    let dir = out.join("ablate").join(axis.name());
    let scheme = [cfg.inference.scheme];
    let mut rows = Vec::new();
    match axis {
        AblationAxis::Weights => {
            for &n in &cfg.task.shots {
                for &seed in &cfg.seeds {
                    let task = load_task(&lab, out, n, seed)?;
                    rows.extend(
                        lab.evaluate(&base, &task, seed, a.rank, &a.subset, &ab.schemes)?
                            .0,
                    );
                }
            }
        }
        AblationAxis::Subset => {
            for subset in &ab.subsets {
                subset.resolve(&cfg.denoiser.arch)?;
                for &n in &cfg.task.shots {
                    for &seed in &cfg.seeds {
                        let task = load_task(&lab, out, n, seed)?;
                        rows.extend(lab.evaluate(&base, &task, seed, a.rank, subset, &scheme)?.0);
                    }
                }
            }
        }
        AblationAxis::Rank => {
            let mut fidelity = Vec::new();
            let mut accuracy = Vec::new();
            for &rank in &ab.ranks {
                let (mut hits, mut count, mut acc) = (0.0, 0usize, Vec::new());
                for &n in &cfg.task.shots {
                    for &seed in &cfg.seeds {
                        let task = load_task(&lab, out, n, seed)?;
                        let (r, bank) =
                            lab.evaluate(&base, &task, seed, rank, &a.subset, &scheme)?;
                        let samples = lab.class_samples(&base, &bank, seed)?;
                        write_samples(
                            &dir.join("samples").join(format!("rank_{rank}")),
                            seed,
                            &samples,
                        )?;
                        hits += lab.glyph_fidelity(&task, &samples);
                        count += 1;
                        acc.extend(r.iter().map(|r| r.accuracy));
                        rows.extend(r);
                    }
                }
                fidelity.push((rank, hits / count as f64));
                accuracy.push(acc.iter().sum::<f64>() / acc.len() as f64);
            }
            let chosen = select_rank(&fidelity, ab.fidelity_slack);
            let table: Vec<RankFidelityRow> = fidelity
                .iter()
                .zip(&accuracy)
                .map(
                    |(&(rank, glyph_fidelity), &accuracy_mean)| RankFidelityRow {
                        rank,
                        glyph_fidelity,
                        accuracy_mean,
                        selected: chosen == Some(rank),
                    },
                )
                .collect();
            fs::create_dir_all(&dir)?;
            write_rows(&dir.join(RANK_FIDELITY_FILE), &table)?;
        }
    }
    cfg.save_into(&dir)?;
    write_results(&dir, &rows)?;
    Ok(rows)
}
