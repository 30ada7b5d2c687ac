use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tif_bench::config::ExperimentConfig;
use tif_bench::results::read_rows;
use tif_core::denoiser::{ArchSpec, LayerSubset};
use tif_core::tif::WeightScheme;
use tif_core::worldgen::WorldSpec;
use tif_core::Shape;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.world = WorldSpec {
        shape: Shape::new(1, 8, 8),
        num_classes: 3,
        num_envs: 3,
        ..WorldSpec::default()
    };
    cfg.denoiser.arch = ArchSpec {
        image_len: 64,
        time_dim: 8,
        cond_dim: 4,
        hidden: vec![24, 24],
    };
    cfg.denoiser.pretrain.steps = 60;
    cfg.denoiser.pool_per_combo = 2;
    cfg.adapter.optim.steps = 10;
    cfg.adapter.rank = 2;
    cfg.task.k = 3;
    cfg.task.shots = vec![2];
    cfg.task.test_size = 3;
    cfg.inference.grid_size = 4;
    cfg.inference.n_noise = 2;
    cfg.ablation.ranks = vec![1, 2];
    cfg.ablation.subsets = vec![
        LayerSubset::new(&["last"]),
        LayerSubset::new(&["last", "w1"]),
    ];
    cfg.ablation.samples_per_class = 2;
    cfg.ablation.sample_steps = 5;
    cfg.curves.err_points = 10;
    cfg.curves.weight_points = 12;
    cfg.curves.delta_stars = vec![0.1, 5.0];
    cfg.seeds = vec![0, 1];
    cfg
}

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tif-bench"))
        .args(args)
        .env("TIF_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bench(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    serde_json::from_str(lines[0]).expect("stderr is one JSON object")
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("experiment.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

fn pipeline(dir: &Path, cfg: &ExperimentConfig) -> String {
    let config = write_config(dir, cfg);
    let out = dir.join("out");
    let out = out.to_str().unwrap().to_string();
    ok(&["gen-world", "--config", &config, "--out", &out]);
    ok(&["pretrain", "--config", &config, "--out", &out]);
    ok(&["run", "--config", &config, "--out", &out]);
    out
}

#[test]
fn full_pipeline_writes_documented_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let out = pipeline(tmp.path(), &cfg);
    let out_path = Path::new(&out);
    let config = tmp.path().join("experiment.json");
    let config = config.to_str().unwrap();

    let manifest =
        fs::read_to_string(out_path.join("world/k3_n2_rho1_anti_s0/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count() - 1, 3 * 2 + 3 * 3);
    let check: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_path.join("world_check.json")).unwrap())
            .unwrap();
    assert_eq!(check["env_dominates_nuance"], true);
    assert!(out_path.join("base.tifb").is_file());
    assert_eq!(
        fs::read_to_string(out_path.join("base.sha256"))
            .unwrap()
            .trim()
            .len(),
        64
    );
    assert!(out_path
        .join("adapters/k3_n2_rho1_anti_s1/class_2.tifa")
        .is_file());

    let saved = ExperimentConfig::load(&out_path.join("config.json")).unwrap();
    assert_eq!(saved, cfg);

    let rows = read_rows(&out_path.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 3);
    for method in ["tif", "baseline_prototype", "baseline_linear"] {
        assert_eq!(rows.iter().filter(|r| r.method == method).count(), 2);
    }
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.accuracy) && (0.0..=1.0).contains(&r.macro_f1));
        assert!(r.wall_time_seconds > 0.0);
    }
    let summary = fs::read_to_string(out_path.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,scheme,rank,subset,k,n,rho,test_mode,seeds,accuracy_mean,"));

    ok(&[
        "curves", "--config", config, "--out", &out, "--which", "err",
    ]);
    let err = fs::read_to_string(out_path.join("curves/err.csv")).unwrap();
    let cells: Vec<Vec<f64>> = err
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(cells.len(), cfg.curves.distances.len() * 10);
    for pair in cells.windows(2).filter(|w| w[0][0] == w[1][0]) {
        assert!(pair[1][2] > pair[0][2]);
    }
    ok(&[
        "curves", "--config", config, "--out", &out, "--which", "weights",
    ]);
    let weights = fs::read_to_string(out_path.join("curves/weights_delta_5.csv")).unwrap();
    assert_eq!(weights.lines().count(), 1 + 12);

    ok(&[
        "ablate", "--config", config, "--out", &out, "--axis", "weights",
    ]);
    let rows = read_rows(&out_path.join("ablate/weights/results.csv")).unwrap();
    let schemes: Vec<String> = rows
        .iter()
        .filter(|r| r.seed == 0)
        .map(|r| r.scheme.clone())
        .collect();
    assert_eq!(
        schemes,
        ["tif", "uniform", "snr_gamma(1)", "snr_gamma(0.1)"]
    );

    ok(&[
        "ablate", "--config", config, "--out", &out, "--axis", "subset",
    ]);
    let rows = read_rows(&out_path.join("ablate/subset/results.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2);
    assert!(rows.iter().any(|r| r.subset == "last+w1"));

    ok(&[
        "ablate", "--config", config, "--out", &out, "--axis", "rank",
    ]);
    for rank in [1, 2] {
        let dir = out_path.join(format!("ablate/rank/samples/rank_{rank}"));
        let pgms = fs::read_dir(&dir).unwrap().count();
        assert_eq!(pgms, 2 * 3 * 2);
    }
    let fidelity = fs::read_to_string(out_path.join("ablate/rank/rank_fidelity.csv")).unwrap();
    assert!(fidelity.starts_with("rank,glyph_fidelity,accuracy_mean,selected\n"));
    assert_eq!(fidelity.matches(",true").count(), 1);
    assert!(out_path.join("ablate/rank/config.json").is_file());
}

#[test]
fn reruns_are_reproducible() {
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (out_a, out_b) = (pipeline(a.path(), &cfg), pipeline(b.path(), &cfg));
    let (out_a, out_b) = (Path::new(&out_a), Path::new(&out_b));
    for file in [
        "base.sha256",
        "world/k3_n2_rho1_anti_s1/test_0004.pgm",
        "world_check.json",
    ] {
        assert_eq!(
            fs::read(out_a.join(file)).unwrap(),
            fs::read(out_b.join(file)).unwrap(),
            "{file}"
        );
    }
    let strip = |rows: Vec<tif_bench::results::ResultRow>| {
        rows.into_iter()
            .map(|mut r| {
                r.wall_time_seconds = 0.0;
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(
        strip(read_rows(&out_a.join("results.csv")).unwrap()),
        strip(read_rows(&out_b.join("results.csv")).unwrap())
    );
}

#[test]
fn failures_print_one_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();

    let e = error_line(&bench(&["run", "--config", &config, "--out", out]));
    assert_eq!(e["error"], "missing_artifact");
    assert!(e["message"].as_str().unwrap().contains("pretrain"));

    ok(&["pretrain", "--config", &config, "--out", out]);
    let e = error_line(&bench(&["run", "--config", &config, "--out", out]));
    assert_eq!(e["error"], "missing_artifact");
    assert!(e["message"].as_str().unwrap().contains("gen-world"));

    let e = error_line(&bench(&[
        "ablate", "--config", &config, "--out", out, "--axis", "depth",
    ]));
    assert_eq!(e["error"], "usage");

    let e = error_line(&bench(&["run", "--config", &config]));
    assert_eq!(e["error"], "usage");

    let mut bad = cfg.clone();
    bad.inference.scheme = WeightScheme::SnrGamma(1.0);
    bad.schema_version = 99;
    let bad_path = tmp.path().join("bad.json");
    fs::write(&bad_path, bad.to_json()).unwrap();
    let e = error_line(&bench(&[
        "curves",
        "--config",
        bad_path.to_str().unwrap(),
        "--out",
        out,
        "--which",
        "err",
    ]));
    assert_eq!(e["error"], "config");

    let e = error_line(
        &Command::new(env!("CARGO_BIN_EXE_tif-bench"))
            .args([
                "curves", "--config", &config, "--out", out, "--which", "err",
            ])
            .env("TIF_THREADS", "zero")
            .output()
            .unwrap(),
    );
    assert_eq!(e["error"], "usage");
}

#[test]
fn output_dir_from_config_is_used_without_out_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.output_dir = Some(tmp.path().join("from_config"));
    let config = write_config(tmp.path(), &cfg);
    ok(&["curves", "--config", &config, "--which", "weights"]);
    assert!(tmp
        .path()
        .join("from_config/curves/weights_delta_0.1.csv")
        .is_file());
    assert!(tmp.path().join("from_config/config.json").is_file());
}
