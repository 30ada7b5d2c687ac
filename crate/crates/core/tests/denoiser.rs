use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tif_core::denoiser::io::{adapter_from_bytes, adapter_to_bytes, base_hash};
use tif_core::denoiser::{
    eps_mse, eps_mse_on, forward, inject_lora, loss_and_grads, predict_x0, pretrain_base,
    recon_loss, sample_images, train_adapter, ArchSpec, DenoiserParams, GradTarget, LayerSubset,
    LoraAdapter, OptimConfig,
};
use tif_core::schedule::make_linear_schedule;
use tif_core::worldgen::{World, WorldSpec};
use tif_core::{ImageTensor, Shape};

fn tiny_arch() -> ArchSpec {
    ArchSpec {
        image_len: 6,
        time_dim: 4,
        cond_dim: 3,
        hidden: vec![7, 5],
    }
}

fn batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.5..1.5))
}

fn loss(
    p: &DenoiserParams<f64>,
    a: Option<&LoraAdapter<f64>>,
    xt: &Array2<f64>,
    ts: &[usize],
    eps: &Array2<f64>,
) -> f64 {
    let out = forward(p, a, xt.view(), ts).unwrap().output;
    eps_mse(&out, eps.view()).0
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let err = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
    assert!(
        err < 1e-4,
        "{what}: analytic {analytic} vs numeric {numeric}"
    );
}

// Perturbs one scalar through `slot`, returning the central difference.
fn central<S: FnMut(f64) -> f64>(mut eval_at_offset: S) -> f64 {
    let h = 1e-6;
    (eval_at_offset(h) - eval_at_offset(-h)) / (2.0 * h)
}

#[test]
fn base_gradients_match_finite_differences() {
    let arch = tiny_arch();
    for instance in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(instance);
        let mut p = DenoiserParams::<f64>::init(&arch, instance).unwrap();
        for l in &mut p.layers {
            l.bias.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        }
        let xt = batch(&mut rng, 3, arch.image_len);
        let eps = batch(&mut rng, 3, arch.image_len);
        let ts = [1, 400, 1000];
        let (_, g) =
            loss_and_grads(&p, None, xt.view(), &ts, eps.view(), GradTarget::Base).unwrap();

        for (li, lg) in g.layers.iter().enumerate() {
            let (r, c) = lg.weight.dim();
            let (i, j) = (rng.gen_range(0..r), rng.gen_range(0..c));
            let num = central(|h| {
                let mut q = p.clone();
                q.layers[li].weight[[i, j]] += h;
                loss(&q, None, &xt, &ts, &eps)
            });
            assert_close(lg.weight[[i, j]], num, &format!("W{li}[{i},{j}]"));
            let num = central(|h| {
                let mut q = p.clone();
                q.layers[li].bias[i] += h;
                loss(&q, None, &xt, &ts, &eps)
            });
            assert_close(lg.bias[i], num, &format!("b{li}[{i}]"));
        }
        let gy = g.cond_embed.as_ref().unwrap();
        for k in 0..arch.cond_dim {
            let num = central(|h| {
                let mut q = p.clone();
                q.cond_embed[k] += h;
                loss(&q, None, &xt, &ts, &eps)
            });
            assert_close(gy[k], num, &format!("y[{k}]"));
        }
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let arch = tiny_arch();
    let subset = LayerSubset::new(&["cond", "w0", "w1", "last"]);
    for instance in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + instance);
        let p = DenoiserParams::<f64>::init(&arch, instance).unwrap();
        let mut a = inject_lora(&p, 2, &subset, 0.7, instance).unwrap();
        // B = 0 would hide errors in the A gradient.
        for l in &mut a.layers {
            l.b.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let xt = batch(&mut rng, 4, arch.image_len);
        let eps = batch(&mut rng, 4, arch.image_len);
        let ts = [3, 50, 700, 999];
        let (_, g) = loss_and_grads(
            &p,
            Some(&a),
            xt.view(),
            &ts,
            eps.view(),
            GradTarget::Adapter,
        )
        .unwrap();
        assert!(g.layers.is_empty() && g.cond_embed.is_none());
        assert_eq!(g.lora.len(), a.layers.len());

        for (k, lg) in g.lora.iter().enumerate() {
            assert_eq!(lg.id, a.layers[k].id);
            for _ in 0..2 {
                let (i, j) = (
                    rng.gen_range(0..lg.a.nrows()),
                    rng.gen_range(0..lg.a.ncols()),
                );
                let num = central(|h| {
                    let mut q = a.clone();
                    q.layers[k].a[[i, j]] += h;
                    loss(&p, Some(&q), &xt, &ts, &eps)
                });
                assert_close(lg.a[[i, j]], num, &format!("A{k}[{i},{j}]"));
                let (i, j) = (
                    rng.gen_range(0..lg.b.nrows()),
                    rng.gen_range(0..lg.b.ncols()),
                );
                let num = central(|h| {
                    let mut q = a.clone();
                    q.layers[k].b[[i, j]] += h;
                    loss(&p, Some(&q), &xt, &ts, &eps)
                });
                assert_close(lg.b[[i, j]], num, &format!("B{k}[{i},{j}]"));
            }
        }
    }
}

#[test]
fn fresh_adapter_leaves_outputs_unchanged() {
    let arch = ArchSpec::default();
    let p = DenoiserParams::<f32>::init(&arch, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = Array2::from_shape_fn((5, arch.image_len), |_| rng.gen_range(-2.0f32..2.0));
    let ts = [1, 10, 100, 500, 1000];
    let base = forward(&p, None, xt.view(), &ts).unwrap().output;
    for depth in 1..=3 {
        let a = inject_lora(&p, 4, &LayerSubset::preset(&arch, depth), 1.0, 8).unwrap();
        let adapted = forward(&p, Some(&a), xt.view(), &ts).unwrap().output;
        assert_eq!(adapted, base);
    }
}

// Rank by Gaussian elimination with partial pivoting.
fn numerical_rank(m: &Array2<f64>, tol: f64) -> usize {
    let mut a = m.clone();
    let (rows, cols) = a.dim();
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let piv = (rank..rows)
            .max_by(|&x, &y| a[[x, c]].abs().total_cmp(&a[[y, c]].abs()))
            .unwrap();
        if a[[piv, c]].abs() < tol {
            continue;
        }
        for j in 0..cols {
            a.swap([piv, j], [rank, j]);
        }
        for r in rank + 1..rows {
            let f = a[[r, c]] / a[[rank, c]];
            for j in 0..cols {
                a[[r, j]] -= f * a[[rank, j]];
            }
        }
        rank += 1;
    }
    rank
}

fn stripes_pool() -> Vec<ImageTensor> {
    let world = World::new(WorldSpec {
        shape: Shape::new(1, 8, 8),
        num_classes: 2,
        num_envs: 2,
        ..WorldSpec::default()
    })
    .unwrap();
    world
        .heldout_pool(4, 1)
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect()
}

fn small_world_arch() -> ArchSpec {
    ArchSpec {
        image_len: 64,
        time_dim: 8,
        cond_dim: 4,
        hidden: vec![32, 32],
    }
}

#[test]
fn adapter_training_keeps_base_frozen_and_delta_low_rank() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let arch = small_world_arch();
    let pool = stripes_pool();
    let refs: Vec<&ImageTensor> = pool.iter().collect();
    let p = DenoiserParams::<f32>::init(&arch, 2).unwrap();
    let before = base_hash(&p).unwrap();
    let snapshot = p.clone();
    let opt = OptimConfig {
        lr: 0.05,
        momentum: 0.9,
        steps: 40,
        batch_size: 16,
        max_grad_norm: Some(5.0),
    };
    let rank = 2;
    let a0 = inject_lora(&p, rank, &LayerSubset::preset(&arch, 3), 1.0, 3).unwrap();
    let (a, log) = train_adapter(&p, &a0, &refs[..3], &s, &opt, 7).unwrap();
    assert_eq!(log.losses.len(), 40);
    assert_eq!(base_hash(&p).unwrap(), before);
    assert_eq!(p, snapshot);
    for l in &a.layers {
        let delta = l.delta(a.scale).mapv(f64::from);
        assert!(delta.iter().any(|v| v.abs() > 1e-6), "adapter did not move");
        assert!(numerical_rank(&delta, 1e-6) <= rank);
    }
}

#[test]
fn pretraining_reduces_loss_and_is_deterministic() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let arch = small_world_arch();
    let pool = stripes_pool();
    let refs: Vec<&ImageTensor> = pool.iter().collect();
    let opt = OptimConfig {
        lr: 0.1,
        momentum: 0.9,
        steps: 300,
        batch_size: 32,
        max_grad_norm: Some(1.0),
    };
    let (p1, log) = pretrain_base::<f32>(&arch, &refs, &s, &opt, 11).unwrap();
    assert!(
        log.mean_last(50) < 0.8 * log.mean_first(50),
        "{} vs {}",
        log.mean_last(50),
        log.mean_first(50)
    );
    let (p2, _) = pretrain_base::<f32>(&arch, &refs, &s, &opt, 11).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn diverging_training_is_reported() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let arch = small_world_arch();
    let pool = stripes_pool();
    let refs: Vec<&ImageTensor> = pool.iter().collect();
    let opt = OptimConfig {
        lr: 1e6,
        momentum: 0.9,
        steps: 200,
        batch_size: 8,
        max_grad_norm: None,
    };
    let err = pretrain_base::<f32>(&arch, &refs, &s, &opt, 0).unwrap_err();
    assert!(matches!(err, tif_core::TifError::Diverged { .. }), "{err}");
}

#[test]
fn persisted_adapter_reproduces_scores() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let arch = small_world_arch();
    let pool = stripes_pool();
    let refs: Vec<&ImageTensor> = pool.iter().collect();
    let p = DenoiserParams::<f32>::init(&arch, 2).unwrap();
    let opt = OptimConfig {
        lr: 0.05,
        momentum: 0.9,
        steps: 20,
        batch_size: 8,
        max_grad_norm: Some(5.0),
    };
    let a0 = inject_lora(&p, 3, &LayerSubset::preset(&arch, 2), 0.5, 3).unwrap();
    let (a, _) = train_adapter(&p, &a0, &refs, &s, &opt, 1).unwrap();
    let back = adapter_from_bytes(&adapter_to_bytes(&a).unwrap(), 0.5).unwrap();
    for t in [1, 250, 1000] {
        let l1 = recon_loss(&p, Some(&a), &pool[0], t, &s, 8, 5).unwrap();
        let l2 = recon_loss(&p, Some(&back), &pool[0], t, &s, 8, 5).unwrap();
        assert_eq!(l1, l2);
    }
}

#[test]
fn sampling_is_bounded_and_seeded() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let arch = small_world_arch();
    let p = DenoiserParams::<f32>::init(&arch, 2).unwrap();
    let shape = Shape::new(1, 8, 8);
    let a = sample_images(&p, None, &s, shape, 20, 3, 9).unwrap();
    let b = sample_images(&p, None, &s, shape, 20, 3, 9).unwrap();
    assert_eq!(a, b);
    assert!(a
        .iter()
        .flat_map(|i| i.data())
        .all(|v| (-1.0..=1.0).contains(v)));
    assert!(sample_images(&p, None, &s, shape, 0, 1, 9).is_err());
    assert!(sample_images(&p, None, &s, Shape::new(1, 3, 3), 5, 1, 9).is_err());
}

#[test]
fn pretrained_base_denoises_held_out_images() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let world = World::new(WorldSpec::default()).unwrap();
    let arch = ArchSpec {
        image_len: world.shape().len(),
        ..ArchSpec::default()
    };
    let pool: Vec<ImageTensor> = world
        .pool(2, 1)
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect();
    let refs: Vec<&ImageTensor> = pool.iter().collect();
    let opt = OptimConfig {
        lr: 0.1,
        momentum: 0.9,
        steps: 1500,
        batch_size: 64,
        max_grad_norm: Some(1.0),
    };
    let (trained, _) = pretrain_base::<f32>(&arch, &refs, &s, &opt, 1).unwrap();
    let untrained = DenoiserParams::<f32>::init(&arch, 1).unwrap();
    let held: Vec<ImageTensor> = world
        .heldout_pool(1, 2)
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x0_mse = 0.0;
    for x0 in &held {
        let t = 10;
        let draws = (0..x0.data().len())
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let noise = ImageTensor::new(x0.shape(), draws).unwrap();
        let xt = s.forward_sample(x0, t, &noise).unwrap();
        let x0_hat = predict_x0(&trained, None, &xt, t, &s).unwrap();
        x0_mse += x0.sq_distance(&x0_hat).unwrap() / x0.data().len() as f64;
    }
    x0_mse /= held.len() as f64;
    assert!(x0_mse < 0.05, "x̂0 MSE per element {x0_mse}");
    let held_refs: Vec<&ImageTensor> = held.iter().collect();
    let eps_trained = eps_mse_on(&trained, None, &held_refs, &s, 4, 7).unwrap();
    let eps_untrained = eps_mse_on(&untrained, None, &held_refs, &s, 4, 7).unwrap();
    assert!(
        eps_trained < 0.5 * eps_untrained,
        "{eps_trained} vs {eps_untrained}"
    );
}
