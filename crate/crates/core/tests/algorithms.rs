use noisyfed::data::{generate_regression, partition_iid, sample_batch, SyntheticRegressionSpec};
use noisyfed::model::{full_gradient, gradient_indexed, loss, loss_indexed, smoothness_constant};
use noisyfed::rng::{self, Purpose};
use noisyfed::{
    client_sample, kstar_distribution, local_update, run_noisy_fedavg, run_noisy_fedavg_with, run_noisy_sgd,
    sample_kstar, ClientPartition, Dataset, Direction, Execution, FedAvgConfig, LabeledExample, LossModel,
    NoiseSchedule, ParamVector, SgdConfig, UplinkMessage,
};

fn regression(m: usize, d: usize, seed: u64) -> (LossModel, Dataset) {
    let spec = SyntheticRegressionSpec {
        m,
        d,
        theta_star: None,
        label_noise_variance: 0.05,
        normalize_hessian: true,
    };
    let ds = generate_regression(&spec, seed).unwrap();
    let model = LossModel::mse_linear(d).unwrap();
    let l = smoothness_constant(&model, &ds).unwrap();
    (model.with_smoothness(l), ds)
}

fn quiet(clients: usize, participants: usize, local_steps: usize, rounds: usize, batch: usize) -> FedAvgConfig {
    FedAvgConfig {
        clients,
        participants,
        local_steps,
        rounds,
        gamma: 18.0,
        batch_size: batch,
        seed: 4,
        learning_rate_override: None,
        uplink: NoiseSchedule::off(Direction::Uplink),
        downlink: NoiseSchedule::off(Direction::Downlink),
        uplink_message: UplinkMessage::Formula,
    }
}

#[test]
fn noise_free_full_participation_is_gradient_descent() {
    let (model, ds) = regression(120, 4, 1);
    let part = partition_iid(ds.len(), 4, 2).unwrap();
    let mut cfg = quiet(4, 4, 1, 3, 30);
    cfg.learning_rate_override = Some(0.3);
    let run = run_noisy_fedavg_with(&cfg, &model, &part, &ds, Execution::Sequential).unwrap();

    // centralized GD on the mean of client objectives, summed in client order
    let eta = 0.3;
    let mut w = vec![0.0; 4];
    let mut trace = vec![w.clone()];
    for _ in 0..3 {
        let mut sum = vec![0.0; 4];
        for shard in &part.shards {
            let g = gradient_indexed(&model, &ParamVector::new(w.clone()).unwrap(), &ds, shard).unwrap();
            for (s, gi) in sum.iter_mut().zip(g.iter()) {
                *s += eta * gi;
            }
        }
        w = w.iter().zip(&sum).map(|(wi, s)| wi - s / 4.0).collect();
        trace.push(w.clone());
    }
    assert_eq!(run.final_params.as_slice(), trace[3].as_slice());
    for (k, m) in run.metrics.iter().enumerate() {
        let wk = ParamVector::new(trace[k].clone()).unwrap();
        let f: f64 = part
            .shards
            .iter()
            .map(|s| loss_indexed(&model, &wk, &ds, s).unwrap())
            .sum::<f64>()
            / 4.0;
        assert_eq!(m.train_loss, f, "round {k}");
    }
}

#[test]
fn execution_mode_does_not_change_results() {
    let (model, ds) = regression(600, 6, 3);
    let part = partition_iid(ds.len(), 12, 3).unwrap();
    let mut cfg = quiet(12, 5, 3, 15, 8);
    cfg.uplink = NoiseSchedule::constant(Direction::Uplink, 0.2);
    cfg.downlink = NoiseSchedule::downlink_control(0.2);
    for message in [UplinkMessage::Formula, UplinkMessage::Prose] {
        cfg.uplink_message = message;
        let a = run_noisy_fedavg_with(&cfg, &model, &part, &ds, Execution::Sequential).unwrap();
        let b = run_noisy_fedavg_with(&cfg, &model, &part, &ds, Execution::Parallel).unwrap();
        let c = run_noisy_fedavg(&cfg, &model, &part, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

#[test]
fn single_full_batch_step_is_exact() {
    let (model, ds) = regression(50, 3, 2);
    let shard: Vec<usize> = (0..50).collect();
    let w0 = ParamVector::new(vec![0.5, -0.5, 1.0]).unwrap();
    let mut rng = rng::stream(0, Purpose::Batch, 0, 0);
    let out = local_update(&model, &ds, &shard, &w0, 0.4, 1, 50, &mut rng).unwrap();
    let g = full_gradient(&model, &w0, &ds).unwrap();
    for j in 0..3 {
        assert_eq!(out[j], w0[j] + (0.0 - 0.4 * g[j]));
    }
}

#[test]
fn full_batch_local_steps_descend() {
    let (model, ds) = regression(80, 5, 9);
    let shard: Vec<usize> = (0..80).collect();
    let eta = 1.0 / model.smoothness;
    let mut w = ParamVector::new(vec![3.0, -2.0, 1.0, 0.5, -1.5]).unwrap();
    let mut prev = loss(&model, &w, &ds).unwrap();
    for step in 0..10 {
        let mut rng = rng::stream(0, Purpose::Batch, step, 0);
        w = local_update(&model, &ds, &shard, &w, eta, 1, 80, &mut rng).unwrap();
        let now = loss(&model, &w, &ds).unwrap();
        assert!(now <= prev, "step {step}: {now} > {prev}");
        prev = now;
    }
}

#[test]
fn client_inclusion_is_uniform() {
    let draws = 100_000;
    let mut counts = [0usize; 5];
    let mut rng = rng::stream(17, Purpose::ClientSampling, 0, 0);
    for _ in 0..draws {
        let s = client_sample(5, 2, &mut rng).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s[0] < s[1]);
        for c in s {
            counts[c] += 1;
        }
    }
    let p = 0.4;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn kstar_is_uniform_without_drift() {
    const K: usize = 10;
    // 0.99 quantile of chi-square with 9 degrees of freedom
    const CRITICAL: f64 = 21.666;
    let draws = 100_000;
    let mut counts = [0usize; K];
    let mut rng = rng::stream(23, Purpose::KStar, 0, 0);
    for _ in 0..draws {
        counts[sample_kstar(0.0, K, &mut rng).unwrap()] += 1;
    }
    let expected = draws as f64 / K as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CRITICAL, "chi2 = {chi2}, counts {counts:?}");
    assert!(kstar_distribution(0.0, K)
        .unwrap()
        .iter()
        .all(|&p| (p - 0.1).abs() < 1e-15));
}

#[test]
fn kstar_frequencies_follow_geometric_weights() {
    let draws = 60_000;
    let mut ones = 0usize;
    let mut rng = rng::stream(2, Purpose::KStar, 0, 0);
    for _ in 0..draws {
        ones += sample_kstar(1.0, 2, &mut rng).unwrap();
    }
    let p = 1.0 / 3.0;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    assert!((ones as f64 - draws as f64 * p).abs() < 4.0 * sigma);
}

#[test]
fn noise_free_sgd_is_plain_minibatch_sgd() {
    let (model, ds) = regression(200, 4, 5);
    let cfg = SgdConfig {
        learning_rate: 0.5,
        iterations: 25,
        batch_size: 10,
        uplink: NoiseSchedule::off(Direction::Uplink),
        downlink: NoiseSchedule::off(Direction::Downlink),
        seed: 31,
    };
    let run = run_noisy_sgd(&cfg, &model, &ds).unwrap();
    let all: Vec<usize> = (0..200).collect();
    let mut w = ParamVector::zeros(4);
    for t in 0..25 {
        let batch = sample_batch(&all, 10, &mut rng::stream(31, Purpose::Batch, t, 0)).unwrap();
        let g = gradient_indexed(&model, &w, &ds, &batch).unwrap();
        w = ParamVector::new(w.iter().zip(g.iter()).map(|(a, b)| a - 0.5 * (0.0 + b)).collect()).unwrap();
    }
    assert_eq!(run.final_params, w);
    assert_eq!(run.metrics.len(), 25);
    assert_eq!(run.zeta, 0.0);
}

#[test]
fn vanishing_step_barely_moves_sgd() {
    let (model, ds) = regression(100, 3, 6);
    let (eta, t) = (1e-9, 50);
    let cfg = SgdConfig {
        learning_rate: eta,
        iterations: t,
        batch_size: 5,
        uplink: NoiseSchedule::constant(Direction::Uplink, 0.2),
        downlink: NoiseSchedule::constant(Direction::Downlink, 0.2),
        seed: 1,
    };
    let run = run_noisy_sgd(&cfg, &model, &ds).unwrap();
    // per-step movement is η‖e + g‖, which is O(1)·η on this task
    assert!(run.final_params.norm() < 100.0 * eta * t as f64);
}

/// Mean grad_norm_sq over the last quarter of iterations, averaged over seeds.
fn tail_grad_norm(model: &LossModel, ds: &[LabeledExample], up: NoiseSchedule, down: NoiseSchedule) -> f64 {
    let t = 2000;
    let seeds = 3;
    let mut total = 0.0;
    for seed in 0..seeds {
        let cfg = SgdConfig {
            learning_rate: 0.5 / model.smoothness,
            iterations: t,
            batch_size: 16,
            uplink: up,
            downlink: down,
            seed,
        };
        let run = run_noisy_sgd(&cfg, model, ds).unwrap();
        let tail = &run.metrics[3 * t / 4..];
        total += tail.iter().map(|m| m.grad_norm_sq).sum::<f64>() / tail.len() as f64;
    }
    total / seeds as f64
}

// Downlink noise enters through the curvature and uplink noise directly, so
// the downlink is the more harmful link once the Hessian exceeds the identity.
#[test]
fn downlink_noise_hurts_noisy_sgd_more_on_a_steep_quadratic() {
    let (_, ds) = regression(3000, 20, 12);
    let steep: Vec<LabeledExample> = ds
        .iter()
        .map(|e| LabeledExample {
            features: e.features.iter().map(|v| 2.0 * v).collect(),
            target: e.target,
        })
        .collect();
    let model = LossModel::mse_linear(20).unwrap();
    let l = smoothness_constant(&model, &steep).unwrap();
    assert!((l - 4.0).abs() < 1e-6);
    let model = model.with_smoothness(l);
    let off_up = NoiseSchedule::off(Direction::Uplink);
    let off_down = NoiseSchedule::off(Direction::Downlink);
    let base = tail_grad_norm(&model, &steep, off_up, off_down);
    let up = tail_grad_norm(
        &model,
        &steep,
        NoiseSchedule::constant(Direction::Uplink, 0.2),
        off_down,
    );
    let down = tail_grad_norm(
        &model,
        &steep,
        off_up,
        NoiseSchedule::constant(Direction::Downlink, 0.2),
    );
    assert!(down - base > up - base, "base {base}, uplink {up}, downlink {down}");
    assert!(up > base);
}

#[test]
fn metrics_record_schedules_and_run_shape() {
    let (model, ds) = regression(300, 5, 8);
    let part = partition_iid(ds.len(), 6, 1).unwrap();
    let mut cfg = quiet(6, 2, 2, 12, 4);
    cfg.uplink = NoiseSchedule::uplink_control(0.2);
    cfg.downlink = NoiseSchedule::downlink_control(0.2);
    let run = run_noisy_fedavg(&cfg, &model, &part, &ds).unwrap();
    assert!(!run.diverged());
    assert_eq!(run.metrics.len(), 12);
    assert!(run.k_star < 12);
    assert!(run.zeta > 0.0);
    for (k, m) in run.metrics.iter().enumerate() {
        assert_eq!(m.round, k);
        assert_eq!(m.uplink_variance, cfg.uplink.variance_at(k, 2));
        assert_eq!(m.downlink_variance, cfg.downlink.variance_at(k, 2));
        assert!(m.train_loss >= 0.0 && m.grad_norm_sq >= 0.0);
        assert!(m.mean_snr_up.unwrap() >= 0.0);
    }
    assert_eq!(run.grad_norms().len(), 12);
}

#[test]
fn rejects_shards_smaller_than_batch() {
    let (model, ds) = regression(40, 2, 0);
    let part = ClientPartition {
        shards: vec![(0..35).collect(), (35..40).collect()],
    };
    assert!(run_noisy_fedavg(&quiet(2, 1, 1, 2, 8), &model, &part, &ds).is_err());
}
