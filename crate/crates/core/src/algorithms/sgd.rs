use log::warn;
use serde::{Deserialize, Serialize};

use super::fedavg::{is_diverged, sentinel};
use super::{sample_kstar, RoundMetrics, RunResult, RunStatus, DIVERGENCE_NORM};
use crate::channel::{measured_snr, perturb_in_place, NoiseSchedule};
use crate::data::{sample_batch, ClientPartition};
use crate::error::{ensure, Result};
use crate::model::{gradient_indexed, norm_sq, LabeledExample, LossModel, ParamVector};
use crate::rng::{self, Purpose};

/// Run constants for single-machine Noisy-SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub uplink: NoiseSchedule,
    pub downlink: NoiseSchedule,
    pub seed: u64,
}

/// Runs `w_{t+1} = w_t − η[e_t + ∇̃f(w_t + ν_t; B_t)]` for `T` iterations from 0.
///
/// Schedules are evaluated with `E = 1`. `k*` is uniform over the
/// iterations, matching the plain average on the left of the noisy-SGD bound.
pub fn run_noisy_sgd(config: &SgdConfig, model: &LossModel, dataset: &[LabeledExample]) -> Result<RunResult> {
    let eta = config.learning_rate;
    ensure!(
        eta > 0.0 && eta.is_finite(),
        "learning rate must be positive, got {eta}"
    );
    ensure!(config.iterations >= 1, "need at least one iteration");
    ensure!(
        config.batch_size >= 1 && config.batch_size <= dataset.len(),
        "batch size {} must lie in 1..={}",
        config.batch_size,
        dataset.len()
    );
    config.uplink.validate()?;
    config.downlink.validate()?;
    if model.smoothness > 0.0 && eta > 1.0 / model.smoothness {
        warn!("step size {eta} exceeds 1/L = {}", 1.0 / model.smoothness);
    }

    let everything = ClientPartition {
        shards: vec![(0..dataset.len()).collect()],
    };
    let shard = &everything.shards[0];
    let dim = model.param_len();
    let seed = config.seed;
    let mut w = ParamVector::zeros(dim);
    let mut metrics = Vec::with_capacity(config.iterations);
    let mut status = RunStatus::Completed;

    for t in 0..config.iterations {
        let down_var = config.downlink.variance_at(t, 1);
        let up_var = config.uplink.variance_at(t, 1);
        let (train_loss, grad_norm_sq) = super::fedavg::objective(model, &everything, dataset, &w)?;
        if is_diverged(&w, train_loss) {
            metrics.push(sentinel(t, up_var, down_var));
            status = RunStatus::DivergedAt(t);
            break;
        }

        let mut probe = w.to_vec();
        perturb_in_place(
            &mut probe,
            down_var,
            &mut rng::stream(seed, Purpose::Downlink, t as u64, 0),
        )?;
        let probe = ParamVector::from_raw(probe);
        let g = if config.batch_size == shard.len() {
            gradient_indexed(model, &probe, dataset, shard)?
        } else {
            let batch = sample_batch(
                shard,
                config.batch_size,
                &mut rng::stream(seed, Purpose::Batch, t as u64, 0),
            )?;
            gradient_indexed(model, &probe, dataset, &batch)?
        };
        let mut step = vec![0.0; dim];
        perturb_in_place(&mut step, up_var, &mut rng::stream(seed, Purpose::Uplink, t as u64, 0))?;
        for (s, gi) in step.iter_mut().zip(g.iter()) {
            *s += gi;
        }

        let mean_snr_down = (down_var > 0.0)
            .then(|| measured_snr(w.norm_sq(), dim as f64 * down_var))
            .transpose()?;
        let mean_snr_up = (up_var > 0.0)
            .then(|| measured_snr(norm_sq(&g), dim as f64 * up_var))
            .transpose()?;
        metrics.push(RoundMetrics {
            round: t,
            train_loss,
            grad_norm_sq,
            uplink_variance: up_var,
            downlink_variance: down_var,
            mean_snr_up,
            mean_snr_down,
            diverged: false,
        });

        let next = ParamVector::from_raw(w.iter().zip(&step).map(|(wi, s)| wi - eta * s).collect());
        if !next.is_finite() || next.norm() > DIVERGENCE_NORM {
            metrics.push(sentinel(t + 1, up_var, down_var));
            status = RunStatus::DivergedAt(t + 1);
            break;
        }
        w = next;
    }

    let (final_loss, _) = super::fedavg::objective(model, &everything, dataset, &w)?;
    let k_star = sample_kstar(0.0, config.iterations, &mut rng::stream(seed, Purpose::KStar, 0, 0))?;
    Ok(RunResult {
        metrics,
        final_params: w,
        final_loss,
        k_star,
        status,
        learning_rate: eta,
        zeta: 0.0,
    })
}
