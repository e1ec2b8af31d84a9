use log::warn;
use serde::{Deserialize, Serialize};

use super::{
    client_sample, learning_rate, min_rounds, sample_kstar, RoundMetrics, RunResult, RunStatus, DIVERGENCE_NORM,
};
use crate::channel::{measured_snr, perturb_in_place, Direction, NoiseSchedule};
use crate::data::{sample_batch, ClientPartition};
use crate::error::{ensure, invalid, Result};
use crate::model::{gradient_indexed, loss_indexed, norm_sq, LabeledExample, LossModel, ParamVector};
use crate::rng::{self, Purpose, Stream};
use crate::theory::zeta_unchecked;

/// What a client transmits on the uplink.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UplinkMessage {
    /// `w_{k,0} − w_{k,E} + e`: the displacement from the model the client
    /// actually received. Downlink noise cancels except through the gradients.
    #[default]
    Formula,
    /// `w_k − w_{k,E} + e`: the displacement from the clean server model, so
    /// the downlink noise is carried into the aggregate.
    Prose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Clients of a round run on the rayon pool. Results are identical to
    /// `Sequential`.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Run constants for Noisy-FedAvg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedAvgConfig {
    /// Total clients `n`.
    pub clients: usize,
    /// Clients sampled per round `r`.
    pub participants: usize,
    /// Local SGD steps per round `E`.
    pub local_steps: usize,
    /// Communication rounds `K`.
    pub rounds: usize,
    /// Step-size constant `γ > 4`.
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Replaces the theory step size when set.
    pub learning_rate_override: Option<f64>,
    pub uplink: NoiseSchedule,
    pub downlink: NoiseSchedule,
    pub uplink_message: UplinkMessage,
}

impl FedAvgConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.clients >= 1, "need at least one client");
        ensure!(
            self.participants >= 1 && self.participants <= self.clients,
            "participants ({}) must lie in 1..={}",
            self.participants,
            self.clients
        );
        ensure!(self.local_steps >= 1, "local_steps must be at least 1");
        ensure!(self.rounds >= 1, "rounds must be at least 1");
        ensure!(self.gamma > 4.0, "gamma must exceed 4, got {}", self.gamma);
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        if let Some(eta) = self.learning_rate_override {
            ensure!(
                eta > 0.0 && eta.is_finite(),
                "learning rate override must be positive, got {eta}"
            );
        }
        ensure!(
            self.uplink.direction == Direction::Uplink,
            "uplink schedule has the wrong direction"
        );
        ensure!(
            self.downlink.direction == Direction::Downlink,
            "downlink schedule has the wrong direction"
        );
        self.uplink.validate()?;
        self.downlink.validate()?;
        Ok(())
    }

    /// Step size in force: the override, else the theory rate for `smoothness`.
    pub fn effective_learning_rate(&self, smoothness: f64) -> Result<f64> {
        match self.learning_rate_override {
            Some(eta) => Ok(eta),
            None => learning_rate(self.gamma, smoothness, self.local_steps, self.participants, self.rounds),
        }
    }
}

/// Runs `E` sequential mini-batch SGD steps from `w_start` on one client's shard.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    model: &LossModel,
    dataset: &[LabeledExample],
    shard: &[usize],
    w_start: &ParamVector,
    learning_rate: f64,
    local_steps: usize,
    batch_size: usize,
    rng: &mut Stream,
) -> Result<ParamVector> {
    ensure!(local_steps >= 1, "local_steps must be at least 1");
    ensure!(
        learning_rate > 0.0 && learning_rate.is_finite(),
        "learning rate must be positive"
    );
    let disp = local_displacement(
        model,
        dataset,
        shard,
        w_start,
        learning_rate,
        local_steps,
        batch_size,
        rng,
    )?;
    Ok(ParamVector::from_raw(
        w_start.iter().zip(&disp).map(|(w, d)| w + d).collect(),
    ))
}

/// `w_{k,E} − w_{k,0}`, accumulated directly so that no cancellation occurs
/// when the message is formed.
#[allow(clippy::too_many_arguments)]
fn local_displacement(
    model: &LossModel,
    dataset: &[LabeledExample],
    shard: &[usize],
    w_start: &ParamVector,
    learning_rate: f64,
    local_steps: usize,
    batch_size: usize,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    let mut disp = vec![0.0; w_start.len()];
    let mut point = ParamVector::from_raw(w_start.to_vec());
    for step in 0..local_steps {
        if step > 0 {
            point = ParamVector::from_raw(w_start.iter().zip(&disp).map(|(w, d)| w + d).collect());
        }
        // a full batch is taken in shard order so the step is reproducible bit for bit
        let g = if batch_size == shard.len() {
            gradient_indexed(model, &point, dataset, shard)?
        } else {
            gradient_indexed(model, &point, dataset, &sample_batch(shard, batch_size, rng)?)?
        };
        for (d, gi) in disp.iter_mut().zip(g.iter()) {
            *d -= learning_rate * gi;
        }
    }
    Ok(disp)
}

struct ClientReport {
    message: Vec<f64>,
    uplink_snr: Option<f64>,
}

/// Runs Noisy-FedAvg with the default [`Execution`].
pub fn run_noisy_fedavg(
    config: &FedAvgConfig,
    model: &LossModel,
    partition: &ClientPartition,
    dataset: &[LabeledExample],
) -> Result<RunResult> {
    run_noisy_fedavg_with(config, model, partition, dataset, Execution::default())
}

/// Runs `K` rounds of Noisy-FedAvg from `w_0 = 0`.
///
/// Each round samples `r` clients; client `i` receives `w_k + ν`, runs `E`
/// local steps, and uploads its displacement plus `e`. The server applies
/// `w_{k+1} = w_k − (1/r)Σ message_i`, summing in ascending client id.
pub fn run_noisy_fedavg_with(
    config: &FedAvgConfig,
    model: &LossModel,
    partition: &ClientPartition,
    dataset: &[LabeledExample],
    execution: Execution,
) -> Result<RunResult> {
    config.validate()?;
    ensure!(
        partition.clients() == config.clients,
        "partition has {} shards but config expects {} clients",
        partition.clients(),
        config.clients
    );
    partition.validate(dataset.len())?;
    if let Some(small) = partition.shards.iter().position(|s| s.len() < config.batch_size) {
        return Err(invalid(format!(
            "shard {small} has {} examples, fewer than batch size {}",
            partition.shards[small].len(),
            config.batch_size
        )));
    }

    let (n, r, e, rounds) = (config.clients, config.participants, config.local_steps, config.rounds);
    let eta = config.effective_learning_rate(model.smoothness)?;
    if config.learning_rate_override.is_none() {
        let needed = min_rounds(r as f64, config.gamma)?;
        if (rounds as f64) < needed {
            warn!("K = {rounds} is below the minimum {needed:.3} required by the convergence bound");
        }
    }
    let zeta = zeta_unchecked(eta, model.smoothness, e, n, r);
    let dim = model.param_len();
    let seed = config.seed;

    let mut w = ParamVector::zeros(dim);
    let mut metrics = Vec::with_capacity(rounds);
    let mut status = RunStatus::Completed;

    for k in 0..rounds {
        let down_var = config.downlink.variance_at(k, e);
        let up_var = config.uplink.variance_at(k, e);
        let (train_loss, grad_norm_sq) = objective(model, partition, dataset, &w)?;
        if is_diverged(&w, train_loss) {
            metrics.push(sentinel(k, up_var, down_var));
            status = RunStatus::DivergedAt(k);
            break;
        }

        let selected = client_sample(n, r, &mut rng::stream(seed, Purpose::ClientSampling, k as u64, 0))?;
        let run_client = |&client: &usize| -> Result<ClientReport> {
            let mut start = w.to_vec();
            perturb_in_place(
                &mut start,
                down_var,
                &mut rng::stream(seed, Purpose::Downlink, k as u64, client as u64),
            )?;
            let start = ParamVector::from_raw(start);
            let disp = local_displacement(
                model,
                dataset,
                &partition.shards[client],
                &start,
                eta,
                e,
                config.batch_size,
                &mut rng::stream(seed, Purpose::Batch, k as u64, client as u64),
            )?;
            let uplink_snr = (up_var > 0.0)
                .then(|| measured_snr(norm_sq(&disp), dim as f64 * up_var))
                .transpose()?;
            let mut message: Vec<f64> = match config.uplink_message {
                UplinkMessage::Formula => disp.iter().map(|d| -d).collect(),
                UplinkMessage::Prose => w
                    .iter()
                    .zip(start.iter())
                    .zip(&disp)
                    .map(|((wk, s), d)| wk - s - d)
                    .collect(),
            };
            perturb_in_place(
                &mut message,
                up_var,
                &mut rng::stream(seed, Purpose::Uplink, k as u64, client as u64),
            )?;
            Ok(ClientReport { message, uplink_snr })
        };

        let reports: Vec<ClientReport> = match execution {
            Execution::Sequential => selected.iter().map(run_client).collect::<Result<_>>()?,
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                selected.par_iter().map(run_client).collect::<Result<_>>()?
            }
            #[cfg(not(feature = "parallel"))]
            Execution::Parallel => selected.iter().map(run_client).collect::<Result<_>>()?,
        };

        let mut sum = vec![0.0; dim];
        for report in &reports {
            for (s, m) in sum.iter_mut().zip(&report.message) {
                *s += m;
            }
        }
        let next: Vec<f64> = w.iter().zip(&sum).map(|(wi, s)| wi - s / r as f64).collect();

        let mean_snr_down = (down_var > 0.0)
            .then(|| measured_snr(w.norm_sq(), dim as f64 * down_var))
            .transpose()?;
        let mean_snr_up =
            (up_var > 0.0).then(|| reports.iter().filter_map(|c| c.uplink_snr).sum::<f64>() / reports.len() as f64);
        metrics.push(RoundMetrics {
            round: k,
            train_loss,
            grad_norm_sq,
            uplink_variance: up_var,
            downlink_variance: down_var,
            mean_snr_up,
            mean_snr_down,
            diverged: false,
        });

        let next = ParamVector::from_raw(next);
        if !next.is_finite() || next.norm() > DIVERGENCE_NORM {
            metrics.push(sentinel(k + 1, up_var, down_var));
            status = RunStatus::DivergedAt(k + 1);
            break;
        }
        w = next;
    }

    let (final_loss, _) = objective(model, partition, dataset, &w)?;
    if status == RunStatus::Completed && is_diverged(&w, final_loss) {
        status = RunStatus::DivergedAt(rounds);
    }
    let k_star = sample_kstar(zeta, rounds, &mut rng::stream(seed, Purpose::KStar, 0, 0))?;
    Ok(RunResult {
        metrics,
        final_params: w,
        final_loss,
        k_star,
        status,
        learning_rate: eta,
        zeta,
    })
}

/// `f(w) = (1/n)Σ f_i(w)` and `‖(1/n)Σ ∇f_i(w)‖²` from exact shard gradients.
pub(crate) fn objective(
    model: &LossModel,
    partition: &ClientPartition,
    dataset: &[LabeledExample],
    w: &ParamVector,
) -> Result<(f64, f64)> {
    let n = partition.clients() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    for shard in &partition.shards {
        loss += loss_indexed(model, w, dataset, shard)?;
        let g = gradient_indexed(model, w, dataset, shard)?;
        for (a, b) in grad.iter_mut().zip(g.iter()) {
            *a += b;
        }
    }
    let grad_norm_sq = grad.iter().map(|g| (g / n) * (g / n)).sum();
    Ok((loss / n, grad_norm_sq))
}

pub(crate) fn is_diverged(w: &ParamVector, loss: f64) -> bool {
    !loss.is_finite() || !w.is_finite() || w.norm() > DIVERGENCE_NORM
}

pub(crate) fn sentinel(round: usize, up_var: f64, down_var: f64) -> RoundMetrics {
    RoundMetrics {
        round,
        train_loss: f64::INFINITY,
        grad_norm_sq: f64::INFINITY,
        uplink_variance: up_var,
        downlink_variance: down_var,
        mean_snr_up: None,
        mean_snr_down: None,
        diverged: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Direction;
    use crate::data::{generate_regression, partition_iid, SyntheticRegressionSpec};
    use crate::model::smoothness_constant;

    fn setup() -> (LossModel, crate::data::Dataset, ClientPartition) {
        let spec = SyntheticRegressionSpec {
            m: 240,
            d: 5,
            theta_star: None,
            label_noise_variance: 0.05,
            normalize_hessian: true,
        };
        let ds = generate_regression(&spec, 1).unwrap();
        let model = LossModel::mse_linear(5).unwrap();
        let l = smoothness_constant(&model, &ds).unwrap();
        let part = partition_iid(ds.len(), 6, 2).unwrap();
        (model.with_smoothness(l), ds, part)
    }

    fn config() -> FedAvgConfig {
        FedAvgConfig {
            clients: 6,
            participants: 3,
            local_steps: 4,
            rounds: 20,
            gamma: 18.0,
            batch_size: 8,
            seed: 11,
            learning_rate_override: None,
            uplink: NoiseSchedule::constant(Direction::Uplink, 0.1),
            downlink: NoiseSchedule::constant(Direction::Downlink, 0.1),
            uplink_message: UplinkMessage::Formula,
        }
    }

    #[test]
    fn rejects_zero_local_steps() {
        let (model, ds, part) = setup();
        let w = ParamVector::zeros(5);
        let mut rng = rng::stream(0, Purpose::Batch, 0, 0);
        assert!(local_update(&model, &ds, &part.shards[0], &w, 0.1, 0, 4, &mut rng).is_err());
    }

    #[test]
    fn tiny_step_barely_moves() {
        let (model, ds, part) = setup();
        let w = ParamVector::new(vec![0.3, -0.1, 2.0, 0.0, 1.0]).unwrap();
        let mut rng = rng::stream(0, Purpose::Batch, 0, 0);
        let out = local_update(&model, &ds, &part.shards[0], &w, 1e-12, 5, 4, &mut rng).unwrap();
        assert!(out.distance_sq(&w).sqrt() < 1e-9);
    }

    #[test]
    fn mismatched_partition_is_rejected() {
        let (model, ds, _) = setup();
        let part = partition_iid(ds.len(), 5, 0).unwrap();
        assert!(run_noisy_fedavg(&config(), &model, &part, &ds).is_err());
        let mut cfg = config();
        cfg.participants = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let (model, ds, part) = setup();
        let a = run_noisy_fedavg_with(&config(), &model, &part, &ds, Execution::Sequential).unwrap();
        let b = run_noisy_fedavg_with(&config(), &model, &part, &ds, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.len(), 20);
        assert!(a.k_star < 20);
    }

    #[test]
    fn huge_step_is_recorded_as_divergence() {
        let (model, ds, part) = setup();
        let mut cfg = config();
        cfg.learning_rate_override = Some(50.0);
        let res = run_noisy_fedavg(&cfg, &model, &part, &ds).unwrap();
        let RunStatus::DivergedAt(k) = res.status else {
            panic!("expected divergence, got {:?}", res.status)
        };
        assert!(res.final_params.is_finite());
        let last = res.metrics.last().unwrap();
        assert!(last.diverged && last.round == k);
        assert!(res.metrics[..res.metrics.len() - 1].iter().all(|m| !m.diverged));
    }

    #[test]
    fn snr_is_absent_when_channel_is_off() {
        let (model, ds, part) = setup();
        let mut cfg = config();
        cfg.uplink = NoiseSchedule::off(Direction::Uplink);
        let res = run_noisy_fedavg(&cfg, &model, &part, &ds).unwrap();
        assert!(res
            .metrics
            .iter()
            .all(|m| m.mean_snr_up.is_none() && m.mean_snr_down.is_some()));
    }
}
