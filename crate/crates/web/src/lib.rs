//! Browser demo: small noisy-FedAvg runs, bound terms and power budgets,
//! each returned as a JSON string for `www/main.js` to plot.

use noisyfed::channel::compare_policies;
use noisyfed::data::{generate_regression, partition_iid, SyntheticRegressionSpec};
use noisyfed::model::smoothness_constant;
use noisyfed::theory::theorem2_bound;
use noisyfed::{run_noisy_fedavg, Direction, FedAvgConfig, LossModel, NoiseSchedule, TheoryParams, UplinkMessage};
use serde::Serialize;
use wasm_bindgen::prelude::*;

// Small enough to rerun on every slider move.
const SAMPLES: usize = 2000;
const DIM: usize = 20;
const CLIENTS: usize = 20;
const BATCH: usize = 16;
const GAMMA: f64 = 18.0;

#[derive(Serialize)]
struct Curves {
    rounds: Vec<usize>,
    noise_free: Vec<f64>,
    uplink_only: Vec<f64>,
    downlink_only: Vec<f64>,
    learning_rate: f64,
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

/// Train-loss curves for the three noise placements on a synthetic
/// regression task with unit-norm Hessian.
pub fn loss_curves_json(
    participants: usize,
    local_steps: usize,
    rounds: usize,
    noise_std: f64,
    seed: u64,
) -> Result<String, String> {
    let spec = SyntheticRegressionSpec {
        m: SAMPLES,
        d: DIM,
        theta_star: None,
        label_noise_variance: 0.05,
        normalize_hessian: true,
    };
    let dataset = generate_regression(&spec, 2024).map_err(|e| e.to_string())?;
    let model = LossModel::mse_linear(DIM).map_err(|e| e.to_string())?;
    let l = smoothness_constant(&model, &dataset).map_err(|e| e.to_string())?;
    let model = model.with_smoothness(l);
    let partition = partition_iid(dataset.len(), CLIENTS, 2024).map_err(|e| e.to_string())?;

    let noisy = |d| NoiseSchedule::constant(d, noise_std);
    let quiet = NoiseSchedule::off;
    let variants = [
        (quiet(Direction::Uplink), quiet(Direction::Downlink)),
        (noisy(Direction::Uplink), quiet(Direction::Downlink)),
        (quiet(Direction::Uplink), noisy(Direction::Downlink)),
    ];
    let mut losses = Vec::with_capacity(3);
    let mut eta = 0.0;
    for (uplink, downlink) in variants {
        let config = FedAvgConfig {
            clients: CLIENTS,
            participants,
            local_steps,
            rounds,
            gamma: GAMMA,
            batch_size: BATCH,
            seed,
            learning_rate_override: None,
            uplink,
            downlink,
            uplink_message: UplinkMessage::Formula,
        };
        let run = run_noisy_fedavg(&config, &model, &partition, &dataset).map_err(|e| e.to_string())?;
        eta = run.learning_rate;
        losses.push(run.metrics.iter().map(|m| m.train_loss).collect::<Vec<_>>());
    }
    let downlink_only = losses.pop().unwrap();
    let uplink_only = losses.pop().unwrap();
    let noise_free = losses.pop().unwrap();
    Ok(to_json(&Curves {
        rounds: (0..noise_free.len()).collect(),
        noise_free,
        uplink_only,
        downlink_only,
        learning_rate: eta,
    }))
}

/// Convergence-bound terms at `L = 1` with constant noise on both links.
#[allow(clippy::too_many_arguments)]
pub fn bound_terms_json(
    clients: usize,
    participants: usize,
    local_steps: usize,
    rounds: usize,
    uplink_std: f64,
    downlink_std: f64,
    sigma2: f64,
    f0: f64,
    dim: usize,
) -> Result<String, String> {
    let eta = noisyfed::learning_rate(GAMMA, 1.0, local_steps, participants, rounds).map_err(|e| e.to_string())?;
    let per_round = |s: f64| dim as f64 * s * s * rounds as f64;
    let report = theorem2_bound(&TheoryParams {
        clients,
        participants,
        local_steps,
        rounds,
        gamma: GAMMA,
        smoothness: 1.0,
        learning_rate: eta,
        sigma2,
        f0,
        sum_u2: per_round(uplink_std),
        sum_n2: per_round(downlink_std),
    })
    .map_err(|e| e.to_string())?;
    Ok(to_json(&report))
}

#[derive(Serialize)]
struct Power {
    ours_uplink: f64,
    prior_uplink: f64,
    ours_downlink: f64,
    prior_downlink: f64,
    uplink_ratio: f64,
    downlink_ratio: f64,
    total_ratio: f64,
}

/// Power budgets of the asymmetric policy against symmetric scaling.
pub fn power_json(rounds: usize, local_steps: usize) -> Result<String, String> {
    let c = compare_policies(rounds, local_steps).map_err(|e| e.to_string())?;
    Ok(to_json(&Power {
        ours_uplink: c.ours_uplink,
        prior_uplink: c.prior_uplink,
        ours_downlink: c.ours_downlink,
        prior_downlink: c.prior_downlink,
        uplink_ratio: c.uplink_ratio(),
        downlink_ratio: c.downlink_ratio(),
        total_ratio: c.total_ratio(),
    }))
}

#[wasm_bindgen]
pub fn loss_curves(
    participants: usize,
    local_steps: usize,
    rounds: usize,
    noise_std: f64,
    seed: u32,
) -> Result<String, JsError> {
    loss_curves_json(participants, local_steps, rounds, noise_std, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn bound_terms(
    clients: usize,
    participants: usize,
    local_steps: usize,
    rounds: usize,
    uplink_std: f64,
    downlink_std: f64,
    sigma2: f64,
    f0: f64,
    dim: usize,
) -> Result<String, JsError> {
    bound_terms_json(
        clients,
        participants,
        local_steps,
        rounds,
        uplink_std,
        downlink_std,
        sigma2,
        f0,
        dim,
    )
    .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn power(rounds: usize, local_steps: usize) -> Result<String, JsError> {
    power_json(rounds, local_steps).map_err(|e| JsError::new(&e))
}
