//! Noisy-FedAvg and Noisy-SGD training loops.

mod fedavg;
mod sgd;

pub use fedavg::{local_update, run_noisy_fedavg, run_noisy_fedavg_with, Execution, FedAvgConfig, UplinkMessage};
pub use sgd::{run_noisy_sgd, SgdConfig};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::ParamVector;
use crate::rng::Stream;

/// Parameter norm beyond which a run is declared diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Observables recorded at the start of each round (or iteration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// `f(w_k)`; infinite on the diverged sentinel row.
    pub train_loss: f64,
    /// `‖∇f(w_k)‖²` from exact full gradients; infinite on the sentinel row.
    pub grad_norm_sq: f64,
    /// Per-coordinate uplink noise variance used this round.
    pub uplink_variance: f64,
    /// Per-coordinate downlink noise variance used this round.
    pub downlink_variance: f64,
    pub mean_snr_up: Option<f64>,
    pub mean_snr_down: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    DivergedAt(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub metrics: Vec<RoundMetrics>,
    /// `w_K` on completion; the last finite iterate after a divergence.
    pub final_params: ParamVector,
    /// `f(final_params)`.
    pub final_loss: f64,
    /// Round index drawn from the `ℙ` distribution.
    pub k_star: usize,
    pub status: RunStatus,
    /// Step size actually used.
    pub learning_rate: f64,
    /// `ζ` evaluated at the step size actually used.
    pub zeta: f64,
}

impl RunResult {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::DivergedAt(_))
    }

    /// Recorded `‖∇f(w_k)‖²` over the rounds that completed without divergence.
    pub fn grad_norms(&self) -> Vec<f64> {
        self.metrics
            .iter()
            .filter(|m| !m.diverged)
            .map(|m| m.grad_norm_sq)
            .collect()
    }
}

/// Theory step size `(1/(γ L E))·√(r/K)`.
///
/// With this choice `ηLE ≤ ½` whenever `K ≥ 4r/γ²`.
pub fn learning_rate(
    gamma: f64,
    smoothness: f64,
    local_steps: usize,
    participants: usize,
    rounds: usize,
) -> Result<f64> {
    ensure!(gamma > 4.0, "gamma must exceed 4, got {gamma}");
    ensure!(
        smoothness > 0.0 && smoothness.is_finite(),
        "smoothness must be positive, got {smoothness}"
    );
    ensure!(
        local_steps >= 1 && participants >= 1 && rounds >= 1,
        "E, r and K must be positive"
    );
    let (e, r, k) = (local_steps as f64, participants as f64, rounds as f64);
    Ok((r / k).sqrt() / (gamma * smoothness * e))
}

/// Smallest round count for which the convergence guarantee applies:
/// `max(1024 r³/(9γ²) · (1/(γ²−16))², 4r/γ²)`.
pub fn min_rounds(participants: f64, gamma: f64) -> Result<f64> {
    ensure!(
        gamma > 4.0,
        "gamma must exceed 4 (the bound is singular at gamma^2 = 16), got {gamma}"
    );
    ensure!(participants > 0.0, "participant count must be positive");
    let (r, g2) = (participants, gamma * gamma);
    let drift = 1024.0 * r.powi(3) / (9.0 * g2) * (1.0 / (g2 - 16.0)).powi(2);
    Ok(drift.max(4.0 * r / g2))
}

/// Uniform size-`r` subset of `0..n`, returned in ascending order.
pub fn client_sample(n: usize, r: usize, rng: &mut Stream) -> Result<Vec<usize>> {
    ensure!(r >= 1 && r <= n, "cannot sample {r} of {n} clients");
    let mut chosen = index::sample(rng, n, r).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `ℙ(k) ∝ (1+ζ)^{K−1−k}` over `0..K`.
///
/// Computed as `(1+ζ)^{−k}` normalized, which divides out the largest weight.
pub fn kstar_distribution(zeta: f64, rounds: usize) -> Result<Vec<f64>> {
    ensure!(
        zeta >= 0.0 && zeta.is_finite(),
        "zeta must be finite and non-negative, got {zeta}"
    );
    ensure!(rounds >= 1, "need at least one round");
    let log_ratio = zeta.ln_1p();
    let weights: Vec<f64> = (0..rounds).map(|k| (-(k as f64) * log_ratio).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Draws `k*` from [`kstar_distribution`].
pub fn sample_kstar(zeta: f64, rounds: usize, rng: &mut Stream) -> Result<usize> {
    let probs = kstar_distribution(zeta, rounds)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(k);
        }
    }
    Ok(rounds - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Purpose};

    #[test]
    fn theory_learning_rate_matches_v5a() {
        let eta = learning_rate(18.0, 1.0, 5, 10, 100).unwrap();
        assert!((eta - 0.1f64.sqrt() / 90.0).abs() < 1e-15);
        assert!((eta - 0.0035136).abs() < 1e-7);
    }

    #[test]
    fn learning_rate_full_ratio_and_scaling() {
        assert!((learning_rate(8.0, 1.0, 1, 7, 7).unwrap() - 1.0 / 8.0).abs() < 1e-15);
        let a = learning_rate(18.0, 1.0, 5, 10, 100).unwrap();
        let b = learning_rate(18.0, 1.0, 5, 10, 200).unwrap();
        assert!((a / b - 2f64.sqrt()).abs() < 1e-12);
        assert!(learning_rate(4.0, 1.0, 5, 10, 100).is_err());
        assert!(learning_rate(18.0, 0.0, 5, 10, 100).is_err());
        assert!(learning_rate(18.0, 1.0, 0, 10, 100).is_err());
    }

    #[test]
    fn min_rounds_branches() {
        let drift = 1024.0 * 1000.0 / (9.0 * 324.0) / (308.0f64 * 308.0);
        assert!((drift - 3.702e-3).abs() < 1e-6);
        let got = min_rounds(10.0, 18.0).unwrap();
        assert!((got - 40.0 / 324.0).abs() < 1e-15);
        assert!(got < 100.0);
        assert!(min_rounds(1e-9, 18.0).unwrap() < 1e-9);
        let m: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&r| min_rounds(r, 18.0).unwrap())
            .collect();
        assert!(m[0] < m[1] && m[1] < m[2]);
        assert!(min_rounds(10.0, 4.0).is_err());
    }

    #[test]
    fn full_participation_returns_every_client() {
        let mut rng = rng::stream(0, Purpose::ClientSampling, 0, 0);
        assert_eq!(client_sample(6, 6, &mut rng).unwrap(), (0..6).collect::<Vec<_>>());
        assert!(client_sample(3, 4, &mut rng).is_err());
        let a = client_sample(50, 10, &mut rng::stream(4, Purpose::ClientSampling, 9, 0)).unwrap();
        let b = client_sample(50, 10, &mut rng::stream(4, Purpose::ClientSampling, 9, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kstar_two_rounds() {
        let p = kstar_distribution(1.0, 2).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let mut rng = rng::stream(0, Purpose::KStar, 0, 0);
        assert!((0..100).all(|_| sample_kstar(0.3, 1, &mut rng).unwrap() == 0));
    }

    #[test]
    fn kstar_weights_survive_huge_exponents() {
        let p = kstar_distribution(0.5, 5000).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
    }
}
