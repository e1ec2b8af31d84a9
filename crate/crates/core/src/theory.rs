//! Closed-form constants and convergence bounds.
//!
//! All noise sums are TOTAL expected squared norms, i.e. `d` times the
//! per-coordinate variance.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::algorithms::{learning_rate, min_rounds};
use crate::data::{sample_batch, ClientPartition};
use crate::error::{ensure, Result};
use crate::model::{gradient_indexed, LabeledExample, LossModel, ParamVector};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub clients: usize,
    pub participants: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub gamma: f64,
    pub smoothness: f64,
    pub learning_rate: f64,
    /// Stochastic-gradient variance bound `σ²`.
    pub sigma2: f64,
    /// `f(w₀)`.
    pub f0: f64,
    /// `Σ_k U_k²`.
    pub sum_u2: f64,
    /// `Σ_k N_k²`.
    pub sum_n2: f64,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.clients >= 2,
            "the bound needs at least two clients, got {}",
            self.clients
        );
        ensure!(
            self.participants >= 1 && self.participants <= self.clients,
            "participants ({}) must lie in 1..={}",
            self.participants,
            self.clients
        );
        ensure!(self.local_steps >= 1 && self.rounds >= 1, "E and K must be positive");
        ensure!(self.gamma > 4.0, "gamma must exceed 4, got {}", self.gamma);
        for (name, v) in [
            ("smoothness", self.smoothness),
            ("learning_rate", self.learning_rate),
            ("sigma2", self.sigma2),
            ("f0", self.f0),
            ("sum_u2", self.sum_u2),
            ("sum_n2", self.sum_n2),
        ] {
            ensure!(
                v >= 0.0 && v.is_finite(),
                "{name} must be finite and non-negative, got {v}"
            );
        }
        Ok(())
    }
}

/// Term decomposition of a convergence bound. `total` is the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub leading: f64,
    pub term_uplink: f64,
    pub term_sgd_variance: f64,
    pub term_downlink: f64,
    pub total: f64,
    pub zeta: f64,
    pub zeta2: f64,
    pub zeta3: f64,
}

fn check_constants(eta: f64, smoothness: f64, local_steps: usize, clients: usize, participants: usize) -> Result<()> {
    ensure!(clients >= 2, "constants need n >= 2, got {clients}");
    ensure!(
        participants >= 1 && participants <= clients,
        "participants ({participants}) must lie in 1..={clients}"
    );
    ensure!(local_steps >= 1, "E must be positive");
    ensure!(
        eta >= 0.0 && eta.is_finite(),
        "eta must be finite and non-negative, got {eta}"
    );
    ensure!(
        smoothness >= 0.0 && smoothness.is_finite(),
        "L must be finite and non-negative, got {smoothness}"
    );
    Ok(())
}

/// Sampling-without-replacement factor `(n−r)/(r(n−1))`; zero for a single client.
fn participation(clients: usize, participants: usize) -> f64 {
    if clients < 2 {
        return 0.0;
    }
    let (n, r) = (clients as f64, participants as f64);
    (n - r) / (r * (n - 1.0))
}

/// `ζ = 8η²L²E²((n−r)/(r(n−1)) + 2ηLE/3)`.
pub fn zeta(eta: f64, smoothness: f64, local_steps: usize, clients: usize, participants: usize) -> Result<f64> {
    check_constants(eta, smoothness, local_steps, clients, participants)?;
    Ok(zeta_unchecked(eta, smoothness, local_steps, clients, participants))
}

pub(crate) fn zeta_unchecked(
    eta: f64,
    smoothness: f64,
    local_steps: usize,
    clients: usize,
    participants: usize,
) -> f64 {
    let s = eta * smoothness * local_steps as f64;
    8.0 * s * s * (participation(clients, participants) + 2.0 * s / 3.0)
}

/// `ζ₂ = (ηLE/n)(1 + 2nE/3 + n) + 1/r + (n−r)/(r(n−1))`.
pub fn zeta2(eta: f64, smoothness: f64, local_steps: usize, clients: usize, participants: usize) -> Result<f64> {
    check_constants(eta, smoothness, local_steps, clients, participants)?;
    let (n, r, e) = (clients as f64, participants as f64, local_steps as f64);
    let s = eta * smoothness * e;
    Ok(s / n * (1.0 + 2.0 * n * e / 3.0 + n) + 1.0 / r + participation(clients, participants))
}

/// Downlink coefficient
/// `ζ₃ = 1 + 2ηL + 4E{1 + 3η²L² + 2ηLE(2 + 3η²L²)(2ηLE/3 + (n−r)/(r(n−1)))}`.
pub fn zeta3(eta: f64, smoothness: f64, local_steps: usize, clients: usize, participants: usize) -> Result<f64> {
    check_constants(eta, smoothness, local_steps, clients, participants)?;
    let e = local_steps as f64;
    let el = eta * smoothness;
    let s = el * e;
    let q = 3.0 * el * el;
    let inner = 1.0 + q + 2.0 * s * (2.0 + q) * (2.0 * s / 3.0 + participation(clients, participants));
    Ok(1.0 + 2.0 * el + 4.0 * e * inner)
}

/// Noisy-FedAvg bound on `E‖∇f(w_{k*})‖²` for the theory step size.
///
/// `leading = 8γLf₀/√(rK)`, `term_uplink = 4ΣU²/(γE²K√(rK))`, and the
/// variance and downlink terms are the closed forms obtained by substituting
/// `ηLE = (1/γ)√(r/K)` into `ζ₂` and `ζ₃`.
pub fn theorem2_bound(p: &TheoryParams) -> Result<BoundReport> {
    p.validate()?;
    let (n, r, e, k) = (
        p.clients as f64,
        p.participants as f64,
        p.local_steps as f64,
        p.rounds as f64,
    );
    let (g, l) = (p.gamma, p.smoothness);
    ensure!(l > 0.0, "smoothness must be positive");

    let needed = min_rounds(r, g)?;
    if k < needed {
        warn!("K = {k} is below the minimum {needed:.3} required by the bound");
    }
    let theory_eta = learning_rate(g, l, p.local_steps, p.participants, p.rounds)?;
    if (p.learning_rate - theory_eta).abs() > 1e-9 * theory_eta {
        warn!(
            "learning rate {} differs from the theory value {theory_eta}; the bound constants assume the latter",
            p.learning_rate
        );
    }

    let a = participation(p.clients, p.participants);
    let rk = (r / k).sqrt();
    let leading = 8.0 * g * l * p.f0 / (r * k).sqrt();
    let term_uplink = 4.0 / (g * e * e * k * (r * k).sqrt()) * p.sum_u2;
    let term_sgd_variance =
        4.0 / (g * e) * rk * (1.0 / (g * n) * rk * (1.0 + 2.0 * n * e / 3.0 + n) + 1.0 / r + a) * p.sigma2;
    let braces = 3.0 / (g * e * e) * rk + 2.0 * (2.0 + 3.0 / (g * g * e * e) * (r / k)) * (2.0 / (3.0 * g) * rk + a);
    let term_downlink =
        4.0 * l * l / (e * k) * (1.0 + 4.0 * e + 2.0 / (g * e) * rk * (1.0 + 2.0 * e * e * braces)) * p.sum_n2;

    let eta = p.learning_rate;
    Ok(BoundReport {
        leading,
        term_uplink,
        term_sgd_variance,
        term_downlink,
        total: leading + term_uplink + term_sgd_variance + term_downlink,
        zeta: zeta(eta, l, p.local_steps, p.clients, p.participants)?,
        zeta2: zeta2(eta, l, p.local_steps, p.clients, p.participants)?,
        zeta3: zeta3(eta, l, p.local_steps, p.clients, p.participants)?,
    })
}

/// Noisy-SGD bound `2(f₀−f*)/(Tη) + ηLσ² + (L²/T)ΣN² + (ηL/T)ΣU²`.
#[allow(clippy::too_many_arguments)]
pub fn theorem1_bound(
    eta: f64,
    smoothness: f64,
    iterations: usize,
    f0: f64,
    f_star: f64,
    sigma2: f64,
    sum_u2: f64,
    sum_n2: f64,
) -> Result<BoundReport> {
    ensure!(eta > 0.0 && eta.is_finite(), "eta must be positive, got {eta}");
    ensure!(iterations >= 1, "T must be positive");
    ensure!(
        smoothness >= 0.0 && smoothness.is_finite(),
        "L must be finite and non-negative"
    );
    ensure!(f0 >= f_star, "f0 ({f0}) is below f* ({f_star})");
    for (name, v) in [("sigma2", sigma2), ("sum_u2", sum_u2), ("sum_n2", sum_n2)] {
        ensure!(
            v >= 0.0 && v.is_finite(),
            "{name} must be finite and non-negative, got {v}"
        );
    }
    if eta * smoothness > 1.0 {
        warn!("eta = {eta} exceeds 1/L; the noisy-SGD bound does not apply");
    }
    let t = iterations as f64;
    let leading = 2.0 * (f0 - f_star) / (t * eta);
    let term_sgd_variance = eta * smoothness * sigma2;
    let term_downlink = smoothness * smoothness / t * sum_n2;
    let term_uplink = eta * smoothness / t * sum_u2;
    Ok(BoundReport {
        leading,
        term_uplink,
        term_sgd_variance,
        term_downlink,
        total: leading + term_uplink + term_sgd_variance + term_downlink,
        zeta: 0.0,
        zeta2: 0.0,
        zeta3: 0.0,
    })
}

/// Order coefficients `((1/E)√(r/K), 1/(E²√(rK)), 1)` of the SGD-variance,
/// uplink and downlink contributions.
pub fn corollary2_orders(local_steps: f64, participants: f64, rounds: f64) -> (f64, f64, f64) {
    let (e, r, k) = (local_steps, participants, rounds);
    ((r / k).sqrt() / e, 1.0 / (e * e * (r * k).sqrt()), 1.0)
}

/// Dissimilarity `‖∇f_n(w) − ∇f(w)‖² = w²(1−1/n)²` for the quadratic family
/// where only client `n` carries the curvature.
pub fn bcd_gap(w: f64, clients: usize) -> f64 {
    let c = 1.0 - 1.0 / clients.max(1) as f64;
    w * w * c * c
}

/// Point at which [`bcd_gap`] equals `4G²`. `None` for a single client.
pub fn bcd_witness(g: f64, clients: usize) -> Option<f64> {
    (clients >= 2).then(|| 2.0 * g / (1.0 - 1.0 / clients as f64))
}

/// Safety factor applied to the Monte-Carlo variance.
pub const SIGMA2_INFLATION: f64 = 1.5;

/// Largest per-client estimate of `E‖∇̃f_i(w; B) − ∇f_i(w)‖²` over clients and
/// probe points, times [`SIGMA2_INFLATION`].
pub fn empirical_sigma2(
    model: &LossModel,
    partition: &ClientPartition,
    dataset: &[LabeledExample],
    probes: &[ParamVector],
    batch_size: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    ensure!(trials >= 1, "need at least one trial");
    ensure!(!probes.is_empty(), "need at least one probe point");
    partition.validate(dataset.len())?;
    let mut worst = 0.0f64;
    for (pi, probe) in probes.iter().enumerate() {
        for (client, shard) in partition.shards.iter().enumerate() {
            ensure!(
                batch_size >= 1 && batch_size <= shard.len(),
                "batch size {batch_size} exceeds shard {client}"
            );
            let full = gradient_indexed(model, probe, dataset, shard)?;
            if batch_size == shard.len() {
                continue;
            }
            let mut rng = rng::stream(seed, Purpose::Probe, pi as u64, client as u64);
            let mut acc = 0.0;
            for _ in 0..trials {
                let batch = sample_batch(shard, batch_size, &mut rng)?;
                let g = gradient_indexed(model, probe, dataset, &batch)?;
                acc += g.distance_sq(&full);
            }
            worst = worst.max(acc / trials as f64);
        }
    }
    Ok(SIGMA2_INFLATION * worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v5a(eta: f64) -> TheoryParams {
        TheoryParams {
            clients: 50,
            participants: 10,
            local_steps: 5,
            rounds: 100,
            gamma: 18.0,
            smoothness: 1.0,
            learning_rate: eta,
            sigma2: 0.0,
            f0: 1.0,
            sum_u2: 0.0,
            sum_n2: 0.0,
        }
    }

    #[test]
    fn zeta_hand_value() {
        let z = zeta(0.0035, 1.0, 5, 50, 10).unwrap();
        assert!((z - 2.2858e-4).abs() < 1e-8, "{z}");
        let s: f64 = 0.0035 * 5.0;
        assert!((zeta(0.0035, 1.0, 5, 10, 10).unwrap() - 8.0 * s * s * (2.0 * s / 3.0)).abs() < 1e-18);
        assert_eq!(zeta(0.0, 1.0, 5, 50, 10).unwrap(), 0.0);
        assert!(zeta(0.1, 1.0, 5, 1, 1).is_err());
        assert!(zeta2(0.1, 1.0, 5, 1, 1).is_err());
        assert!(zeta3(0.1, 1.0, 5, 1, 1).is_err());
    }

    #[test]
    fn zeta2_zeta3_at_zero_step() {
        let z2 = zeta2(0.0, 1.0, 5, 50, 10).unwrap();
        assert!((z2 - (0.1 + 40.0 / 490.0)).abs() < 1e-15);
        assert_eq!(zeta3(0.0, 1.0, 5, 50, 10).unwrap(), 21.0);
    }

    // Second encoding: Term II = (4/(γE))√(r/K)·ζ₂·σ² and
    // Term III = (4L²/(EK))·ζ₃·ΣN² at the theory step size.
    #[test]
    fn closed_forms_match_zeta_encodings() {
        let eta = learning_rate(18.0, 1.0, 5, 10, 100).unwrap();
        let mut p = v5a(eta);
        p.sigma2 = 2.5;
        p.sum_n2 = 3.0;
        let b = theorem2_bound(&p).unwrap();
        let rk = (10.0f64 / 100.0).sqrt();
        let ii = 4.0 / (18.0 * 5.0) * rk * b.zeta2 * 2.5;
        let iii = 4.0 / (5.0 * 100.0) * b.zeta3 * 3.0;
        assert!((b.term_sgd_variance - ii).abs() < 1e-12 * ii);
        assert!((b.term_downlink - iii).abs() < 1e-12 * iii);
    }

    #[test]
    fn leading_term_only() {
        let eta = learning_rate(18.0, 1.0, 5, 10, 100).unwrap();
        let b = theorem2_bound(&v5a(eta)).unwrap();
        assert!((b.total - 144.0 / 1000f64.sqrt()).abs() < 1e-12);
        assert_eq!(b.total, b.leading);
    }

    #[test]
    fn uplink_only_and_linearity() {
        let eta = learning_rate(18.0, 1.0, 5, 10, 100).unwrap();
        let mut p = v5a(eta);
        p.sum_u2 = 7.0;
        let b = theorem2_bound(&p).unwrap();
        assert_eq!(b.term_sgd_variance + b.term_downlink, 0.0);
        assert!((b.total - b.leading - b.term_uplink).abs() <= 4.0 * f64::EPSILON * b.total);
        p.sum_u2 = 0.0;
        p.sum_n2 = 1.5;
        let one = theorem2_bound(&p).unwrap().term_downlink;
        p.sum_n2 = 3.0;
        let two = theorem2_bound(&p).unwrap().term_downlink;
        assert!((two - 2.0 * one).abs() < 1e-15 * two);
    }

    #[test]
    fn theorem1_values() {
        let b = theorem1_bound(1.0, 1.0, 100, 1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        assert!((b.total - 1.02).abs() < 1e-15);
        let b = theorem1_bound(0.5, 1.0, 100, 3.0, 1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(b.total, 2.0 * 2.0 / 50.0);
        let full = theorem1_bound(0.2, 2.0, 50, 1.0, 0.0, 0.0, 4.0, 4.0).unwrap();
        let half = theorem1_bound(0.1, 2.0, 50, 1.0, 0.0, 0.0, 4.0, 4.0).unwrap();
        assert_eq!(full.term_downlink, half.term_downlink);
        assert!((half.term_uplink - full.term_uplink / 2.0).abs() < 1e-15);
        assert!(theorem1_bound(0.0, 1.0, 10, 1.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(theorem1_bound(0.1, 1.0, 0, 1.0, 0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn corollary_coefficients() {
        let (s1, u1, d1) = corollary2_orders(5.0, 10.0, 100.0);
        let (s4, u4, d4) = corollary2_orders(5.0, 40.0, 100.0);
        assert!((s4 / s1 - 2.0).abs() < 1e-12 && (u1 / u4 - 2.0).abs() < 1e-12 && d1 == d4);
        let (_, u2e, _) = corollary2_orders(10.0, 10.0, 100.0);
        assert!((u1 / u2e - 4.0).abs() < 1e-12);
        assert_eq!(corollary2_orders(1.0, 4.0, 4.0).1, 0.25);
    }

    #[test]
    fn bcd_values() {
        assert_eq!(bcd_gap(3.7, 1), 0.0);
        assert_eq!(bcd_gap(2.0, 2), 1.0);
        assert!(bcd_witness(1.0, 1).is_none());
        for g in [1.0, 10.0, 100.0] {
            let w = bcd_witness(g, 50).unwrap();
            assert!(bcd_gap(w, 50) > g * g);
        }
    }
}
