//! Additive Gaussian channel noise and SNR-control schedules.
//!
//! Schedules describe the per-coordinate noise variance of one link direction
//! as a function of the communication round. Decay is applied to the
//! variance and evaluated at `k + 1` so that round 0 is well defined.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::ParamVector;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Off,
    Constant,
    PolyDecay,
}

/// Per-round noise variance rule for one link direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub direction: Direction,
    pub kind: ScheduleKind,
    /// Noise standard deviation υ per coordinate before any decay.
    pub base_std: f64,
    /// Exponent `p` of the `(k+1)^p` variance decay.
    pub decay_exponent: f64,
    /// Additionally divide the variance by `E²`.
    pub e_squared_scaling: bool,
}

impl NoiseSchedule {
    pub fn off(direction: Direction) -> Self {
        Self {
            direction,
            kind: ScheduleKind::Off,
            base_std: 0.0,
            decay_exponent: 0.0,
            e_squared_scaling: false,
        }
    }

    pub fn constant(direction: Direction, base_std: f64) -> Self {
        Self {
            direction,
            kind: ScheduleKind::Constant,
            base_std,
            decay_exponent: 0.0,
            e_squared_scaling: false,
        }
    }

    pub fn poly_decay(direction: Direction, base_std: f64, exponent: f64, e_squared_scaling: bool) -> Self {
        Self {
            direction,
            kind: ScheduleKind::PolyDecay,
            base_std,
            decay_exponent: exponent,
            e_squared_scaling,
        }
    }

    /// Downlink variance `υ²/(E²(k+1))`.
    pub fn downlink_control(base_std: f64) -> Self {
        Self::poly_decay(Direction::Downlink, base_std, 1.0, true)
    }

    /// Uplink variance `υ²/√(k+1)`.
    pub fn uplink_control(base_std: f64) -> Self {
        Self::poly_decay(Direction::Uplink, base_std, 0.5, false)
    }

    pub fn is_off(&self) -> bool {
        self.kind == ScheduleKind::Off
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.base_std >= 0.0 && self.base_std.is_finite(),
            "{:?} base_std must be finite and non-negative, got {}",
            self.direction,
            self.base_std
        );
        ensure!(
            self.decay_exponent >= 0.0 && self.decay_exponent.is_finite(),
            "{:?} decay_exponent must be finite and non-negative, got {}",
            self.direction,
            self.decay_exponent
        );
        Ok(())
    }

    /// Per-coordinate variance at round `k` with `local_steps` = E.
    pub fn variance_at(&self, k: usize, local_steps: usize) -> f64 {
        let base = self.base_std * self.base_std;
        match self.kind {
            ScheduleKind::Off => 0.0,
            ScheduleKind::Constant => base,
            ScheduleKind::PolyDecay => {
                let mut v = base / ((k + 1) as f64).powf(self.decay_exponent);
                if self.e_squared_scaling {
                    let e = local_steps.max(1) as f64;
                    v /= e * e;
                }
                v
            }
        }
    }

    /// `Σ_{k<K} variance_at(k)`, per coordinate.
    pub fn variance_sum(&self, rounds: usize, local_steps: usize) -> f64 {
        (0..rounds).map(|k| self.variance_at(k, local_steps)).sum()
    }
}

/// A realized noise vector together with how it was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDraw {
    pub noise: ParamVector,
    pub variance: f64,
    pub round: usize,
    pub client: usize,
}

impl ChannelDraw {
    pub fn sample(len: usize, variance: f64, round: usize, client: usize, rng: &mut Stream) -> Result<Self> {
        let noise = perturb(&ParamVector::zeros(len), variance, rng)?;
        Ok(Self {
            noise,
            variance,
            round,
            client,
        })
    }
}

/// Returns `vector + g` with `g` i.i.d. `N(0, variance)` per coordinate.
/// A zero variance returns the input unchanged and draws nothing.
pub fn perturb(vector: &ParamVector, variance: f64, rng: &mut Stream) -> Result<ParamVector> {
    let mut out = vector.to_vec();
    perturb_in_place(&mut out, variance, rng)?;
    Ok(ParamVector::from_raw(out))
}

pub(crate) fn perturb_in_place(values: &mut [f64], variance: f64, rng: &mut Stream) -> Result<()> {
    ensure!(
        variance >= 0.0 && variance.is_finite(),
        "noise variance must be finite and non-negative, got {variance}"
    );
    if variance == 0.0 {
        return Ok(());
    }
    let std = variance.sqrt();
    for v in values.iter_mut() {
        *v += std * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(())
}

/// Ratio of signal power to expected noise power.
///
/// The caller supplies `‖w_k‖²` for the downlink or `‖w_{k,0} − w_{k,E}‖²`
/// for the uplink, and the total expected squared noise norm.
pub fn measured_snr(signal_power: f64, noise_power: f64) -> Result<f64> {
    if noise_power > 0.0 && noise_power.is_finite() {
        Ok(signal_power / noise_power)
    } else {
        Err(Error::UndefinedSnr(noise_power))
    }
}

/// Cumulative transmit-power boost `Σ_{k<K} υ²/variance_at(k)` needed to
/// realize the schedule by amplifying the signal rather than attenuating
/// noise. A constant schedule costs one unit per round.
pub fn power_budget(schedule: &NoiseSchedule, rounds: usize, local_steps: usize) -> Result<f64> {
    ensure!(rounds >= 1, "need at least one round");
    let base = schedule.base_std * schedule.base_std;
    let mut total = 0.0;
    for k in 0..rounds {
        let v = schedule.variance_at(k, local_steps);
        if v == 0.0 || base == 0.0 {
            return Err(Error::InfiniteBudget { round: k });
        }
        total += base / v;
    }
    Ok(total)
}

/// Power budgets of the asymmetric control policy against symmetric
/// `Ω(k)` scaling on both links.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub rounds: usize,
    pub local_steps: usize,
    /// Downlink `1/(E²(k+1))` variance decay.
    pub ours_downlink: f64,
    /// Uplink `1/√(k+1)` variance decay.
    pub ours_uplink: f64,
    pub prior_downlink: f64,
    pub prior_uplink: f64,
}

impl PolicyComparison {
    pub fn uplink_ratio(&self) -> f64 {
        self.ours_uplink / self.prior_uplink
    }

    pub fn downlink_ratio(&self) -> f64 {
        self.ours_downlink / self.prior_downlink
    }

    pub fn total_ratio(&self) -> f64 {
        (self.ours_uplink + self.ours_downlink) / (self.prior_uplink + self.prior_downlink)
    }
}

pub fn compare_policies(rounds: usize, local_steps: usize) -> Result<PolicyComparison> {
    ensure!(rounds >= 1, "need at least one round");
    ensure!(local_steps >= 1, "need at least one local step");
    let prior_down = NoiseSchedule::poly_decay(Direction::Downlink, 1.0, 1.0, false);
    let prior_up = NoiseSchedule::poly_decay(Direction::Uplink, 1.0, 1.0, false);
    Ok(PolicyComparison {
        rounds,
        local_steps,
        ours_downlink: power_budget(&NoiseSchedule::downlink_control(1.0), rounds, local_steps)?,
        ours_uplink: power_budget(&NoiseSchedule::uplink_control(1.0), rounds, local_steps)?,
        prior_downlink: power_budget(&prior_down, rounds, local_steps)?,
        prior_uplink: power_budget(&prior_up, rounds, local_steps)?,
    })
}
