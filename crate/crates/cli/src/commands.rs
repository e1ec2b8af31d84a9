//! The work behind each subcommand. Everything here returns data; `main`
//! decides what to print and where to write it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use noisyfed::channel::compare_policies;
use noisyfed::data::regression_optimum;
use noisyfed::model::loss_indexed;
use noisyfed::theory::{bcd_gap, bcd_witness, empirical_sigma2, theorem1_bound, theorem2_bound};
use noisyfed::{
    min_rounds, run_noisy_fedavg, run_noisy_sgd, BoundReport, ClientPartition, LossKind, ParamVector, RunResult,
    RunStatus, SgdConfig, TheoryParams,
};
use serde::Serialize;

use crate::config::{Axis, ExperimentConfig, Mode, Workload};
use crate::error::CliError;
use crate::metrics;

/// A file the command wants to create.
pub struct Artifact {
    pub path: PathBuf,
    pub contents: String,
}

/// Writes every artifact, or none: files already written are removed if a
/// later one fails.
pub fn write_artifacts(artifacts: &[Artifact]) -> Result<(), CliError> {
    let mut written: Vec<&Path> = Vec::new();
    for a in artifacts {
        let result = a
            .path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or(Ok(()), std::fs::create_dir_all)
            .and_then(|_| std::fs::write(&a.path, &a.contents));
        if let Err(e) = result {
            for p in written {
                let _ = std::fs::remove_file(p);
            }
            return Err(CliError::io(&a.path, e));
        }
        written.push(&a.path);
    }
    Ok(())
}

/// Runs `f` over `items` on at most `threads` workers, keeping input order.
fn map_seeds<T, R, F>(items: &[T], threads: Option<usize>, f: F) -> Result<Vec<R>, CliError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, CliError> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let work = || items.par_iter().map(&f).collect::<Result<Vec<R>, CliError>>();
        match threads {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::usage(format!("cannot start {n} worker threads: {e}")))?
                .install(work),
            None => work(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        items.iter().map(f).collect()
    }
}

/// One training run per seed, in seed order.
pub fn run_seeds(
    config: &ExperimentConfig,
    workload: &Workload,
    seeds: &[u64],
    threads: Option<usize>,
) -> Result<Vec<RunResult>, CliError> {
    map_seeds(seeds, threads, |&seed| {
        let result = match config.mode {
            Mode::Fedavg => run_noisy_fedavg(
                &config.fedavg_config(seed),
                &workload.model,
                &workload.partition,
                &workload.dataset,
            )?,
            Mode::Sgd => run_noisy_sgd(
                &SgdConfig {
                    learning_rate: config.sgd.learning_rate,
                    iterations: config.sgd.iterations,
                    batch_size: config.sgd.batch_size,
                    uplink: config.uplink_schedule(),
                    downlink: config.downlink_schedule(),
                    seed,
                },
                &workload.model,
                &workload.dataset,
            )?,
        };
        Ok(result)
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub metrics_file: String,
    pub final_loss: f64,
    pub k_star: usize,
    pub status: RunStatus,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub smoothness: f64,
    pub learning_rate: f64,
    pub zeta: f64,
    pub min_rounds: Option<f64>,
    pub below_min_rounds: bool,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub runs: Vec<SeedSummary>,
    pub sigma2: Option<f64>,
    pub bound: Option<BoundReport>,
}

/// Sample mean and (n−1)-normalized standard deviation; std is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `(1/n) Σ f_i(0)`.
fn initial_loss(workload: &Workload) -> Result<f64, CliError> {
    let zero = ParamVector::zeros(workload.model.param_len());
    let n = workload.partition.clients() as f64;
    let mut total = 0.0;
    for shard in &workload.partition.shards {
        total += loss_indexed(&workload.model, &zero, &workload.dataset, shard)?;
    }
    Ok(total / n)
}

/// Configured `σ²`, or the Monte-Carlo estimate at the origin, the generating
/// parameters (when known) and any extra probe points.
fn sigma2(
    config: &ExperimentConfig,
    workload: &Workload,
    partition: &ClientPartition,
    batch_size: usize,
    extra: &[ParamVector],
) -> Result<f64, CliError> {
    if let Some(s) = config.theory.sigma2 {
        return Ok(s);
    }
    let mut probes = vec![ParamVector::zeros(workload.model.param_len())];
    if let Some(theta) = &workload.dataset.theta_star {
        probes.push(theta.clone());
    }
    probes.extend(extra.iter().filter(|p| p.is_finite()).cloned());
    Ok(empirical_sigma2(
        &workload.model,
        partition,
        &workload.dataset,
        &probes,
        batch_size,
        config.theory.sigma2_trials,
        config.data.seed,
    )?)
}

/// Bound parameters for a FedAvg config; `None` when the bound does not
/// apply (fewer than two clients).
fn fedavg_bound(config: &ExperimentConfig, workload: &Workload, sigma2: f64) -> Result<Option<BoundReport>, CliError> {
    let f = &config.fedavg;
    if f.clients < 2 {
        return Ok(None);
    }
    let l = workload.model.smoothness;
    let eta = config.fedavg_config(0).effective_learning_rate(l)?;
    let dim = workload.model.param_len() as f64;
    let params = TheoryParams {
        clients: f.clients,
        participants: f.participants,
        local_steps: f.local_steps,
        rounds: f.rounds,
        gamma: f.gamma,
        smoothness: l,
        learning_rate: eta,
        sigma2,
        f0: initial_loss(workload)?,
        sum_u2: dim * config.uplink_schedule().variance_sum(f.rounds, f.local_steps),
        sum_n2: dim * config.downlink_schedule().variance_sum(f.rounds, f.local_steps),
    };
    Ok(Some(theorem2_bound(&params)?))
}

fn sgd_bound(config: &ExperimentConfig, workload: &Workload, sigma2: f64) -> Result<BoundReport, CliError> {
    let s = &config.sgd;
    let f_star = match workload.model.kind {
        LossKind::MseLinear => regression_optimum(&workload.dataset)?.1,
        LossKind::SoftmaxLinear => 0.0,
    };
    let dim = workload.model.param_len() as f64;
    Ok(theorem1_bound(
        s.learning_rate,
        workload.model.smoothness,
        s.iterations,
        initial_loss(workload)?,
        f_star,
        sigma2,
        dim * config.uplink_schedule().variance_sum(s.iterations, 1),
        dim * config.downlink_schedule().variance_sum(s.iterations, 1),
    )?)
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub results: Vec<RunResult>,
    pub artifacts: Vec<Artifact>,
}

/// Runs every seed and assembles the metrics files plus the summary document.
pub fn run(config: &ExperimentConfig, prefix: &str, threads: Option<usize>) -> Result<RunOutput, CliError> {
    let workload = config.workload()?;
    let results = run_seeds(config, &workload, &config.repeat_seeds, threads)?;

    let mut artifacts = Vec::with_capacity(results.len() + 1);
    let mut runs = Vec::with_capacity(results.len());
    for (&seed, result) in config.repeat_seeds.iter().zip(&results) {
        let path = PathBuf::from(format!("{prefix}_seed{seed}.csv"));
        runs.push(SeedSummary {
            seed,
            metrics_file: path.display().to_string(),
            final_loss: result.final_loss,
            k_star: result.k_star,
            status: result.status,
        });
        artifacts.push(Artifact {
            path,
            contents: metrics::render(&result.metrics),
        });
    }
    let losses: Vec<f64> = results.iter().map(|r| r.final_loss).collect();
    let (final_loss_mean, final_loss_std) = mean_std(&losses);
    let finals: Vec<ParamVector> = results.iter().map(|r| r.final_params.clone()).collect();

    let (min_k, below, sigma2_used, bound) = match config.mode {
        Mode::Fedavg => {
            let f = &config.fedavg;
            let needed = min_rounds(f.participants as f64, f.gamma)?;
            if f.learning_rate_override.is_none() {
                let s2 = sigma2(config, &workload, &workload.partition, f.batch_size, &finals)?;
                (
                    Some(needed),
                    (f.rounds as f64) < needed,
                    Some(s2),
                    fedavg_bound(config, &workload, s2)?,
                )
            } else {
                (Some(needed), (f.rounds as f64) < needed, None, None)
            }
        }
        Mode::Sgd => {
            let whole = ClientPartition {
                shards: vec![(0..workload.dataset.len()).collect()],
            };
            let s2 = sigma2(config, &workload, &whole, config.sgd.batch_size, &finals)?;
            (None, false, Some(s2), Some(sgd_bound(config, &workload, s2)?))
        }
    };

    let summary = RunSummary {
        config: config.clone(),
        smoothness: workload.model.smoothness,
        learning_rate: results[0].learning_rate,
        zeta: results[0].zeta,
        min_rounds: min_k,
        below_min_rounds: below,
        final_loss_mean,
        final_loss_std,
        runs,
        sigma2: sigma2_used,
        bound,
    };
    artifacts.push(Artifact {
        path: PathBuf::from(format!("{prefix}_summary.json")),
        contents: serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    });
    Ok(RunOutput {
        summary,
        results,
        artifacts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoiseFree,
    UplinkOnly,
    DownlinkOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NoiseFree, Variant::UplinkOnly, Variant::DownlinkOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoiseFree => "noise_free",
            Variant::UplinkOnly => "uplink_only",
            Variant::DownlinkOnly => "downlink_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub variant: Variant,
    /// Mean over the repeat seeds.
    pub final_loss: f64,
    /// `final_loss` minus the noise-free mean at the same axis value.
    pub excess: f64,
}

/// For every axis value, runs the noise-free, uplink-only and downlink-only
/// variants of `config` over its repeat seeds.
pub fn sweep(
    config: &ExperimentConfig,
    axis: Axis,
    values: &[usize],
    threads: Option<usize>,
) -> Result<Vec<SweepRow>, CliError> {
    if config.mode != Mode::Fedavg {
        return Err(CliError::usage("sweeps need mode fedavg"));
    }
    if values.is_empty() {
        return Err(CliError::usage("sweep needs at least one value"));
    }
    if config.uplink_schedule().is_off() || config.downlink_schedule().is_off() {
        return Err(CliError::usage(
            "sweeps need noise on both links: the variants switch one of them off",
        ));
    }
    let mut variants = Vec::with_capacity(values.len() * 3);
    for &v in values {
        for variant in Variant::ALL {
            let mut c = config.clone();
            match axis {
                Axis::Participants => c.fedavg.participants = v,
                Axis::LocalSteps => c.fedavg.local_steps = v,
            }
            match variant {
                Variant::NoiseFree => {
                    c.uplink = Default::default();
                    c.downlink = Default::default();
                }
                Variant::UplinkOnly => c.downlink = Default::default(),
                Variant::DownlinkOnly => c.uplink = Default::default(),
            }
            c.validate()
                .map_err(|(_, msg)| CliError::usage(format!("{} = {v}: {msg}", axis.name())))?;
            variants.push((v, variant, c));
        }
    }
    let workload = config.workload()?;
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|i| config.repeat_seeds.iter().map(move |&s| (i, s)))
        .collect();
    let losses = map_seeds(&jobs, threads, |&(i, seed)| {
        let c = &variants[i].2;
        Ok(run_noisy_fedavg(
            &c.fedavg_config(seed),
            &workload.model,
            &workload.partition,
            &workload.dataset,
        )?
        .final_loss)
    })?;
    let per = config.repeat_seeds.len();
    let means: Vec<f64> = losses.chunks(per).map(|c| mean_std(c).0).collect();
    Ok(variants
        .iter()
        .zip(&means)
        .enumerate()
        .map(|(i, ((value, variant, _), &mean))| SweepRow {
            value: *value,
            variant: *variant,
            final_loss: mean,
            excess: mean - means[i - i % 3],
        })
        .collect())
}

pub fn render_sweep(axis: Axis, rows: &[SweepRow]) -> String {
    let mut out = format!("{},variant,final_loss,excess\n", axis.name());
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.value,
            r.variant.name(),
            metrics::number(r.final_loss),
            metrics::number(r.excess)
        )
        .expect("writing to a String");
    }
    out
}

/// Bound report without training: `f(w₀)` at the origin and `σ²` from the
/// configuration or probed at the origin and the generating parameters.
pub struct BoundsOutput {
    pub report: BoundReport,
    pub min_rounds: Option<f64>,
    pub rounds: usize,
    pub sigma2: f64,
}

pub fn bounds(config: &ExperimentConfig) -> Result<BoundsOutput, CliError> {
    let workload = config.workload()?;
    match config.mode {
        Mode::Fedavg => {
            let f = &config.fedavg;
            let s2 = sigma2(config, &workload, &workload.partition, f.batch_size, &[])?;
            let report = fedavg_bound(config, &workload, s2)?
                .ok_or_else(|| CliError::usage("the FedAvg bound needs at least two clients"))?;
            if f.learning_rate_override.is_some() {
                warn!("learning_rate_override is set; the bound assumes the theory step size");
            }
            Ok(BoundsOutput {
                report,
                min_rounds: Some(min_rounds(f.participants as f64, f.gamma)?),
                rounds: f.rounds,
                sigma2: s2,
            })
        }
        Mode::Sgd => {
            let whole = ClientPartition {
                shards: vec![(0..workload.dataset.len()).collect()],
            };
            let s2 = sigma2(config, &workload, &whole, config.sgd.batch_size, &[])?;
            Ok(BoundsOutput {
                report: sgd_bound(config, &workload, s2)?,
                min_rounds: None,
                rounds: config.sgd.iterations,
                sigma2: s2,
            })
        }
    }
}

pub fn render_bounds(b: &BoundsOutput, csv: bool) -> String {
    let r = &b.report;
    let mut rows = vec![
        ("leading", r.leading),
        ("term_uplink", r.term_uplink),
        ("term_sgd_variance", r.term_sgd_variance),
        ("term_downlink", r.term_downlink),
        ("total", r.total),
        ("zeta", r.zeta),
        ("zeta2", r.zeta2),
        ("zeta3", r.zeta3),
        ("sigma2", b.sigma2),
    ];
    if let Some(m) = b.min_rounds {
        rows.push(("min_rounds", m));
    }
    let below = b.min_rounds.is_some_and(|m| (b.rounds as f64) < m);
    let mut out = String::new();
    if csv {
        out.push_str("term,value\n");
        for (k, v) in rows {
            writeln!(out, "{k},{}", metrics::number(v)).unwrap();
        }
        writeln!(out, "below_min_rounds,{}", u8::from(below)).unwrap();
    } else {
        for (k, v) in rows {
            writeln!(out, "{k:<18} {v:.10e}").unwrap();
        }
        if below {
            writeln!(
                out,
                "warning: K = {} is below min_rounds; the bound does not apply",
                b.rounds
            )
            .unwrap();
        }
    }
    out
}

pub fn render_power(rounds: usize, local_steps: usize, csv: bool) -> Result<String, CliError> {
    let c = compare_policies(rounds, local_steps)?;
    let rows = [
        ("uplink", c.ours_uplink, c.prior_uplink, c.uplink_ratio()),
        ("downlink", c.ours_downlink, c.prior_downlink, c.downlink_ratio()),
        (
            "total",
            c.ours_uplink + c.ours_downlink,
            c.prior_uplink + c.prior_downlink,
            c.total_ratio(),
        ),
    ];
    let mut out = String::new();
    if csv {
        out.push_str("link,ours,prior,ratio\n");
        for (name, ours, prior, ratio) in rows {
            writeln!(
                out,
                "{name},{},{},{}",
                metrics::number(ours),
                metrics::number(prior),
                metrics::number(ratio)
            )
            .unwrap();
        }
    } else {
        writeln!(out, "power budgets over K = {rounds} rounds, E = {local_steps}").unwrap();
        writeln!(
            out,
            "{:<10} {:>16} {:>16} {:>12}",
            "link", "ours", "prior", "ours/prior"
        )
        .unwrap();
        for (name, ours, prior, ratio) in rows {
            writeln!(out, "{name:<10} {ours:>16.4} {prior:>16.4} {ratio:>12.6}").unwrap();
        }
    }
    Ok(out)
}

pub fn render_bcd(clients: usize, bound: f64) -> Result<String, CliError> {
    if clients == 0 {
        return Err(CliError::usage("bcd-demo needs at least one client"));
    }
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(CliError::usage("bcd-demo needs a positive G"));
    }
    Ok(match bcd_witness(bound, clients) {
        None => "n = 1: gap identically 0\n".to_string(),
        Some(w) => {
            let gap = bcd_gap(w, clients);
            format!(
                "n = {clients}, G = {bound}\nwitness w = {w:.6}\ngap = {gap:.6} > G^2 = {:.6}\n",
                bound * bound
            )
        }
    })
}
