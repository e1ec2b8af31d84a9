//! Synthetic datasets and client partitions.

use std::io::{Read, Write};
use std::ops::Deref;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};
use crate::model::{dot, second_moment, top_eigenvalue, LabeledExample, LossKind, ParamVector, Target};
use crate::rng::{self, Purpose, Stream};

/// A dataset plus the generator metadata needed downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    dim: usize,
    kind: LossKind,
    classes: usize,
    /// Divisor applied to every feature vector by Hessian normalization (1 if none).
    pub feature_scale: f64,
    /// Generating parameters expressed in the (possibly rescaled) feature space.
    pub theta_star: Option<ParamVector>,
}

impl Dataset {
    /// Wraps examples that all have `dim` features; the kind is taken from the targets.
    pub fn from_examples(examples: Vec<LabeledExample>, dim: usize) -> Result<Self> {
        ensure!(!examples.is_empty(), "dataset is empty");
        let kind = match examples[0].target {
            Target::Value(_) => LossKind::MseLinear,
            Target::Class(_) => LossKind::SoftmaxLinear,
        };
        let mut classes = 1;
        for (i, ex) in examples.iter().enumerate() {
            ensure!(
                ex.features.len() == dim,
                "example {i} has {} features, expected {dim}",
                ex.features.len()
            );
            match (kind, ex.target) {
                (LossKind::MseLinear, Target::Value(_)) => {}
                (LossKind::SoftmaxLinear, Target::Class(c)) => classes = classes.max(c + 1),
                _ => return Err(invalid(format!("example {i} mixes regression and class targets"))),
            }
        }
        Ok(Self {
            examples,
            dim,
            kind,
            classes,
            feature_scale: 1.0,
            theta_star: None,
        })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    /// Number of classes (1 for regression).
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Class label of every example; `None` for regression data.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.examples
            .iter()
            .map(|ex| match ex.target {
                Target::Class(c) => Some(c),
                Target::Value(_) => None,
            })
            .collect()
    }

    /// Writes `f0..f{d-1},target` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        header.push("target".into());
        out.write_record(&header).map_err(csv_err)?;
        for ex in &self.examples {
            let mut row: Vec<String> = ex.features.iter().map(|v| v.to_string()).collect();
            row.push(match ex.target {
                Target::Value(y) => y.to_string(),
                Target::Class(c) => c.to_string(),
            });
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush().map_err(|e| invalid(format!("CSV write failed: {e}")))?;
        Ok(())
    }

    /// Reads CSV written by [`Dataset::write_csv`].
    pub fn read_csv<R: Read>(reader: R, kind: LossKind) -> Result<Self> {
        let mut input = csv::Reader::from_reader(reader);
        let header = input.headers().map_err(csv_err)?.clone();
        ensure!(
            header.len() >= 2 && header.iter().next_back() == Some("target"),
            "CSV header must be f0..f{{d-1}},target"
        );
        let dim = header.len() - 1;
        for (i, name) in header.iter().take(dim).enumerate() {
            ensure!(
                name == format!("f{i}"),
                "unexpected CSV column '{name}' at position {i}"
            );
        }
        let mut examples = Vec::new();
        for (line, record) in input.records().enumerate() {
            let record = record.map_err(csv_err)?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| invalid(format!("row {}: bad number '{s}': {e}", line + 1)))
            };
            let features = record.iter().take(dim).map(parse).collect::<Result<Vec<_>>>()?;
            let raw = &record[dim];
            let target = match kind {
                LossKind::MseLinear => Target::Value(parse(raw)?),
                LossKind::SoftmaxLinear => Target::Class(
                    raw.trim()
                        .parse()
                        .map_err(|e| invalid(format!("row {}: bad class '{raw}': {e}", line + 1)))?,
                ),
            };
            examples.push(LabeledExample { features, target });
        }
        Self::from_examples(examples, dim)
    }
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    invalid(format!("CSV error: {e}"))
}

impl Deref for Dataset {
    type Target = [LabeledExample];

    fn deref(&self) -> &[LabeledExample] {
        &self.examples
    }
}

/// Linear-Gaussian regression data `y = ⟨θ*, x⟩ + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRegressionSpec {
    pub m: usize,
    pub d: usize,
    /// Drawn standard-normal from the seed when absent.
    pub theta_star: Option<ParamVector>,
    /// Variance of the additive label noise `c`.
    pub label_noise_variance: f64,
    /// Rescale all features by one scalar so that `λ_max((1/m)XᵀX) = 1`.
    pub normalize_hessian: bool,
}

impl SyntheticRegressionSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.d >= 1, "d must be at least 1");
        ensure!(self.m >= self.d, "m ({}) must be at least d ({})", self.m, self.d);
        ensure!(
            self.label_noise_variance >= 0.0 && self.label_noise_variance.is_finite(),
            "label noise variance must be a finite non-negative number"
        );
        if let Some(theta) = &self.theta_star {
            ensure!(
                theta.len() == self.d,
                "theta_star has length {}, expected {}",
                theta.len(),
                self.d
            );
        }
        Ok(())
    }
}

/// Generates the regression dataset. Targets are computed before
/// normalization, so `theta_star` on the result is scaled to match the
/// rescaled features.
pub fn generate_regression(spec: &SyntheticRegressionSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(seed, Purpose::Data, 0, 0);
    let theta: Vec<f64> = match &spec.theta_star {
        Some(t) => t.to_vec(),
        None => normal_vec(&mut rng, spec.d),
    };
    let noise_std = spec.label_noise_variance.sqrt();
    let mut examples = Vec::with_capacity(spec.m);
    for _ in 0..spec.m {
        let features = normal_vec(&mut rng, spec.d);
        let c: f64 = rng.sample(StandardNormal);
        let y = dot(&theta, &features) + noise_std * c;
        examples.push(LabeledExample::regression(features, y));
    }
    let mut scale = 1.0;
    if spec.normalize_hessian {
        let gram = second_moment(examples.iter().map(|e| e.features.as_slice()), spec.d);
        scale = top_eigenvalue(&gram, spec.d, 1e-12).sqrt();
        for ex in &mut examples {
            for v in &mut ex.features {
                *v /= scale;
            }
        }
    }
    let mut ds = Dataset::from_examples(examples, spec.d)?;
    ds.feature_scale = scale;
    ds.theta_star = Some(ParamVector::from_raw(theta.iter().map(|t| t * scale).collect()));
    Ok(ds)
}

/// Balanced Gaussian clusters: class `i mod C` for example `i`, class means
/// of norm `cluster_separation` in random centred directions, unit-variance noise.
pub fn generate_classification(
    m: usize,
    d: usize,
    classes: usize,
    cluster_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    ensure!(d >= 1, "d must be at least 1");
    ensure!(classes >= 2, "need at least 2 classes, got {classes}");
    ensure!(m >= classes, "m ({m}) must be at least the class count ({classes})");
    ensure!(
        cluster_separation >= 0.0 && cluster_separation.is_finite(),
        "cluster separation must be finite and non-negative"
    );
    let mut rng = rng::stream(seed, Purpose::Data, 0, 0);
    // centring the random directions keeps the classes apart from one another
    // (two classes end up antipodal), which a bias-free linear model needs
    let raw: Vec<Vec<f64>> = (0..classes).map(|_| normal_vec(&mut rng, d)).collect();
    let centroid: Vec<f64> = (0..d)
        .map(|j| raw.iter().map(|v| v[j]).sum::<f64>() / classes as f64)
        .collect();
    let means: Vec<Vec<f64>> = raw
        .iter()
        .map(|v| {
            let dir: Vec<f64> = v.iter().zip(&centroid).map(|(a, c)| a - c).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return vec![0.0; d];
            }
            dir.iter().map(|x| x * cluster_separation / norm).collect()
        })
        .collect();
    let examples = (0..m)
        .map(|i| {
            let class = i % classes;
            let features = means[class]
                .iter()
                .map(|mu| mu + rng.sample::<f64, _>(StandardNormal))
                .collect();
            LabeledExample::classification(features, class)
        })
        .collect();
    let mut ds = Dataset::from_examples(examples, d)?;
    ds.classes = classes;
    Ok(ds)
}

/// The data held by each client: disjoint, covering, non-empty index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub shards: Vec<Vec<usize>>,
}

impl ClientPartition {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    /// Checks the partition laws against a dataset of `m` examples.
    pub fn validate(&self, m: usize) -> Result<()> {
        let mut seen = vec![false; m];
        for (c, shard) in self.shards.iter().enumerate() {
            ensure!(!shard.is_empty(), "shard {c} is empty");
            for &i in shard {
                ensure!(i < m, "shard {c} holds index {i} outside 0..{m}");
                ensure!(!seen[i], "index {i} assigned to more than one shard");
                seen[i] = true;
            }
        }
        ensure!(seen.iter().all(|&s| s), "partition does not cover every example");
        Ok(())
    }
}

/// Shuffles `0..m` and cuts it into `n` contiguous chunks of size ⌊m/n⌋ or ⌈m/n⌉.
pub fn partition_iid(m: usize, n: usize, seed: u64) -> Result<ClientPartition> {
    ensure!(n >= 1, "need at least one client");
    ensure!(m >= n, "cannot split {m} examples across {n} clients");
    let mut rng = rng::stream(seed, Purpose::Partition, 0, 0);
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng);
    let (base, extra) = (m / n, m % n);
    let mut shards = Vec::with_capacity(n);
    let mut start = 0;
    for c in 0..n {
        let len = base + usize::from(c < extra);
        shards.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(ClientPartition { shards })
}

/// Label-skewed split: each client ends up with at most `labels_per_client`
/// distinct classes.
///
/// Examples are grouped by class and each class is cut into equal slices so
/// that there are `n · labels_per_client` slices in total. The slices are
/// shuffled and dealt round-robin, `labels_per_client` per client.
pub fn partition_label_shard(
    dataset: &Dataset,
    n: usize,
    labels_per_client: usize,
    seed: u64,
) -> Result<ClientPartition> {
    let labels = dataset
        .labels()
        .ok_or_else(|| invalid("label-shard partitioning needs a classification dataset"))?;
    ensure!(n >= 1, "need at least one client");
    ensure!(labels_per_client >= 1, "labels_per_client must be at least 1");
    let classes = dataset.classes();
    let total_slices = n * labels_per_client;
    ensure!(
        total_slices >= classes,
        "{n} clients x {labels_per_client} labels cannot cover {classes} classes"
    );

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }

    let mut slices = Vec::with_capacity(total_slices);
    for (c, members) in by_class.iter().enumerate() {
        let count = total_slices / classes + usize::from(c < total_slices % classes);
        ensure!(
            members.len() >= count,
            "class {c} has {} examples, too few for {count} slices",
            members.len()
        );
        let (base, extra) = (members.len() / count, members.len() % count);
        let mut start = 0;
        for s in 0..count {
            let len = base + usize::from(s < extra);
            slices.push(members[start..start + len].to_vec());
            start += len;
        }
    }

    let mut rng = rng::stream(seed, Purpose::Partition, 0, 0);
    slices.shuffle(&mut rng);
    let mut shards = vec![Vec::new(); n];
    for (s, slice) in slices.into_iter().enumerate() {
        shards[s % n].extend(slice);
    }
    Ok(ClientPartition { shards })
}

/// Uniform sample of `batch_size` entries of `shard` without replacement, in sampled order.
pub fn sample_batch(shard: &[usize], batch_size: usize, rng: &mut Stream) -> Result<Vec<usize>> {
    ensure!(
        batch_size >= 1 && batch_size <= shard.len(),
        "batch size {batch_size} must lie in 1..={}",
        shard.len()
    );
    Ok(index::sample(rng, shard.len(), batch_size)
        .into_iter()
        .map(|i| shard[i])
        .collect())
}

/// Minimizer and minimum of the mean `½(⟨w,x⟩ − y)²` loss via the normal equations.
pub fn regression_optimum(dataset: &Dataset) -> Result<(ParamVector, f64)> {
    ensure!(
        dataset.kind() == LossKind::MseLinear,
        "regression optimum needs regression data"
    );
    let d = dataset.dim();
    let m = dataset.len() as f64;
    let gram = second_moment(dataset.iter().map(|e| e.features.as_slice()), d);
    let mut rhs = vec![0.0; d];
    let mut y_sq = 0.0;
    for ex in dataset.iter() {
        let Target::Value(y) = ex.target else { unreachable!() };
        for (r, x) in rhs.iter_mut().zip(&ex.features) {
            *r += x * y / m;
        }
        y_sq += y * y / m;
    }
    let w = cholesky_solve(gram.clone(), &rhs, d)?;
    // f(w*) = ½(E[y²] − ⟨w*, Xᵀy/m⟩) at the optimum
    let f_star = (0.5 * (y_sq - dot(&w, &rhs))).max(0.0);
    Ok((ParamVector::new(w)?, f_star))
}

fn cholesky_solve(mut a: Vec<f64>, b: &[f64], d: usize) -> Result<Vec<f64>> {
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        ensure!(diag > 0.0, "normal equations are singular");
        let diag = diag.sqrt();
        a[j * d + j] = diag;
        for i in j + 1..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = v / diag;
        }
    }
    let mut z = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            z[i] -= a[i * d + k] * z[k];
        }
        z[i] /= a[i * d + i];
    }
    for i in (0..d).rev() {
        for k in i + 1..d {
            z[i] -= a[k * d + i] * z[k];
        }
        z[i] /= a[i * d + i];
    }
    Ok(z)
}

fn normal_vec(rng: &mut Stream, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}
