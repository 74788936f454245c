use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Domain, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Per-client class mix drawn from a symmetric Dirichlet.
    #[default]
    Dirichlet,
    /// Every client holds a copy of the same shard (zero gradient dissimilarity).
    Identical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_clients: usize,
    pub classes: usize,
    pub examples_per_client: usize,
    pub dirichlet_alpha: f64,
    pub feature_dim: usize,
    /// Standard deviation of the isotropic feature noise around each class mean.
    pub noise_scale: f64,
    pub seed: u64,
    /// Magnitude `h` of a per-client feature shift along a random unit direction.
    #[serde(default)]
    pub client_offset: f64,
    #[serde(default)]
    pub partition: Partition,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::invalid("dataset", "n_clients must be at least 1"));
        }
        if self.examples_per_client == 0 {
            return Err(Error::invalid(
                "dataset",
                "examples_per_client must be at least 1",
            ));
        }
        if self.classes == 0 || self.feature_dim == 0 {
            return Err(Error::invalid(
                "dataset",
                "classes and feature_dim must be at least 1",
            ));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::invalid(
                "dataset",
                "dirichlet_alpha must be positive",
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid("dataset", "noise_scale must be nonnegative"));
        }
        if !(self.client_offset >= 0.0 && self.client_offset.is_finite()) {
            return Err(Error::invalid(
                "dataset",
                "client_offset must be nonnegative",
            ));
        }
        Ok(())
    }
}

/// One client's local examples, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub features: Vec<f64>,
    /// The noise component of each feature row (`features = class mean + offset + noise`).
    pub noise: Vec<f64>,
    pub labels: Vec<usize>,
    pub offset: Vec<f64>,
    pub feature_dim: usize,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.feature_dim..(j + 1) * self.feature_dim]
    }

    pub fn noise_row(&self, j: usize) -> &[f64] {
        &self.noise[j * self.feature_dim..(j + 1) * self.feature_dim]
    }

    /// Empirical label distribution of the shard.
    pub fn class_shares(&self, classes: usize) -> Vec<f64> {
        let mut counts = vec![0.0; classes];
        for &y in &self.labels {
            counts[y] += 1.0;
        }
        let m = self.len() as f64;
        counts.iter().map(|c| c / m).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// `classes × feature_dim` class-conditional means.
    pub class_means: Vec<Vec<f64>>,
    /// Per-client class proportions as drawn from the Dirichlet.
    pub proportions: Vec<Vec<f64>>,
    pub shards: Vec<Shard>,
}

impl Dataset {
    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }
}

/// Generates `n_clients` shards whose label mixes follow `Dirichlet(alpha)`
/// and whose features are drawn from class-conditional Gaussians.
pub fn make_synthetic_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = substream(spec.seed, Domain::Data, 0);
    let f = spec.feature_dim;

    let class_means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| gaussian_vec(&mut rng, f, 1.0))
        .collect();

    let generated = match spec.partition {
        Partition::Dirichlet => spec.n_clients,
        Partition::Identical => 1,
    };
    let mut proportions = Vec::with_capacity(spec.n_clients);
    let mut shards = Vec::with_capacity(spec.n_clients);
    for _ in 0..generated {
        let p = dirichlet(&mut rng, spec.classes, spec.dirichlet_alpha)?;
        let direction = unit_vec(&mut rng, f);
        let offset: Vec<f64> = match spec.partition {
            Partition::Dirichlet => direction.iter().map(|u| spec.client_offset * u).collect(),
            Partition::Identical => vec![0.0; f],
        };
        let counts = apportion(&p, spec.examples_per_client);
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
            .collect();
        let mut features = Vec::with_capacity(labels.len() * f);
        let mut noise = Vec::with_capacity(labels.len() * f);
        for &y in &labels {
            for (k, mean) in class_means[y].iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                let e = spec.noise_scale * z;
                noise.push(e);
                features.push(mean + offset[k] + e);
            }
        }
        proportions.push(p);
        shards.push(Shard {
            features,
            noise,
            labels,
            offset,
            feature_dim: f,
        });
    }
    while shards.len() < spec.n_clients {
        shards.push(shards[0].clone());
        proportions.push(proportions[0].clone());
    }

    Ok(Dataset {
        spec: spec.clone(),
        class_means,
        proportions,
        shards,
    })
}

fn gaussian_vec(rng: &mut SimRng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_vec(rng: &mut SimRng, len: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, len, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Symmetric Dirichlet draw via normalised Gamma variates.
fn dirichlet(rng: &mut SimRng, k: usize, alpha: f64) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::invalid("dataset", format!("dirichlet_alpha: {e}")))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.into_iter().map(|g| g / total).collect())
    } else {
        // every variate underflowed (tiny alpha): all mass on the largest draw
        let argmax = draws
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut p = vec![0.0; k];
        p[argmax] = 1.0;
        Ok(p)
    }
}

/// Largest-remainder apportionment of `m` examples to proportions `p`.
fn apportion(p: &[f64], m: usize) -> Vec<usize> {
    let quotas: Vec<f64> = p.iter().map(|q| q * m as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(m.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}
