//! Client-distribution families.
//!
//! A [`MetaDistribution`] is a distribution over client data distributions.
//! Drawing from it yields a [`ClientDistribution`], which in turn yields
//! [`Instance`]s. All instances and mean-vector hypotheses live in a
//! centred Euclidean ball (the [`Domain`]); Gaussian draws are projected
//! back onto it so that normalized quadratic losses stay inside `[0,1]`.

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::SeedPath;

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub x: Vec<f64>,
    pub label: Option<u32>,
}

impl Instance {
    pub fn unlabeled(x: Vec<f64>) -> Self {
        Instance { x, label: None }
    }

    pub fn labeled(x: Vec<f64>, label: u32) -> Self {
        Instance {
            x,
            label: Some(label),
        }
    }
}

/// Centred Euclidean ball of the given radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub radius: f64,
}

impl Domain {
    const SLACK: f64 = 1e-9;

    pub fn new(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::param(format!("domain radius must be > 0, got {radius}")));
        }
        Ok(Domain { radius })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        norm(x) <= self.radius * (1.0 + Self::SLACK)
    }

    /// Radially projects `x` onto the ball; returns whether it moved.
    pub fn project(&self, x: &mut [f64]) -> bool {
        let nrm = norm(x);
        if nrm > self.radius {
            let s = self.radius / nrm;
            x.iter_mut().for_each(|v| *v *= s);
            true
        } else {
            false
        }
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Serializable description of a meta-distribution, as it appears in
/// experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MetaSpec {
    /// Each client shifts every class prototype by `tau`-scaled Gaussian noise;
    /// instances are `class mean + sigma * N(0, I)` with a uniform label.
    GaussianClassification {
        dim: usize,
        classes: usize,
        separation: f64,
        tau: f64,
        sigma: f64,
        domain_radius: f64,
    },
    /// Client target `theta ~ N(m0, tau^2 I)`, instances `N(theta, sigma^2 I)`.
    GaussianMeanEstimation {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prior_mean: Option<Vec<f64>>,
        tau: f64,
        sigma: f64,
        domain_radius: f64,
    },
    /// Each client is a point mass at `c ~ N(m0, tau^2 I)`.
    PointRegressionInterp {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prior_mean: Option<Vec<f64>>,
        tau: f64,
        domain_radius: f64,
    },
    /// Every client is the same labeled Gaussian mixture.
    Homogeneous {
        dim: usize,
        classes: usize,
        separation: f64,
        sigma: f64,
        domain_radius: f64,
    },
    /// Clients are disjoint label-sorted shard pools of a fixed dataset.
    FixedDatasetShards {
        images: PathBuf,
        labels: PathBuf,
        num_shards: usize,
        shards_per_client: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain_radius: Option<f64>,
    },
}

impl MetaSpec {
    pub fn family_name(&self) -> &'static str {
        match self {
            MetaSpec::GaussianClassification { .. } => "gaussian-classification",
            MetaSpec::GaussianMeanEstimation { .. } => "gaussian-mean-estimation",
            MetaSpec::PointRegressionInterp { .. } => "point-regression-interp",
            MetaSpec::Homogeneous { .. } => "homogeneous",
            MetaSpec::FixedDatasetShards { .. } => "fixed-dataset-shards",
        }
    }
}

/// Immutable dataset with byte-valued features (scaled to `[0,1]` on access).
#[derive(Clone, Debug, PartialEq)]
pub struct FixedDataset {
    dim: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl FixedDataset {
    pub fn new(dim: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), dim * labels.len(), "pixel payload does not match dim * count");
        FixedDataset { dim, pixels, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn features(&self, index: usize) -> Vec<f64> {
        self.pixels[index * self.dim..(index + 1) * self.dim]
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect()
    }

    pub fn instance(&self, index: usize) -> Instance {
        Instance::labeled(self.features(index), u32::from(self.labels[index]))
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }
}

#[derive(Clone, Debug)]
pub struct MetaDistribution {
    spec: MetaSpec,
    domain: Domain,
    dataset: Option<Arc<FixedDataset>>,
}

impl MetaDistribution {
    /// Validates the spec; the fixed-dataset family loads its IDX files.
    pub fn new(spec: MetaSpec) -> Result<Self> {
        let dataset = match &spec {
            MetaSpec::FixedDatasetShards { images, labels, .. } => {
                Some(Arc::new(crate::idx::load_idx(images, labels)?))
            }
            _ => None,
        };
        Self::build(spec, dataset)
    }

    /// Like [`MetaDistribution::new`] but with an already loaded dataset for
    /// the fixed-dataset family (paths in the spec are then ignored).
    pub fn with_dataset(spec: MetaSpec, dataset: Arc<FixedDataset>) -> Result<Self> {
        if !matches!(spec, MetaSpec::FixedDatasetShards { .. }) {
            return Err(Error::param("a dataset can only back the fixed-dataset-shards family"));
        }
        Self::build(spec, Some(dataset))
    }

    fn build(spec: MetaSpec, dataset: Option<Arc<FixedDataset>>) -> Result<Self> {
        let nonneg = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::param(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        let positive_dim = |dim: usize| -> Result<()> {
            if dim == 0 {
                Err(Error::param("dim must be >= 1"))
            } else {
                Ok(())
            }
        };
        let domain = match &spec {
            MetaSpec::GaussianClassification {
                dim,
                classes,
                separation,
                tau,
                sigma,
                domain_radius,
            } => {
                positive_dim(*dim)?;
                nonneg("tau", *tau)?;
                nonneg("sigma", *sigma)?;
                Self::check_prototypes(*dim, *classes, *separation, *domain_radius)?
            }
            MetaSpec::Homogeneous {
                dim,
                classes,
                separation,
                sigma,
                domain_radius,
            } => {
                positive_dim(*dim)?;
                nonneg("sigma", *sigma)?;
                Self::check_prototypes(*dim, *classes, *separation, *domain_radius)?
            }
            MetaSpec::GaussianMeanEstimation {
                dim,
                prior_mean,
                tau,
                sigma,
                domain_radius,
            } => {
                positive_dim(*dim)?;
                nonneg("tau", *tau)?;
                nonneg("sigma", *sigma)?;
                let domain = Domain::new(*domain_radius)?;
                Self::check_prior(*dim, prior_mean.as_deref(), &domain)?;
                domain
            }
            MetaSpec::PointRegressionInterp {
                dim,
                prior_mean,
                tau,
                domain_radius,
            } => {
                positive_dim(*dim)?;
                nonneg("tau", *tau)?;
                let domain = Domain::new(*domain_radius)?;
                Self::check_prior(*dim, prior_mean.as_deref(), &domain)?;
                domain
            }
            MetaSpec::FixedDatasetShards {
                num_shards,
                shards_per_client,
                domain_radius,
                ..
            } => {
                let ds = dataset
                    .as_ref()
                    .ok_or_else(|| Error::param("fixed-dataset-shards requires a dataset"))?;
                if ds.is_empty() {
                    return Err(Error::param("fixed dataset is empty"));
                }
                if *num_shards == 0 || *shards_per_client == 0 {
                    return Err(Error::param("num_shards and shards_per_client must be >= 1"));
                }
                Domain::new(domain_radius.unwrap_or((ds.dim() as f64).sqrt()))?
            }
        };
        Ok(MetaDistribution {
            spec,
            domain,
            dataset,
        })
    }

    fn check_prototypes(dim: usize, classes: usize, separation: f64, radius: f64) -> Result<Domain> {
        if classes < 2 {
            return Err(Error::param("classification families need >= 2 classes"));
        }
        if !(separation.is_finite() && separation >= 0.0) {
            return Err(Error::param(format!("separation must be >= 0, got {separation}")));
        }
        let domain = Domain::new(radius)?;
        if class_prototypes(dim, classes, separation)
            .iter()
            .any(|m| !domain.contains(m))
        {
            return Err(Error::param("class prototypes fall outside the domain; raise domain_radius"));
        }
        Ok(domain)
    }

    fn check_prior(dim: usize, prior: Option<&[f64]>, domain: &Domain) -> Result<()> {
        if let Some(m0) = prior {
            if m0.len() != dim {
                return Err(Error::param(format!(
                    "prior_mean has length {} but dim is {dim}",
                    m0.len()
                )));
            }
            if !domain.contains(m0) {
                return Err(Error::param("prior_mean lies outside the domain"));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &MetaSpec {
        &self.spec
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dataset(&self) -> Option<&Arc<FixedDataset>> {
        self.dataset.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        match &self.spec {
            MetaSpec::GaussianClassification { dim, .. }
            | MetaSpec::GaussianMeanEstimation { dim, .. }
            | MetaSpec::PointRegressionInterp { dim, .. }
            | MetaSpec::Homogeneous { dim, .. } => *dim,
            MetaSpec::FixedDatasetShards { .. } => self.dataset.as_ref().map_or(0, |d| d.dim()),
        }
    }

    /// Number of classes for labeled families, `None` for unlabeled ones.
    pub fn classes(&self) -> Option<usize> {
        match &self.spec {
            MetaSpec::GaussianClassification { classes, .. } | MetaSpec::Homogeneous { classes, .. } => {
                Some(*classes)
            }
            MetaSpec::FixedDatasetShards { .. } => {
                self.dataset.as_ref().map(|d| d.num_classes().max(2))
            }
            MetaSpec::GaussianMeanEstimation { .. } | MetaSpec::PointRegressionInterp { .. } => None,
        }
    }

    fn prior_mean(&self) -> Vec<f64> {
        match &self.spec {
            MetaSpec::GaussianMeanEstimation { dim, prior_mean, .. }
            | MetaSpec::PointRegressionInterp { dim, prior_mean, .. } => {
                prior_mean.clone().unwrap_or_else(|| vec![0.0; *dim])
            }
            _ => vec![0.0; self.input_dim()],
        }
    }

    /// Draws one client distribution. The fixed-dataset family has no
    /// independent per-client draw (its cells share one shard plan), see
    /// [`crate::construction::build_superclient`].
    pub fn sample_client<R: Rng>(&self, rng: &mut R) -> Result<ClientDistribution> {
        let domain = self.domain;
        let shifted = |rng: &mut R, center: &[f64], tau: f64| -> Vec<f64> {
            let mut v: Vec<f64> = center
                .iter()
                .map(|&c| c + tau * rng.sample::<f64, _>(StandardNormal))
                .collect();
            domain.project(&mut v);
            v
        };
        Ok(match &self.spec {
            MetaSpec::GaussianClassification {
                dim,
                classes,
                separation,
                tau,
                sigma,
                ..
            } => {
                let class_means = class_prototypes(*dim, *classes, *separation)
                    .iter()
                    .map(|m| shifted(rng, m, *tau))
                    .collect();
                ClientDistribution::LabeledGaussian {
                    class_means,
                    sigma: *sigma,
                    domain,
                }
            }
            MetaSpec::Homogeneous {
                dim,
                classes,
                separation,
                sigma,
                ..
            } => ClientDistribution::LabeledGaussian {
                class_means: class_prototypes(*dim, *classes, *separation),
                sigma: *sigma,
                domain,
            },
            MetaSpec::GaussianMeanEstimation { tau, sigma, .. } => ClientDistribution::Gaussian {
                mean: shifted(rng, &self.prior_mean(), *tau),
                sigma: *sigma,
                domain,
            },
            MetaSpec::PointRegressionInterp { tau, .. } => ClientDistribution::Point {
                value: shifted(rng, &self.prior_mean(), *tau),
            },
            MetaSpec::FixedDatasetShards { .. } => {
                return Err(Error::capability(
                    "fixed-dataset-shards clients come from a shard plan, not independent draws",
                ))
            }
        })
    }
}

/// Deterministic class prototypes: class `k` sits on axis `k mod dim`, with
/// alternating sign and growing magnitude once all axes are used.
pub fn class_prototypes(dim: usize, classes: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let mut m = vec![0.0; dim];
            let sign = if (k / dim).is_multiple_of(2) { 1.0 } else { -1.0 };
            let ring = 1.0 + (k / (2 * dim)) as f64;
            m[k % dim] = sign * separation * ring;
            m
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClientDistribution {
    LabeledGaussian {
        class_means: Vec<Vec<f64>>,
        sigma: f64,
        domain: Domain,
    },
    Gaussian {
        mean: Vec<f64>,
        sigma: f64,
        domain: Domain,
    },
    Point {
        value: Vec<f64>,
    },
    ShardPool {
        pool: Vec<usize>,
        dataset: Arc<FixedDataset>,
    },
}

impl ClientDistribution {
    /// One i.i.d. draw plus whether domain projection was applied.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> (Instance, bool) {
        let gaussian = |rng: &mut R, center: &[f64], sigma: f64, domain: &Domain| {
            let mut x: Vec<f64> = center
                .iter()
                .map(|&c| c + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let clamped = domain.project(&mut x);
            (x, clamped)
        };
        match self {
            ClientDistribution::LabeledGaussian {
                class_means,
                sigma,
                domain,
            } => {
                let y = rng.random_range(0..class_means.len());
                let (x, clamped) = gaussian(rng, &class_means[y], *sigma, domain);
                (Instance::labeled(x, y as u32), clamped)
            }
            ClientDistribution::Gaussian {
                mean,
                sigma,
                domain,
            } => {
                let (x, clamped) = gaussian(rng, mean, *sigma, domain);
                (Instance::unlabeled(x), clamped)
            }
            ClientDistribution::Point { value } => (Instance::unlabeled(value.clone()), false),
            ClientDistribution::ShardPool { pool, dataset } => {
                let idx = pool[rng.random_range(0..pool.len())];
                (dataset.instance(idx), false)
            }
        }
    }
}

pub fn sample_instance(c: &ClientDistribution, seed: &SeedPath) -> Instance {
    c.draw(&mut seed.rng()).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub num_shards: usize,
    pub shards_per_client: usize,
    pub shard_size: usize,
    /// Dataset indices of each shard, in label-sorted order.
    pub shards: Vec<Vec<usize>>,
    /// Shard ids owned by each client.
    pub assignment: Vec<Vec<usize>>,
}

impl ShardPlan {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn client_pool(&self, client: usize) -> Vec<usize> {
        self.assignment[client]
            .iter()
            .flat_map(|&s| self.shards[s].iter().copied())
            .collect()
    }
}

/// Pathological non-IID partition: sort by label, cut into equal shards,
/// hand each client `shards_per_client` random shards.
pub fn shard_partition(
    labels: &[u8],
    num_shards: usize,
    shards_per_client: usize,
    seed: &SeedPath,
) -> Result<ShardPlan> {
    if num_shards == 0 || shards_per_client == 0 {
        return Err(Error::param("num_shards and shards_per_client must be >= 1"));
    }
    if labels.is_empty() || !labels.len().is_multiple_of(num_shards) {
        return Err(Error::param(format!(
            "{} items cannot be split into {num_shards} equal shards",
            labels.len()
        )));
    }
    if !num_shards.is_multiple_of(shards_per_client) {
        return Err(Error::param(format!(
            "{num_shards} shards cannot be dealt {shards_per_client} per client"
        )));
    }
    let shard_size = labels.len() / num_shards;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    let shards: Vec<Vec<usize>> = order.chunks(shard_size).map(<[usize]>::to_vec).collect();

    let mut ids: Vec<usize> = (0..num_shards).collect();
    ids.shuffle(&mut seed.rng());
    let assignment = ids.chunks(shards_per_client).map(<[usize]>::to_vec).collect();
    Ok(ShardPlan {
        num_shards,
        shards_per_client,
        shard_size,
        shards,
        assignment,
    })
}

/// `KL(P_Z || mu_i)` in nats, where `P_Z` is the population marginal of the
/// Gaussian mean-estimation family, `N(m0, (sigma^2 + tau^2) I)`, and the
/// client is `N(theta_i, sigma^2 I)`. Domain projection is ignored.
pub fn kl_population_vs_client(meta: &MetaDistribution, c: &ClientDistribution) -> Result<f64> {
    let (dim, tau, sigma) = match meta.spec() {
        MetaSpec::GaussianMeanEstimation { dim, tau, sigma, .. } => (*dim, *tau, *sigma),
        other => {
            return Err(Error::capability(format!(
                "closed-form heterogeneity KL is only available for gaussian-mean-estimation, not {}",
                other.family_name()
            )))
        }
    };
    let theta = match c {
        ClientDistribution::Gaussian { mean, .. } => mean,
        _ => return Err(Error::structural("client is not a Gaussian mean-estimation client")),
    };
    if theta.len() != dim {
        return Err(Error::structural("client mean has the wrong dimension"));
    }
    if sigma <= 0.0 {
        return Err(Error::param("the heterogeneity KL needs sigma > 0"));
    }
    let m0 = meta.prior_mean();
    let s2 = sigma * sigma;
    let p2 = s2 + tau * tau;
    let d = dim as f64;
    let shift: f64 = theta.iter().zip(&m0).map(|(t, m)| (t - m) * (t - m)).sum();
    let kl = 0.5 * (d * p2 / s2 - d + shift / s2 + d * (s2 / p2).ln());
    Ok(kl.max(0.0))
}
