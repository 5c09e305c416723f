//! Synthetic "semantic blobs": class feature means are a fixed random linear
//! image of unit-sphere semantic vectors, so semantically close classes are
//! also close (confusable) in feature space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassId, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::semantics::SemanticStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub base: usize,
    pub val: usize,
    pub novel: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            base: 20,
            val: 5,
            novel: 5,
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.base + self.val + self.novel
    }
}

/// Generator settings. Class `i` is assigned to base, val, then novel in
/// id order according to `split`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobSpec {
    pub split: SplitCounts,
    /// Semantic dimension.
    pub d_s: usize,
    /// Feature dimension.
    pub d_x: usize,
    pub samples_per_class: usize,
    /// Std-dev of the per-class offset added to `A·e`.
    pub semantic_noise: f64,
    /// Std-dev of the isotropic sample noise around each class mean.
    pub feature_noise: f64,
    /// Entries of `A` are N(0, mean_scale² / d_x), so `‖A·u‖ ≈ mean_scale·‖u‖`.
    pub mean_scale: f64,
    /// Seed of the semantic-to-feature map `A`, independent of the run seed.
    pub mixing_seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            split: SplitCounts::default(),
            d_s: 8,
            d_x: 32,
            samples_per_class: 60,
            semantic_noise: 0.05,
            feature_noise: 1.0,
            mean_scale: 4.0,
            mixing_seed: 17,
        }
    }
}

impl BlobSpec {
    pub fn n_classes(&self) -> usize {
        self.split.total()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes() == 0 || self.d_s == 0 || self.d_x == 0 {
            return Err(Error::Config(
                "blob spec needs at least one class and nonzero dimensions".into(),
            ));
        }
        if !self.feature_noise.is_finite() || self.feature_noise <= 0.0 {
            return Err(Error::Config(format!(
                "feature_noise must be positive, got {}",
                self.feature_noise
            )));
        }
        if !self.semantic_noise.is_finite()
            || self.semantic_noise < 0.0
            || !self.mean_scale.is_finite()
        {
            return Err(Error::Config(
                "semantic_noise must be nonnegative and mean_scale finite".into(),
            ));
        }
        Ok(())
    }
}

/// Generated dataset together with its ground truth.
#[derive(Clone, Debug)]
pub struct Blobs {
    pub dataset: Dataset,
    pub store: SemanticStore,
    /// Class feature means `μᵢ`, indexed by class id.
    pub means: Vec<Vec<f64>>,
}

pub fn generate_blobs(spec: &BlobSpec, seed: u64) -> Result<(Dataset, SemanticStore)> {
    let b = generate_blobs_with_means(spec, seed)?;
    Ok((b.dataset, b.store))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_blobs_with_means(spec: &BlobSpec, seed: u64) -> Result<Blobs> {
    spec.validate()?;
    let n = spec.n_classes();

    let mut mix_rng = ChaCha8Rng::seed_from_u64(spec.mixing_seed);
    let a_std = spec.mean_scale / (spec.d_x as f64).sqrt();
    let mixing: Vec<f64> = (0..spec.d_x * spec.d_s)
        .map(|_| a_std * normal(&mut mix_rng))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let semantic: Vec<Vec<f64>> = (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.d_s).map(|_| normal(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();

    let means: Vec<Vec<f64>> = semantic
        .iter()
        .map(|e| {
            (0..spec.d_x)
                .map(|r| {
                    let row = &mixing[r * spec.d_s..(r + 1) * spec.d_s];
                    let ae: f64 = row.iter().zip(e).map(|(a, b)| a * b).sum();
                    ae + spec.semantic_noise * normal(&mut rng)
                })
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(n * spec.samples_per_class);
    for (c, mu) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let features = mu
                .iter()
                .map(|m| m + spec.feature_noise * normal(&mut rng))
                .collect();
            samples.push(Sample {
                features,
                class: ClassId(c),
            });
        }
    }

    let names: Vec<String> = (0..n).map(|i| format!("class{i:03}")).collect();
    let splits = (0..n)
        .map(|i| {
            if i < spec.split.base {
                Split::Base
            } else if i < spec.split.base + spec.split.val {
                Split::Val
            } else {
                Split::Novel
            }
        })
        .collect();

    let mut store = SemanticStore::new(spec.d_s);
    for (i, e) in semantic.into_iter().enumerate() {
        store.insert(ClassId(i), &names[i], e)?;
    }
    let dataset = Dataset::new(samples, names, splits)?;
    Ok(Blobs {
        dataset,
        store,
        means,
    })
}

/// Smallest euclidean distance between two class means, over `classes`.
pub fn min_mean_separation(means: &[Vec<f64>], classes: &[ClassId]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in classes.iter().enumerate() {
        for b in &classes[i + 1..] {
            let d = means[a.0]
                .iter()
                .zip(&means[b.0])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}
