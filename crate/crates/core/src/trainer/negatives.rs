//! Negative samplers over the frozen image pool, registered by name.

use std::collections::BTreeMap;
use std::fmt::Debug;

use rand::seq::index::sample;

use crate::corpus::EmbeddingPool;
use crate::rng::Rng;
use crate::{Error, Result};

pub trait NegativeSampler: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the pool must carry cluster assignments.
    fn uses_clusters(&self) -> bool;

    /// `n_neg` distinct pool rows, none equal to `positive`.
    fn sample(&self, pool: &EmbeddingPool, positive: usize, n_neg: usize, n_hard_max: usize, rng: &mut Rng) -> Result<Vec<usize>>;
}

fn check_pool(pool: &EmbeddingPool, positive: usize, n_neg: usize) -> Result<()> {
    if pool.len() < n_neg + 1 {
        return Err(Error::TooSmall {
            what: "negative pool size",
            actual: pool.len(),
            required: n_neg + 1,
        });
    }
    if positive >= pool.len() {
        return Err(Error::Invalid(format!("positive {positive} outside pool of {}", pool.len())));
    }
    Ok(())
}

/// `k` distinct draws from `candidates`.
fn draw(candidates: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct UniformSampler;

impl NegativeSampler for UniformSampler {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn uses_clusters(&self) -> bool {
        false
    }

    fn sample(&self, pool: &EmbeddingPool, positive: usize, n_neg: usize, _: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        check_pool(pool, positive, n_neg)?;
        Ok(sample(rng, pool.len() - 1, n_neg)
            .into_iter()
            .map(|i| if i >= positive { i + 1 } else { i })
            .collect())
    }
}

/// Up to `n_hard_max` negatives from the positive's own cluster, the rest
/// uniformly from outside it.
#[derive(Debug, Clone, Copy)]
pub struct ClusteredSampler;

impl NegativeSampler for ClusteredSampler {
    fn name(&self) -> &'static str {
        "clustered"
    }

    fn uses_clusters(&self) -> bool {
        true
    }

    fn sample(&self, pool: &EmbeddingPool, positive: usize, n_neg: usize, n_hard_max: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        check_pool(pool, positive, n_neg)?;
        let Some(cluster_of) = pool.cluster_of() else {
            return UniformSampler.sample(pool, positive, n_neg, n_hard_max, rng);
        };
        let c = cluster_of[positive];
        let same: Vec<usize> = pool.cluster_members(c).iter().copied().filter(|&i| i != positive).collect();
        let n_hard = n_hard_max.min(same.len()).min(n_neg);
        let mut out = draw(&same, n_hard, rng);
        let rest = n_neg - n_hard;
        let outside: Vec<usize> = (0..pool.len()).filter(|&i| cluster_of[i] != c).collect();
        if outside.len() >= rest {
            out.extend(draw(&outside, rest, rng));
        } else {
            // Too few items outside the cluster: top up from the unused
            // members of the positive's own cluster.
            out.extend(outside);
            let mut used = out.clone();
            used.sort_unstable();
            let spare: Vec<usize> = same.into_iter().filter(|i| used.binary_search(i).is_err()).collect();
            out.extend(draw(&spare, n_neg - out.len(), rng));
        }
        Ok(out)
    }
}

/// Draws negatives with the clustered rule when the pool carries clusters
/// and uniformly otherwise.
pub fn sample_negatives(pool: &EmbeddingPool, positive: usize, n_neg: usize, n_hard_max: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if pool.cluster_of().is_some() {
        ClusteredSampler.sample(pool, positive, n_neg, n_hard_max, rng)
    } else {
        UniformSampler.sample(pool, positive, n_neg, n_hard_max, rng)
    }
}

pub type SamplerBuilder = fn() -> Box<dyn NegativeSampler>;

pub struct NegativeRegistry {
    builders: BTreeMap<&'static str, SamplerBuilder>,
}

impl Default for NegativeRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register("uniform", || Box::new(UniformSampler));
        r.register("clustered", || Box::new(ClusteredSampler));
        r
    }
}

impl NegativeRegistry {
    pub fn register(&mut self, name: &'static str, builder: SamplerBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn check(&self, name: &str) -> Result<()> {
        self.build(name).map(|_| ())
    }

    pub fn build(&self, name: &str) -> Result<Box<dyn NegativeSampler>> {
        self.builders.get(name).map(|b| b()).ok_or_else(|| Error::Unknown {
            kind: "negative sampler",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }
}
