//! Synthetic clustered data on the unit sphere.
//!
//! Keys are drawn around `components` random unit centers. Queries come from
//! a shifted copy of the same mixture: each center is perturbed once, so
//! queries and keys live in related but different regions.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::vecstore::{EmbeddingStore, StoreKind};

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureConfig {
    pub keys: usize,
    pub dim: usize,
    pub components: usize,
    /// Noise around each key center before normalization.
    pub key_spread: f64,
    /// Perturbation turning key centers into query centers.
    pub query_shift: f64,
    pub query_spread: f64,
    pub train_queries: usize,
    pub val_queries: usize,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            keys: 2048,
            dim: 16,
            components: 10,
            key_spread: 0.1,
            query_shift: 0.5,
            query_spread: 0.04,
            train_queries: 4096,
            val_queries: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mixture {
    pub keys: EmbeddingStore,
    pub train: EmbeddingStore,
    pub val: EmbeddingStore,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, dim), || rng.sample(StandardNormal))
}

/// Rows scaled to unit length; all-zero rows are left as they are (they have
/// probability zero under a Gaussian draw).
pub fn normalized(mut a: Array2<f64>) -> Array2<f64> {
    for mut r in a.axis_iter_mut(Axis(0)) {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r /= n;
        }
    }
    a
}

fn around(rng: &mut ChaCha8Rng, centers: &Array2<f64>, rows: usize, spread: f64) -> Array2<f64> {
    let pick: Vec<usize> = (0..rows).map(|_| rng.random_range(0..centers.nrows())).collect();
    let base = centers.select(Axis(0), &pick);
    normalized(base + gaussian(rng, rows, centers.ncols()) * spread)
}

pub fn mixture(cfg: &MixtureConfig) -> Result<Mixture> {
    if cfg.keys == 0 || cfg.dim == 0 || cfg.components == 0 {
        return Err(Error::invalid("mixture needs keys, dimensions and components"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = normalized(gaussian(&mut rng, cfg.components, cfg.dim));
    let keys = around(&mut rng, &centers, cfg.keys, cfg.key_spread);
    let shifted = normalized(&centers + &(gaussian(&mut rng, cfg.components, cfg.dim) * cfg.query_shift));
    let train = around(&mut rng, &shifted, cfg.train_queries, cfg.query_spread);
    let val = around(&mut rng, &shifted, cfg.val_queries, cfg.query_spread);
    Ok(Mixture {
        keys: EmbeddingStore::from_f64(&keys, StoreKind::Key)?,
        train: EmbeddingStore::from_f64(&train, StoreKind::Query)?,
        val: EmbeddingStore::from_f64(&val, StoreKind::Query)?,
    })
}
