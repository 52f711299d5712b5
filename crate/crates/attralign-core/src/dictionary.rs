//! Per-domain attribute dictionaries: unit-norm visual prototype keys paired
//! with trainable prompt-token values.
//!
//! Source keys are frozen after initialization. Target keys drift across
//! incremental steps through a moving average against freshly clustered
//! centroids; values are the only tensors that ever receive gradients.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::VisualFeature;
use crate::error::Error;
use crate::kmeans;
use crate::math::{self, Mat};
use crate::Result;

/// Standard deviation for the seeded Gaussian value initialization.
pub const VALUE_INIT_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl core::fmt::Display for Domain {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// One key/value pair: a unit visual prototype and an M x token_dim prompt
/// fragment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub key: Vec<f64>,
    pub value: Mat,
    pub index: usize,
}

/// The per-domain dictionary of `n` attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDictionary {
    pub domain: Domain,
    pub attributes: Vec<Attribute>,
    pub created_at_step: usize,
    pub keys_frozen: bool,
}

/// Indices of the selected attributes with their selection scores,
/// descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

impl AttributeDictionary {
    /// Build a dictionary from clustered keys and freshly initialized values.
    ///
    /// Keys come from [`init_keys_kmeanspp`]; values are zero-mean Gaussian
    /// with a fixed sigma, seeded.
    pub fn new(
        domain: Domain,
        keys: Mat,
        value_rows: usize,
        token_dim: usize,
        step: usize,
        seed: u64,
    ) -> Result<Self> {
        if value_rows == 0 {
            return Err(Error::config("attribute values need at least one token row"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let attributes = (0..keys.rows)
            .map(|i| Attribute {
                key: keys.row(i).to_vec(),
                value: math::gaussian_mat(&mut rng, value_rows, token_dim, VALUE_INIT_SIGMA),
                index: i,
            })
            .collect();
        Ok(AttributeDictionary {
            domain,
            attributes,
            created_at_step: step,
            keys_frozen: domain == Domain::Source,
        })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn key_dim(&self) -> usize {
        self.attributes.first().map_or(0, |a| a.key.len())
    }

    pub fn value_shape(&self) -> (usize, usize) {
        self.attributes
            .first()
            .map_or((0, 0), |a| (a.value.rows, a.value.cols))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.attributes.iter().enumerate() {
            if a.index != i {
                return Err(Error::contract(format!(
                    "attribute index {} out of order (slot {})",
                    a.index, i
                )));
            }
            let n = math::norm(&a.key);
            if math::abs(n - 1.0) > 1e-5 {
                return Err(Error::contract(format!(
                    "key {} has norm {} (expected unit)",
                    i, n
                )));
            }
            if !a.value.is_finite() {
                return Err(Error::Numerical(format!("value {} is not finite", i)));
            }
        }
        Ok(())
    }

    /// Checksum over keys only; stable across a run for the source dictionary.
    pub fn keys_checksum(&self) -> u64 {
        math::checksum_f64s(self.attributes.iter().map(|a| a.key.as_slice()))
    }

    /// Checksum over values; stable while no gradient step touches them.
    pub fn values_checksum(&self) -> u64 {
        math::checksum_f64s(self.attributes.iter().map(|a| a.value.data.as_slice()))
    }

    /// Top-L keys by cosine similarity to `z`, ties broken by lower index.
    pub fn select_top_l(&self, z: &VisualFeature, l: usize) -> Result<SelectionResult> {
        let n = self.len();
        if l == 0 || l > n {
            return Err(Error::sizing(format!(
                "selection size {} out of range 1..={}",
                l, n
            )));
        }
        let mut scored: Vec<(usize, f64)> = self
            .attributes
            .iter()
            .map(|a| (a.index, math::dot(&a.key, &z.vector)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(l);
        Ok(SelectionResult {
            indices: scored.iter().map(|s| s.0).collect(),
            scores: scored.iter().map(|s| s.1).collect(),
        })
    }

    /// Moving-average key update for the target dictionary at the start of an
    /// incremental step. The step's features are clustered with Lloyd
    /// iterations seeded from the current keys, fresh centroids are matched
    /// one-to-one to keys greedily by cosine, and each key moves as
    /// `normalize(mu * key + (1 - mu) * centroid)`.
    pub fn update_target_keys_ema(
        &mut self,
        step_features: &[VisualFeature],
        mu: f64,
    ) -> Result<()> {
        if self.domain != Domain::Target {
            return Err(Error::contract(
                "moving-average key update applies to the target dictionary only",
            ));
        }
        if !(0.0..1.0).contains(&mu) && mu != 1.0 {
            return Err(Error::config(format!("mu must be in (0, 1], got {mu}")));
        }
        let n = self.len();
        if step_features.len() < n {
            log::warn!(
                "skipping key update: {} features for {} keys",
                step_features.len(),
                n
            );
            return Ok(());
        }
        let raw: Vec<Vec<f64>> = step_features.iter().map(|f| f.vector.clone()).collect();
        let seeds: Vec<Vec<f64>> = self.attributes.iter().map(|a| a.key.clone()).collect();
        let centroids = kmeans::lloyd(&raw, seeds, kmeans::MAX_ITER)?;

        let pairs = greedy_match(
            &self
                .attributes
                .iter()
                .map(|a| a.key.as_slice())
                .collect::<Vec<_>>(),
            &(0..n).map(|i| centroids.row(i)).collect::<Vec<_>>(),
        );
        for (key_idx, centroid_idx) in pairs {
            let centroid = centroids.row(centroid_idx);
            let key = &mut self.attributes[key_idx].key;
            for (k, c) in key.iter_mut().zip(centroid) {
                *k = mu * *k + (1.0 - mu) * c;
            }
            math::normalize_mut(key);
        }
        Ok(())
    }
}

/// Greedy one-to-one matching maximizing cosine: repeatedly take the highest
/// remaining (key, centroid) pair. Ties resolve to lower key index, then
/// lower centroid index.
pub fn greedy_match(keys: &[&[f64]], centroids: &[&[f64]]) -> Vec<(usize, usize)> {
    let n = keys.len();
    debug_assert_eq!(n, centroids.len());
    let mut key_used = alloc::vec![false; n];
    let mut cen_used = alloc::vec![false; n];
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if key_used[i] {
                continue;
            }
            for j in 0..n {
                if cen_used[j] {
                    continue;
                }
                let c = math::dot(keys[i], centroids[j]);
                let better = match best {
                    None => true,
                    Some((bi, bj, bc)) => {
                        c > bc || (c == bc && (i, j) < (bi, bj))
                    }
                };
                if better {
                    best = Some((i, j, c));
                }
            }
        }
        let (i, j, _) = best.expect("square matching always has a pair");
        key_used[i] = true;
        cen_used[j] = true;
        pairs.push((i, j));
    }
    pairs.sort_unstable();
    pairs
}

/// Cluster features into `n` unit centroids for key initialization.
pub fn init_keys_kmeanspp(features: &[VisualFeature], n: usize, seed: u64) -> Result<Mat> {
    let raw: Vec<Vec<f64>> = features.iter().map(|f| f.vector.clone()).collect();
    kmeans::init_kmeanspp(&raw, n, seed)
}
