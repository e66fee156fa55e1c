//! Synthetic interaction logs with planted sequential structure.
//!
//! Items are split round-robin into clusters (matching
//! [`crate::embeddings::synth_embeddings`]) and each item has a fixed
//! successor inside its cluster. A user sticks to one cluster and mostly
//! follows successor links, so next-item prediction is learnable and item
//! co-occurrence is strong.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::RawInteraction;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticInteractions {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of stepping to the current item's successor.
    pub follow_prob: f64,
    /// Probability of an off-cluster uniformly random item.
    pub noise_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticInteractions {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 120,
            n_clusters: 4,
            min_len: 6,
            max_len: 14,
            follow_prob: 0.7,
            noise_prob: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticInteractions {
    /// Successor map: a random cycle over each cluster's members.
    pub fn successors(&self) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_cafe);
        let mut succ = vec![0u32; self.n_items];
        for c in 0..self.n_clusters {
            let mut members: Vec<u32> = (c..self.n_items).step_by(self.n_clusters).map(|i| i as u32).collect();
            members.shuffle(&mut rng);
            for w in 0..members.len() {
                succ[members[w] as usize] = members[(w + 1) % members.len()];
            }
        }
        succ
    }

    pub fn generate(&self) -> Result<Vec<RawInteraction>> {
        if self.n_clusters == 0 || self.n_clusters > self.n_items || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Argument(format!("invalid synthetic interaction config: {self:?}")));
        }
        let succ = self.successors();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        for u in 0..self.n_users {
            let cluster = rng.random_range(0..self.n_clusters);
            let members: Vec<usize> = (cluster..self.n_items).step_by(self.n_clusters).collect();
            let len = rng.random_range(self.min_len..=self.max_len);
            let mut cur = members[rng.random_range(0..members.len())];
            for t in 0..len {
                out.push(RawInteraction::new(format!("u{u}"), format!("i{cur}"), t as i64));
                let roll: f64 = rng.random();
                cur = if roll < self.follow_prob {
                    succ[cur] as usize
                } else if roll < self.follow_prob + self.noise_prob {
                    rng.random_range(0..self.n_items)
                } else {
                    members[rng.random_range(0..members.len())]
                };
            }
        }
        Ok(out)
    }
}
