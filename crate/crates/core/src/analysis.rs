//! Identifier diagnostics: collisions, codeword usage, drift between two
//! identifier dumps and 2-D projections of codebooks.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::LogBase;

/// One minus the share of distinct code tuples among all items.
pub fn collision_rate(tuples: &[Vec<u32>]) -> f64 {
    if tuples.is_empty() {
        return 0.0;
    }
    let unique: HashSet<&Vec<u32>> = tuples.iter().collect();
    1.0 - unique.len() as f64 / tuples.len() as f64
}

/// Shannon entropy of the empirical codeword frequencies at each level.
pub fn usage_entropy(tuples: &[Vec<u32>], codebook_size: usize, base: LogBase) -> Result<Vec<f64>> {
    let levels = tuples.first().map_or(0, Vec::len);
    let mut counts = vec![vec![0usize; codebook_size]; levels];
    for t in tuples {
        if t.len() != levels {
            return Err(Error::Shape("identifier tuples of different lengths".into()));
        }
        for (l, &c) in t.iter().enumerate() {
            let slot = counts[l]
                .get_mut(c as usize)
                .ok_or_else(|| Error::Index(format!("code {c} outside codebook of size {codebook_size}")))?;
            *slot += 1;
        }
    }
    let n = tuples.len() as f64;
    Ok(counts
        .iter()
        .map(|level| {
            level
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let f = c as f64 / n;
                    -f * base.log(f)
                })
                .sum()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifierEvolutionReport {
    /// Fraction of items whose code changed, per level.
    pub layer_change_rate: Vec<f64>,
    /// Keys are sorted lists of changed levels; `[]` means unchanged.
    pub pattern_distribution: BTreeMap<Vec<usize>, f64>,
}

impl IdentifierEvolutionReport {
    /// Mass on unchanged identifiers plus changes confined to one level.
    pub fn at_most_one_layer(&self) -> f64 {
        self.pattern_distribution
            .iter()
            .filter(|(k, _)| k.len() <= 1)
            .map(|(_, v)| v)
            .sum()
    }
}

pub fn identifier_evolution(before: &[Vec<u32>], after: &[Vec<u32>]) -> Result<IdentifierEvolutionReport> {
    if before.len() != after.len() || before.is_empty() {
        return Err(Error::Shape(format!(
            "dumps cover {} and {} items",
            before.len(),
            after.len()
        )));
    }
    let levels = before[0].len();
    let n = before.len() as f64;
    let mut changed = vec![0usize; levels];
    let mut patterns: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for (a, b) in before.iter().zip(after) {
        if a.len() != levels || b.len() != levels {
            return Err(Error::Shape("identifier tuples of different lengths".into()));
        }
        let diff: Vec<usize> = (0..levels).filter(|&l| a[l] != b[l]).collect();
        for &l in &diff {
            changed[l] += 1;
        }
        *patterns.entry(diff).or_default() += 1;
    }
    Ok(IdentifierEvolutionReport {
        layer_change_rate: changed.iter().map(|&c| c as f64 / n).collect(),
        pattern_distribution: patterns.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// K rows of 2-D coordinates.
    pub coords: Vec<[f64; 2]>,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// The two leading unit directions.
    pub components: [Vec<f64>; 2],
}

/// Projects rows onto their top two principal directions after centering.
/// Each direction's largest-magnitude entry is made positive.
pub fn pca_project(rows: &[Vec<f64>]) -> Result<Projection> {
    let k = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if k == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("pca needs a nonempty rectangular matrix".into()));
    }
    let x = DMatrix::from_fn(k, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(k, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / k as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let direction = |slot: usize| -> Vec<f64> {
        let Some(&i) = order.get(slot) else {
            return vec![0.0; d];
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (j, x)| if x.abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let components = [direction(0), direction(1)];
    let coords = (0..k)
        .map(|i| {
            let dot = |c: &[f64]| (0..d).map(|j| centered[(i, j)] * c[j]).sum::<f64>();
            [dot(&components[0]), dot(&components[1])]
        })
        .collect();
    Ok(Projection {
        coords,
        eigenvalues,
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dump(n: usize, levels: usize, k: u32, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..levels).map(|_| rng.random_range(0..k)).collect()).collect()
    }

    #[test]
    fn collision_closed_forms() {
        assert_eq!(collision_rate(&[vec![0, 1], vec![1, 0]]), 0.0);
        let same = vec![vec![2, 2]; 8];
        assert!((collision_rate(&same) - (1.0 - 1.0 / 8.0)).abs() < 1e-15);
    }

    #[test]
    fn collision_matches_sorted_unique_count() {
        for seed in 0..20 {
            let dump = random_dump(50, 2, 5, seed);
            let mut sorted = dump.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(collision_rate(&dump), 1.0 - sorted.len() as f64 / 50.0);
        }
    }

    #[test]
    fn entropy_closed_forms() {
        let one = vec![vec![3, 3]; 10];
        assert_eq!(usage_entropy(&one, 4, LogBase::Natural).unwrap(), vec![0.0, 0.0]);
        let uniform: Vec<Vec<u32>> = (0..8).map(|i| vec![i % 4]).collect();
        let h = usage_entropy(&uniform, 4, LogBase::Two).unwrap();
        assert!((h[0] - 2.0).abs() < 1e-15);
        assert!(usage_entropy(&[vec![4]], 4, LogBase::Two).is_err());
    }

    #[test]
    fn entropy_matches_direct_sum() {
        let dump = random_dump(200, 3, 6, 1);
        let h = usage_entropy(&dump, 6, LogBase::Natural).unwrap();
        for l in 0..3 {
            let mut want = 0.0;
            for c in 0..6 {
                let f = dump.iter().filter(|t| t[l] == c).count() as f64 / 200.0;
                if f > 0.0 {
                    want -= f * f.ln();
                }
            }
            assert!((h[l] - want).abs() < 1e-12);
            assert!(h[l] <= 6f64.ln() + 1e-12);
        }
    }

    #[test]
    fn evolution_small_cases() {
        let a = random_dump(10, 3, 4, 0);
        let same = identifier_evolution(&a, &a).unwrap();
        assert_eq!(same.layer_change_rate, vec![0.0; 3]);
        assert_eq!(same.pattern_distribution, BTreeMap::from([(vec![], 1.0)]));

        let mut b = a.clone();
        b[4][1] = (b[4][1] + 1) % 4;
        let r = identifier_evolution(&a, &b).unwrap();
        assert_eq!(r.layer_change_rate, vec![0.0, 0.1, 0.0]);
        assert_eq!(r.pattern_distribution, BTreeMap::from([(vec![], 0.9), (vec![1], 0.1)]));
        assert_eq!(r.at_most_one_layer(), 1.0);
        assert!(identifier_evolution(&a, &b[..9]).is_err());
    }

    proptest! {
        #[test]
        fn evolution_is_consistent(seed in 0u64..500) {
            let a = random_dump(40, 3, 3, seed);
            let b = random_dump(40, 3, 3, seed + 1000);
            let r = identifier_evolution(&a, &b).unwrap();
            let total: f64 = r.pattern_distribution.values().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for l in 0..3 {
                let marginal: f64 = r.pattern_distribution.iter().filter(|(k, _)| k.contains(&l)).map(|(_, v)| v).sum();
                prop_assert!((marginal - r.layer_change_rate[l]).abs() < 1e-12);
                let direct = a.iter().zip(&b).filter(|(x, y)| x[l] != y[l]).count() as f64 / 40.0;
                prop_assert_eq!(r.layer_change_rate[l], direct);
            }
        }

        #[test]
        fn zero_collisions_means_no_dedup(seed in 0u64..200) {
            let dump = random_dump(12, 2, 4, seed);
            let ids = crate::tokenizer::IdentifierTable::from_tuples(dump.clone(), 4, None).unwrap();
            prop_assert_eq!(collision_rate(&dump) == 0.0, ids.dedup_tokens_used() <= 1);
        }
    }

    #[test]
    fn planar_centered_points_keep_distances() {
        let rows = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.5, -1.5], vec![-0.5, -1.0]];
        let p = pca_project(&rows).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d_in = ((rows[i][0] - rows[j][0]).powi(2) + (rows[i][1] - rows[j][1]).powi(2)).sqrt();
                let a = p.coords[i];
                let b = p.coords[j];
                let d_out = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                assert!((d_in - d_out).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_one_codebook_has_flat_second_axis() {
        let dir = [0.3, -0.4, 0.5, 0.1];
        let rows: Vec<Vec<f64>> = (0..6).map(|i| dir.iter().map(|d| d * i as f64).collect()).collect();
        let p = pca_project(&rows).unwrap();
        assert!(p.eigenvalues[1].abs() < 1e-12);
        assert!(p.coords.iter().all(|c| c[1].abs() < 1e-10));
        let lead = p.components[0].iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(lead > 0.0);
    }

    #[test]
    fn two_component_reconstruction_error_is_trailing_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..16).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let p = pca_project(&rows).unwrap();
        let d = 5;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 16.0).collect();
        let mut err = 0.0;
        for (r, c) in rows.iter().zip(&p.coords) {
            for j in 0..d {
                let recon = mean[j] + c[0] * p.components[0][j] + c[1] * p.components[1][j];
                err += (r[j] - recon).powi(2);
            }
        }
        let trailing: f64 = p.eigenvalues[2..].iter().sum();
        assert!((err / 16.0 - trailing).abs() < 1e-10);
    }
}
