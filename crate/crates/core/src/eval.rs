//! Leave-one-out ranking metrics and full-ranking evaluation through
//! constrained beam search.

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, Split};
use crate::error::{Error, Result};
use crate::recommender::{constrained_beam_search, PrefixTrie, Recommender};
use crate::tokenizer::IdentifierTable;

/// 1-based position of `target` in `ranked`.
pub fn rank_of(ranked: &[u32], target: u32) -> Option<usize> {
    ranked.iter().position(|&i| i == target).map(|p| p + 1)
}

pub fn recall_at_k(ranked: &[u32], target: u32, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// Single-target NDCG: the ideal DCG is 1.
pub fn ndcg_at_k(ranked: &[u32], target: u32, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Rank of `target` under dense scores, best first; ties go to the lower
/// item index.
pub fn rank_from_scores(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epoch: Option<usize>,
    pub users: usize,
    #[serde(rename = "recall@5")]
    pub recall_5: f64,
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg_5: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: f64,
}

impl MetricsRecord {
    /// Averages metrics over per-user 1-based target ranks (`None` = miss).
    pub fn from_ranks(split: Split, epoch: Option<usize>, ranks: &[Option<usize>]) -> Self {
        let n = ranks.len().max(1) as f64;
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|r| r.map_or(0.0, f)).sum::<f64>() / n;
        let recall = |k: usize| mean(&|r| if r <= k { 1.0 } else { 0.0 });
        let ndcg = |k: usize| mean(&|r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 });
        Self {
            split,
            epoch,
            users: ranks.len(),
            recall_5: recall(5),
            recall_10: recall(10),
            ndcg_5: ndcg(5),
            ndcg_10: ndcg(10),
        }
    }
}

/// Beam-decodes every example and scores its target. `beam` must cover
/// the largest cutoff (10).
pub fn full_rank_evaluate(
    model: &Recommender,
    identifiers: &IdentifierTable,
    trie: &PrefixTrie,
    examples: &[Example],
    split: Split,
    beam: usize,
    chunk: usize,
) -> Result<MetricsRecord> {
    if beam < 10 {
        return Err(Error::Argument(format!("beam {beam} is smaller than the largest cutoff 10")));
    }
    let mut ranks = Vec::with_capacity(examples.len());
    for batch in examples.chunks(chunk.max(1)) {
        let histories: Vec<Vec<u32>> = batch.iter().map(|e| e.history.clone()).collect();
        let ranked = constrained_beam_search(model, identifiers, trie, &histories, beam, beam.min(trie.num_items()))?;
        for (ex, r) in batch.iter().zip(ranked) {
            let items: Vec<u32> = r.iter().map(|x| x.item).collect();
            ranks.push(rank_of(&items, ex.target));
        }
    }
    Ok(MetricsRecord::from_ranks(split, None, &ranks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_cases() {
        let ranked = [4, 8, 1, 9, 0, 3, 7, 2, 6, 5];
        assert_eq!(recall_at_k(&ranked, 4, 5), 1.0);
        assert_eq!(recall_at_k(&ranked, 3, 5), 0.0);
        assert_eq!(ndcg_at_k(&ranked, 4, 5), 1.0);
        assert_eq!(ndcg_at_k(&ranked, 1, 5), 0.5);
        assert!((ndcg_at_k(&ranked, 7, 10) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&ranked, 11, 10), 0.0);
    }

    #[test]
    fn ranks_from_scores_break_ties_by_index() {
        let s = [0.5, 0.9, 0.5, 0.1];
        assert_eq!(rank_from_scores(&s, 1), 1);
        assert_eq!(rank_from_scores(&s, 0), 2);
        assert_eq!(rank_from_scores(&s, 2), 3);
        assert_eq!(rank_from_scores(&s, 3), 4);
    }

    #[test]
    fn record_averages_match_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ranks = Vec::new();
        let mut lists = Vec::new();
        for _ in 0..500 {
            let mut items: Vec<u32> = (0..30).collect();
            items.shuffle(&mut rng);
            let target = rng.random_range(0..40);
            ranks.push(rank_of(&items, target));
            lists.push((items, target));
        }
        let rec = MetricsRecord::from_ranks(Split::Test, None, &ranks);
        let n = lists.len() as f64;
        let r10: f64 = lists.iter().map(|(l, t)| recall_at_k(l, *t, 10)).sum::<f64>() / n;
        let n5: f64 = lists.iter().map(|(l, t)| ndcg_at_k(l, *t, 5)).sum::<f64>() / n;
        assert_eq!(rec.recall_10, r10);
        assert!((rec.ndcg_5 - n5).abs() < 1e-12);
        assert!(rec.recall_5 <= rec.recall_10);
    }

    #[test]
    fn ndcg_positive_iff_hit() {
        let ranked: Vec<u32> = (0..20).collect();
        for t in 0..25 {
            for k in [5, 10] {
                let n = ndcg_at_k(&ranked, t, k);
                assert_eq!(n > 0.0, recall_at_k(&ranked, t, k) == 1.0);
                if n > 0.0 {
                    assert!(n >= 1.0 / ((k + 1) as f64).log2() && n <= 1.0);
                }
            }
        }
    }

    #[test]
    fn record_serializes_with_metric_names() {
        let rec = MetricsRecord::from_ranks(Split::Valid, Some(3), &[Some(1), None]);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"recall@10\":0.5"), "{json}");
        assert!(json.contains("\"split\":\"valid\""));
    }
}
