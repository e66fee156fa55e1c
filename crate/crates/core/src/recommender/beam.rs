use std::cmp::Ordering;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::model::{EncodedHistory, ItemInputs, Recommender};
use super::trie::PrefixTrie;
use crate::error::{Error, Result};
use crate::nn::{device, log_softmax_last};
use crate::tokenizer::IdentifierTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item: u32,
    /// Sum of token log-probabilities along the identifier path.
    pub score: f64,
}

struct Beam {
    user: usize,
    tokens: Vec<u32>,
    score: f64,
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Decodes every history in `histories` at once, expanding only prefixes
/// present in `trie`. Returns up to `top_n` items per user, best first,
/// ties broken by item index.
pub fn constrained_beam_search(
    model: &Recommender,
    identifiers: &IdentifierTable,
    trie: &PrefixTrie,
    histories: &[Vec<u32>],
    beam_size: usize,
    top_n: usize,
) -> Result<Vec<Vec<RankedItem>>> {
    if trie.num_items() == 0 {
        return Err(Error::Argument("beam search over an empty trie".into()));
    }
    if beam_size < top_n || top_n == 0 {
        return Err(Error::Argument(format!(
            "need 0 < top_n <= beam_size (top_n {top_n}, beam {beam_size})"
        )));
    }
    if histories.is_empty() {
        return Ok(Vec::new());
    }
    let encoded = model.encode_history(ItemInputs::Hard(identifiers), histories, false)?;
    let mut beams: Vec<Beam> = (0..histories.len())
        .map(|user| Beam {
            user,
            tokens: Vec::new(),
            score: 0.0,
        })
        .collect();
    for _ in 0..trie.depth() {
        let logp = step_log_probs(model, &encoded, &beams)?;
        let mut candidates: Vec<Vec<(usize, u32, f64)>> = vec![Vec::new(); histories.len()];
        for (b, beam) in beams.iter().enumerate() {
            for tok in trie.children(&beam.tokens) {
                candidates[beam.user].push((b, tok, beam.score + logp[b][tok as usize]));
            }
        }
        let mut next = Vec::with_capacity(beams.len());
        for mut cands in candidates {
            cands.sort_by(|x, y| by_score_desc(x.2, y.2).then((x.0, x.1).cmp(&(y.0, y.1))));
            cands.truncate(beam_size);
            for (b, tok, score) in cands {
                let mut tokens = beams[b].tokens.clone();
                tokens.push(tok);
                next.push(Beam {
                    user: beams[b].user,
                    tokens,
                    score,
                });
            }
        }
        beams = next;
    }
    let mut out: Vec<Vec<RankedItem>> = vec![Vec::new(); histories.len()];
    for beam in beams {
        let item = trie
            .item_at(&beam.tokens)
            .ok_or_else(|| Error::Index("beam ended off a complete identifier".into()))?;
        out[beam.user].push(RankedItem { item, score: beam.score });
    }
    for ranked in &mut out {
        ranked.sort_by(|a, b| by_score_desc(a.score, b.score).then(a.item.cmp(&b.item)));
        ranked.truncate(top_n);
    }
    Ok(out)
}

/// Next-token log-probabilities (full vocabulary) for every live beam.
fn step_log_probs(model: &Recommender, encoded: &EncodedHistory, beams: &[Beam]) -> Result<Vec<Vec<f64>>> {
    let users: Vec<u32> = beams.iter().map(|b| b.user as u32).collect();
    let idx = Tensor::from_slice(&users, users.len(), &device())?;
    let expanded = EncodedHistory {
        states: encoded.states.index_select(&idx, 0)?,
        mask: encoded.mask.index_select(&idx, 0)?,
    };
    let prefixes: Vec<Vec<u32>> = beams.iter().map(|b| b.tokens.clone()).collect();
    let inputs = model.prefix_inputs(&prefixes)?;
    let hidden = model.decode(&expanded, &inputs, false)?;
    let t = hidden.dim(1)?;
    let last = hidden.narrow(1, t - 1, 1)?;
    let logits = model.logits(&last)?.squeeze(1)?;
    Ok(log_softmax_last(&logits)?.to_vec2::<f64>()?)
}

/// Log-likelihood of every item's full identifier for each history, by
/// teacher forcing, one decoder pass over all items per history.
pub fn exhaustive_scores(
    model: &Recommender,
    identifiers: &IdentifierTable,
    histories: &[Vec<u32>],
) -> Result<Vec<Vec<f64>>> {
    let n = identifiers.len();
    let items: Vec<u32> = (0..n as u32).collect();
    let targets = model.target_tokens(identifiers, &items)?;
    let mut out = Vec::with_capacity(histories.len());
    for h in histories {
        let encoded = model.encode_history(ItemInputs::Hard(identifiers), std::slice::from_ref(h), false)?;
        let expanded = EncodedHistory {
            states: encoded.states.broadcast_as((n, encoded.states.dim(1)?, encoded.states.dim(2)?))?.contiguous()?,
            mask: encoded.mask.broadcast_as((n, encoded.mask.dim(1)?))?.contiguous()?,
        };
        let (_, logits) = model.decode_teacher_forced(&expanded, ItemInputs::Hard(identifiers), &items, false)?;
        let logp = log_softmax_last(&logits)?;
        let picked = logp.gather(&targets.unsqueeze(D::Minus1)?, D::Minus1)?;
        out.push(picked.squeeze(D::Minus1)?.sum(1)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommender::{RecommenderConfig, VocabularyLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n_items: usize, seed: u64) -> (Recommender, IdentifierTable, PrefixTrie) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tuples: Vec<Vec<u32>> = (0..n_items)
            .map(|_| vec![rng.random_range(0..4), rng.random_range(0..4)])
            .collect();
        let ids = IdentifierTable::from_tuples(tuples, 4, None).unwrap();
        let layout = VocabularyLayout::for_identifiers(&ids, 2).unwrap();
        let cfg = RecommenderConfig {
            d_model: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_dim: 32,
            dropout: 0.0,
            max_history: 5,
        };
        let model = Recommender::new(cfg, layout, seed).unwrap();
        let trie = PrefixTrie::build(&layout, &ids).unwrap();
        (model, ids, trie)
    }

    fn exhaustive_ranking(scores: &[f64]) -> Vec<u32> {
        let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
        idx.sort_by(|&a, &b| by_score_desc(scores[a as usize], scores[b as usize]).then(a.cmp(&b)));
        idx
    }

    #[test]
    fn full_beam_matches_exhaustive_scoring() {
        let (model, ids, trie) = setup(24, 3);
        let histories = vec![vec![0, 5, 7], vec![3], vec![1, 2, 3, 4, 5]];
        let ranked = constrained_beam_search(&model, &ids, &trie, &histories, 24, 10).unwrap();
        let oracle = exhaustive_scores(&model, &ids, &histories).unwrap();
        for (r, s) in ranked.iter().zip(&oracle) {
            let want = exhaustive_ranking(s);
            let got: Vec<u32> = r.iter().map(|x| x.item).collect();
            assert_eq!(got, want[..10]);
            for x in r {
                assert!((x.score - s[x.item as usize]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_item_corpus() {
        let (model, ids, trie) = setup(1, 0);
        let ranked = constrained_beam_search(&model, &ids, &trie, &[vec![0]], 3, 1).unwrap();
        assert_eq!(ranked[0].len(), 1);
        assert_eq!(ranked[0][0].item, 0);
    }

    #[test]
    fn underflow_returns_every_valid_path() {
        let (model, ids, trie) = setup(3, 1);
        let ranked = constrained_beam_search(&model, &ids, &trie, &[vec![0, 1]], 10, 10).unwrap();
        let mut items: Vec<u32> = ranked[0].iter().map(|r| r.item).collect();
        items.sort();
        assert_eq!(items, vec![0, 1, 2]);
    }

    #[test]
    fn outputs_are_always_valid_items() {
        let (model, ids, trie) = setup(30, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let histories: Vec<Vec<u32>> = (0..100)
            .map(|_| {
                let len = rng.random_range(1..=5);
                (0..len).map(|_| rng.random_range(0..30)).collect()
            })
            .collect();
        let ranked = constrained_beam_search(&model, &ids, &trie, &histories, 4, 4).unwrap();
        for r in ranked {
            assert_eq!(r.len(), 4);
            for x in &r {
                assert!((x.item as usize) < 30);
                assert!(x.score <= 0.0);
            }
            let mut items: Vec<u32> = r.iter().map(|x| x.item).collect();
            items.sort();
            items.dedup();
            assert_eq!(items.len(), 4);
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let (model, ids, trie) = setup(5, 0);
        assert!(constrained_beam_search(&model, &ids, &trie, &[vec![0]], 2, 3).is_err());
    }
}
