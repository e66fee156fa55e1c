//! Encoder-decoder generative recommender over item code tokens.

mod beam;
mod model;
mod trie;
mod vocab;

pub use beam::{constrained_beam_search, exhaustive_scores, RankedItem};
pub use model::{rec_loss, EncodedHistory, ItemInputs, Recommender, RecommenderConfig};
pub use trie::PrefixTrie;
pub use vocab::VocabularyLayout;
