//! Self-attentive ID-based sequential recommender used as the frozen
//! collaborative teacher.

use std::fs;
use std::path::Path;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{SequenceDataset, Split};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{rank_from_scores, MetricsRecord};
use crate::nn::{
    self, causal_bias, device, key_padding_bias, Activation, Dropout, Init, LayerNorm, Linear,
    MultiHeadAttention, ParamStore,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 1,
            max_len: 20,
            dropout: 0.2,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
        }
    }
}

struct Block {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Token 0 is padding; item `i` is token `i + 1`.
pub struct TeacherModel {
    config: TeacherConfig,
    num_items: usize,
    params: ParamStore,
    item_table: Var,
    positions: Var,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    dropout: Dropout,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TeacherReport {
    pub epoch_losses: Vec<f64>,
    pub valid_recall_10: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct SavedTeacher {
    config: TeacherConfig,
    num_items: usize,
}

impl TeacherModel {
    pub fn new(config: TeacherConfig, num_items: usize, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.max_len == 0 || num_items == 0 {
            return Err(Error::Config("teacher needs positive dim, max_len and items".into()));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let d = config.dim;
        let std = 1.0 / (d as f64).sqrt();
        let item_table = params.add("item_table", init.normal((num_items + 1, d), std)?)?;
        let positions = params.add("positions", init.normal((config.max_len, d), std)?)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("block.{i}");
            blocks.push(Block {
                ln_attn: LayerNorm::new(&mut params, &format!("{p}.ln_attn"), d)?,
                attn: MultiHeadAttention::new(&mut params, &mut init, &format!("{p}.attn"), d, config.heads)?,
                ln_ff: LayerNorm::new(&mut params, &format!("{p}.ln_ff"), d)?,
                ff_in: Linear::new(&mut params, &mut init, &format!("{p}.ff_in"), d, d, true)?,
                ff_out: Linear::new(&mut params, &mut init, &format!("{p}.ff_out"), d, d, true)?,
            });
        }
        let final_norm = LayerNorm::new(&mut params, "final_norm", d)?;
        let dropout = Dropout::new(config.dropout, seed ^ 0x7eac);
        Ok(Self {
            config,
            num_items,
            params,
            item_table,
            positions,
            blocks,
            final_norm,
            dropout,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Left-pads item sequences to a (B, T) token tensor plus a 0/1 mask.
    fn pack(&self, seqs: &[&[u32]]) -> Result<(Tensor, Tensor)> {
        let t = seqs.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
        if t > self.config.max_len {
            return Err(Error::Shape(format!("sequence of {t} exceeds teacher max_len {}", self.config.max_len)));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * t);
        let mut mask = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            tokens.extend(std::iter::repeat_n(0u32, t - s.len()));
            mask.extend(std::iter::repeat_n(0.0, t - s.len()));
            tokens.extend(s.iter().map(|&i| i + 1));
            mask.extend(std::iter::repeat_n(1.0, s.len()));
        }
        Ok((
            Tensor::from_vec(tokens, (seqs.len(), t), &device())?,
            Tensor::from_vec(mask, (seqs.len(), t), &device())?,
        ))
    }

    /// Hidden state at every position, (B, T, D).
    fn hidden(&self, tokens: &Tensor, mask: &Tensor, train: bool) -> Result<Tensor> {
        let (b, t) = tokens.dims2()?;
        let emb = self
            .item_table
            .as_tensor()
            .index_select(&tokens.flatten_all()?, 0)?
            .reshape((b, t, self.config.dim))?;
        let max = self.config.max_len;
        let pos = self.positions.as_tensor().narrow(0, max - t, t)?;
        let mut h = self.dropout.forward(&emb.broadcast_add(&pos)?, train)?;
        let bias = key_padding_bias(mask)?.broadcast_add(&causal_bias(t)?)?;
        for block in &self.blocks {
            let x = block.ln_attn.forward(&h)?;
            let a = block.attn.forward(&x, &x, Some(&bias))?;
            h = (h + self.dropout.forward(&a, train)?)?;
            let x = block.ln_ff.forward(&h)?;
            let f = block.ff_out.forward(&Activation::Relu.apply(&block.ff_in.forward(&x)?)?)?;
            h = (h + self.dropout.forward(&f, train)?)?;
        }
        self.final_norm.forward(&h)
    }

    /// Dot-product scores of every item for the next step after each
    /// history, (B, N) as nested vectors.
    pub fn score_all(&self, histories: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let (tokens, mask) = self.pack(histories)?;
        let h = self.hidden(&tokens, &mask, false)?;
        let t = h.dim(1)?;
        let last = h.narrow(1, t - 1, 1)?.squeeze(1)?;
        let items = self.item_table.as_tensor().narrow(0, 1, self.num_items)?;
        Ok(last.matmul(&items.t()?)?.to_vec2()?)
    }

    /// Mean binary cross-entropy over real positions with one sampled
    /// negative per positive.
    fn batch_loss(&self, inputs: &[&[u32]], targets: &[&[u32]], negatives: &[Vec<u32>], train: bool) -> Result<Tensor> {
        let (tokens, mask) = self.pack(inputs)?;
        let h = self.hidden(&tokens, &mask, train)?;
        let (pos_tok, _) = self.pack(targets)?;
        let neg_refs: Vec<&[u32]> = negatives.iter().map(Vec::as_slice).collect();
        let (neg_tok, _) = self.pack(&neg_refs)?;
        let (b, t) = pos_tok.dims2()?;
        let lookup = |tok: &Tensor| -> Result<Tensor> {
            Ok(self
                .item_table
                .as_tensor()
                .index_select(&tok.flatten_all()?, 0)?
                .reshape((b, t, self.config.dim))?)
        };
        let pos = (&h * lookup(&pos_tok)?)?.sum(2)?;
        let neg = (&h * lookup(&neg_tok)?)?.sum(2)?;
        let ll = (nn::log_sigmoid(&pos)? + nn::log_sigmoid(&neg.neg()?)?)?;
        let count = mask.sum_all()?;
        Ok(((ll * &mask)?.sum_all()?.neg()? / count)?)
    }

    /// Item rows in dense item order.
    pub fn export_item_embeddings(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::from_tensor(&self.item_table.as_tensor().narrow(0, 1, self.num_items)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let saved = SavedTeacher {
            config: self.config.clone(),
            num_items: self.num_items,
        };
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&saved)?)?;
        self.params.save(&dir.join("params.safetensors"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let saved: SavedTeacher = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        let model = Self::new(saved.config, saved.num_items, 0)?;
        model.params.load(&dir.join("params.safetensors"))?;
        Ok(model)
    }
}

/// Validation metrics from dot-product ranking over all items.
pub fn evaluate_teacher(model: &TeacherModel, dataset: &SequenceDataset, split: Split) -> Result<MetricsRecord> {
    let examples = dataset.eval_examples(split, model.config.max_len);
    let mut ranks = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(256) {
        let hist: Vec<&[u32]> = chunk.iter().map(|e| e.history.as_slice()).collect();
        for (ex, scores) in chunk.iter().zip(model.score_all(&hist)?) {
            ranks.push(Some(rank_from_scores(&scores, ex.target as usize)));
        }
    }
    Ok(MetricsRecord::from_ranks(split, None, &ranks))
}

/// Trains with early stopping on validation Recall@10 and returns the
/// best-epoch parameters.
pub fn train_teacher(dataset: &SequenceDataset, config: &TeacherConfig, seed: u64) -> Result<(TeacherModel, TeacherReport)> {
    let model = TeacherModel::new(config.clone(), dataset.num_items(), seed)?;
    let max = config.max_len;
    // (input, target) windows of the training sequences
    let windows: Vec<(Vec<u32>, Vec<u32>)> = (0..dataset.num_users())
        .filter_map(|u| {
            let s = dataset.train_sequence(u);
            if s.len() < 2 {
                return None;
            }
            let start = s.len().saturating_sub(max + 1);
            let s = &s[start..];
            Some((s[..s.len() - 1].to_vec(), s[1..].to_vec()))
        })
        .collect();
    if windows.is_empty() {
        return Err(Error::EmptyDataset("no training sequence has two items".into()));
    }
    let mut opt = AdamW::new(
        model.params.vars(),
        ParamsAdamW {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5);
    let mut report = TeacherReport::default();
    let mut best = (f64::NEG_INFINITY, model.params.snapshot()?);
    let mut stale = 0;
    let n_items = dataset.num_items() as u32;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let inputs: Vec<&[u32]> = chunk.iter().map(|&i| windows[i].0.as_slice()).collect();
            let targets: Vec<&[u32]> = chunk.iter().map(|&i| windows[i].1.as_slice()).collect();
            let negatives: Vec<Vec<u32>> = targets
                .iter()
                .map(|t| {
                    t.iter()
                        .map(|&pos| loop {
                            let n = rng.random_range(0..n_items);
                            if n != pos || n_items == 1 {
                                break n;
                            }
                        })
                        .collect()
                })
                .collect();
            let loss = model.batch_loss(&inputs, &targets, &negatives, true)?;
            let value = nn::scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Training(format!("teacher loss became {value} in epoch {epoch}")));
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
        }
        report.epoch_losses.push(total / batches as f64);
        let recall = evaluate_teacher(&model, dataset, Split::Valid)?.recall_10;
        report.valid_recall_10.push(recall);
        info!("teacher epoch {epoch}: loss {:.4}, valid recall@10 {recall:.4}", total / batches as f64);
        if recall > best.0 {
            best = (recall, model.params.snapshot()?);
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    model.params.restore(&best.1)?;
    Ok((model, report))
}
