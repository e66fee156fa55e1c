use std::fs;
use std::path::Path;

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

use super::vocab::VocabularyLayout;
use crate::dataset::PAD_ITEM;
use crate::error::{Error, Result};
use crate::nn::{
    self, causal_bias, device, key_padding_bias, Activation, Dropout, Init, LayerNorm, Linear,
    MultiHeadAttention, ParamStore,
};
use crate::tokenizer::IdentifierTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommenderConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// History length in items.
    pub max_history: usize,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ff_dim: 256,
            dropout: 0.1,
            max_history: 20,
        }
    }
}

impl RecommenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_history == 0 || self.ff_dim == 0 {
            return Err(Error::Config("max_history and ff_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// How items are turned into input token embeddings.
#[derive(Clone, Copy)]
pub enum ItemInputs<'a> {
    /// Plain lookups of the hard identifier tokens.
    Hard(&'a IdentifierTable),
    /// Probability-weighted codeword embeddings; `distributions[l]` is
    /// (num_items, K). Dedup tokens are always looked up hard.
    Soft {
        distributions: &'a [Tensor],
        identifiers: &'a IdentifierTable,
    },
}

impl<'a> ItemInputs<'a> {
    fn identifiers(&self) -> &'a IdentifierTable {
        match *self {
            ItemInputs::Hard(t) => t,
            ItemInputs::Soft { identifiers, .. } => identifiers,
        }
    }
}

/// Encoder output plus the 0/1 mask of real (non-pad) positions.
pub struct EncodedHistory {
    pub states: Tensor,
    pub mask: Tensor,
}

struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm transformer encoder-decoder sharing one token table for
/// inputs and the output projection.
pub struct Recommender {
    config: RecommenderConfig,
    layout: VocabularyLayout,
    params: ParamStore,
    token_table: Var,
    encoder_pos: Var,
    decoder_pos: Var,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    encoder_norm: LayerNorm,
    decoder_norm: LayerNorm,
    dropout: Dropout,
}

#[derive(Serialize, Deserialize)]
struct SavedConfig {
    config: RecommenderConfig,
    layout: VocabularyLayout,
}

impl Recommender {
    pub fn new(config: RecommenderConfig, layout: VocabularyLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let d = config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let token_table = params.add("token_table", init.normal((layout.size(), d), std)?)?;
        let encoder_len = config.max_history * layout.tokens_per_item();
        let encoder_pos = params.add("encoder_pos", init.normal((encoder_len, d), std)?)?;
        let decoder_pos = params.add("decoder_pos", init.normal((layout.tokens_per_item(), d), std)?)?;

        let mut encoder = Vec::new();
        for i in 0..config.encoder_layers {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                ln_attn: LayerNorm::new(&mut params, &format!("{p}.ln_attn"), d)?,
                attn: MultiHeadAttention::new(&mut params, &mut init, &format!("{p}.attn"), d, config.heads)?,
                ln_ff: LayerNorm::new(&mut params, &format!("{p}.ln_ff"), d)?,
                ff_in: Linear::new(&mut params, &mut init, &format!("{p}.ff_in"), d, config.ff_dim, true)?,
                ff_out: Linear::new(&mut params, &mut init, &format!("{p}.ff_out"), config.ff_dim, d, true)?,
            });
        }
        let mut decoder = Vec::new();
        for i in 0..config.decoder_layers {
            let p = format!("decoder.{i}");
            decoder.push(DecoderLayer {
                ln_self: LayerNorm::new(&mut params, &format!("{p}.ln_self"), d)?,
                self_attn: MultiHeadAttention::new(&mut params, &mut init, &format!("{p}.self_attn"), d, config.heads)?,
                ln_cross: LayerNorm::new(&mut params, &format!("{p}.ln_cross"), d)?,
                cross_attn: MultiHeadAttention::new(&mut params, &mut init, &format!("{p}.cross_attn"), d, config.heads)?,
                ln_ff: LayerNorm::new(&mut params, &format!("{p}.ln_ff"), d)?,
                ff_in: Linear::new(&mut params, &mut init, &format!("{p}.ff_in"), d, config.ff_dim, true)?,
                ff_out: Linear::new(&mut params, &mut init, &format!("{p}.ff_out"), config.ff_dim, d, true)?,
            });
        }
        let encoder_norm = LayerNorm::new(&mut params, "encoder_norm", d)?;
        let decoder_norm = LayerNorm::new(&mut params, "decoder_norm", d)?;
        let dropout = Dropout::new(config.dropout, seed ^ 0xd20f);
        Ok(Self {
            config,
            layout,
            params,
            token_table,
            encoder_pos,
            decoder_pos,
            encoder,
            decoder,
            encoder_norm,
            decoder_norm,
            dropout,
        })
    }

    pub fn config(&self) -> &RecommenderConfig {
        &self.config
    }

    pub fn layout(&self) -> &VocabularyLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn token_table(&self) -> &Var {
        &self.token_table
    }

    /// `sum_k p(k) * O[offset(level) + k]` for each row of `distribution`
    /// (B, K) -> (B, D). A one-hot row reproduces the plain table row.
    pub fn scatter_embed(&self, distribution: &Tensor, level: usize) -> Result<Tensor> {
        if level >= self.layout.levels {
            return Err(Error::Index(format!("level {level} out of range (L = {})", self.layout.levels)));
        }
        let (_, k) = distribution.dims2()?;
        if k != self.layout.codebook_size {
            return Err(Error::Shape(format!(
                "distribution over {k} codewords, vocabulary has {} per level",
                self.layout.codebook_size
            )));
        }
        let block = self
            .token_table
            .as_tensor()
            .narrow(0, self.layout.level_offset(level), k)?;
        Ok(distribution.matmul(&block)?)
    }

    pub fn lookup(&self, tokens: &[u32]) -> Result<Tensor> {
        let idx = Tensor::from_slice(tokens, tokens.len(), &device())?;
        Ok(self.token_table.as_tensor().index_select(&idx, 0)?)
    }

    /// Token embeddings of `items` as (n, L+1, D). [`PAD_ITEM`] rows embed
    /// as PAD tokens.
    pub fn embed_items(&self, inputs: ItemInputs, items: &[u32]) -> Result<Tensor> {
        let ids = inputs.identifiers();
        let per_item = self.layout.tokens_per_item();
        let mut tokens = Vec::with_capacity(items.len() * per_item);
        for &item in items {
            if item == PAD_ITEM {
                tokens.extend(std::iter::repeat_n(VocabularyLayout::PAD, per_item));
            } else {
                let id = ids
                    .items()
                    .get(item as usize)
                    .ok_or_else(|| Error::Index(format!("item {item} has no identifier")))?;
                tokens.extend(self.layout.item_tokens(id)?);
            }
        }
        let hard = self.lookup(&tokens)?.reshape((items.len(), per_item, self.config.d_model))?;
        match inputs {
            ItemInputs::Hard(_) => Ok(hard),
            ItemInputs::Soft { distributions, .. } => {
                if distributions.len() != self.layout.levels {
                    return Err(Error::Shape(format!(
                        "{} soft levels for a {}-level vocabulary",
                        distributions.len(),
                        self.layout.levels
                    )));
                }
                let real: Vec<f64> = items.iter().map(|&i| if i == PAD_ITEM { 0.0 } else { 1.0 }).collect();
                let real = Tensor::from_vec(real, (items.len(), 1), &device())?;
                let is_pad = real.ones_like()?.sub(&real)?;
                let safe: Vec<u32> = items.iter().map(|&i| if i == PAD_ITEM { 0 } else { i }).collect();
                let safe = Tensor::from_slice(&safe, safe.len(), &device())?;
                let pad_row = self.lookup(&[VocabularyLayout::PAD])?;
                let mut columns = Vec::with_capacity(per_item);
                for (level, dist) in distributions.iter().enumerate() {
                    let p = dist.index_select(&safe, 0)?;
                    let soft = self.scatter_embed(&p, level)?;
                    let e = soft.broadcast_mul(&real)?.add(&pad_row.broadcast_mul(&is_pad)?)?;
                    columns.push(e);
                }
                columns.push(hard.narrow(1, self.layout.levels, 1)?.squeeze(1)?);
                Ok(Tensor::stack(&columns, 1)?)
            }
        }
    }

    /// Histories are left-padded to the longest in the batch; positional
    /// embeddings are aligned to the right so the most recent item always
    /// sees the same positions.
    pub fn encode_history(&self, inputs: ItemInputs, histories: &[Vec<u32>], train: bool) -> Result<EncodedHistory> {
        let longest = histories.iter().map(Vec::len).max().unwrap_or(0).max(1);
        if longest > self.config.max_history {
            return Err(Error::Shape(format!(
                "history of {longest} items exceeds max_history {}",
                self.config.max_history
            )));
        }
        let mut items = Vec::with_capacity(histories.len() * longest);
        for h in histories {
            items.extend(std::iter::repeat_n(PAD_ITEM, longest - h.len()));
            items.extend_from_slice(h);
        }
        let per_item = self.layout.tokens_per_item();
        let mask: Vec<f64> = items
            .iter()
            .flat_map(|&i| std::iter::repeat_n(if i == PAD_ITEM { 0.0 } else { 1.0 }, per_item))
            .collect();
        let b = histories.len();
        let s = longest * per_item;
        let mask = Tensor::from_vec(mask, (b, s), &device())?;
        let emb = self
            .embed_items(inputs, &items)?
            .reshape((b, s, self.config.d_model))?;
        let states = self.encode(&emb, &mask, train)?;
        Ok(EncodedHistory { states, mask })
    }

    /// Runs the encoder stack on (B, S, D) token embeddings.
    pub fn encode(&self, embeddings: &Tensor, mask: &Tensor, train: bool) -> Result<Tensor> {
        let (_, s, _) = embeddings.dims3()?;
        let max = self.encoder_pos.dims()[0];
        if s > max {
            return Err(Error::Shape(format!("encoder input of {s} tokens exceeds {max}")));
        }
        let pos = self.encoder_pos.as_tensor().narrow(0, max - s, s)?;
        let mut h = self.dropout.forward(&embeddings.broadcast_add(&pos)?, train)?;
        let bias = key_padding_bias(mask)?;
        for layer in &self.encoder {
            let x = layer.ln_attn.forward(&h)?;
            let a = layer.attn.forward(&x, &x, Some(&bias))?;
            h = (h + self.dropout.forward(&a, train)?)?;
            let x = layer.ln_ff.forward(&h)?;
            let f = layer.ff_out.forward(&Activation::Relu.apply(&layer.ff_in.forward(&x)?)?)?;
            h = (h + self.dropout.forward(&f, train)?)?;
        }
        self.encoder_norm.forward(&h)
    }

    /// Decoder hidden states for (B, t, D) input embeddings.
    pub fn decode(&self, encoded: &EncodedHistory, inputs: &Tensor, train: bool) -> Result<Tensor> {
        let (_, t, _) = inputs.dims3()?;
        if t > self.layout.tokens_per_item() {
            return Err(Error::Shape(format!(
                "decoder input of {t} tokens exceeds {}",
                self.layout.tokens_per_item()
            )));
        }
        let pos = self.decoder_pos.as_tensor().narrow(0, 0, t)?;
        let mut h = self.dropout.forward(&inputs.broadcast_add(&pos)?, train)?;
        let causal = causal_bias(t)?;
        let memory_bias = key_padding_bias(&encoded.mask)?;
        for layer in &self.decoder {
            let x = layer.ln_self.forward(&h)?;
            let a = layer.self_attn.forward(&x, &x, Some(&causal))?;
            h = (h + self.dropout.forward(&a, train)?)?;
            let x = layer.ln_cross.forward(&h)?;
            let c = layer.cross_attn.forward(&x, &encoded.states, Some(&memory_bias))?;
            h = (h + self.dropout.forward(&c, train)?)?;
            let x = layer.ln_ff.forward(&h)?;
            let f = layer.ff_out.forward(&Activation::Relu.apply(&layer.ff_in.forward(&x)?)?)?;
            h = (h + self.dropout.forward(&f, train)?)?;
        }
        self.decoder_norm.forward(&h)
    }

    /// Inner product with the shared token table: (B, t, D) -> (B, t, V).
    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        Ok(hidden.broadcast_matmul(&self.token_table.as_tensor().t()?)?)
    }

    /// Teacher-forcing inputs `[BOS, y_1, ..., y_L]` for the target items.
    pub fn target_inputs(&self, inputs: ItemInputs, targets: &[u32]) -> Result<Tensor> {
        let items = self.embed_items(inputs, targets)?;
        let codes = items.narrow(1, 0, self.layout.levels)?;
        let bos = self
            .lookup(&[VocabularyLayout::BOS])?
            .unsqueeze(0)?
            .broadcast_as((targets.len(), 1, self.config.d_model))?;
        Ok(Tensor::cat(&[&bos, &codes], 1)?)
    }

    /// Target token ids `[c_1, ..., c_L, dedup]` per item, (B, L+1).
    pub fn target_tokens(&self, identifiers: &IdentifierTable, targets: &[u32]) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(targets.len() * self.layout.tokens_per_item());
        for &t in targets {
            let id = identifiers
                .items()
                .get(t as usize)
                .ok_or_else(|| Error::Index(format!("target item {t} has no identifier")))?;
            flat.extend(self.layout.item_tokens(id)?);
        }
        Ok(Tensor::from_vec(flat, (targets.len(), self.layout.tokens_per_item()), &device())?)
    }

    /// Hidden states and logits for teacher-forced targets.
    pub fn decode_teacher_forced(
        &self,
        encoded: &EncodedHistory,
        inputs: ItemInputs,
        targets: &[u32],
        train: bool,
    ) -> Result<(Tensor, Tensor)> {
        let dec_in = self.target_inputs(inputs, targets)?;
        let hidden = self.decode(encoded, &dec_in, train)?;
        let logits = self.logits(&hidden)?;
        Ok((hidden, logits))
    }

    /// Embeds hard token prefixes (each without BOS) as `[BOS, prefix...]`.
    pub fn prefix_inputs(&self, prefixes: &[Vec<u32>]) -> Result<Tensor> {
        let t = prefixes.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(prefixes.len() * (t + 1));
        for p in prefixes {
            if p.len() != t {
                return Err(Error::Shape("prefixes must share one length".into()));
            }
            flat.push(VocabularyLayout::BOS);
            flat.extend_from_slice(p);
        }
        Ok(self.lookup(&flat)?.reshape((prefixes.len(), t + 1, self.config.d_model))?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let cfg = SavedConfig {
            config: self.config.clone(),
            layout: self.layout,
        };
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
        self.params.save(&dir.join("params.safetensors"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: SavedConfig = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        let model = Self::new(cfg.config, cfg.layout, 0)?;
        model.params.load(&dir.join("params.safetensors"))?;
        Ok(model)
    }
}

/// Negative log-likelihood of the target tokens, summed over positions and
/// averaged over the batch. `logits` is (B, T, V), `targets` (B, T) u32.
pub fn rec_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    if targets.dims() != [b, t] {
        return Err(Error::Shape(format!("targets {:?} for logits {:?}", targets.dims(), logits.dims())));
    }
    let max_target = targets.flatten_all()?.max(0)?.to_scalar::<u32>()?;
    if max_target as usize >= v {
        return Err(Error::Index(format!("target token {max_target} outside vocabulary of {v}")));
    }
    let logp = nn::log_softmax_last(logits)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?, D::Minus1)?;
    Ok((picked.sum_all()? / -(b as f64))?)
}
