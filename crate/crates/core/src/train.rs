//! Two-stage training: tokenizer pretraining on item embeddings, then
//! joint training of tokenizer and recommender on interaction sequences.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::collision_rate;
use crate::dataset::{Example, SequenceDataset, Split};
use crate::distill::{
    pool_decoder, pool_encoder, recommender_distill_loss, tokenizer_distill_loss, DistillationConfig,
};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{full_rank_evaluate, MetricsRecord};
use crate::nn::{self, device, Init, Linear, ParamStore};
use crate::recommender::{
    rec_loss, ItemInputs, PrefixTrie, Recommender, RecommenderConfig, VocabularyLayout,
};
use crate::tokenizer::{
    anneal_temperature, quant_loss, recon_loss, uniformity_loss, IdentifierTable, QuantMode,
    RqTokenizer, TokenizerConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauSchedule {
    /// Linear decay from `tau_max` to `tau_min` over all stage-1 steps.
    Annealed,
    /// Constant `tau_max`.
    FixedMax,
    /// Constant `tau_min`.
    FixedMin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub schedule: TauSchedule,
    pub lambda_cu: f64,
    pub kmeans_iterations: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            lr: 1e-3,
            epochs: 200,
            schedule: TauSchedule::Annealed,
            lambda_cu: 1e-4,
            kmeans_iterations: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub batch_size: usize,
    pub backbone_lr: f64,
    pub tokenizer_lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda_recon: f64,
    /// Beam width for validation and test decoding.
    pub beam: usize,
    /// Users decoded together during evaluation.
    pub eval_chunk: usize,
    /// Dedup tokens reserved per token in use after stage 1.
    pub dedup_safety: usize,
    /// Hard cap on optimizer steps, mainly for tests.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            batch_size: 512,
            backbone_lr: 5e-3,
            tokenizer_lr: 2e-7,
            weight_decay: 0.05,
            max_epochs: 100,
            patience: 10,
            lambda_recon: 0.5,
            beam: 30,
            eval_chunk: 64,
            dedup_safety: 4,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Soft identifiers (differentiable) or hard codes.
    pub mode: QuantMode,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub distillation: DistillationConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: QuantMode::Soft,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            distillation: DistillationConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.distillation.validate()?;
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        if s1.batch_size == 0 || s2.batch_size == 0 || s2.beam == 0 || s2.eval_chunk == 0 {
            return Err(Error::Config("batch sizes, beam and eval_chunk must be positive".into()));
        }
        if !(s1.lr > 0.0 && s2.backbone_lr > 0.0 && s2.tokenizer_lr >= 0.0) {
            return Err(Error::Config("learning rates must be positive (tokenizer lr may be 0)".into()));
        }
        if !(s1.lambda_cu >= 0.0 && s2.lambda_recon >= 0.0 && s2.weight_decay >= 0.0) {
            return Err(Error::Config("loss weights and weight decay must be >= 0".into()));
        }
        if self.mode == QuantMode::Hard
            && (s1.lambda_cu > 0.0
                || s2.lambda_recon > 0.0
                || s2.tokenizer_lr > 0.0
                || self.distillation.lambda_cd_tokenizer > 0.0)
        {
            return Err(Error::Config(
                "hard identifiers support neither uniformity, joint reconstruction, tokenizer updates nor tokenizer distillation"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn tokenizer_trains(&self) -> bool {
        self.stage2.tokenizer_lr > 0.0
    }
}

/// Ablation ladder from hard staged training to the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationRung {
    M0,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
}

/// Which objective terms a rung switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RungFeatures {
    pub soft: bool,
    pub joint: bool,
    pub uniformity: bool,
    pub distill_tokenizer: bool,
    pub distill_recommender: bool,
}

impl AblationRung {
    pub const ALL: [AblationRung; 7] = [Self::M0, Self::M1, Self::M2, Self::M3, Self::M4, Self::M5, Self::M6];

    pub fn features(self) -> RungFeatures {
        use AblationRung::*;
        RungFeatures {
            soft: self != M0,
            joint: self >= M2,
            uniformity: self >= M3,
            distill_tokenizer: matches!(self, M4 | M6),
            distill_recommender: matches!(self, M5 | M6),
        }
    }

    /// `base` with every disabled component zeroed; enabled components
    /// keep the weights and rates of `base`.
    pub fn apply(self, base: &TrainingConfig) -> TrainingConfig {
        let f = self.features();
        let mut cfg = base.clone();
        cfg.mode = if f.soft { QuantMode::Soft } else { QuantMode::Hard };
        if !f.joint {
            cfg.stage2.tokenizer_lr = 0.0;
            cfg.stage2.lambda_recon = 0.0;
        }
        if !f.uniformity {
            cfg.stage1.lambda_cu = 0.0;
        }
        if !f.distill_tokenizer {
            cfg.distillation.lambda_cd_tokenizer = 0.0;
        }
        if !f.distill_recommender {
            cfg.distillation.lambda_cd_recommender = 0.0;
        }
        cfg
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|r| format!("{r:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown ablation rung `{s}` (expected M0..M6)")))
    }
}

impl std::fmt::Display for AblationRung {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub step: usize,
    pub tau: f64,
    pub loss: f64,
    pub recon: f64,
    pub collision_rate: f64,
}

fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Training(format!("{what} became {value}")))
    }
}

fn tau_at(schedule: TauSchedule, cfg: &TokenizerConfig, step: usize, total: usize) -> Result<f64> {
    match schedule {
        TauSchedule::Annealed => anneal_temperature(step as i64, total.saturating_sub(1).max(1) as u64, cfg.tau_max, cfg.tau_min),
        TauSchedule::FixedMax => Ok(cfg.tau_max),
        TauSchedule::FixedMin => Ok(cfg.tau_min),
    }
}

/// Stage 1: reconstruction (plus uniformity for soft identifiers, or the
/// codebook/commitment terms for hard ones), codebooks seeded by k-means.
pub fn pretrain_tokenizer(
    items: &Tensor,
    tokenizer_config: &TokenizerConfig,
    config: &TrainingConfig,
) -> Result<(RqTokenizer, Vec<Stage1Epoch>)> {
    config.validate()?;
    let s1 = &config.stage1;
    let tokenizer = RqTokenizer::new(tokenizer_config.clone(), config.seed)?;
    let n = items.dims2()?.0;
    if n == 0 {
        return Err(Error::EmptyDataset("no item embeddings".into()));
    }
    tokenizer.init_codebooks_kmeans(items, config.seed ^ 0x6b6d, s1.kmeans_iterations)?;
    let mut opt = AdamW::new(
        tokenizer.params().vars(),
        ParamsAdamW {
            lr: s1.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let steps_per_epoch = n.div_ceil(s1.batch_size);
    let total = steps_per_epoch * s1.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x57a9e1);
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut history = Vec::with_capacity(s1.epochs);
    let mut step = 0;
    let mut tau = tau_at(s1.schedule, tokenizer_config, 0, total)?;
    for epoch in 0..s1.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut recon_sum) = (0.0, 0.0);
        for chunk in order.chunks(s1.batch_size) {
            tau = tau_at(s1.schedule, tokenizer_config, step, total)?;
            let idx = Tensor::from_slice(chunk, chunk.len(), &device())?;
            let z = items.index_select(&idx, 0)?;
            let q = tokenizer.quantize(&z, tau, config.mode)?;
            let recon = recon_loss(&tokenizer.decode(&q.decoder_input()?)?, &z)?;
            let loss = match config.mode {
                QuantMode::Soft if s1.lambda_cu > 0.0 => {
                    (&recon + (uniformity_loss(&q.distributions, tokenizer_config.entropy_log_base)? * s1.lambda_cu)?)?
                }
                QuantMode::Soft => recon.clone(),
                QuantMode::Hard => (&recon + quant_loss(&q, tokenizer_config.beta)?)?,
            };
            let value = check_finite(nn::scalar(&loss)?, &format!("stage-1 loss at step {step} (tau {tau})"))?;
            opt.backward_step(&loss)?;
            loss_sum += value * chunk.len() as f64;
            recon_sum += nn::scalar(&recon)? * chunk.len() as f64;
            step += 1;
        }
        let ids = tokenizer.assign_identifiers(items, None)?;
        let record = Stage1Epoch {
            epoch,
            step,
            tau,
            loss: loss_sum / n as f64,
            recon: recon_sum / n as f64,
            collision_rate: collision_rate(&ids.tuples()),
        };
        if epoch % 10 == 0 || epoch + 1 == s1.epochs {
            info!(
                "stage 1 epoch {epoch}: loss {:.5} recon {:.5} tau {:.5} collisions {:.4}",
                record.loss, record.recon, record.tau, record.collision_rate
            );
        }
        history.push(record);
    }
    Ok((tokenizer, history))
}

/// Hard identifiers of every item under the current tokenizer, written as
/// JSON lines.
pub fn snapshot_identifiers(tokenizer: &RqTokenizer, items: &Tensor, path: &Path) -> Result<IdentifierTable> {
    let ids = tokenizer.assign_identifiers(items, None)?;
    ids.write_jsonl(path)?;
    Ok(ids)
}

/// Per-batch loss terms (unweighted) and the weighted total.
pub struct BatchLosses {
    pub total: Tensor,
    pub rec: f64,
    pub recon: f64,
    pub distill_tokenizer: f64,
    pub distill_recommender: f64,
}

/// Tokenizer, recommender and distillation heads trained together.
pub struct JointModel {
    pub tokenizer: RqTokenizer,
    pub recommender: Recommender,
    config: TrainingConfig,
    items: Tensor,
    teacher: Option<Tensor>,
    identifiers: IdentifierTable,
    trie: PrefixTrie,
    heads: ParamStore,
    encoder_projector: Linear,
    decoder_projector: Option<Linear>,
    teacher_projector: Option<Linear>,
}

impl JointModel {
    pub fn new(
        tokenizer: RqTokenizer,
        items: Tensor,
        teacher: Option<&EmbeddingTable>,
        recommender_config: RecommenderConfig,
        config: TrainingConfig,
    ) -> Result<Self> {
        config.validate()?;
        let distill = &config.distillation;
        let wants_teacher = distill.lambda_cd_tokenizer > 0.0 || distill.lambda_cd_recommender > 0.0;
        if wants_teacher && teacher.is_none() {
            return Err(Error::Config("distillation is enabled but no teacher embeddings were given".into()));
        }
        let n = items.dims2()?.0;
        let teacher = match teacher {
            Some(t) if t.rows() != n => {
                return Err(Error::Shape(format!("teacher has {} rows for {n} items", t.rows())));
            }
            Some(t) => Some(t.to_tensor()?),
            None => None,
        };
        let identifiers = tokenizer.assign_identifiers(&items, None)?;
        let layout = VocabularyLayout::for_identifiers(&identifiers, config.stage2.dedup_safety)?;
        let recommender = Recommender::new(recommender_config, layout, config.seed ^ 0x2ec)?;
        let trie = PrefixTrie::build(&layout, &identifiers)?;

        let d = recommender.config().d_model;
        let input_dim = tokenizer.config().input_dim;
        let mut heads = ParamStore::new();
        let mut init = Init::new(config.seed ^ 0x4ead);
        let encoder_projector = Linear::new(&mut heads, &mut init, "encoder_projector", d, input_dim, true)?;
        let tea_dim = teacher.as_ref().map(|t| t.dim(1)).transpose()?;
        let decoder_projector = match tea_dim {
            Some(td) => Some(Linear::new(&mut heads, &mut init, "decoder_projector", d, td, true)?),
            None => None,
        };
        // fixed random map of the teacher into the tokenizer input space
        let mut frozen = ParamStore::new();
        let teacher_projector = match tea_dim {
            Some(td) => Some(Linear::new(&mut frozen, &mut init, "teacher_projector", td, input_dim, true)?),
            None => None,
        };
        Ok(Self {
            tokenizer,
            recommender,
            config,
            items,
            teacher,
            identifiers,
            trie,
            heads,
            encoder_projector,
            decoder_projector,
            teacher_projector,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn identifiers(&self) -> &IdentifierTable {
        &self.identifiers
    }

    pub fn trie(&self) -> &PrefixTrie {
        &self.trie
    }

    pub fn items(&self) -> &Tensor {
        &self.items
    }

    /// Teacher item table used by distillation, if any.
    pub fn teacher(&self) -> Option<&Tensor> {
        self.teacher.as_ref()
    }

    pub fn heads(&self) -> &ParamStore {
        &self.heads
    }

    fn tau(&self) -> f64 {
        self.tokenizer.config().tau_min
    }

    /// Reassigns hard identifiers from the current tokenizer and rebuilds
    /// the trie. Fails when collisions outgrow the reserved dedup tokens.
    pub fn refresh_identifiers(&mut self) -> Result<()> {
        let layout = *self.recommender.layout();
        let ids = self.tokenizer.assign_identifiers(&self.items, Some(layout.dedup_reserve))?;
        self.trie = PrefixTrie::build(&layout, &ids)?;
        self.identifiers = ids;
        Ok(())
    }

    pub fn batch_losses(&self, batch: &[Example], train: bool) -> Result<BatchLosses> {
        let cfg = &self.config;
        let histories: Vec<Vec<u32>> = batch.iter().map(|e| e.history.clone()).collect();
        let targets: Vec<u32> = batch.iter().map(|e| e.target).collect();
        let soft = match cfg.mode {
            QuantMode::Soft => Some(self.tokenizer.quantize(&self.items, self.tau(), QuantMode::Soft)?),
            QuantMode::Hard => None,
        };
        let inputs = match &soft {
            Some(q) => ItemInputs::Soft {
                distributions: &q.distributions,
                identifiers: &self.identifiers,
            },
            None => ItemInputs::Hard(&self.identifiers),
        };
        let encoded = self.recommender.encode_history(inputs, &histories, train)?;
        let (hidden, logits) = self.recommender.decode_teacher_forced(&encoded, inputs, &targets, train)?;
        let target_tokens = self.recommender.target_tokens(&self.identifiers, &targets)?;
        let rec = rec_loss(&logits, &target_tokens)?;
        let mut total = rec.clone();
        let mut out = BatchLosses {
            total: rec.clone(),
            rec: nn::scalar(&rec)?,
            recon: 0.0,
            distill_tokenizer: 0.0,
            distill_recommender: 0.0,
        };
        if let (Some(q), true) = (&soft, cfg.stage2.lambda_recon > 0.0) {
            let recon = recon_loss(&self.tokenizer.decode(&q.aggregated)?, &self.items)?;
            out.recon = nn::scalar(&recon)?;
            total = (total + (recon * cfg.stage2.lambda_recon)?)?;
        }
        let teacher_rows = match &self.teacher {
            Some(t) => {
                let idx = Tensor::from_slice(&targets, targets.len(), &device())?;
                Some(t.index_select(&idx, 0)?)
            }
            None => None,
        };
        let lt = cfg.distillation.lambda_cd_tokenizer;
        if lt > 0.0 {
            let (Some(tea), Some(proj)) = (&teacher_rows, &self.teacher_projector) else {
                return Err(Error::Config("tokenizer distillation needs teacher embeddings".into()));
            };
            let student = self.encoder_projector.forward(&pool_encoder(&encoded.states, &encoded.mask)?)?;
            let target = proj.forward(tea)?.detach();
            let loss = tokenizer_distill_loss(&self.tokenizer, &student, &target, self.tau())?;
            out.distill_tokenizer = nn::scalar(&loss)?;
            total = (total + (loss * lt)?)?;
        }
        let lr = cfg.distillation.lambda_cd_recommender;
        if lr > 0.0 {
            let (Some(tea), Some(proj)) = (&teacher_rows, &self.decoder_projector) else {
                return Err(Error::Config("recommender distillation needs teacher embeddings".into()));
            };
            let dec = proj.forward(&pool_decoder(&hidden)?)?;
            let loss = recommender_distill_loss(&dec, tea, cfg.distillation.tau_prime)?;
            out.distill_recommender = nn::scalar(&loss)?;
            total = (total + (loss * lr)?)?;
        }
        out.total = total;
        Ok(out)
    }

    pub fn evaluate(&self, examples: &[Example], split: Split) -> Result<MetricsRecord> {
        let s2 = &self.config.stage2;
        full_rank_evaluate(
            &self.recommender,
            &self.identifiers,
            &self.trie,
            examples,
            split,
            s2.beam,
            s2.eval_chunk,
        )
    }

    fn snapshot(&self) -> Result<[HashMap<String, Tensor>; 3]> {
        Ok([
            self.recommender.params().snapshot()?,
            self.tokenizer.params().snapshot()?,
            self.heads.snapshot()?,
        ])
    }

    fn restore(&mut self, snap: &[HashMap<String, Tensor>; 3]) -> Result<()> {
        self.recommender.params().restore(&snap[0])?;
        self.tokenizer.params().restore(&snap[1])?;
        self.heads.restore(&snap[2])?;
        self.refresh_identifiers()
    }

    /// Writes recommender, tokenizer and identifiers under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.recommender.save(&dir.join("recommender"))?;
        self.tokenizer.save(&dir.join("tokenizer"))?;
        self.heads.save(&dir.join("heads.safetensors"))?;
        self.identifiers.write_jsonl(&dir.join("identifiers.jsonl"))?;
        fs::write(dir.join("training.json"), serde_json::to_vec_pretty(&self.config)?)?;
        Ok(())
    }
}

/// A stage-2 checkpoint opened for evaluation only.
pub struct TrainedRecommender {
    pub recommender: Recommender,
    pub tokenizer: RqTokenizer,
    pub identifiers: IdentifierTable,
    pub trie: PrefixTrie,
    pub config: TrainingConfig,
}

impl TrainedRecommender {
    pub fn load(dir: &Path) -> Result<Self> {
        let recommender = Recommender::load(&dir.join("recommender"))?;
        let tokenizer = RqTokenizer::load(&dir.join("tokenizer"))?;
        let identifiers = IdentifierTable::read_jsonl(&dir.join("identifiers.jsonl"), tokenizer.codebook_size())?;
        let trie = PrefixTrie::build(recommender.layout(), &identifiers)?;
        let config = serde_json::from_slice(&fs::read(dir.join("training.json"))?)?;
        Ok(Self {
            recommender,
            tokenizer,
            identifiers,
            trie,
            config,
        })
    }

    pub fn evaluate(&self, examples: &[Example], split: Split) -> Result<MetricsRecord> {
        let s2 = &self.config.stage2;
        full_rank_evaluate(&self.recommender, &self.identifiers, &self.trie, examples, split, s2.beam, s2.eval_chunk)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub rec: f64,
    pub recon: f64,
    pub distill_tokenizer: f64,
    pub distill_recommender: f64,
    pub collision_rate: f64,
    pub dedup_tokens_used: usize,
    pub valid: MetricsRecord,
}

/// Optimizer group for one set of parameters; `None` when frozen.
fn optimizer(vars: Vec<candle_core::Var>, lr: f64, weight_decay: f64) -> Result<Option<AdamW>> {
    if lr <= 0.0 {
        return Ok(None);
    }
    Ok(Some(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay,
            ..Default::default()
        },
    )?))
}

/// Stage 2 with early stopping on validation Recall@10. The best epoch's
/// parameters and identifiers are restored before returning.
pub fn joint_train(model: &mut JointModel, dataset: &SequenceDataset) -> Result<Vec<Stage2Epoch>> {
    let cfg = model.config.clone();
    let s2 = &cfg.stage2;
    let max_history = model.recommender.config().max_history;
    let train = dataset.train_examples(max_history);
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training examples".into()));
    }
    let valid = dataset.eval_examples(Split::Valid, max_history);
    let mut backbone_vars = model.recommender.params().vars();
    backbone_vars.extend(model.heads.vars());
    let mut backbone = optimizer(backbone_vars, s2.backbone_lr, s2.weight_decay)?
        .ok_or_else(|| Error::Config("backbone learning rate must be positive".into()))?;
    let mut tokenizer_opt = optimizer(model.tokenizer.params().vars(), s2.tokenizer_lr, s2.weight_decay)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba7c);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, [HashMap<String, Tensor>; 3])> = None;
    let mut stale = 0;
    let mut steps = 0;
    'epochs: for epoch in 0..s2.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut seen = 0usize;
        for chunk in order.chunks(s2.batch_size) {
            if s2.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            let losses = model.batch_losses(&batch, true)?;
            let total = check_finite(nn::scalar(&losses.total)?, &format!("joint loss at step {steps}"))?;
            let grads = losses.total.backward()?;
            backbone.step(&grads)?;
            if let Some(opt) = tokenizer_opt.as_mut() {
                opt.step(&grads)?;
            }
            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([
                total,
                losses.rec,
                losses.recon,
                losses.distill_tokenizer,
                losses.distill_recommender,
            ]) {
                *s += v * w;
            }
            seen += batch.len();
            steps += 1;
        }
        if seen == 0 {
            break 'epochs;
        }
        if model.config.tokenizer_trains() {
            model.refresh_identifiers()?;
        }
        let metrics = MetricsRecord {
            epoch: Some(epoch),
            ..model.evaluate(&valid, Split::Valid)?
        };
        let n = seen as f64;
        let record = Stage2Epoch {
            epoch,
            steps,
            loss: sums[0] / n,
            rec: sums[1] / n,
            recon: sums[2] / n,
            distill_tokenizer: sums[3] / n,
            distill_recommender: sums[4] / n,
            collision_rate: collision_rate(&model.identifiers.tuples()),
            dedup_tokens_used: model.identifiers.dedup_tokens_used(),
            valid: metrics,
        };
        info!(
            "stage 2 epoch {epoch}: loss {:.4} rec {:.4} valid recall@10 {:.4}",
            record.loss, record.rec, record.valid.recall_10
        );
        let score = record.valid.recall_10;
        history.push(record);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.snapshot()?));
            stale = 0;
        } else {
            stale += 1;
            if stale >= s2.patience {
                info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    match best {
        Some((_, snap)) => model.restore(&snap)?,
        None => warn!("stage 2 ran no epochs"),
    }
    Ok(history)
}

/// Everything needed to run one ablation rung end to end.
pub struct AblationInputs<'a> {
    pub dataset: &'a SequenceDataset,
    pub items: &'a Tensor,
    pub teacher: Option<&'a EmbeddingTable>,
    pub tokenizer: &'a TokenizerConfig,
    pub recommender: &'a RecommenderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rung: AblationRung,
    pub seed: u64,
    pub test: MetricsRecord,
}

/// Stage 1, stage 2 and test evaluation under the rung's configuration.
pub fn run_ablation(rung: AblationRung, inputs: &AblationInputs, base: &TrainingConfig) -> Result<AblationResult> {
    let cfg = rung.apply(base);
    let (tokenizer, _) = pretrain_tokenizer(inputs.items, inputs.tokenizer, &cfg)?;
    let features = rung.features();
    let teacher = if features.distill_tokenizer || features.distill_recommender {
        inputs.teacher
    } else {
        None
    };
    let mut model = JointModel::new(tokenizer, inputs.items.clone(), teacher, inputs.recommender.clone(), cfg.clone())?;
    joint_train(&mut model, inputs.dataset)?;
    let test = inputs.dataset.eval_examples(Split::Test, inputs.recommender.max_history);
    Ok(AblationResult {
        rung,
        seed: cfg.seed,
        test: model.evaluate(&test, Split::Test)?,
    })
}
