//! Residual-quantization tokenizer with hard and soft (differentiable)
//! codeword assignment.
//!
//! The soft path replaces the per-level argmin with a temperature softmax
//! over negative squared distances, aggregates the expected codeword, and
//! propagates the residual as `v_{l+1} = v_l - E_p[e_l]`. As the
//! temperature goes to zero it coincides with the hard path.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use candle_core::{Tensor, D};
use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, device, ensure_finite, Activation, Init, Mlp, ParamStore, DTYPE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        }
    }

    /// Factor converting natural logs into this base.
    pub fn scale(self) -> f64 {
        match self {
            LogBase::Natural => 1.0,
            LogBase::Two => std::f64::consts::LOG2_E,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub input_dim: usize,
    /// Hidden widths between the input and the code dimension.
    pub encoder_dims: Vec<usize>,
    pub levels: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub beta: f64,
    pub tau_max: f64,
    pub tau_min: f64,
    #[serde(default)]
    pub entropy_log_base: LogBase,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl TokenizerConfig {
    /// Full-scale setting: encoder 512-256-128-64, three levels of 256
    /// codewords of width 32.
    pub fn full_scale(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_dims: vec![512, 256, 128, 64],
            levels: 3,
            codebook_size: 256,
            code_dim: 32,
            beta: 0.25,
            tau_max: 0.01,
            tau_min: 0.001,
            entropy_log_base: LogBase::Natural,
            activation: Activation::Relu,
        }
    }

    /// Small setting for synthetic fixtures.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_dims: vec![64, 32],
            levels: 3,
            codebook_size: 16,
            code_dim: 16,
            ..Self::full_scale(input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return bad("tokenizer needs at least one level".into());
        }
        if self.codebook_size < 2 {
            return bad(format!("codebook_size must be >= 2, got {}", self.codebook_size));
        }
        if self.input_dim == 0 || self.code_dim == 0 || self.encoder_dims.contains(&0) {
            return bad("tokenizer widths must be positive".into());
        }
        if !(self.tau_min > 0.0 && self.tau_max >= self.tau_min) {
            return bad(format!("need 0 < tau_min <= tau_max, got {} / {}", self.tau_min, self.tau_max));
        }
        if self.beta < 0.0 {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.encoder_dims);
        w.push(self.code_dim);
        w
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let mut w = self.encoder_widths();
        w.reverse();
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Soft,
    Hard,
}

/// One item's probabilities over a level's codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentDistribution {
    pub probs: Vec<f64>,
}

impl AssignmentDistribution {
    /// Most probable codeword, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.probs)
    }
}

pub(crate) fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmin_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Output of one quantization pass over a batch.
pub struct Quantization {
    pub mode: QuantMode,
    /// Encoder output `r`, (B, d).
    pub latent: Tensor,
    /// Residual entering each level, `v_1 = r`.
    pub residuals: Vec<Tensor>,
    /// Soft mode only: (B, K) assignment probabilities per level.
    pub distributions: Vec<Tensor>,
    /// Hard codes per level (soft mode: argmax of the distributions).
    pub codes: Vec<Vec<u32>>,
    /// Per-level contribution to the aggregate: the chosen codeword (hard)
    /// or the expected codeword (soft).
    pub selected: Vec<Tensor>,
    /// `r~`, the sum of `selected`.
    pub aggregated: Tensor,
}

impl Quantization {
    /// What the decoder consumes. The hard path uses a straight-through
    /// estimator so reconstruction still trains the encoder.
    pub fn decoder_input(&self) -> Result<Tensor> {
        match self.mode {
            QuantMode::Soft => Ok(self.aggregated.clone()),
            QuantMode::Hard => {
                let shift = (&self.aggregated - &self.latent)?.detach();
                Ok((&self.latent + shift)?)
            }
        }
    }
}

pub struct RqTokenizer {
    config: TokenizerConfig,
    params: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
    codebooks: Vec<candle_core::Var>,
}

impl RqTokenizer {
    /// Random initialization; codewords start as `N(0, 1/sqrt(d))`.
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let encoder = Mlp::new(&mut params, &mut init, "encoder", &config.encoder_widths(), config.activation)?;
        let decoder = Mlp::new(&mut params, &mut init, "decoder", &config.decoder_widths(), config.activation)?;
        let std = 1.0 / (config.code_dim as f64).sqrt();
        let codebooks = (0..config.levels)
            .map(|l| {
                let cb = init.normal((config.codebook_size, config.code_dim), std)?;
                params.add(format!("codebook.{l}"), cb)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn codebook(&self, level: usize) -> Result<&Tensor> {
        self.codebooks
            .get(level)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::Index(format!("level {level} out of range (L = {})", self.levels())))
    }

    pub fn codebook_var(&self, level: usize) -> Result<&candle_core::Var> {
        self.codebooks
            .get(level)
            .ok_or_else(|| Error::Index(format!("level {level} out of range (L = {})", self.levels())))
    }

    /// (B, input_dim) -> (B, code_dim).
    pub fn encode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, dim) = z.dims2()?;
        if dim != self.config.input_dim {
            return Err(Error::Shape(format!(
                "encoder expects width {}, got {dim}",
                self.config.input_dim
            )));
        }
        self.encoder.forward(z)
    }

    /// (B, code_dim) -> (B, input_dim).
    pub fn decode(&self, r: &Tensor) -> Result<Tensor> {
        let (_, dim) = r.dims2()?;
        if dim != self.config.code_dim {
            return Err(Error::Shape(format!(
                "decoder expects width {}, got {dim}",
                self.config.code_dim
            )));
        }
        self.decoder.forward(r)
    }

    /// (B, d) residuals against level `level` codewords -> (B, K) squared
    /// distances, computed as |a|^2 + |b|^2 - 2ab and clamped at zero.
    pub fn squared_distances(&self, residual: &Tensor, level: usize) -> Result<Tensor> {
        let cb = self.codebook(level)?;
        let a2 = residual.sqr()?.sum_keepdim(D::Minus1)?;
        let b2 = cb.sqr()?.sum_keepdim(D::Minus1)?.t()?;
        let ab = residual.matmul(&cb.t()?)?;
        Ok(a2.broadcast_add(&b2)?.broadcast_sub(&(ab * 2.0)?)?.relu()?)
    }

    /// Softmax over `-dist^2 / tau`, (B, d) -> (B, K).
    pub fn soft_assign(&self, residual: &Tensor, level: usize, tau: f64) -> Result<Tensor> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
        }
        ensure_finite(residual, "residual")?;
        let logits = (self.squared_distances(residual, level)? / -tau)?;
        nn::softmax_last(&logits)
    }

    pub fn soft_assign_one(&self, residual: &[f64], level: usize, tau: f64) -> Result<AssignmentDistribution> {
        let r = Tensor::from_slice(residual, (1, residual.len()), &device())?;
        let probs = self.soft_assign(&r, level, tau)?.squeeze(0)?.to_vec1()?;
        Ok(AssignmentDistribution { probs })
    }

    /// Nearest codeword per row; ties go to the lowest index.
    pub fn hard_assign(&self, residual: &Tensor, level: usize) -> Result<Vec<u32>> {
        let dist: Vec<Vec<f64>> = self.squared_distances(residual, level)?.to_vec2()?;
        Ok(dist.iter().map(|row| argmin_lowest(row) as u32).collect())
    }

    pub fn quantize(&self, z: &Tensor, tau: f64, mode: QuantMode) -> Result<Quantization> {
        let latent = self.encode(z)?;
        self.quantize_latent(latent, tau, mode)
    }

    pub fn quantize_latent(&self, latent: Tensor, tau: f64, mode: QuantMode) -> Result<Quantization> {
        let mut residual = latent.clone();
        let mut residuals = Vec::with_capacity(self.levels());
        let mut distributions = Vec::new();
        let mut codes = Vec::with_capacity(self.levels());
        let mut selected = Vec::with_capacity(self.levels());
        for level in 0..self.levels() {
            residuals.push(residual.clone());
            let cb = self.codebook(level)?;
            let contribution = match mode {
                QuantMode::Soft => {
                    let p = self.soft_assign(&residual, level, tau)?;
                    let rows: Vec<Vec<f64>> = p.to_vec2()?;
                    codes.push(rows.iter().map(|r| argmax_lowest(r) as u32).collect());
                    let expected = p.matmul(cb)?;
                    distributions.push(p);
                    residual = (&residual - &expected)?;
                    expected
                }
                QuantMode::Hard => {
                    let c = self.hard_assign(&residual, level)?;
                    let idx = Tensor::from_slice(&c, c.len(), &device())?;
                    let chosen = cb.index_select(&idx, 0)?;
                    codes.push(c);
                    // residual chain only carries encoder gradients
                    residual = (&residual - chosen.detach())?;
                    chosen
                }
            };
            selected.push(contribution);
        }
        let mut aggregated = selected[0].clone();
        for s in &selected[1..] {
            aggregated = (aggregated + s)?;
        }
        Ok(Quantization {
            mode,
            latent,
            residuals,
            distributions,
            codes,
            selected,
            aggregated,
        })
    }

    /// Per-level assignment distributions along the soft residual chain.
    pub fn soft_distributions(&self, z: &Tensor, tau: f64) -> Result<Vec<Tensor>> {
        Ok(self.quantize(z, tau, QuantMode::Soft)?.distributions)
    }

    /// Seeds every level with k-means centroids of the residuals of a
    /// warm-up batch. Levels with fewer points than codewords keep their
    /// random initialization.
    pub fn init_codebooks_kmeans(&self, z: &Tensor, seed: u64, iterations: usize) -> Result<()> {
        let latent: Vec<Vec<f64>> = self.encode(z)?.detach().to_vec2()?;
        let k = self.codebook_size();
        if latent.len() < k {
            warn!(
                "warm-up batch of {} items is smaller than K = {k}; keeping random codebooks",
                latent.len()
            );
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = latent;
        for level in 0..self.levels() {
            let (centroids, assignment) = kmeans(&points, k, iterations, &mut rng);
            self.codebooks[level].set(&tensor_from_rows(&centroids)?)?;
            for (p, &a) in points.iter_mut().zip(&assignment) {
                for (x, c) in p.iter_mut().zip(&centroids[a]) {
                    *x -= c;
                }
            }
        }
        Ok(())
    }

    /// Hard identifiers for every item, with dedup ordinals for tuples
    /// shared by several items.
    pub fn assign_identifiers(&self, z: &Tensor, dedup_capacity: Option<usize>) -> Result<IdentifierTable> {
        let q = self.quantize(&z.detach(), self.config.tau_min, QuantMode::Hard)?;
        let n = z.dims2()?.0;
        let tuples = (0..n)
            .map(|i| q.codes.iter().map(|level| level[i]).collect())
            .collect();
        IdentifierTable::from_tuples(tuples, self.codebook_size(), dedup_capacity)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&self.config)?)?;
        self.params.save(&dir.join("params.safetensors"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: TokenizerConfig = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        let tok = Self::new(config, 0)?;
        tok.params.load(&dir.join("params.safetensors"))?;
        Ok(tok)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from `k` distinct random points; empty clusters are
/// re-seeded with the point farthest from its centroid.
fn kmeans(points: &[Vec<f64>], k: usize, iterations: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points[0].len();
    let mut centroids: Vec<Vec<f64>> = sample(rng, points.len(), k).iter().map(|i| points[i].clone()).collect();
    let mut assignment = vec![0usize; points.len()];
    for _ in 0..iterations.max(1) {
        for (a, p) in assignment.iter_mut().zip(points) {
            let d: Vec<f64> = centroids.iter().map(|c| sq_dist(p, c)).collect();
            *a = argmin_lowest(&d);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        sq_dist(&points[i], &centroids[assignment[i]])
                            .total_cmp(&sq_dist(&points[j], &centroids[assignment[j]]))
                    })
                    .unwrap();
                let jitter: f64 = rng.random_range(-1e-6..1e-6);
                centroids[c] = points[far].iter().map(|x| x + jitter).collect();
            }
        }
    }
    for (a, p) in assignment.iter_mut().zip(points) {
        let d: Vec<f64> = centroids.iter().map(|c| sq_dist(p, c)).collect();
        *a = argmin_lowest(&d);
    }
    (centroids, assignment)
}

/// `mean_b |x_hat - z|^2`: squared error summed over features, averaged
/// over the batch.
pub fn recon_loss(reconstruction: &Tensor, z: &Tensor) -> Result<Tensor> {
    if reconstruction.dims() != z.dims() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs input {:?}",
            reconstruction.dims(),
            z.dims()
        )));
    }
    Ok((reconstruction - z)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Codebook plus commitment terms of the hard RQ-VAE objective, summed over
/// levels and averaged over the batch.
pub fn quant_loss(q: &Quantization, beta: f64) -> Result<Tensor> {
    if q.mode != QuantMode::Hard {
        return Err(Error::Mode("quantization loss is only defined for hard assignment".into()));
    }
    let mut total: Option<Tensor> = None;
    for (v, e) in q.residuals.iter().zip(&q.selected) {
        let codebook_term = (v.detach() - e)?.sqr()?.sum(D::Minus1)?;
        let commit_term = (v - e.detach())?.sqr()?.sum(D::Minus1)?;
        let level = (codebook_term + (commit_term * beta)?)?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + level)?,
            None => level,
        });
    }
    total.ok_or_else(|| Error::Argument("no levels to quantize".into()))
}

/// Negative entropy of the batch-averaged assignment distribution, summed
/// over levels. Each tensor is (B, K). `0 log 0` counts as zero.
pub fn uniformity_loss(distributions: &[Tensor], base: LogBase) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for p in distributions {
        if p.dims2()?.0 == 0 {
            return Err(Error::Argument("uniformity loss needs a nonempty batch".into()));
        }
        let mean = p.mean(0)?;
        let log = mean.maximum(f64::MIN_POSITIVE)?.log()?;
        let level = (mean * log)?.sum_all()?;
        total = Some(match total {
            Some(t) => (t + level)?,
            None => level,
        });
    }
    let total = total.ok_or_else(|| Error::Argument("no distributions given".into()))?;
    Ok((total * base.scale())?)
}

/// Linear decay from `tau_max` at step 0 to `tau_min` at `total_step`.
/// Out-of-range steps are clamped with a warning.
pub fn anneal_temperature(step: i64, total_step: u64, tau_max: f64, tau_min: f64) -> Result<f64> {
    if total_step == 0 {
        return Err(Error::Argument("total_step must be >= 1".into()));
    }
    if !(tau_min > 0.0 && tau_max >= tau_min) {
        return Err(Error::Argument(format!("need 0 < tau_min <= tau_max, got {tau_min} / {tau_max}")));
    }
    let clamped = step.clamp(0, total_step as i64);
    if clamped != step {
        warn!("annealing step {step} outside [0, {total_step}]; clamping");
    }
    let frac = clamped as f64 / total_step as f64;
    Ok((1.0 - frac) * tau_max + frac * tau_min)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemIdentifier {
    pub codes: Vec<u32>,
    pub dedup: u32,
}

/// Hard identifiers of every item in dense item order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentifierTable {
    codebook_size: usize,
    items: Vec<ItemIdentifier>,
}

#[derive(Serialize, Deserialize)]
struct IdentifierLine {
    item: u32,
    codes: Vec<u32>,
    dedup: u32,
}

impl IdentifierTable {
    /// Items sharing a code tuple receive dedup tokens 0, 1, 2, ... in
    /// item order. `dedup_capacity` bounds the number of dedup tokens.
    pub fn from_tuples(tuples: Vec<Vec<u32>>, codebook_size: usize, dedup_capacity: Option<usize>) -> Result<Self> {
        let mut next: HashMap<Vec<u32>, u32> = HashMap::new();
        let mut items = Vec::with_capacity(tuples.len());
        for codes in tuples {
            if let Some(c) = codes.iter().find(|&&c| c as usize >= codebook_size) {
                return Err(Error::Index(format!("code {c} outside codebook of size {codebook_size}")));
            }
            let slot = next.entry(codes.clone()).or_insert(0);
            let dedup = *slot;
            *slot += 1;
            if let Some(cap) = dedup_capacity {
                if dedup as usize >= cap {
                    return Err(Error::Capacity(format!(
                        "{} items share identifier {codes:?}; only {cap} dedup tokens are reserved",
                        dedup + 1
                    )));
                }
            }
            items.push(ItemIdentifier { codes, dedup });
        }
        Ok(Self { codebook_size, items })
    }

    pub fn items(&self) -> &[ItemIdentifier] {
        &self.items
    }

    pub fn get(&self, item: usize) -> &ItemIdentifier {
        &self.items[item]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.items.first().map_or(0, |i| i.codes.len())
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    /// Code tuples without the dedup token.
    pub fn tuples(&self) -> Vec<Vec<u32>> {
        self.items.iter().map(|i| i.codes.clone()).collect()
    }

    /// Number of dedup tokens in use (largest group size).
    pub fn dedup_tokens_used(&self) -> usize {
        self.items.iter().map(|i| i.dedup as usize + 1).max().unwrap_or(0)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (i, id) in self.items.iter().enumerate() {
            let line = IdentifierLine {
                item: i as u32,
                codes: id.codes.clone(),
                dedup: id.dedup,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path, codebook_size: usize) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut items = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: IdentifierLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if rec.item as usize != items.len() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected item {}, found {}", items.len(), rec.item),
                });
            }
            items.push(ItemIdentifier {
                codes: rec.codes,
                dedup: rec.dedup,
            });
        }
        Ok(Self { codebook_size, items })
    }
}

pub(crate) fn tensor_from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), cols), &device())?.to_dtype(DTYPE)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{central_difference, grad_of, perturb};
    use candle_core::Var;
    use proptest::prelude::*;

    fn tiny(levels: usize, k: usize, code_dim: usize) -> RqTokenizer {
        let cfg = TokenizerConfig {
            input_dim: 6,
            encoder_dims: vec![8],
            levels,
            codebook_size: k,
            code_dim,
            ..TokenizerConfig::full_scale(6)
        };
        RqTokenizer::new(cfg, 7).unwrap()
    }

    fn set_codebook(tok: &RqTokenizer, level: usize, rows: &[Vec<f64>]) {
        tok.codebook_var(level).unwrap().set(&tensor_from_rows(rows).unwrap()).unwrap();
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_vec2().unwrap()
    }

    #[test]
    fn zero_final_layer_encodes_to_bias() {
        let tok = tiny(1, 4, 3);
        let last = tok.encoder().layers().last().unwrap();
        last.weight().set(&Tensor::zeros((3, 8), DTYPE, &device()).unwrap()).unwrap();
        let z = tensor_from_rows(&[vec![1.0; 6], vec![-3.0; 6]]).unwrap();
        let r = rows(&tok.encode(&z).unwrap());
        let bias: Vec<f64> = last.bias().unwrap().as_tensor().to_vec1().unwrap();
        assert_eq!(r[0], bias);
        assert_eq!(r[1], bias);
    }

    #[test]
    fn encode_rejects_wrong_width_and_keeps_order() {
        let tok = tiny(1, 4, 3);
        let z = Tensor::zeros((2, 5), DTYPE, &device()).unwrap();
        assert!(matches!(tok.encode(&z), Err(Error::Shape(_))));
        let batch = tensor_from_rows(&[vec![0.1; 6], vec![0.2; 6], vec![0.3; 6]]).unwrap();
        let all = rows(&tok.encode(&batch).unwrap());
        let second = rows(&tok.encode(&batch.narrow(0, 1, 1).unwrap()).unwrap());
        assert_eq!(all[1], second[0]);
    }

    #[test]
    fn encoder_jacobian_matches_central_differences() {
        let tok = tiny(1, 4, 3);
        let z = Var::from_tensor(&tensor_from_rows(&[vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.9]]).unwrap()).unwrap();
        for out in 0..3 {
            let f = |z: &Tensor| tok.encode(z).unwrap().narrow(1, out, 1).unwrap().sum_all().unwrap();
            let grads = f(z.as_tensor()).backward().unwrap();
            let analytic: Vec<f64> = grads.get(z.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            for (i, a) in analytic.iter().enumerate() {
                let fd = central_difference(&z, i, 1e-5, || nn::scalar(&f(z.as_tensor())).unwrap());
                assert!((a - fd).abs() <= 1e-4 * a.abs().max(1e-6), "d r{out}/d z{i}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn decoder_identity_fixture_zero_pads() {
        let cfg = TokenizerConfig {
            input_dim: 5,
            encoder_dims: vec![],
            levels: 1,
            codebook_size: 2,
            code_dim: 3,
            ..TokenizerConfig::full_scale(5)
        };
        let tok = RqTokenizer::new(cfg, 0).unwrap();
        let layer = &tok.decoder().layers()[0];
        let mut w = vec![vec![0.0; 3]; 5];
        for (i, row) in w.iter_mut().enumerate().take(3) {
            row[i] = 1.0;
        }
        layer.weight().set(&tensor_from_rows(&w).unwrap()).unwrap();
        layer.bias().unwrap().set(&Tensor::zeros(5, DTYPE, &device()).unwrap()).unwrap();
        let r = tensor_from_rows(&[vec![1.5, -2.0, 0.25], vec![3.0, 4.0, 5.0]]).unwrap();
        let out = rows(&tok.decode(&r).unwrap());
        assert_eq!(out[0], vec![1.5, -2.0, 0.25, 0.0, 0.0]);
        assert_eq!(out[1], vec![3.0, 4.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn decoder_jacobian_matches_central_differences() {
        let tok = tiny(1, 4, 3);
        let r = Var::from_tensor(&tensor_from_rows(&[vec![0.4, -0.1, 0.8]]).unwrap()).unwrap();
        let f = |r: &Tensor| tok.decode(r).unwrap().narrow(1, 2, 1).unwrap().sum_all().unwrap();
        let grads = f(r.as_tensor()).backward().unwrap();
        let analytic: Vec<f64> = grads.get(r.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (i, a) in analytic.iter().enumerate() {
            let fd = central_difference(&r, i, 1e-5, || nn::scalar(&f(r.as_tensor())).unwrap());
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(1e-6));
        }
    }

    #[test]
    fn equidistant_codewords_split_evenly() {
        let tok = tiny(1, 2, 2);
        set_codebook(&tok, 0, &[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        for tau in [1e-3, 0.5, 10.0] {
            let p = tok.soft_assign_one(&[0.0, 3.0], 0, tau).unwrap();
            assert!((p.probs[0] - 0.5).abs() < 1e-12 && (p.probs[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_distance_gap_at_unit_temperature() {
        let tok = tiny(1, 2, 1);
        // squared distances 0 and 1 from the origin
        set_codebook(&tok, 0, &[vec![0.0], vec![1.0]]);
        let p = tok.soft_assign_one(&[0.0], 0, 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert!((p.probs[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((p.probs[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((p.probs[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn low_temperature_concentrates_on_nearest() {
        let tok = tiny(1, 3, 1);
        set_codebook(&tok, 0, &[vec![0.0], vec![0.3], vec![2.0]]);
        let p = tok.soft_assign_one(&[0.1], 0, 1e-4).unwrap();
        assert_eq!(p.argmax(), 0);
        assert!(p.probs[0] > 1.0 - 1e-12);
    }

    #[test]
    fn soft_assign_rejects_bad_inputs() {
        let tok = tiny(1, 2, 1);
        assert!(matches!(tok.soft_assign_one(&[0.0], 0, 0.0), Err(Error::Argument(_))));
        assert!(matches!(tok.soft_assign_one(&[f64::NAN], 0, 1.0), Err(Error::Numeric(_))));
        assert!(matches!(tok.soft_assign_one(&[0.0], 3, 1.0), Err(Error::Index(_))));
    }

    #[test]
    fn hard_assign_exact_match_and_ties() {
        let tok = tiny(1, 8, 2);
        let mut cb: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 10.0 - i as f64]).collect();
        let residual = tensor_from_rows(&[cb[7].clone()]).unwrap();
        set_codebook(&tok, 0, &cb);
        assert_eq!(tok.hard_assign(&residual, 0).unwrap(), vec![7]);

        cb[5] = vec![100.0, 100.0];
        cb[2] = cb[5].clone();
        set_codebook(&tok, 0, &cb);
        let far = tensor_from_rows(&[vec![101.0, 99.0]]).unwrap();
        assert_eq!(tok.hard_assign(&far, 0).unwrap(), vec![2]);
    }

    #[test]
    fn hard_assign_matches_exhaustive_scan_at_k256() {
        let cfg = TokenizerConfig::full_scale(8);
        let tok = RqTokenizer::new(cfg, 3).unwrap();
        let mut init = Init::new(99);
        let residual = init.normal((50, 32), 0.5).unwrap();
        let got = tok.hard_assign(&residual, 1).unwrap();
        let cb = rows(tok.codebook(1).unwrap());
        for (r, g) in rows(&residual).iter().zip(got) {
            let d: Vec<f64> = cb.iter().map(|c| sq_dist(r, c)).collect();
            assert_eq!(argmin_lowest(&d), g as usize);
        }
    }

    #[test]
    fn one_hot_limit_matches_hard_aggregate() {
        let tok = tiny(3, 8, 4);
        let mut init = Init::new(5);
        let z = init.normal((10, 6), 1.0).unwrap();
        let hard = tok.quantize(&z, 1.0, QuantMode::Hard).unwrap();
        let soft = tok.quantize(&z, 1e-9, QuantMode::Soft).unwrap();
        assert_eq!(hard.codes, soft.codes);
        let a = rows(&hard.aggregated);
        let b = rows(&soft.aggregated);
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_single_level_aggregates_to_mean_codeword() {
        let tok = tiny(1, 4, 2);
        // a residual equidistant from all four codewords
        let cb = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        set_codebook(&tok, 0, &cb);
        let q = tok.quantize_latent(tensor_from_rows(&[vec![0.0, 0.0]]).unwrap(), 0.3, QuantMode::Soft).unwrap();
        let p = rows(&q.distributions[0]);
        assert!(p[0].iter().all(|x| (x - 0.25).abs() < 1e-12));
        let agg = rows(&q.aggregated);
        assert!(agg[0].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn aggregate_gradient_wrt_codeword_matches_finite_differences() {
        let tok = tiny(2, 4, 3);
        let mut init = Init::new(8);
        let z = init.normal((5, 6), 1.0).unwrap();
        let f = || tok.quantize(&z, 0.7, QuantMode::Soft).unwrap().aggregated.sqr().unwrap().sum_all().unwrap();
        for level in 0..2 {
            let var = tok.codebook_var(level).unwrap();
            let grads = f().backward().unwrap();
            let analytic = grad_of(&grads, var);
            for idx in [0, 4, 11] {
                let fd = central_difference(var, idx, 1e-5, || nn::scalar(&f()).unwrap());
                let a = analytic[idx];
                assert!((a - fd).abs() <= 1e-3 * a.abs().max(1e-8), "level {level} idx {idx}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn soft_gradient_reaches_encoder_and_matches_finite_differences() {
        let tok = tiny(3, 4, 3);
        let mut init = Init::new(4);
        let z = init.normal((4, 6), 1.0).unwrap();
        let f = || {
            let q = tok.quantize(&z, 0.5, QuantMode::Soft).unwrap();
            (q.aggregated * 1.7).unwrap().sin().unwrap().sum_all().unwrap()
        };
        let grads = f().backward().unwrap();
        let first = tok.encoder().layers()[0].weight();
        let analytic = grad_of(&grads, first);
        assert!(analytic.iter().any(|g| g.abs() > 1e-8));
        for idx in [0, 7, 20] {
            let fd = central_difference(first, idx, 1e-5, || nn::scalar(&f()).unwrap());
            let a = analytic[idx];
            assert!((a - fd).abs() <= 1e-3 * a.abs().max(1e-8), "idx {idx}: {a} vs {fd}");
        }
    }

    #[test]
    fn recon_loss_cases() {
        let z = tensor_from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(nn::scalar(&recon_loss(&z, &z).unwrap()).unwrap(), 0.0);
        let shifted = tensor_from_rows(&[vec![1.0, 3.0, 3.0]]).unwrap();
        assert_eq!(nn::scalar(&recon_loss(&shifted, &z).unwrap()).unwrap(), 1.0);

        let mut init = Init::new(1);
        let a = init.normal((7, 5), 1.0).unwrap();
        let b = init.normal((7, 5), 1.0).unwrap();
        let direct: f64 = rows(&a)
            .iter()
            .zip(rows(&b))
            .map(|(x, y)| sq_dist(x, &y))
            .sum::<f64>()
            / 7.0;
        assert!((nn::scalar(&recon_loss(&a, &b).unwrap()).unwrap() - direct).abs() < 1e-12);
    }

    fn manual_hard(latent: Vec<Vec<f64>>, codeword: Vec<Vec<f64>>) -> (RqTokenizer, Quantization) {
        let tok = tiny(1, 2, 2);
        let mut cb = codeword;
        cb.push(vec![50.0, 50.0]);
        set_codebook(&tok, 0, &cb);
        let q = tok.quantize_latent(tensor_from_rows(&latent).unwrap(), 1.0, QuantMode::Hard).unwrap();
        (tok, q)
    }

    #[test]
    fn quant_loss_zero_when_residual_is_codeword() {
        let (_, q) = manual_hard(vec![vec![0.5, -0.5]], vec![vec![0.5, -0.5]]);
        assert_eq!(nn::scalar(&quant_loss(&q, 0.25).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn quant_loss_arithmetic() {
        // |v - e|^2 = 4 -> 4 + 0.25 * 4 = 5
        let (_, q) = manual_hard(vec![vec![2.0, 0.0]], vec![vec![0.0, 0.0]]);
        assert!((nn::scalar(&quant_loss(&q, 0.25).unwrap()).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn quant_loss_rejects_soft_mode() {
        let tok = tiny(1, 2, 2);
        let q = tok.quantize_latent(tensor_from_rows(&[vec![0.0, 1.0]]).unwrap(), 1.0, QuantMode::Soft).unwrap();
        assert!(matches!(quant_loss(&q, 0.25), Err(Error::Mode(_))));
    }

    #[test]
    fn quant_loss_routes_gradients_by_branch() {
        let tok = tiny(1, 2, 2);
        set_codebook(&tok, 0, &[vec![0.2, -0.4], vec![30.0, 30.0]]);
        let v = Var::from_tensor(&tensor_from_rows(&[vec![1.0, 0.5]]).unwrap()).unwrap();
        let beta = 0.25;
        let q = tok.quantize_latent(v.as_tensor().clone(), 1.0, QuantMode::Hard).unwrap();
        let grads = quant_loss(&q, beta).unwrap().backward().unwrap();
        let g_latent = grad_of(&grads, &v);
        let g_code = grad_of(&grads, tok.codebook_var(0).unwrap());

        // finite differences with the codeword held fixed: only the
        // beta-weighted commitment branch depends on v
        let e = [0.2, -0.4];
        let commit = |x: &[f64]| beta * ((x[0] - e[0]).powi(2) + (x[1] - e[1]).powi(2));
        for i in 0..2 {
            let mut p = [1.0, 0.5];
            let mut m = p;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (commit(&p) - commit(&m)) / 2e-6;
            assert!((g_latent[i] - fd).abs() < 1e-6, "{} vs {fd}", g_latent[i]);
        }
        // codebook gradient is the unscaled codebook branch: 2 (e - v)
        assert!((g_code[0] - 2.0 * (0.2 - 1.0)).abs() < 1e-12);
        assert!((g_code[1] - 2.0 * (-0.4 - 0.5)).abs() < 1e-12);
        assert_eq!(&g_code[2..], &[0.0, 0.0]);
    }

    fn brute_uniformity(dists: &[Vec<Vec<f64>>]) -> f64 {
        let mut total = 0.0;
        for level in dists {
            let k = level[0].len();
            for j in 0..k {
                let mut mean = 0.0;
                for row in level {
                    mean += row[j];
                }
                mean /= level.len() as f64;
                if mean > 0.0 {
                    total += mean * mean.ln();
                }
            }
        }
        total
    }

    #[test]
    fn uniformity_closed_forms() {
        let uniform: Vec<Tensor> = (0..3)
            .map(|_| (Tensor::ones((5, 256), DTYPE, &device()).unwrap() / 256.0).unwrap())
            .collect();
        let v = nn::scalar(&uniformity_loss(&uniform, LogBase::Natural).unwrap()).unwrap();
        assert!((v + 3.0 * 256f64.ln()).abs() < 1e-10);
        assert!((v + 16.635).abs() < 1e-3);
        let v2 = nn::scalar(&uniformity_loss(&uniform, LogBase::Two).unwrap()).unwrap();
        assert!((v2 + 24.0).abs() < 1e-10);

        let mut onehot = vec![vec![0.0; 8]; 4];
        for row in &mut onehot {
            row[3] = 1.0;
        }
        let t = vec![tensor_from_rows(&onehot).unwrap()];
        assert_eq!(nn::scalar(&uniformity_loss(&t, LogBase::Natural).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn uniformity_matches_double_loop() {
        let tok = tiny(3, 8, 4);
        let mut init = Init::new(12);
        let z = init.normal((9, 6), 1.0).unwrap();
        let dists = tok.soft_distributions(&z, 0.8).unwrap();
        let plain: Vec<Vec<Vec<f64>>> = dists.iter().map(rows).collect();
        let v = nn::scalar(&uniformity_loss(&dists, LogBase::Natural).unwrap()).unwrap();
        assert!((v - brute_uniformity(&plain)).abs() < 1e-10);
        assert!(v >= -3.0 * 8f64.ln() - 1e-12 && v <= 0.0);
    }

    #[test]
    fn annealing_endpoints_and_midpoint() {
        assert_eq!(anneal_temperature(0, 100, 0.01, 0.001).unwrap(), 0.01);
        assert_eq!(anneal_temperature(100, 100, 0.01, 0.001).unwrap(), 0.001);
        assert!((anneal_temperature(50, 100, 0.01, 0.001).unwrap() - 0.0055).abs() < 1e-15);
        assert_eq!(anneal_temperature(250, 100, 0.01, 0.001).unwrap(), 0.001);
        assert_eq!(anneal_temperature(-4, 100, 0.01, 0.001).unwrap(), 0.01);
        assert!(anneal_temperature(0, 0, 0.01, 0.001).is_err());
    }

    #[test]
    fn identifiers_without_collisions_have_zero_dedup() {
        let t = IdentifierTable::from_tuples(vec![vec![0, 1], vec![1, 0], vec![2, 2]], 4, None).unwrap();
        assert!(t.items().iter().all(|i| i.dedup == 0));
    }

    #[test]
    fn colliding_identifiers_get_ordinals() {
        let t = IdentifierTable::from_tuples(
            vec![vec![1, 1], vec![0, 0], vec![1, 1], vec![1, 1]],
            4,
            None,
        )
        .unwrap();
        let d: Vec<u32> = t.items().iter().map(|i| i.dedup).collect();
        assert_eq!(d, vec![0, 0, 1, 2]);
        assert_eq!(t.dedup_tokens_used(), 3);
        assert!(matches!(
            IdentifierTable::from_tuples(t.tuples(), 4, Some(2)),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn identifier_dump_round_trip() {
        let tok = tiny(3, 4, 3);
        let mut init = Init::new(2);
        let z = init.normal((20, 6), 1.0).unwrap();
        let t = tok.assign_identifiers(&z, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.jsonl");
        t.write_jsonl(&p).unwrap();
        assert_eq!(IdentifierTable::read_jsonl(&p, 4).unwrap(), t);
        let again = tok.assign_identifiers(&z, None).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn kmeans_init_places_codewords_on_clusters() {
        let tok = tiny(1, 2, 3);
        let mut data = Vec::new();
        for i in 0..20 {
            let s = if i % 2 == 0 { 4.0 } else { -4.0 };
            data.push(vec![s, s, s, s, s, s]);
        }
        let z = tensor_from_rows(&data).unwrap();
        tok.init_codebooks_kmeans(&z, 1, 10).unwrap();
        let codes = tok.quantize(&z, 1.0, QuantMode::Hard).unwrap().codes;
        assert_ne!(codes[0][0], codes[0][1]);
        assert_eq!(codes[0][0], codes[0][2]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let tok = tiny(2, 4, 3);
        let dir = tempfile::tempdir().unwrap();
        tok.save(dir.path()).unwrap();
        let back = RqTokenizer::load(dir.path()).unwrap();
        assert_eq!(back.params().checksum().unwrap(), tok.params().checksum().unwrap());
        perturb(back.codebook_var(0).unwrap(), 0, 1.0);
        assert_ne!(back.params().checksum().unwrap(), tok.params().checksum().unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn distributions_normalized_monotone_and_consistent(
            seed in any::<u64>(),
            tau in 0.001f64..0.01,
        ) {
            let tok = tiny(1, 16, 4);
            let mut init = Init::new(seed);
            let residual = init.normal((8, 4), 0.3).unwrap();
            let p = rows(&tok.soft_assign(&residual, 0, tau).unwrap());
            let d = rows(&tok.squared_distances(&residual, 0).unwrap());
            let hard = tok.hard_assign(&residual, 0).unwrap();
            for ((pr, dr), h) in p.iter().zip(&d).zip(hard) {
                prop_assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(pr.iter().all(|&x| x >= 0.0));
                prop_assert_eq!(argmax_lowest(pr), h as usize);
                for a in 0..16 {
                    for b in 0..16 {
                        if dr[a] < dr[b] {
                            prop_assert!(pr[a] >= pr[b]);
                        }
                    }
                }
            }
        }

        #[test]
        fn annealing_is_non_increasing(a in 0i64..1000, b in 0i64..1000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(anneal_temperature(lo, 1000, 0.05, 0.001).unwrap() >= anneal_temperature(hi, 1000, 0.05, 0.001).unwrap());
        }
    }
}
