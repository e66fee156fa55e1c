//! Pipeline commands behind the `unigrec` binary.
//!
//! Every command reads one [`ExperimentConfig`], works inside the run
//! directory `<out>/<name>`, and records a manifest (config hash plus
//! SHA-256 of each input file). A command whose manifest still matches is
//! skipped unless forced.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{collision_rate, identifier_evolution, pca_project, usage_entropy};
use crate::dataset::{apply_kcore, build_sequences, load_interactions, InteractionFormat, SequenceDataset, Split};
use crate::embeddings::{load_embeddings, synth_embeddings, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::MetricsRecord;
use crate::recommender::RecommenderConfig;
use crate::synth::SyntheticInteractions;
use crate::teacher::{train_teacher, TeacherConfig};
use crate::tokenizer::{IdentifierTable, RqTokenizer, TokenizerConfig};
use crate::train::{
    joint_train, pretrain_tokenizer, run_ablation, snapshot_identifiers, AblationInputs, AblationResult,
    AblationRung, JointModel, Stage1Epoch, TrainedRecommender, TrainingConfig,
};

/// Where interactions come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// CSV or JSON-lines interaction log, k-core filtered.
    File { path: PathBuf, kcore: usize },
    Synthetic(SyntheticInteractions),
}

/// Where item embeddings come from. Rows end up in dense item order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingSource {
    /// Binary or CSV table already in dense item order.
    File {
        path: PathBuf,
        #[serde(default)]
        normalize: bool,
    },
    /// Clustered Gaussian rows. With synthetic interactions, item `i{k}`
    /// gets generator row `k`, so clusters line up with the interaction
    /// clusters.
    Synthetic {
        dim: usize,
        n_clusters: usize,
        noise_scale: f64,
        seed: u64,
        #[serde(default)]
        normalize: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub rungs: Vec<String>,
    /// Empty means the experiment seed only.
    pub seeds: Vec<u64>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            rungs: AblationRung::ALL.iter().map(|r| r.to_string()).collect(),
            seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name under the output root.
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    pub embeddings: EmbeddingSource,
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub recommender: RecommenderConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    /// `training.seed` is replaced by the experiment seed.
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub ablation: AblationSettings,
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the path ends in `.json`. Relative data
    /// paths are resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::File { path, .. } = &mut cfg.data {
            resolve(path);
        }
        if let EmbeddingSource::File { path, .. } = &mut cfg.embeddings {
            resolve(path);
        }
        if let Some(out) = &mut cfg.output_dir {
            resolve(out);
        }
        cfg.training.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name `{}` must be a plain directory name", self.name)));
        }
        if let DataSource::File { kcore: 0, .. } = self.data {
            return Err(Error::Config("data.kcore must be at least 1".into()));
        }
        if let EmbeddingSource::Synthetic { dim, .. } = self.embeddings {
            if dim != self.tokenizer.input_dim {
                return Err(Error::Config(format!(
                    "embedding dim {dim} does not match tokenizer.input_dim {}",
                    self.tokenizer.input_dim
                )));
            }
        }
        self.tokenizer.validate()?;
        self.recommender.validate()?;
        self.training.validate()?;
        for r in &self.ablation.rungs {
            AblationRung::parse(r)?;
        }
        Ok(())
    }

    fn ablation_rungs(&self) -> Result<Vec<AblationRung>> {
        self.ablation.rungs.iter().map(|r| AblationRung::parse(r)).collect()
    }

    fn ablation_seeds(&self) -> Vec<u64> {
        if self.ablation.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ablation.seeds.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Prepare,
    TrainTeacher,
    Pretrain,
    Joint,
    Eval,
    Analyze,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::TrainTeacher => "train-teacher",
            Command::Pretrain => "pretrain",
            Command::Joint => "joint",
            Command::Eval => "eval",
            Command::Analyze => "analyze",
            Command::Ablate => "ablate",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    /// Manifest matched; nothing was recomputed.
    UpToDate,
}

/// Run directory layout.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn dataset(&self) -> PathBuf {
        self.root.join("data/dataset.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("data/embeddings.bin")
    }
    pub fn stats(&self) -> PathBuf {
        self.root.join("data/stats.json")
    }
    pub fn teacher_dir(&self) -> PathBuf {
        self.root.join("teacher")
    }
    pub fn teacher_embeddings(&self) -> PathBuf {
        self.root.join("teacher/item_embeddings.bin")
    }
    pub fn stage1_dir(&self) -> PathBuf {
        self.root.join("stage1")
    }
    pub fn stage1_history(&self) -> PathBuf {
        self.root.join("stage1/history.jsonl")
    }
    pub fn stage2_dir(&self) -> PathBuf {
        self.root.join("stage2")
    }
    pub fn identifiers(&self, tag: &str) -> PathBuf {
        self.root.join(format!("identifiers-{tag}.jsonl"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }
    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablation")
    }
    fn manifest(&self, command: Command) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    /// Input file (relative to the run directory when inside it) -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// An experiment bound to its run directory.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub paths: RunPaths,
}

impl Experiment {
    /// `out_root` (e.g. from `UNIGREC_OUT`) beats `output_dir` in the
    /// config, which beats `./runs`.
    pub fn new(config: ExperimentConfig, out_root: Option<PathBuf>) -> Self {
        let root = out_root
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(&config.name);
        Self {
            config,
            paths: RunPaths { root },
        }
    }

    pub fn run(&self, command: Command, force: bool) -> Result<Outcome> {
        self.run_with(command, force, None)
    }

    /// `rungs` overrides the configured ablation rungs.
    pub fn run_with(&self, command: Command, force: bool, rungs: Option<&[AblationRung]>) -> Result<Outcome> {
        let rungs = match rungs {
            Some(r) => r.to_vec(),
            None => self.config.ablation_rungs()?,
        };
        let inputs = self.inputs(command, &rungs)?;
        let config_hash = self.config_hash(command, &rungs)?;
        let manifest_path = self.paths.manifest(command);
        if !force && self.up_to_date(&manifest_path, &config_hash, &inputs)? {
            info!("{command}: inputs and config unchanged; skipping (use --force to rerun)");
            return Ok(Outcome::UpToDate);
        }
        fs::create_dir_all(&self.paths.root)?;
        let outputs = match command {
            Command::Prepare => self.prepare()?,
            Command::TrainTeacher => self.train_teacher()?,
            Command::Pretrain => self.pretrain()?,
            Command::Joint => self.joint()?,
            Command::Eval => self.eval()?,
            Command::Analyze => self.analyze()?,
            Command::Ablate => self.ablate(&rungs)?,
        };
        let mut hashed = BTreeMap::new();
        for p in &inputs {
            hashed.insert(self.display_path(p), sha256_file(p)?);
        }
        let manifest = Manifest {
            command: command.to_string(),
            config_hash,
            inputs: hashed,
            outputs: outputs.iter().map(|p| self.display_path(p)).collect(),
        };
        fs::create_dir_all(manifest_path.parent().expect("manifest has a parent"))?;
        fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(Outcome::Ran)
    }

    fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(&self.paths.root).unwrap_or(p).display().to_string()
    }

    fn up_to_date(&self, manifest_path: &Path, config_hash: &str, inputs: &[PathBuf]) -> Result<bool> {
        let Ok(bytes) = fs::read(manifest_path) else {
            return Ok(false);
        };
        let Ok(old) = serde_json::from_slice::<Manifest>(&bytes) else {
            warn!("unreadable manifest {}; rerunning", manifest_path.display());
            return Ok(false);
        };
        if old.config_hash != config_hash || old.inputs.len() != inputs.len() {
            return Ok(false);
        }
        for p in inputs {
            if old.inputs.get(&self.display_path(p)) != Some(&sha256_file(p)?) {
                return Ok(false);
            }
        }
        Ok(old.outputs.iter().all(|o| self.paths.root.join(o).exists()))
    }

    /// Hash of the config sections a command depends on.
    fn config_hash(&self, command: Command, rungs: &[AblationRung]) -> Result<String> {
        let c = &self.config;
        let value = match command {
            Command::Prepare => serde_json::json!({ "data": c.data, "embeddings": c.embeddings }),
            Command::TrainTeacher => serde_json::json!({ "teacher": c.teacher, "seed": c.seed }),
            Command::Pretrain => serde_json::json!({ "tokenizer": c.tokenizer, "training": c.training }),
            Command::Joint | Command::Eval | Command::Analyze => serde_json::json!({
                "tokenizer": c.tokenizer,
                "recommender": c.recommender,
                "training": c.training,
            }),
            Command::Ablate => {
                let rungs: Vec<String> = rungs.iter().map(|r| r.to_string()).collect();
                serde_json::json!({
                    "tokenizer": c.tokenizer,
                    "recommender": c.recommender,
                    "training": c.training,
                    "rungs": rungs,
                    "seeds": c.ablation_seeds(),
                })
            }
        };
        sha256_json(&value)
    }

    fn distills(&self) -> bool {
        let d = &self.config.training.distillation;
        d.lambda_cd_tokenizer > 0.0 || d.lambda_cd_recommender > 0.0
    }

    /// Files a command reads, each checked to exist. A missing file names
    /// the command that produces it.
    fn inputs(&self, command: Command, rungs: &[AblationRung]) -> Result<Vec<PathBuf>> {
        let p = &self.paths;
        let mut needed: Vec<(PathBuf, Command)> = Vec::new();
        match command {
            Command::Prepare => {
                if let DataSource::File { path, .. } = &self.config.data {
                    need_external(path)?;
                    needed.push((path.clone(), Command::Prepare));
                }
                if let EmbeddingSource::File { path, .. } = &self.config.embeddings {
                    need_external(path)?;
                    needed.push((path.clone(), Command::Prepare));
                }
            }
            Command::TrainTeacher => needed.push((p.dataset(), Command::Prepare)),
            Command::Pretrain => needed.push((p.embeddings(), Command::Prepare)),
            Command::Joint => {
                needed.push((p.dataset(), Command::Prepare));
                needed.push((p.embeddings(), Command::Prepare));
                needed.push((p.stage1_dir().join("tokenizer/params.safetensors"), Command::Pretrain));
                if self.distills() {
                    needed.push((p.teacher_embeddings(), Command::TrainTeacher));
                }
            }
            Command::Eval => {
                needed.push((p.stage2_dir().join("recommender/params.safetensors"), Command::Joint));
                needed.push((p.stage2_dir().join("identifiers.jsonl"), Command::Joint));
                needed.push((p.dataset(), Command::Prepare));
            }
            Command::Analyze => {
                needed.push((p.stage1_history(), Command::Pretrain));
                needed.push((p.identifiers("stage1"), Command::Pretrain));
                needed.push((p.identifiers("stage2"), Command::Joint));
                needed.push((p.stage2_dir().join("tokenizer/params.safetensors"), Command::Joint));
            }
            Command::Ablate => {
                needed.push((p.dataset(), Command::Prepare));
                needed.push((p.embeddings(), Command::Prepare));
                if rungs.iter().any(|r| rung_distills(*r)) {
                    needed.push((p.teacher_embeddings(), Command::TrainTeacher));
                }
            }
        }
        for (path, producer) in &needed {
            if !path.exists() {
                return Err(Error::MissingPrerequisite {
                    artifact: path.clone(),
                    command: producer.name(),
                });
            }
        }
        Ok(needed.into_iter().map(|(path, _)| path).collect())
    }

    fn load_dataset(&self) -> Result<SequenceDataset> {
        SequenceDataset::load_json(&self.paths.dataset())
    }

    fn load_items(&self, n: usize) -> Result<EmbeddingTable> {
        load_embeddings(&self.paths.embeddings(), n)
    }

    fn prepare(&self) -> Result<Vec<PathBuf>> {
        let raw = match &self.config.data {
            DataSource::File { path, kcore } => {
                let records = load_interactions(path, InteractionFormat::from_path(path))?;
                apply_kcore(&records, *kcore)?
            }
            DataSource::Synthetic(s) => s.generate()?,
        };
        let dataset = build_sequences(&raw)?;
        let n = dataset.num_items();
        let table = match &self.config.embeddings {
            EmbeddingSource::File { path, normalize } => {
                let t = load_embeddings(path, n)?;
                if *normalize {
                    t.l2_normalized()
                } else {
                    t
                }
            }
            EmbeddingSource::Synthetic {
                dim,
                n_clusters,
                noise_scale,
                seed,
                normalize,
            } => {
                let t = match &self.config.data {
                    DataSource::Synthetic(s) => {
                        let full = synth_embeddings(s.n_items, *dim, *n_clusters, *noise_scale, *seed)?;
                        let rows = dataset
                            .items
                            .iter()
                            .map(|name| synthetic_row(name, s.n_items))
                            .collect::<Result<Vec<_>>>()?;
                        full.select_rows(&rows)?
                    }
                    DataSource::File { .. } => synth_embeddings(n, *dim, *n_clusters, *noise_scale, *seed)?,
                };
                if *normalize {
                    t.l2_normalized()
                } else {
                    t
                }
            }
        };
        if table.dim() != self.config.tokenizer.input_dim {
            return Err(Error::Config(format!(
                "embeddings have dim {}, tokenizer.input_dim is {}",
                table.dim(),
                self.config.tokenizer.input_dim
            )));
        }
        fs::create_dir_all(self.paths.root.join("data"))?;
        dataset.save_json(&self.paths.dataset())?;
        table.save(&self.paths.embeddings())?;
        let stats = dataset.stats();
        fs::write(self.paths.stats(), serde_json::to_vec_pretty(&stats)?)?;
        info!(
            "prepared {} users, {} items, {} interactions",
            stats.users, stats.items, stats.interactions
        );
        Ok(vec![self.paths.dataset(), self.paths.embeddings(), self.paths.stats()])
    }

    fn train_teacher(&self) -> Result<Vec<PathBuf>> {
        let dataset = self.load_dataset()?;
        let (model, report) = train_teacher(&dataset, &self.config.teacher, self.config.seed)?;
        let dir = self.paths.teacher_dir();
        model.save(&dir)?;
        model.export_item_embeddings()?.save(&self.paths.teacher_embeddings())?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        Ok(vec![dir.join("params.safetensors"), self.paths.teacher_embeddings(), dir.join("report.json")])
    }

    fn pretrain(&self) -> Result<Vec<PathBuf>> {
        let items = EmbeddingTable::read(&self.paths.embeddings())?.to_tensor()?;
        let (tokenizer, history) = pretrain_tokenizer(&items, &self.config.tokenizer, &self.config.training)?;
        let dir = self.paths.stage1_dir();
        tokenizer.save(&dir.join("tokenizer"))?;
        write_jsonl(&self.paths.stage1_history(), &history)?;
        snapshot_identifiers(&tokenizer, &items, &self.paths.identifiers("stage1"))?;
        Ok(vec![
            dir.join("tokenizer/params.safetensors"),
            self.paths.stage1_history(),
            self.paths.identifiers("stage1"),
        ])
    }

    fn joint(&self) -> Result<Vec<PathBuf>> {
        let dataset = self.load_dataset()?;
        let n = dataset.num_items();
        let items = self.load_items(n)?.to_tensor()?;
        let teacher = if self.distills() {
            Some(load_embeddings(&self.paths.teacher_embeddings(), n)?)
        } else {
            None
        };
        let tokenizer = RqTokenizer::load(&self.paths.stage1_dir().join("tokenizer"))?;
        let mut model = JointModel::new(
            tokenizer,
            items,
            teacher.as_ref(),
            self.config.recommender.clone(),
            self.config.training.clone(),
        )?;
        let history = joint_train(&mut model, &dataset)?;
        let dir = self.paths.stage2_dir();
        model.save(&dir)?;
        write_jsonl(&dir.join("history.jsonl"), &history)?;
        model.identifiers().write_jsonl(&self.paths.identifiers("stage2"))?;
        Ok(vec![
            dir.join("recommender/params.safetensors"),
            dir.join("identifiers.jsonl"),
            dir.join("history.jsonl"),
            self.paths.identifiers("stage2"),
        ])
    }

    fn eval(&self) -> Result<Vec<PathBuf>> {
        let dataset = self.load_dataset()?;
        let model = TrainedRecommender::load(&self.paths.stage2_dir())?;
        let max_history = model.recommender.config().max_history;
        let mut records = Vec::new();
        for split in [Split::Valid, Split::Test] {
            let record = model.evaluate(&dataset.eval_examples(split, max_history), split)?;
            info!(
                "{split:?}: recall@5 {:.4} recall@10 {:.4} ndcg@5 {:.4} ndcg@10 {:.4}",
                record.recall_5, record.recall_10, record.ndcg_5, record.ndcg_10
            );
            records.push(record);
        }
        write_jsonl(&self.paths.metrics(), &records)?;
        Ok(vec![self.paths.metrics()])
    }

    fn analyze(&self) -> Result<Vec<PathBuf>> {
        let dir = self.paths.analysis_dir();
        fs::create_dir_all(&dir)?;
        let k = self.config.tokenizer.codebook_size;
        let base = self.config.tokenizer.entropy_log_base;
        let mut outputs = Vec::new();

        let history: Vec<Stage1Epoch> = read_jsonl(&self.paths.stage1_history())?;
        let path = dir.join("collision_vs_step.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["epoch", "step", "tau", "recon", "collision_rate"])?;
        for h in &history {
            w.serialize((h.epoch, h.step, h.tau, h.recon, h.collision_rate))?;
        }
        w.flush()?;
        outputs.push(path);

        let stage1 = IdentifierTable::read_jsonl(&self.paths.identifiers("stage1"), k)?.tuples();
        let stage2 = IdentifierTable::read_jsonl(&self.paths.identifiers("stage2"), k)?.tuples();
        let path = dir.join("entropy.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["stage", "lambda_cu", "level", "entropy", "collision_rate"])?;
        for (tag, tuples) in [("stage1", &stage1), ("stage2", &stage2)] {
            let h = usage_entropy(tuples, k, base)?;
            let cr = collision_rate(tuples);
            for (level, e) in h.iter().enumerate() {
                w.write_record([
                    tag.to_string(),
                    self.config.training.stage1.lambda_cu.to_string(),
                    level.to_string(),
                    e.to_string(),
                    cr.to_string(),
                ])?;
            }
            let mean = h.iter().sum::<f64>() / h.len().max(1) as f64;
            w.write_record([
                tag.to_string(),
                self.config.training.stage1.lambda_cu.to_string(),
                "mean".into(),
                mean.to_string(),
                cr.to_string(),
            ])?;
        }
        w.flush()?;
        outputs.push(path);

        let report = identifier_evolution(&stage1, &stage2)?;
        let path = dir.join("change_rate_vs_layer.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["level", "change_rate"])?;
        for (level, r) in report.layer_change_rate.iter().enumerate() {
            w.serialize((level, r))?;
        }
        w.flush()?;
        outputs.push(path);

        let path = dir.join("change_patterns.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["changed_levels", "fraction"])?;
        for (pattern, frac) in &report.pattern_distribution {
            let label = if pattern.is_empty() {
                "none".to_string()
            } else {
                pattern.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("+")
            };
            w.write_record([label, frac.to_string()])?;
        }
        w.flush()?;
        outputs.push(path);

        let tokenizer = RqTokenizer::load(&self.paths.stage2_dir().join("tokenizer"))?;
        for level in 0..tokenizer.levels() {
            let rows: Vec<Vec<f64>> = tokenizer.codebook(level)?.to_vec2()?;
            let proj = pca_project(&rows)?;
            let path = dir.join(format!("pca_level{level}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["codeword", "pc1", "pc2"])?;
            for (i, [x, y]) in proj.coords.iter().enumerate() {
                w.serialize((i, x, y))?;
            }
            w.flush()?;
            outputs.push(path);
        }

        let summary = serde_json::json!({
            "collision_rate": { "stage1": collision_rate(&stage1), "stage2": collision_rate(&stage2) },
            "layer_change_rate": report.layer_change_rate,
            "at_most_one_layer": report.at_most_one_layer(),
        });
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_vec_pretty(&summary)?)?;
        outputs.push(path);
        Ok(outputs)
    }

    fn ablate(&self, rungs: &[AblationRung]) -> Result<Vec<PathBuf>> {
        let dataset = self.load_dataset()?;
        let n = dataset.num_items();
        let items = self.load_items(n)?.to_tensor()?;
        let teacher = if rungs.iter().any(|r| rung_distills(*r)) {
            Some(load_embeddings(&self.paths.teacher_embeddings(), n)?)
        } else {
            None
        };
        let inputs = AblationInputs {
            dataset: &dataset,
            items: &items,
            teacher: teacher.as_ref(),
            tokenizer: &self.config.tokenizer,
            recommender: &self.config.recommender,
        };
        let mut results: Vec<AblationResult> = Vec::new();
        for &rung in rungs {
            for seed in self.config.ablation_seeds() {
                let base = TrainingConfig {
                    seed,
                    ..self.config.training.clone()
                };
                info!("ablation {rung} seed {seed}");
                results.push(run_ablation(rung, &inputs, &base)?);
            }
        }
        let dir = self.paths.ablation_dir();
        fs::create_dir_all(&dir)?;
        write_jsonl(&dir.join("results.jsonl"), &results)?;
        let table = ablation_table(rungs, &results);
        let csv_path = dir.join("table.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(ABLATION_COLUMNS)?;
        for row in &table {
            w.write_record(row.cells())?;
        }
        w.flush()?;
        let md_path = dir.join("table.md");
        fs::write(&md_path, markdown_table(&table))?;
        Ok(vec![dir.join("results.jsonl"), csv_path, md_path])
    }
}

pub const ABLATION_COLUMNS: [&str; 6] = ["Variant", "Seeds", "Recall@5", "Recall@10", "NDCG@5", "NDCG@10"];

/// One ablation table row: seed-averaged test metrics of a rung.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub rung: AblationRung,
    pub seeds: usize,
    pub recall_5: f64,
    pub recall_10: f64,
    pub ndcg_5: f64,
    pub ndcg_10: f64,
}

impl AblationRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.rung.to_string(),
            self.seeds.to_string(),
            format!("{:.4}", self.recall_5),
            format!("{:.4}", self.recall_10),
            format!("{:.4}", self.ndcg_5),
            format!("{:.4}", self.ndcg_10),
        ]
    }
}

/// Averages results per rung, keeping the order of `rungs`.
pub fn ablation_table(rungs: &[AblationRung], results: &[AblationResult]) -> Vec<AblationRow> {
    rungs
        .iter()
        .filter_map(|&rung| {
            let mine: Vec<&MetricsRecord> = results.iter().filter(|r| r.rung == rung).map(|r| &r.test).collect();
            if mine.is_empty() {
                return None;
            }
            let n = mine.len() as f64;
            let avg = |f: fn(&MetricsRecord) -> f64| mine.iter().map(|m| f(m)).sum::<f64>() / n;
            Some(AblationRow {
                rung,
                seeds: mine.len(),
                recall_5: avg(|m| m.recall_5),
                recall_10: avg(|m| m.recall_10),
                ndcg_5: avg(|m| m.ndcg_5),
                ndcg_10: avg(|m| m.ndcg_10),
            })
        })
        .collect()
}

fn markdown_table(rows: &[AblationRow]) -> String {
    let mut s = format!("| {} |\n|{}\n", ABLATION_COLUMNS.join(" | "), "---|".repeat(ABLATION_COLUMNS.len()));
    for row in rows {
        s.push_str(&format!("| {} |\n", row.cells().join(" | ")));
    }
    s
}

fn rung_distills(rung: AblationRung) -> bool {
    let f = rung.features();
    f.distill_tokenizer || f.distill_recommender
}

fn need_external(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("input file {} does not exist", path.display())))
    }
}

/// Generator row of a synthetic item named `i{k}`.
fn synthetic_row(name: &str, n_items: usize) -> Result<usize> {
    name.strip_prefix('i')
        .and_then(|k| k.parse::<usize>().ok())
        .filter(|&k| k < n_items)
        .ok_or_else(|| Error::Data(format!("`{name}` is not a synthetic item name")))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
