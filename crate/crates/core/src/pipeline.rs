//! File-backed stages of the two-step workflow: build code vectors and codes
//! first, then train the backbone and token heads against them. The CLI is a
//! thin wrapper around these functions.

use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{train_baseline, BaselineConfig, CentroidMatrix};
use crate::cost::{scaling_table, write_csv, CostExtras, CostProfile, MethodSpec};
use crate::data::{
    gen_identity_mixture, per_class_mean_init, sample_longtail, EmbeddingProvider, IdentitySampler, IdentitySpec,
    LongTailDataset, Sample,
};
use crate::error::{GifError, Result};
use crate::io::{self, MetricsRecord, MetricsWriter};
use crate::model::{
    evaluate, train_step, verification_tar, Backbone, GifLossConfig, GifModel, StepMetrics, TokenHeads,
};
use crate::nn::Sgd;
use crate::sphere::{optimize_code_vectors, separation_metrics, CodeVectorMatrix, SeparationReport, UniformityConfig};
use crate::tokenizer::{assign_codes, build_code_tree, suggest_length, CodeBook, CodeTree, TokenizerConfig};

/// Where training data comes from: the synthetic generator, or an embedding
/// file whose vectors are used both as features and for mean initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub m: usize,
    pub d: usize,
    pub dispersion: f64,
    pub groups: usize,
    pub group_spread: f64,
    pub min_separation: f64,
    pub samples_per_identity: usize,
    /// Held-out samples per identity drawn for evaluation.
    pub eval_per_identity: usize,
    pub embeddings: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            m: 64,
            d: 32,
            dispersion: 400.0,
            groups: 0,
            group_spread: 0.6,
            min_separation: 0.5,
            samples_per_identity: 10,
            eval_per_identity: 20,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Normalized per-identity mean embedding.
    #[default]
    Mean,
    /// Seeded random unit rows, ignoring the data.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniformitySection {
    pub t: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Rows per stochastic batch.
    pub batch_rows: usize,
}

impl Default for UniformitySection {
    fn default() -> Self {
        let u = UniformityConfig::default();
        Self { t: u.t, lr: u.lr, epochs: u.epochs, batch_rows: u.batch_rows }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    /// Code length; picked from the identity count when absent.
    pub l: Option<usize>,
    /// Token range; the smallest that fits `m` when absent.
    pub v: Option<usize>,
    pub kmeans_iters: usize,
    pub restarts: usize,
    /// Randomly reassign codes among identities, destroying their semantics.
    pub shuffle_codes: bool,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { l: None, v: None, kmeans_iters: 100, restarts: 8, shuffle_codes: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone_hidden: Vec<usize>,
    /// Linear layers per token projection head; 3 gives two hidden layers.
    pub head_layers: usize,
    pub scale_s: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { backbone_hidden: vec![64], head_layers: 3, scale_s: 16.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma_balance: f64,
    /// Per-token weights; uniform when absent.
    pub lambdas: Option<Vec<f64>>,
    /// False-accept rate for the verification report.
    pub far: f64,
    /// Evaluation samples per identity used for verification pairs.
    pub verification_per_identity: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            gamma_balance: 1.0,
            lambdas: None,
            far: 1e-3,
            verification_per_identity: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollapseSection {
    pub head_fraction: f64,
    pub head_count: usize,
    pub tail_count: usize,
    pub dispersion: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scale_s: f64,
    pub backbone_hidden: Vec<usize>,
}

impl Default for CollapseSection {
    fn default() -> Self {
        Self {
            head_fraction: 0.25,
            head_count: 100,
            tail_count: 2,
            dispersion: 50.0,
            epochs: 50,
            batch: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            scale_s: 4.0,
            backbone_hidden: vec![64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub m_list: Vec<u64>,
    pub d: u64,
    pub subset_alpha: f64,
    pub head_layers: usize,
    pub batch: u64,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            m_list: vec![1_000, 10_000, 100_000, 1_000_000, 10_000_000, 64_000_000],
            d: 512,
            subset_alpha: 0.3,
            head_layers: 3,
            batch: crate::cost::DEFAULT_BATCH,
        }
    }
}

/// Everything one run needs. Parsed from TOML; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub init: InitMode,
    pub dataset: DatasetConfig,
    pub uniformity: UniformitySection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub collapse: CollapseSection,
    pub cost: CostSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 0,
            init: InitMode::default(),
            dataset: DatasetConfig::default(),
            uniformity: UniformitySection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            collapse: CollapseSection::default(),
            cost: CostSection::default(),
        }
    }
}

/// Independent seed streams derived from the run seed.
mod stream {
    pub const PROTOTYPES: u64 = 1;
    pub const TRAIN_SAMPLES: u64 = 2;
    pub const EVAL_SAMPLES: u64 = 3;
    pub const RANDOM_INIT: u64 = 4;
    pub const UNIFORMITY: u64 = 5;
    pub const TOKENIZER: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const MODEL_INIT: u64 = 8;
    pub const BATCH_ORDER: u64 = 9;
    pub const COLLAPSE: u64 = 10;
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const VECTORS_FILE: &str = "vectors.cvm";
pub const OPTIMIZED_FILE: &str = "optimized.cvm";
pub const SEPARATION_FILE: &str = "separation.json";
pub const CODES_FILE: &str = "codes.txt";
pub const TREE_FILE: &str = "tree.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.gifc";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const EVAL_FILE: &str = "eval.json";
pub const MANIFEST_FILE: &str = "dataset_manifest.json";
pub const COST_FILE: &str = "cost.csv";
pub const COLLAPSE_FILE: &str = "collapse.json";

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.m < 2 || d.d < 2 {
            return Err(GifError::config(format!("dataset needs m >= 2 and d >= 2, got m={} d={}", d.m, d.d)));
        }
        if d.samples_per_identity == 0 || d.eval_per_identity == 0 {
            return Err(GifError::config("samples_per_identity and eval_per_identity must be positive"));
        }
        self.uniformity_config().validate()?;
        let t = &self.training;
        if t.batch == 0 || !(t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return Err(GifError::config("training needs batch > 0, lr > 0, momentum in [0, 1)"));
        }
        if !(self.model.scale_s >= 0.0) {
            return Err(GifError::config("scale_s must be non-negative"));
        }
        if self.tokenizer.l == Some(0) || self.tokenizer.v.is_some_and(|v| v < 2) {
            return Err(GifError::config("tokenizer needs l >= 1 and v >= 2"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, with run-location fields cleared so
    /// that the hash only tracks what affects results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.threads = 0;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn uniformity_config(&self) -> UniformityConfig {
        let u = &self.uniformity;
        UniformityConfig {
            t: u.t,
            batch_rows: u.batch_rows,
            lr: u.lr,
            epochs: u.epochs,
            seed: derive_seed(self.seed, stream::UNIFORMITY),
        }
    }

    pub fn identity_spec(&self) -> IdentitySpec {
        let d = &self.dataset;
        IdentitySpec {
            m: d.m,
            d: d.d,
            dispersion: d.dispersion,
            groups: d.groups,
            group_spread: d.group_spread,
            min_separation: d.min_separation,
            seed: derive_seed(self.seed, stream::PROTOTYPES),
        }
    }

    /// `(l, v)` for `m` identities: configured values, or derived ones.
    pub fn code_shape(&self, m: usize) -> Result<(usize, usize)> {
        match (self.tokenizer.l, self.tokenizer.v) {
            (Some(l), Some(v)) => Ok((l, v)),
            (Some(l), None) => Ok((l, crate::tokenizer::min_token_range(m, l))),
            (None, Some(v)) => {
                let mut l = 1;
                let mut cap = v as u128;
                while cap < m as u128 {
                    cap *= v as u128;
                    l += 1;
                }
                Ok((l, v))
            }
            (None, None) => {
                let c = suggest_length(m);
                if !c.in_band {
                    log::warn!("no code length puts the token range for m={m} in the preferred band; using l={} v={}", c.l, c.v);
                }
                Ok((c.l, c.v))
            }
        }
    }
}

/// Training and evaluation samples for a run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: LongTailDataset,
    pub eval: Vec<Sample>,
    /// True when evaluation reuses the training samples (embedding files carry
    /// no held-out split).
    pub eval_is_train: bool,
    pub sampler: Option<IdentitySampler>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<RunData> {
    if let Some(path) = &cfg.dataset.embeddings {
        if !path.exists() {
            return Err(GifError::config(format!("embedding file {} does not exist", path.display())));
        }
        let samples = io::load_embeddings(path)?;
        let m = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
        let train = LongTailDataset::from_samples(samples, m)?;
        return Ok(RunData { eval: train.samples.clone(), train, eval_is_train: true, sampler: None });
    }
    let sampler = gen_identity_mixture(&cfg.identity_spec())?;
    let d = &cfg.dataset;
    let train = sample_longtail(
        &sampler,
        1.0,
        d.samples_per_identity,
        d.samples_per_identity,
        derive_seed(cfg.seed, stream::TRAIN_SAMPLES),
    )?;
    let eval = sampler.draw_per_identity(
        d.eval_per_identity,
        derive_seed(cfg.seed, stream::EVAL_SAMPLES),
        train.len() as u64,
    );
    Ok(RunData { train, eval, eval_is_train: false, sampler: Some(sampler) })
}

/// Initial code vectors from the data (or random), written to `vectors.cvm`.
pub fn init_vectors(cfg: &ExperimentConfig) -> Result<CodeVectorMatrix> {
    cfg.validate()?;
    let hash = cfg.hash();
    let data = load_data(cfg)?;
    let h = match cfg.init {
        InitMode::Mean => {
            let d = data.train.samples[0].features.len();
            per_class_mean_init(&EmbeddingProvider::Features { d }, &data.train)?
        }
        InitMode::Random => CodeVectorMatrix::random(
            data.train.m,
            data.train.samples[0].features.len(),
            derive_seed(cfg.seed, stream::RANDOM_INIT),
        )?,
    };
    io::save_cvm(&cfg.path(VECTORS_FILE), &h, "initial", &hash)?;
    io::save_json(&cfg.path(MANIFEST_FILE), &data.train.manifest())?;
    info!("wrote {} initial code vectors of dimension {}", h.m(), h.d());
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub before: SeparationReport,
    pub after: SeparationReport,
    pub loss_before: f64,
    pub loss_after: f64,
    pub config_hash: String,
}

/// Spreads `vectors.cvm` over the sphere into `optimized.cvm`.
pub fn optimize(cfg: &ExperimentConfig) -> Result<OptimizeReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let h0 = load_input(&cfg.path(VECTORS_FILE), "init-vectors")?;
    let ucfg = cfg.uniformity_config();
    let h = optimize_code_vectors(&h0, &ucfg)?;
    let report = OptimizeReport {
        before: separation_metrics(&h0)?,
        after: separation_metrics(&h)?,
        loss_before: crate::sphere::uniformity_loss_full(&h0, ucfg.t),
        loss_after: crate::sphere::uniformity_loss_full(&h, ucfg.t),
        config_hash: hash.clone(),
    };
    io::save_cvm(&cfg.path(OPTIMIZED_FILE), &h, "optimized", &hash)?;
    io::save_json(&cfg.path(SEPARATION_FILE), &report)?;
    info!(
        "min pairwise distance {:.4} -> {:.4}, loss {:.4} -> {:.4}",
        report.before.min_dist, report.after.min_dist, report.loss_before, report.loss_after
    );
    Ok(report)
}

fn load_input(path: &Path, producer: &str) -> Result<CodeVectorMatrix> {
    if !path.exists() {
        return Err(GifError::config(format!("{} is missing; run `{producer}` first", path.display())));
    }
    io::load_cvm(path)
}

/// Builds the code tree over `optimized.cvm` and writes codes and tree files.
pub fn tokenize(cfg: &ExperimentConfig) -> Result<(CodeTree, CodeBook)> {
    cfg.validate()?;
    let hash = cfg.hash();
    let h = load_input(&cfg.path(OPTIMIZED_FILE), "optimize")?;
    let (l, v) = cfg.code_shape(h.m())?;
    let tcfg = TokenizerConfig {
        l,
        v,
        seed: derive_seed(cfg.seed, stream::TOKENIZER),
        kmeans_iters: cfg.tokenizer.kmeans_iters,
        restarts: cfg.tokenizer.restarts,
    };
    let mut tree = build_code_tree(&h, &tcfg)?;
    if cfg.tokenizer.shuffle_codes {
        let mut perm: Vec<usize> = (0..h.m()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::SHUFFLE)));
        tree = tree.permute_identities(&perm)?;
    }
    let codes = assign_codes(&tree);
    io::save_codes(&cfg.path(CODES_FILE), &codes, &hash)?;
    io::save_tree(&cfg.path(TREE_FILE), &tree, &hash)?;
    info!("assigned {} codes of length {l} over {v} tokens", codes.m());
    Ok((tree, codes))
}

/// Refuses artifacts that disagree on `(l, v, m)` or on the code assignment.
pub fn check_consistency(h: &CodeVectorMatrix, codes: &CodeBook, tree: &CodeTree, m_data: usize) -> Result<()> {
    let ms = [("code vectors", h.m()), ("codes", codes.m()), ("tree", tree.m()), ("dataset", m_data)];
    if ms.iter().any(|&(_, m)| m != ms[0].1) {
        return Err(GifError::Inconsistent(format!("identity counts disagree: {ms:?}")));
    }
    if codes.l != tree.l() || codes.v != tree.v() {
        return Err(GifError::Inconsistent(format!(
            "codes are (l={}, v={}) but the tree is (l={}, v={})",
            codes.l,
            codes.v,
            tree.l(),
            tree.v()
        )));
    }
    if &assign_codes(tree) != codes {
        return Err(GifError::Inconsistent("codes file does not match the tree".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub accuracy: f64,
    pub mean_cosine: f64,
    pub fallback_rate: f64,
    pub eval_samples: usize,
    pub eval_is_train: bool,
    pub train_accuracy: f64,
    pub far: f64,
    pub tar: f64,
    pub final_loss: f64,
    pub l: usize,
    pub v: usize,
    pub m: usize,
    pub config_hash: String,
}

/// Fresh backbone and heads for `(l, v)` codes over `d`-dimensional inputs.
pub fn init_model(cfg: &ExperimentConfig, d: usize, l: usize, v: usize) -> Result<GifModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::MODEL_INIT));
    let mut sizes = vec![d];
    sizes.extend(&cfg.model.backbone_hidden);
    sizes.push(d);
    let backbone = Backbone::new(&sizes, &mut rng)?;
    let heads = TokenHeads::new(l, v, d, cfg.model.head_layers, cfg.model.scale_s, &mut rng)?;
    Ok(GifModel { backbone, heads })
}

/// Epochs of shuffled mini-batch SGD; `on_step` sees every step's metrics.
pub fn train_loop(
    cfg: &ExperimentConfig,
    model: &mut GifModel,
    samples: &[Sample],
    h: &CodeVectorMatrix,
    codes: &CodeBook,
    mut on_step: impl FnMut(usize, &StepMetrics) -> Result<()>,
) -> Result<Option<StepMetrics>> {
    let t = &cfg.training;
    let loss_cfg = match &t.lambdas {
        Some(l) => GifLossConfig::new(t.gamma_balance, l.clone())?,
        None => GifLossConfig::new(t.gamma_balance, vec![1.0; codes.l])?,
    };
    let mut opt = Sgd::new(t.lr, t.momentum).with_weight_decay(t.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::BATCH_ORDER));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    let mut last = None;
    for _ in 0..t.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(t.batch) {
            let batch: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
            let m = train_step(&batch, model, h, codes, &loss_cfg, &mut opt, step)?;
            on_step(step, &m)?;
            last = Some(m);
            step += 1;
        }
    }
    Ok(last)
}

/// Trains against the frozen code vectors and codes, writing a checkpoint,
/// the metrics stream and an evaluation summary.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let h = load_input(&cfg.path(OPTIMIZED_FILE), "optimize")?;
    let codes_path = cfg.path(CODES_FILE);
    let tree_path = cfg.path(TREE_FILE);
    if !codes_path.exists() || !tree_path.exists() {
        return Err(GifError::config("codes or tree file is missing; run `tokenize` first"));
    }
    let (codes, _) = io::load_codes(&codes_path)?;
    let (tree, _) = io::load_tree(&tree_path)?;
    let data = load_data(cfg)?;
    check_consistency(&h, &codes, &tree, data.train.m)?;
    let d = data.train.samples[0].features.len();
    if d != h.d() {
        return Err(GifError::DimensionMismatch { expected: h.d(), got: d });
    }

    let mut model = init_model(cfg, d, codes.l, codes.v)?;
    let mut metrics = MetricsWriter::create(&cfg.path(METRICS_FILE))?;
    let last = train_loop(cfg, &mut model, &data.train.samples, &h, &codes, |step, m| {
        metrics.write(&MetricsRecord {
            step,
            loss: m.loss,
            l_c: m.l_c,
            l_ar: m.l_ar,
            token_acc: m.token_acc.clone(),
            config_hash: hash.clone(),
        })
    })?;
    metrics.finish()?;
    io::save_checkpoint(&cfg.path(CHECKPOINT_FILE), &model, &hash)?;

    let eval = evaluate(&data.eval, &model, &h, &tree)?;
    let train_eval = evaluate(&data.train.samples, &model, &h, &tree)?;
    let tar = verification(cfg, &model, &data.eval)?;
    let report = TrainReport {
        accuracy: eval.accuracy,
        mean_cosine: eval.mean_cosine,
        fallback_rate: eval.fallback_rate,
        eval_samples: eval.samples,
        eval_is_train: data.eval_is_train,
        train_accuracy: train_eval.accuracy,
        far: cfg.training.far,
        tar,
        final_loss: last.map_or(f64::NAN, |m| m.loss),
        l: codes.l,
        v: codes.v,
        m: codes.m(),
        config_hash: hash,
    };
    io::save_json(&cfg.path(EVAL_FILE), &report)?;
    info!(
        "accuracy {:.4}, mean cosine {:.4}, TAR@FAR={} {:.4}",
        report.accuracy, report.mean_cosine, report.far, report.tar
    );
    Ok(report)
}

fn verification(cfg: &ExperimentConfig, model: &GifModel, eval: &[Sample]) -> Result<f64> {
    let per = cfg.training.verification_per_identity;
    let mut seen = std::collections::HashMap::new();
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for s in eval {
        let n = seen.entry(s.label).or_insert(0usize);
        if *n < per {
            *n += 1;
            embeddings.push(model.backbone.embed(&s.features));
            labels.push(s.label);
        }
    }
    verification_tar(&embeddings, &labels, cfg.training.far)
}

/// Runs every stage in order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<TrainReport> {
    init_vectors(cfg)?;
    optimize(cfg)?;
    tokenize(cfg)?;
    train(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseArm {
    pub name: String,
    pub counts_head: usize,
    pub counts_tail: usize,
    pub head_fraction: f64,
    pub baseline_final: SeparationReport,
    /// Minimum pairwise distance among the under-sampled identities only.
    pub baseline_tail_min: f64,
    pub push_pull_head: f64,
    pub push_pull_tail: f64,
    pub gif: SeparationReport,
    pub trajectory_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub balanced: CollapseArm,
    pub imbalanced: CollapseArm,
    pub config_hash: String,
}

fn tail_min(w: &CentroidMatrix, tail: std::ops::Range<usize>) -> f64 {
    let mut best = f64::INFINITY;
    for i in tail.clone() {
        for j in i + 1..tail.end {
            best = best.min(1.0 - crate::sphere::dot(w.centroid(i), w.centroid(j)));
        }
    }
    best
}

/// Trains the softmax baseline on a balanced control and on long-tailed data
/// from the same identities, next to the count-independent code vectors.
pub fn collapse(cfg: &ExperimentConfig) -> Result<CollapseReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let c = &cfg.collapse;
    let spec = IdentitySpec { dispersion: c.dispersion, min_separation: 0.0, ..cfg.identity_spec() };
    let sampler = gen_identity_mixture(&spec)?;
    let (m, d) = (spec.m, spec.d);
    let seed = derive_seed(cfg.seed, stream::COLLAPSE);

    // Code vectors never see the data, so both arms get the same matrix.
    let gif_h = || -> Result<CodeVectorMatrix> {
        optimize_code_vectors(&CodeVectorMatrix::random(m, d, derive_seed(seed, 1))?, &cfg.uniformity_config())
    };
    let bcfg = BaselineConfig {
        lr: c.lr,
        momentum: c.momentum,
        weight_decay: c.weight_decay,
        batch: c.batch,
        seed: derive_seed(seed, 2),
    };
    let run_arm = |name: &str, hf: f64, head: usize, tail: usize| -> Result<CollapseArm> {
        let ds = sample_longtail(&sampler, hf, head, tail, derive_seed(seed, 3))?;
        let mut sizes = vec![d];
        sizes.extend(&c.backbone_hidden);
        sizes.push(d);
        let backbone = Backbone::new(&sizes, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 4)))?;
        let w = CentroidMatrix::random(m, d, c.scale_s, derive_seed(seed, 5))?;
        let run = train_baseline(&ds, backbone, w, c.epochs, &bcfg)?;
        let file = format!("collapse_{name}.csv");
        io::save_separation_csv(&cfg.path(&file), &run.trajectory, &hash)?;
        let heads = ds.head_identities();
        let forces = run.forces.last().cloned().unwrap_or_else(|| crate::baseline::PullPushReport::zeros(m));
        let arm = CollapseArm {
            name: name.into(),
            counts_head: head,
            counts_tail: tail,
            head_fraction: hf,
            baseline_final: run.trajectory.last().cloned().expect("trajectory has the initial entry"),
            baseline_tail_min: tail_min(&run.w, heads.min(m - 1)..m),
            push_pull_head: forces.mean_ratio(0..heads),
            push_pull_tail: forces.mean_ratio(heads..m),
            gif: separation_metrics(&gif_h()?)?,
            trajectory_file: file,
        };
        info!(
            "{name}: baseline min distance {:.4}, code vectors min distance {:.4}",
            arm.baseline_final.min_dist, arm.gif.min_dist
        );
        Ok(arm)
    };
    let report = CollapseReport {
        balanced: run_arm("balanced", 1.0, c.head_count, c.head_count)?,
        imbalanced: run_arm("imbalanced", c.head_fraction, c.head_count, c.tail_count)?,
        config_hash: hash,
    };
    io::save_json(&cfg.path(COLLAPSE_FILE), &report)?;
    Ok(report)
}

/// Writes the classifier scaling table to `cost.csv`.
pub fn cost(cfg: &ExperimentConfig) -> Result<Vec<CostProfile>> {
    let c = &cfg.cost;
    let mut methods = vec![MethodSpec::Fc];
    if c.subset_alpha > 0.0 {
        methods.push(MethodSpec::Subset { alpha: c.subset_alpha });
    }
    methods.push(MethodSpec::Gif);
    let rows = scaling_table(&c.m_list, c.d, &methods, &CostExtras { head_layers: c.head_layers, batch: c.batch })?;
    write_csv(io::writer(&cfg.path(COST_FILE))?, &rows, &cfg.hash())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            out_dir: dir.to_path_buf(),
            dataset: DatasetConfig { m: 12, d: 6, samples_per_identity: 4, eval_per_identity: 3, ..Default::default() },
            uniformity: UniformitySection { epochs: 50, ..Default::default() },
            model: ModelSection { backbone_hidden: vec![8], head_layers: 1, scale_s: 16.0 },
            training: TrainingSection { epochs: 3, batch: 16, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn hash_ignores_location() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { out_dir: "elsewhere".into(), threads: 7, ..Default::default() };
        let c = ExperimentConfig { seed: 1, ..Default::default() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn stages_compose_and_reproduce() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let report = run_all(&cfg).unwrap();
        assert_eq!((report.l, report.v, report.m), (2, 4, 12));
        let metrics = std::fs::read(cfg.path(METRICS_FILE)).unwrap();
        train(&cfg).unwrap();
        assert_eq!(std::fs::read(cfg.path(METRICS_FILE)).unwrap(), metrics);
        let codes = std::fs::read_to_string(cfg.path(CODES_FILE)).unwrap();
        assert!(codes.contains(&format!("#config={}", cfg.hash())));
    }

    #[test]
    fn train_refuses_mismatched_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        run_all(&cfg).unwrap();
        let (old_codes, _) = io::load_codes(&cfg.path(CODES_FILE)).unwrap();
        // Retokenize with a different length, then restore the old codes file.
        let other = ExperimentConfig { tokenizer: TokenizerSection { l: Some(1), ..Default::default() }, ..cfg.clone() };
        tokenize(&other).unwrap();
        io::save_codes(&cfg.path(CODES_FILE), &old_codes, "x").unwrap();
        assert!(matches!(train(&cfg), Err(GifError::Inconsistent(_))));
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        assert!(matches!(optimize(&cfg), Err(GifError::InvalidConfig(_))));
        assert!(matches!(train(&cfg), Err(GifError::InvalidConfig(_))));
        let bad = ExperimentConfig { dataset: DatasetConfig { embeddings: Some("/nonexistent.csv".into()), ..Default::default() }, ..cfg };
        assert!(matches!(init_vectors(&bad), Err(GifError::InvalidConfig(_))));
    }
}
