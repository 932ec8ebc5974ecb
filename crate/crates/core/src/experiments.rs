//! Training loop, baselines, score combination, ablation suites and report
//! emission.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Adam, AdamConfig, ParamSet};
use crate::losses::{sigmoid, DistillSet, LabelScope, LossConfig, LossVariant};
use crate::metrics::{
    build_eval_triples, hitrate_curve, pauc_report, EvalTriple, MetricReport, PoolScorer, TargetMode, DEFAULT_K_GRID,
};
use crate::samples::{build_query_samples, Attachments, BuildStats, Origin, QuerySample, SampleConfig};
use crate::sim::{gen_catalog, read_logs, run_cascade_logging, sha256_hex, write_logs, CascadePolicy, Catalog, ItemId, QueryId, RequestLog, SimConfig, UserId};
use crate::teacher::{
    exposure_records, train_learned_teacher, LearnedTeacher, OracleTeacher, Teacher, TeacherConfig, TeacherScores, TeacherTraining,
};
use crate::tensor::dot;
use crate::two_tower::{forward_backward, FeatureStore, ModelConfig, Objective, PointwiseTask, PrerankParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_users: usize,
    pub n_queries: usize,
    pub n_items: usize,
    pub n_requests: usize,
    /// Leading share of requests (by index) used for training.
    pub train_fraction: f64,
    /// Extra logged requests from an earlier window, seen only by the learned teacher.
    pub teacher_requests: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_users: 1000, n_queries: 200, n_items: 2000, n_requests: 5000, train_fraction: 0.8, teacher_requests: 20000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    Oracle,
    Learned,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    OneModel,
    CtrXCvr,
    CtrXCvrXEr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Fixed reduction order; always honored since training is sequential.
    pub determinism: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 64, optimizer: AdamConfig::default(), determinism: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Defaults to the pre-ranking output size.
    pub k_eval: Option<usize>,
    pub k_grid: Vec<usize>,
    pub inject_targets: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k_eval: None, k_grid: DEFAULT_K_GRID.to_vec(), inject_targets: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub suite: Option<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { suite: None, seeds: vec![1, 2, 3, 4, 5] }
    }
}

fn default_origins() -> Vec<Origin> {
    vec![Origin::Ex, Origin::Rc, Origin::Prc]
}

fn default_teacher() -> TeacherMode {
    TeacherMode::Learned
}

fn default_combination() -> Combination {
    Combination::OneModel
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub policy: CascadePolicy,
    #[serde(default)]
    pub samples: SampleConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_origins")]
    pub origins: Vec<Origin>,
    #[serde(default = "default_teacher")]
    pub teacher: TeacherMode,
    #[serde(default)]
    pub teacher_config: TeacherConfig,
    #[serde(default = "default_combination")]
    pub combination: Combination,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            data: DataConfig::default(),
            sim: SimConfig::default(),
            policy: CascadePolicy::default(),
            samples: SampleConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            origins: default_origins(),
            teacher: default_teacher(),
            teacher_config: TeacherConfig::default(),
            combination: default_combination(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_users == 0 || d.n_queries == 0 || d.n_items == 0 || d.n_requests == 0 {
            return Err(Error::config("data counts must be >= 1"));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        self.policy.validate(d.n_items)?;
        self.model.validate()?;
        if self.origins.is_empty() || !self.origins.contains(&Origin::Ex) {
            return Err(Error::config("origins must include ex"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.loss.distill != DistillSet::None && self.teacher == TeacherMode::None {
            return Err(Error::config("distillation needs a teacher"));
        }
        if self.eval.k_grid.is_empty() || !self.eval.k_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("eval k_grid must be nonempty and strictly increasing"));
        }
        self.loss.weights.validate(false)?;
        Ok(())
    }

    pub fn k_eval(&self) -> usize {
        self.eval.k_eval.unwrap_or(self.policy.prerank_size)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Derives an independent sub-seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_CATALOG: u64 = 1;
const TAG_LOGS: u64 = 2;
const TAG_SAMPLES: u64 = 3;
const TAG_TEACHER: u64 = 4;
const TAG_MODEL: u64 = 5;
const TAG_SHUFFLE: u64 = 6;
const TAG_TEACHER_LOGS: u64 = 7;

/// Teacher chosen by configuration.
pub enum TeacherHandle {
    Oracle,
    Learned(Box<LearnedTeacher>),
    None,
}

impl TeacherHandle {
    pub fn as_teacher(&self) -> Option<&dyn Teacher> {
        match self {
            TeacherHandle::Oracle => Some(&OracleTeacher),
            TeacherHandle::Learned(t) => Some(t.as_ref()),
            TeacherHandle::None => None,
        }
    }
}

/// Everything derived from the data half of a config.
pub struct Dataset {
    pub catalog: Catalog,
    pub features: FeatureStore,
    pub logs: Vec<RequestLog>,
    pub n_train: usize,
    pub attachments: Attachments,
    /// All-scenario targets, candidate pools with injection per config.
    pub asph_triples: Vec<EvalTriple>,
    /// In-search targets, candidate pools without injection.
    pub isph_triples: Vec<EvalTriple>,
}

impl Dataset {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let catalog = gen_catalog(derive_seed(cfg.seed, TAG_CATALOG), d.n_users, d.n_queries, d.n_items, &cfg.sim)?;
        let logs = run_cascade_logging(&catalog, &cfg.policy, d.n_requests, derive_seed(cfg.seed, TAG_LOGS))?;
        Self::from_parts(cfg, catalog, logs)
    }

    /// Reuses `catalog.json` and `logs.jsonl` from `dir` when both exist
    /// (they must match the config), otherwise generates and writes them.
    pub fn load_or_generate(cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let (cat_path, log_path) = (dir.join(CATALOG_FILE), dir.join(LOGS_FILE));
        if cat_path.exists() && log_path.exists() {
            let catalog = Catalog::from_json(&fs::read_to_string(&cat_path)?)?;
            let d = &cfg.data;
            let sizes = (catalog.users.len(), catalog.queries.len(), catalog.items.len());
            if catalog.seed != derive_seed(cfg.seed, TAG_CATALOG) || catalog.config != cfg.sim || sizes != (d.n_users, d.n_queries, d.n_items) {
                return Err(Error::config(format!("{} was generated from a different config", cat_path.display())));
            }
            let logs = read_logs(BufReader::new(fs::File::open(&log_path)?))?;
            if logs.len() != d.n_requests {
                return Err(Error::config(format!("{} holds {} requests, config asks for {}", log_path.display(), logs.len(), d.n_requests)));
            }
            return Self::from_parts(cfg, catalog, logs);
        }
        let ds = Self::generate(cfg)?;
        ds.write(dir)?;
        Ok(ds)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CATALOG_FILE), self.catalog.to_json()?)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(LOGS_FILE))?);
        write_logs(&self.logs, &mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn from_parts(cfg: &ExperimentConfig, catalog: Catalog, logs: Vec<RequestLog>) -> Result<Self> {
        for l in &logs {
            l.check_invariants(catalog.items.len())?;
        }
        let n_train = ((logs.len() as f64) * cfg.data.train_fraction).round() as usize;
        let attachments = Attachments::from_logs(&catalog, &logs, cfg.samples.borderline);
        let eval_logs = &logs[n_train..];
        let (asph_triples, _) = build_eval_triples(eval_logs, &attachments.purchases, TargetMode::AllScenario, cfg.eval.inject_targets);
        let (isph_triples, _) = build_eval_triples(eval_logs, &attachments.purchases, TargetMode::InScenario, false);
        if asph_triples.is_empty() {
            return Err(Error::UndefinedMetric("evaluation split has no purchase targets".into()));
        }
        let features = FeatureStore::from_catalog(&catalog);
        Ok(Dataset { catalog, features, logs, n_train, attachments, asph_triples, isph_triples })
    }

    pub fn train_logs(&self) -> &[RequestLog] {
        &self.logs[..self.n_train]
    }

    pub fn eval_logs(&self) -> &[RequestLog] {
        &self.logs[self.n_train..]
    }

    /// Learned teacher on train-split exposures plus the teacher-only window.
    pub fn train_teacher(&self, cfg: &ExperimentConfig) -> Result<TeacherTraining> {
        let tcfg = TeacherConfig { seed: derive_seed(cfg.seed, TAG_TEACHER), ..cfg.teacher_config.clone() };
        let mut records = exposure_records(self.train_logs());
        if cfg.data.teacher_requests > 0 {
            let earlier = run_cascade_logging(&self.catalog, &cfg.policy, cfg.data.teacher_requests, derive_seed(cfg.seed, TAG_TEACHER_LOGS))?;
            records.extend(exposure_records(&earlier));
        }
        train_learned_teacher(&self.catalog, &records, &tcfg)
    }

    pub fn teacher(&self, cfg: &ExperimentConfig) -> Result<TeacherHandle> {
        Ok(match cfg.teacher {
            TeacherMode::Oracle => TeacherHandle::Oracle,
            TeacherMode::None => TeacherHandle::None,
            TeacherMode::Learned => TeacherHandle::Learned(Box::new(self.train_teacher(cfg)?.teacher)),
        })
    }

    /// Entire-space samples from the training split (all origins kept).
    pub fn samples(&self, cfg: &ExperimentConfig, teacher: &TeacherHandle) -> Result<(Vec<QuerySample>, BuildStats)> {
        let scfg = SampleConfig { seed: derive_seed(cfg.seed, TAG_SAMPLES), ..cfg.samples.clone() };
        build_query_samples(&self.catalog, self.train_logs(), &self.attachments, &scfg, teacher.as_teacher())
    }
}

/// Minibatch Adam over the mean per-sample objective. On a non-finite loss,
/// gradient or parameter, returns [`Error::Diverged`] with the parameters
/// from before the failing step.
pub fn train_on_samples(
    cfg: &ExperimentConfig,
    features: &FeatureStore,
    samples: &[QuerySample],
    objective: &Objective,
    init_tag: u64,
) -> Result<(PrerankParams, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Untrainable("no training samples".into()));
    }
    let mut params = PrerankParams::init(&cfg.model, features.vocab, derive_seed(cfg.seed, TAG_MODEL ^ init_tag))?;
    let mut adam = Adam::new(cfg.train.optimizer.clone(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_SHUFFLE ^ init_tag));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut step = 0usize;
    for _ in 0..cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<QuerySample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let result = match forward_backward(&params, features, &batch, objective) {
                Ok(r) => r,
                Err(Error::Numerical(message)) => {
                    return Err(Error::Diverged { step, message, last_good: Box::new(params) });
                }
                Err(e) => return Err(e),
            };
            let before = params.clone();
            adam.step(&mut params, &result.grads);
            if !params.is_finite() {
                return Err(Error::Diverged { step, message: "non-finite parameter after update".into(), last_good: Box::new(before) });
            }
            total += result.loss;
            batches += 1;
            step += 1;
        }
        history.push(total / batches.max(1) as f64);
    }
    Ok((params, history))
}

pub fn restrict(samples: &[QuerySample], origins: &[Origin]) -> Vec<QuerySample> {
    samples.iter().map(|s| s.restricted(origins)).collect()
}

/// Scores pools by cosine logits of a two-tower model; item embeddings are
/// computed once.
pub struct TwoTowerScorer<'a> {
    pub name: String,
    params: &'a PrerankParams,
    features: &'a FeatureStore,
    items: Vec<Vec<f64>>,
}

impl<'a> TwoTowerScorer<'a> {
    pub fn new(name: &str, params: &'a PrerankParams, features: &'a FeatureStore) -> Result<Self> {
        Ok(TwoTowerScorer { name: name.into(), params, features, items: params.embed_all_items(features)? })
    }

    pub fn logits(&self, u: UserId, q: QueryId, pool: &[ItemId]) -> Result<Vec<f64>> {
        let h = self.params.embed_user_query(self.features, u, q)?;
        let tau = self.params.config.temperature;
        pool.iter()
            .map(|&p| self.items.get(p as usize).map(|e| dot(&h, e) / tau).ok_or(Error::Lookup { kind: "item", id: p as u64 }))
            .collect()
    }
}

impl PoolScorer for TwoTowerScorer<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn score_pool(&self, t: &EvalTriple) -> Result<Vec<f64>> {
        self.logits(t.user_id, t.query_id, &t.pool)
    }
}

/// Ranks by the teacher's pCTR·pCVR.
pub struct TeacherScorer<'a> {
    pub teacher: &'a dyn Teacher,
    pub catalog: &'a Catalog,
    pub name: String,
}

impl PoolScorer for TeacherScorer<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn score_pool(&self, t: &EvalTriple) -> Result<Vec<f64>> {
        t.pool.iter().map(|&p| Ok(self.teacher.scores(self.catalog, t.user_id, t.query_id, p)?.p_ctcvr())).collect()
    }
}

/// Final efficiency score for a combination strategy.
pub fn combine_scores(strategy: Combination, p_ctr: Option<f64>, p_cvr: Option<f64>, p_er: Option<f64>, z: Option<f64>) -> Result<f64> {
    let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::MissingInput(format!("{name} required by {strategy:?}")));
    Ok(match strategy {
        Combination::OneModel => need(z, "logit")?,
        Combination::CtrXCvr => need(p_ctr, "pCTR")? * need(p_cvr, "pCVR")?,
        Combination::CtrXCvrXEr => need(p_ctr, "pCTR")? * need(p_cvr, "pCVR")? * need(p_er, "pER")?,
    })
}

/// Separately trained pointwise models.
pub struct BaselineModels {
    pub ctr: PrerankParams,
    pub cvr: PrerankParams,
    pub er: Option<PrerankParams>,
    pub loss_histories: BTreeMap<String, Vec<f64>>,
}

pub fn train_baseline_on(cfg: &ExperimentConfig, ds: &Dataset, samples: &[QuerySample], with_er: bool) -> Result<BaselineModels> {
    let exposures = restrict(samples, &[Origin::Ex]);
    let mut histories = BTreeMap::new();
    let (ctr, h) = train_on_samples(cfg, &ds.features, &exposures, &Objective::Pointwise(PointwiseTask::Ctr), 0x100)?;
    histories.insert("ctr".into(), h);
    let (cvr, h) = train_on_samples(cfg, &ds.features, &exposures, &Objective::Pointwise(PointwiseTask::Cvr), 0x200)?;
    histories.insert("cvr".into(), h);
    let er = if with_er {
        let (er, h) = train_on_samples(cfg, &ds.features, samples, &Objective::Pointwise(PointwiseTask::Er), 0x300)?;
        histories.insert("er".into(), h);
        Some(er)
    } else {
        None
    };
    Ok(BaselineModels { ctr, cvr, er, loss_histories: histories })
}

pub fn train_baseline(cfg: &ExperimentConfig) -> Result<(Dataset, BaselineModels)> {
    let ds = Dataset::generate(cfg)?;
    let (samples, _) = ds.samples(cfg, &TeacherHandle::None)?;
    let models = train_baseline_on(cfg, &ds, &samples, cfg.combination == Combination::CtrXCvrXEr)?;
    Ok((ds, models))
}

/// Multi-model scorer: products of sigmoid outputs.
pub struct CombinedScorer<'a> {
    pub strategy: Combination,
    pub ctr: TwoTowerScorer<'a>,
    pub cvr: TwoTowerScorer<'a>,
    pub er: Option<TwoTowerScorer<'a>>,
}

impl<'a> CombinedScorer<'a> {
    pub fn new(strategy: Combination, models: &'a BaselineModels, features: &'a FeatureStore) -> Result<Self> {
        Ok(CombinedScorer {
            strategy,
            ctr: TwoTowerScorer::new("ctr", &models.ctr, features)?,
            cvr: TwoTowerScorer::new("cvr", &models.cvr, features)?,
            er: models.er.as_ref().map(|p| TwoTowerScorer::new("er", p, features)).transpose()?,
        })
    }
}

impl PoolScorer for CombinedScorer<'_> {
    fn name(&self) -> String {
        format!("{:?}", self.strategy).to_lowercase()
    }
    fn score_pool(&self, t: &EvalTriple) -> Result<Vec<f64>> {
        let c = self.ctr.score_pool(t)?;
        let v = self.cvr.score_pool(t)?;
        let e = self.er.as_ref().map(|s| s.score_pool(t)).transpose()?;
        (0..t.pool.len())
            .map(|i| combine_scores(self.strategy, Some(sigmoid(c[i])), Some(sigmoid(v[i])), e.as_ref().map(|e| sigmoid(e[i])), None))
            .collect()
    }
}

/// ASPH curve, ISPH curve and PAUC@10 of one scorer on the evaluation split.
pub fn evaluate_scorer(ds: &Dataset, cfg: &ExperimentConfig, scorer: &dyn PoolScorer) -> Result<Vec<MetricReport>> {
    let digest = cfg.digest();
    let mut grid: Vec<usize> = cfg.eval.k_grid.clone();
    let k_eval = cfg.k_eval();
    if !grid.contains(&k_eval) {
        grid.push(k_eval);
        grid.sort_unstable();
    }
    let mut reports = vec![
        hitrate_curve(scorer, &ds.asph_triples, &grid, "asph")?,
        hitrate_curve(scorer, &ds.isph_triples, &grid, "isph")?,
        pauc_report(scorer, ds.eval_logs())?,
    ];
    for r in &mut reports {
        r.config_digest = digest.clone();
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub seed: u64,
    pub config_digest: String,
    pub loss_history: Vec<f64>,
    pub reports: Vec<MetricReport>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn metric(&self, metric: &str, k: usize) -> Option<f64> {
        self.reports.iter().find(|r| r.metric == metric).and_then(|r| r.value_at(k))
    }
}

/// One row of an ablation: which origins to train on and which loss to use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub origins: Vec<Origin>,
    pub loss: LossConfig,
    pub combination: Combination,
}

impl Variant {
    pub fn from_config(name: &str, cfg: &ExperimentConfig) -> Self {
        Variant { name: name.into(), origins: cfg.origins.clone(), loss: cfg.loss.clone(), combination: cfg.combination }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig { origins: self.origins.clone(), loss: self.loss.clone(), combination: self.combination, ..base.clone() }
    }
}

/// Trains and evaluates one variant on a prepared dataset.
pub fn run_variant(
    base: &ExperimentConfig,
    ds: &Dataset,
    samples: &[QuerySample],
    variant: &Variant,
) -> Result<(RunRecord, Option<PrerankParams>)> {
    let cfg = variant.apply(base);
    let started = Instant::now();
    let (reports, history, params) = match variant.combination {
        Combination::OneModel => {
            let train = restrict(samples, &variant.origins);
            let (params, history) = train_on_samples(&cfg, &ds.features, &train, &Objective::Listwise(variant.loss.clone()), 0)?;
            let scorer = TwoTowerScorer::new(&variant.name, &params, &ds.features)?;
            (evaluate_scorer(ds, &cfg, &scorer)?, history, Some(params))
        }
        strategy => {
            let models = train_baseline_on(&cfg, ds, samples, strategy == Combination::CtrXCvrXEr)?;
            let mut scorer = CombinedScorer::new(strategy, &models, &ds.features)?;
            scorer.ctr.name = variant.name.clone();
            let history = models.loss_histories.values().flatten().copied().collect();
            (evaluate_scorer(ds, &cfg, &scorer)?.into_iter().map(|mut r| {
                r.model = variant.name.clone();
                r
            }).collect(), history, None)
        }
    };
    let record = RunRecord {
        name: variant.name.clone(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        loss_history: history,
        reports,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((record, params))
}

/// Full single-model pipeline for one config.
pub fn train(cfg: &ExperimentConfig) -> Result<(PrerankParams, RunRecord)> {
    let ds = Dataset::generate(cfg)?;
    let teacher = ds.teacher(cfg)?;
    let (samples, _) = ds.samples(cfg, &teacher)?;
    let variant = Variant { combination: Combination::OneModel, ..Variant::from_config("model", cfg) };
    let (record, params) = run_variant(cfg, &ds, &samples, &variant)?;
    Ok((params.expect("one-model run returns parameters"), record))
}

pub const SUITES: [&str; 5] = ["samples", "labels", "loss", "distill", "combination"];

/// Variant rows of a suite; the first row is the reference.
pub fn suite_variants(suite: &str, base: &ExperimentConfig) -> Result<Vec<Variant>> {
    let full = Variant {
        name: "full".into(),
        origins: default_origins(),
        loss: base.loss.clone(),
        combination: Combination::OneModel,
    };
    let with = |name: &str, f: &dyn Fn(&mut Variant)| {
        let mut v = Variant { name: name.into(), ..full.clone() };
        f(&mut v);
        v
    };
    Ok(match suite {
        "samples" => vec![
            full.clone(),
            with("w/o PRC", &|v| v.origins = vec![Origin::Ex, Origin::Rc]),
            with("w/o RC", &|v| v.origins = vec![Origin::Ex, Origin::Prc]),
            with("w/o RC&PRC", &|v| v.origins = vec![Origin::Ex]),
        ],
        "labels" => vec![
            with("ASL", &|_| {}),
            with("ASCL->ISCL", &|v| v.loss.click_label = LabelScope::InScenario),
            with("ASPL->ISPL", &|v| v.loss.purchase_label = LabelScope::InScenario),
            with("ISL", &|v| {
                v.loss.click_label = LabelScope::InScenario;
                v.loss.purchase_label = LabelScope::InScenario;
            }),
        ],
        "loss" => vec![
            with("multi-positive", &|v| v.loss.variant = LossVariant::MultiPositive),
            with("vanilla softmax", &|v| v.loss.variant = LossVariant::Vanilla),
        ],
        "distill" => vec![
            with("Ex", &|v| v.loss.distill = DistillSet::Ex),
            with("Ex+RC", &|v| v.loss.distill = DistillSet::ExRc),
            with("Ex+RC+PRC", &|v| v.loss.distill = DistillSet::ExRcPrc),
            with("no distillation", &|v| v.loss.distill = DistillSet::None),
        ],
        "combination" => vec![
            with("one model", &|_| {}),
            with("ctr*cvr", &|v| v.combination = Combination::CtrXCvr),
            with("ctr*cvr*er", &|v| v.combination = Combination::CtrXCvrXEr),
        ],
        other => return Err(Error::config(format!("unknown ablation suite {other:?} (expected one of {SUITES:?})"))),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Two-sided exact binomial p-value over non-tied pairs.
    pub p_value: f64,
}

/// Sign test of `a` against `b`, pairwise by seed.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    let n = wins + losses;
    let k = wins.min(losses);
    let mut tail = 0.0;
    let mut c = 1.0;
    for i in 0..=k {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        tail += c;
    }
    let p_value = if n == 0 { 1.0 } else { (2.0 * tail / 2f64.powi(n as i32)).min(1.0) };
    SignTest { wins, losses, ties, p_value }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub config_digest: String,
    pub asph: Vec<f64>,
    pub pauc: Vec<f64>,
    pub mean_asph: f64,
    pub mean_pauc: f64,
    /// This row against the reference row, per seed.
    pub asph_sign: SignTest,
    pub pauc_sign: SignTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: String,
    pub k_eval: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Runs every variant of `suite` on each seed and tabulates ASPH@K_eval and PAUC@10.
pub fn run_ablation(suite: &str, base: &ExperimentConfig) -> Result<(AblationTable, Vec<RunRecord>)> {
    let variants = suite_variants(suite, base)?;
    if base.ablation.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let k = base.k_eval();
    let mut records = Vec::new();
    let mut per_variant: Vec<(Vec<f64>, Vec<f64>, String)> = vec![(Vec::new(), Vec::new(), String::new()); variants.len()];
    for &seed in &base.ablation.seeds {
        let cfg = ExperimentConfig { seed, ..base.clone() };
        let ds = Dataset::generate(&cfg)?;
        let teacher = ds.teacher(&cfg)?;
        let (samples, _) = ds.samples(&cfg, &teacher)?;
        for (i, v) in variants.iter().enumerate() {
            let (rec, _) = run_variant(&cfg, &ds, &samples, v)?;
            per_variant[i].0.push(rec.metric("asph", k).expect("asph at k_eval"));
            per_variant[i].1.push(rec.metric("pauc", 10).expect("pauc"));
            per_variant[i].2 = v.apply(&cfg).digest();
            records.push(rec);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let rows = variants
        .iter()
        .zip(&per_variant)
        .map(|(v, (asph, pauc, digest))| AblationRow {
            variant: v.name.clone(),
            config_digest: digest.clone(),
            mean_asph: mean(asph),
            mean_pauc: mean(pauc),
            asph_sign: sign_test(asph, &per_variant[0].0),
            pauc_sign: sign_test(pauc, &per_variant[0].1),
            asph: asph.clone(),
            pauc: pauc.clone(),
        })
        .collect();
    Ok((AblationTable { suite: suite.into(), k_eval: k, seeds: base.ablation.seeds.clone(), rows }, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub files: Vec<String>,
    pub runs: Vec<ManifestRun>,
    pub ablations: Vec<AblationTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub name: String,
    pub seed: u64,
    pub config_digest: String,
    pub loss_history: Vec<f64>,
    pub wall_clock_secs: f64,
}

pub const CATALOG_FILE: &str = "catalog.json";
pub const LOGS_FILE: &str = "logs.jsonl";
pub const REPORT_TSV: &str = "report.tsv";
pub const CURVES_FILE: &str = "curves.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ABLATION_TSV: &str = "ablation.tsv";

fn report_rows(records: &[RunRecord]) -> String {
    let mut out = String::from("model\tseed\tmetric\tk\tvalue\tcount\tdataset_digest\tconfig_digest\n");
    for rec in records {
        for r in &rec.reports {
            for (k, v) in r.k_grid.iter().zip(&r.values) {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    r.model, rec.seed, r.metric, k, v, r.count, r.dataset_digest, rec.config_digest
                ));
            }
        }
    }
    out
}

fn ablation_rows(tables: &[AblationTable]) -> String {
    let mut out = String::from("suite\tvariant\tseed\tasph_at_k_eval\tk_eval\tpauc_at_10\tconfig_digest\n");
    for t in tables {
        for row in &t.rows {
            for (i, seed) in t.seeds.iter().enumerate() {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    t.suite, row.variant, seed, row.asph[i], t.k_eval, row.pauc[i], row.config_digest
                ));
            }
        }
    }
    out
}

/// Writes `report.tsv`, `curves.jsonl`, `manifest.json` (and `ablation.tsv`
/// when tables are given). Content depends only on the inputs.
pub fn emit_report(dir: &Path, records: &[RunRecord], tables: &[AblationTable]) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut files = vec![REPORT_TSV.to_string(), CURVES_FILE.to_string()];
    fs::write(dir.join(REPORT_TSV), report_rows(records))?;
    let mut curves = Vec::new();
    let stamped: Vec<MetricReport> = records
        .iter()
        .flat_map(|rec| rec.reports.iter().map(|r| MetricReport { config_digest: rec.config_digest.clone(), ..r.clone() }))
        .collect();
    crate::metrics::write_reports(&stamped, &mut curves)?;
    fs::write(dir.join(CURVES_FILE), curves)?;
    if !tables.is_empty() {
        fs::write(dir.join(ABLATION_TSV), ablation_rows(tables))?;
        files.push(ABLATION_TSV.into());
    }
    files.push(MANIFEST_FILE.into());
    let manifest = Manifest {
        format_version: 1,
        files: files.clone(),
        runs: records
            .iter()
            .map(|r| ManifestRun {
                name: r.name.clone(),
                seed: r.seed,
                config_digest: r.config_digest.clone(),
                loss_history: r.loss_history.clone(),
                wall_clock_secs: r.wall_clock_secs,
            })
            .collect(),
        ablations: tables.to_vec(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(files)
}

/// Scores for the teacher on one triple (exposed for the CLI).
pub fn teacher_scores(teacher: &dyn Teacher, catalog: &Catalog, t: &EvalTriple) -> Result<Vec<TeacherScores>> {
    t.pool.iter().map(|&p| teacher.scores(catalog, t.user_id, t.query_id, p)).collect()
}
