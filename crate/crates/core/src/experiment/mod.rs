//! Declarative experiments: JSON configs, the run orchestrator, sweeps and
//! report emission.

mod report;
mod sweep;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{save_adapted, AdapterConfig, Attachment, FusionKind, Method, MtEncoder};
use crate::data::{
    english_splits, generate_task_corpus, make_parallel_splits, CipherLanguage, LanguageSpec, ParallelPair,
    SplitSizes, Splits, TaskInstance, TaskSpec, ENGLISH,
};
use crate::error::{Error, Result};
use crate::model::{load_model, save_model, BaseModel, ModelConfig, TaskKind};
use crate::train::{
    ablate_zero_source, count_flops, evaluate, evaluate_english, mt_training_pairs, pretrain_mt_standin,
    probe_activations, train_base_english, train_translate_train, AblationResult, EvalResult, FlopCounter,
    MtTrainConfig, Setting, SourceMode, TrainConfig, TrainHistory,
};

pub use report::{aggregate, emit_report, read_rows, Report, ReportRow, SummaryRow, AVERAGE_LANGUAGE};
pub use sweep::{expand_sweep, sweep, SweepKind, SweepOutcome, QUALITIES, RANKS};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Optimizer settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub lr: f64,
    pub head_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Schedule {
    fn from_train(t: TrainConfig) -> Self {
        Schedule {
            lr: t.lr,
            head_lr: t.head_lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
        }
    }

    pub fn base_stage() -> Self {
        Self::from_train(TrainConfig::base_stage())
    }

    pub fn train_config(&self, method: Method, adapter: &AdapterConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            head_lr: self.head_lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            method,
            adapter: adapter.clone(),
            ..TrainConfig::default()
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::from_train(TrainConfig::default())
    }
}

/// Optimizer settings of the MT stand-in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for MtSchedule {
    fn default() -> Self {
        let d = MtTrainConfig::default();
        MtSchedule {
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
        }
    }
}

fn default_name() -> String {
    "default".into()
}

fn default_quality() -> f64 {
    0.9
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn yes() -> bool {
    true
}

/// The three cipher languages of the default suite.
pub fn default_languages() -> Vec<LanguageSpec> {
    [("swap00", 0.0, 101), ("swap10", 0.1, 102), ("swap30", 0.3, 103)]
        .into_iter()
        .map(|(name, swap_rate, seed)| LanguageSpec {
            name: name.into(),
            swap_rate,
            seed,
        })
        .collect()
}

/// The default-suite language with swap rate 0.1.
pub fn default_language() -> LanguageSpec {
    default_languages().swap_remove(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Label of the experiment; sweeps name each cell `axis=value`.
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub model: ModelConfig,
    pub task: TaskKind,
    #[serde(default = "default_languages")]
    pub languages: Vec<LanguageSpec>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub adapter: AdapterConfig,
    /// Translation quality for both the training and the evaluation side.
    #[serde(default = "default_quality")]
    pub mt_quality: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Split sizes; `None` uses the task defaults.
    #[serde(default)]
    pub sizes: Option<SplitSizes>,
    #[serde(default = "Schedule::base_stage")]
    pub base_schedule: Schedule,
    #[serde(default)]
    pub xlt_schedule: Schedule,
    #[serde(default)]
    pub mt_schedule: MtSchedule,
    #[serde(default)]
    pub low_resource_k: Option<usize>,
    /// Also record English, zero-shot and translate-test rows.
    #[serde(default = "yes")]
    pub baselines: bool,
    /// Write activation probes for fusion methods.
    #[serde(default = "yes")]
    pub probes: bool,
    /// Record the zero-source ablation for FLARE with add or add_relu.
    #[serde(default = "yes")]
    pub ablations: bool,
}

const CONFIG_KEYS: [&str; 18] = [
    "schema_version",
    "name",
    "model",
    "task",
    "languages",
    "methods",
    "adapter",
    "mt_quality",
    "seeds",
    "output_dir",
    "sizes",
    "base_schedule",
    "xlt_schedule",
    "mt_schedule",
    "low_resource_k",
    "baselines",
    "probes",
    "ablations",
];

impl ExperimentConfig {
    /// Default-suite config for `task` with the given methods.
    pub fn new(task: TaskKind, methods: Vec<Method>, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            name: default_name(),
            model: ModelConfig::default(),
            task,
            languages: default_languages(),
            methods,
            adapter: AdapterConfig::default(),
            mt_quality: default_quality(),
            seeds: default_seeds(),
            output_dir: output_dir.into(),
            sizes: None,
            base_schedule: Schedule::base_stage(),
            xlt_schedule: Schedule::default(),
            mt_schedule: MtSchedule::default(),
            low_resource_k: None,
            baselines: true,
            probes: true,
            ablations: true,
        }
    }

    /// Parses and validates a config. Every unknown top-level key is named
    /// in the error.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let unknown: Vec<&str> = obj
            .keys()
            .map(String::as_str)
            .filter(|k| !CONFIG_KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn spec(&self) -> TaskSpec {
        TaskSpec::for_task(self.task)
    }

    pub fn sizes(&self) -> SplitSizes {
        self.sizes.unwrap_or(match self.task {
            TaskKind::Classification => SplitSizes::classification(),
            TaskKind::Span => SplitSizes::span(),
        })
    }

    pub fn metric_name(&self) -> &'static str {
        match self.task {
            TaskKind::Classification => "accuracy",
            TaskKind::Span => "exact_match",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported, expected {CONFIG_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.model.validate()?;
        let spec = self.spec();
        if self.model.vocab_size != spec.vocab_size || self.model.num_classes != spec.num_classes {
            return Err(Error::Config(format!(
                "model vocab_size/num_classes must be {}/{} for the {:?} task",
                spec.vocab_size, spec.num_classes, self.task
            )));
        }
        let longest = if self.methods.contains(&Method::InputFusion) { 2 * spec.seq_len + 1 } else { spec.seq_len };
        if longest > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "max_seq_len {} below the longest input {longest}",
                self.model.max_seq_len
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.languages.is_empty() {
            return Err(Error::Config("languages must not be empty".into()));
        }
        let names: BTreeSet<&str> = self.languages.iter().map(|l| l.name.as_str()).collect();
        if names.len() != self.languages.len() {
            return Err(Error::Config("language names must be unique".into()));
        }
        for lang in &self.languages {
            CipherLanguage::from_spec(lang, spec.vocab_size)?;
        }
        if self.name.is_empty() || self.name.contains(['/', '\\', ',']) {
            return Err(Error::Config(format!("invalid experiment name {:?}", self.name)));
        }
        if let Some(k) = self.low_resource_k {
            if k > self.sizes().train {
                return Err(Error::Config(format!("low_resource_k {k} exceeds the training split")));
            }
        }
        if self.mt_schedule.epochs == 0 || self.mt_schedule.batch_size == 0 || !(self.mt_schedule.lr > 0.0) {
            return Err(Error::Config("mt_schedule needs positive epochs, batch_size and lr".into()));
        }
        self.base_train_config(0).validate(&self.model)?;
        for &method in &self.methods {
            self.xlt_train_config(method, 0).validate(&self.model)?;
        }
        Ok(())
    }

    /// Short digest of everything except the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex_prefix(&Sha256::digest(&bytes), 8)
    }

    /// Digest of the settings that determine the English base model.
    pub fn base_hash(&self) -> String {
        let key = serde_json::json!({
            "model": self.model,
            "task": self.task,
            "sizes": self.sizes(),
            "schedule": self.base_schedule,
        });
        hex_prefix(&Sha256::digest(key.to_string().as_bytes()), 8)
    }

    pub fn run_root(&self) -> PathBuf {
        self.output_dir.join("runs").join(self.config_hash())
    }

    pub fn base_train_config(&self, seed: u64) -> TrainConfig {
        self.base_schedule.train_config(Method::Lora, &AdapterConfig::default(), seed)
    }

    pub fn xlt_train_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            mt_quality: self.mt_quality,
            low_resource_k: self.low_resource_k,
            ..self.xlt_schedule.train_config(method, &self.adapter, seed)
        }
    }

    pub fn mt_train_config(&self, seed: u64) -> MtTrainConfig {
        MtTrainConfig {
            mt_dim: self.adapter.mt_dim,
            epochs: self.mt_schedule.epochs,
            lr: self.mt_schedule.lr,
            batch_size: self.mt_schedule.batch_size,
            seed,
        }
    }
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

/// Deterministic metrics of one (method or setting, language, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub name: String,
    pub config_hash: String,
    pub task: TaskKind,
    /// A method name, or one of `english`, `zero_shot`, `translate_test`.
    pub method: String,
    pub language: String,
    pub seed: u64,
    pub mt_quality: f64,
    pub rank: usize,
    pub fusion: FusionKind,
    pub metric: String,
    pub value: f64,
    pub flops_per_step: Option<u64>,
    pub flops: Option<FlopCounter>,
    pub trainable_params: Option<usize>,
    pub history: Option<TrainHistory>,
    pub zero_source: Option<AblationResult>,
}

/// Wall-clock measurements, kept out of the metrics files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub seconds_per_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub config_hash: String,
    pub complete: bool,
    pub error: Option<String>,
    /// Paths relative to the run root, sorted.
    pub artifacts: Vec<String>,
}

pub struct RunSummary {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub metrics: Vec<RunMetrics>,
}

impl RunSummary {
    pub fn find(&self, method: &str, language: &str, seed: u64) -> Option<&RunMetrics> {
        self.metrics
            .iter()
            .find(|m| m.method == method && m.language == language && m.seed == seed)
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Corpus and English splits of one seed. The corpus has slack for span
/// pairs rejected by re-projection.
pub fn english_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<TaskInstance>, Splits<TaskInstance>)> {
    let sizes = cfg.sizes();
    let corpus = generate_task_corpus(&cfg.spec(), sizes.total() + sizes.total() / 2, seed)?;
    let english = english_splits(&corpus, sizes, seed)?;
    Ok((corpus, english))
}

pub fn parallel_data(
    cfg: &ExperimentConfig,
    corpus: &[TaskInstance],
    lang: &LanguageSpec,
    seed: u64,
) -> Result<(CipherLanguage, Splits<ParallelPair>)> {
    let cipher = CipherLanguage::from_spec(lang, cfg.spec().vocab_size)?;
    let splits = make_parallel_splits(corpus, &cipher, cfg.mt_quality, cfg.mt_quality, cfg.sizes(), seed)?;
    Ok((cipher, splits))
}

/// MT stand-in trained on exact translations of the English training split.
pub fn mt_standin(
    cfg: &ExperimentConfig,
    cipher: &CipherLanguage,
    english: &Splits<TaskInstance>,
    seed: u64,
) -> Result<MtEncoder<f32>> {
    let pairs = mt_training_pairs(cipher, &english.train, 1.0, seed)?;
    pretrain_mt_standin(&cfg.model, &pairs, &cfg.mt_train_config(seed))
}

pub struct BaseArtifacts {
    pub model: BaseModel<f32>,
    pub english_test: EvalResult,
    pub dir: PathBuf,
}

/// Loads the English base model of `seed` from the shared cache under
/// `output_dir/bases`, training and saving it on a miss.
pub fn base_model(cfg: &ExperimentConfig, seed: u64, english: &Splits<TaskInstance>) -> Result<BaseArtifacts> {
    let dir = cfg.output_dir.join("bases").join(cfg.base_hash()).join(seed.to_string());
    let ckpt = dir.join("base.ckpt");
    let metrics = dir.join("metrics.json");
    if ckpt.exists() && metrics.exists() {
        let model = load_model(&ckpt)?;
        let english_test = evaluate_english(&model, &english.test)?;
        return Ok(BaseArtifacts {
            model,
            english_test,
            dir,
        });
    }
    create_dir(&dir)?;
    let out = train_base_english(&cfg.model, cfg.task, english, &cfg.base_train_config(seed))?;
    save_model(&out.model, &ckpt)?;
    crate::train::write_predictions(&dir.join("predictions.jsonl"), &out.english_test.records)?;
    write_json(
        &metrics,
        &serde_json::json!({
            "task": cfg.task,
            "seed": seed,
            "metric": cfg.metric_name(),
            "value": out.english_test.metric,
            "history": out.history,
        }),
    )?;
    Ok(BaseArtifacts {
        model: out.model,
        english_test: out.english_test,
        dir,
    })
}

struct RunState {
    root: PathBuf,
    artifacts: Vec<String>,
    metrics: Vec<RunMetrics>,
}

impl RunState {
    fn cell_dir(&self, method: &str, language: &str, seed: u64) -> Result<PathBuf> {
        let dir = self.root.join(method).join(language).join(seed.to_string());
        create_dir(&dir)?;
        Ok(dir)
    }

    fn note(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.artifacts.push(rel.to_string_lossy().replace('\\', "/"));
    }

    fn write_cell(&mut self, dir: &Path, metrics: RunMetrics, eval: &EvalResult, timing: Option<Timing>) -> Result<()> {
        let path = dir.join("metrics.json");
        write_json(&path, &metrics)?;
        self.note(&path);
        let path = dir.join("predictions.jsonl");
        crate::train::write_predictions(&path, &eval.records)?;
        self.note(&path);
        if let Some(t) = timing {
            let path = dir.join("timing.json");
            write_json(&path, &t)?;
            self.note(&path);
        }
        self.metrics.push(metrics);
        Ok(())
    }
}

/// Runs every (seed, language, method) cell of `cfg` and writes the run
/// tree `output_dir/runs/<config-hash>/<method>/<language>/<seed>/`.
///
/// The manifest is written even when a cell fails; it then records the
/// error and the artifacts produced so far.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let root = cfg.run_root();
    create_dir(&root)?;
    let mut state = RunState {
        root: root.clone(),
        artifacts: Vec::new(),
        metrics: Vec::new(),
    };
    let config_path = root.join("config.json");
    write_json(&config_path, cfg)?;
    state.note(&config_path);
    let result = execute(cfg, &hash, &mut state);
    state.artifacts.sort();
    let manifest = Manifest {
        schema_version: CONFIG_SCHEMA_VERSION,
        name: cfg.name.clone(),
        config_hash: hash,
        complete: result.is_ok(),
        error: result.as_ref().err().map(ToString::to_string),
        artifacts: state.artifacts,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    result?;
    Ok(RunSummary {
        root,
        manifest,
        metrics: state.metrics,
    })
}

fn execute(cfg: &ExperimentConfig, hash: &str, state: &mut RunState) -> Result<()> {
    let metric = cfg.metric_name();
    let seq_len = cfg.spec().seq_len;
    let row = |method: &str, language: &str, seed: u64, value: f64| RunMetrics {
        schema_version: CONFIG_SCHEMA_VERSION,
        name: cfg.name.clone(),
        config_hash: hash.to_string(),
        task: cfg.task,
        method: method.to_string(),
        language: language.to_string(),
        seed,
        mt_quality: cfg.mt_quality,
        rank: cfg.adapter.rank,
        fusion: cfg.adapter.fusion,
        metric: metric.to_string(),
        value,
        flops_per_step: None,
        flops: None,
        trainable_params: None,
        history: None,
        zero_source: None,
    };
    for &seed in &cfg.seeds {
        let (corpus, english) = english_data(cfg, seed)?;
        let base = base_model(cfg, seed, &english)?;
        if cfg.baselines {
            let dir = state.cell_dir(Setting::English.name(), ENGLISH, seed)?;
            let m = row(Setting::English.name(), ENGLISH, seed, base.english_test.metric);
            state.write_cell(&dir, m, &base.english_test, None)?;
        }
        for lang in &cfg.languages {
            let (cipher, splits) = parallel_data(cfg, &corpus, lang, seed)?;
            if cfg.baselines {
                for setting in [Setting::ZeroShot, Setting::TranslateTest] {
                    let eval = evaluate(&base.model, None, None, setting, &splits.test, SourceMode::Live)?;
                    let dir = state.cell_dir(setting.name(), &lang.name, seed)?;
                    state.write_cell(&dir, row(setting.name(), &lang.name, seed, eval.metric), &eval, None)?;
                }
            }
            let mt = if cfg.methods.contains(&Method::FlareMt) {
                Some(mt_standin(cfg, &cipher, &english, seed)?)
            } else {
                None
            };
            for &method in &cfg.methods {
                let tc = cfg.xlt_train_config(method, seed);
                let out = train_translate_train(&base.model, mt.as_ref(), &splits, &tc)?;
                let eval = evaluate(
                    &base.model,
                    Some(&out.model),
                    mt.as_ref(),
                    Setting::Target,
                    &splits.test,
                    SourceMode::Live,
                )?;
                let dir = state.cell_dir(method.name(), &lang.name, seed)?;
                let ckpt = dir.join("adapters.ckpt");
                save_adapted(&out.model, &cfg.model, seed, &ckpt)?;
                state.note(&ckpt);
                let zero_source = (cfg.ablations
                    && method == Method::Flare
                    && matches!(cfg.adapter.fusion, FusionKind::Add | FusionKind::AddRelu))
                .then(|| ablate_zero_source(&base.model, &out.model, mt.as_ref(), &splits.test))
                .transpose()?;
                if cfg.probes && method.fuses() {
                    let probe =
                        probe_activations(&base.model, &out.model, mt.as_ref(), &splits.test, Attachment::Query)?;
                    for path in report::write_probe(&dir, &probe, &lang.name)? {
                        state.note(&path);
                    }
                }
                let flops = count_flops(method, &cfg.model, &cfg.adapter, seq_len, seq_len);
                let timing = Timing {
                    wall_seconds: out.history.wall_seconds,
                    seconds_per_step: out.history.seconds_per_step(),
                };
                let m = RunMetrics {
                    flops_per_step: Some(flops.flops_per_step(tc.batch_size)),
                    flops: Some(flops),
                    trainable_params: Some(out.model.trainable_numel()),
                    history: Some(out.history),
                    zero_source,
                    ..row(method.name(), &lang.name, seed, eval.metric)
                };
                state.write_cell(&dir, m, &eval, Some(timing))?;
            }
        }
    }
    Ok(())
}
