//! Two-stage training, evaluation settings, checkpoint selection, FLOP
//! accounting, activation probes and ablations.

mod flops;
mod optim;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    mt_config, ActivationProbe, AdaptedModel, AdapterConfig, AdapterSet, Attachment, Method, MtEncoder, PairBatch,
    SourceInput,
};
use crate::data::{
    apply_cipher, instance_batch, low_resource_subsample, pair_batch, CipherLanguage, Direction, Gold, ParallelPair,
    Splits, TaskInstance,
};
use crate::error::{Error, Result};
use crate::model::{BaseModel, ModelConfig, NoHooks, Prediction, TaskKind, TokenBatch, DEFAULT_MAX_SPAN_LEN};
use crate::tensor::Tape;

pub use flops::{count_flops, FlopCounter};
pub use optim::{clip_grad_norm, AdamW, ParamGroup};

/// Batch size for evaluation passes.
pub const EVAL_BATCH: usize = 64;
/// Training examples whose loss is tracked before and after training.
pub const LOSS_PROBE_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate of adapter-stage parameters.
    pub lr: f64,
    /// Learning rate of the task head.
    pub head_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub method: Method,
    pub adapter: AdapterConfig,
    /// Translation quality used to build the parallel data.
    pub mt_quality: f64,
    pub low_resource_k: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            head_lr: 2e-4,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            weight_decay: 0.01,
            clip_norm: 1.0,
            method: Method::Flare,
            adapter: AdapterConfig::default(),
            mt_quality: 0.9,
            low_resource_k: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for the English stage, where adapters and head start from scratch.
    pub fn base_stage() -> Self {
        TrainConfig {
            lr: 5e-3,
            head_lr: 5e-3,
            method: Method::Lora,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {x}")))
            }
        };
        positive("lr", self.lr)?;
        positive("head_lr", self.head_lr)?;
        positive("clip_norm", self.clip_norm)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay < 1.0) {
            return Err(Error::Config(format!("weight_decay {} outside [0, 1)", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.mt_quality) {
            return Err(Error::Config(format!("mt_quality {} outside [0, 1]", self.mt_quality)));
        }
        if self.low_resource_k == Some(0) {
            return Err(Error::Config("low_resource_k must be positive".into()));
        }
        self.adapter.validate(model)
    }
}

/// What happened during one training run. Wall time is kept apart from the
/// deterministic fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean loss on the loss-probe subset before the first update.
    pub initial_loss: f64,
    /// Mean loss on the same subset after the last epoch.
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub validation: Vec<f64>,
    pub best_epoch: usize,
    pub steps: usize,
    pub fused_batches: usize,
    pub peak_tape_bytes: usize,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl TrainHistory {
    pub fn seconds_per_step(&self) -> f64 {
        self.wall_seconds / self.steps.max(1) as f64
    }
}

/// Index of the best validation score; ties go to the earliest epoch.
pub fn select_checkpoint(trace: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in trace.iter().enumerate() {
        if best.is_none_or(|b| v > trace[b]) {
            best = Some(i);
        }
    }
    best
}

/// How fusion methods see the source side during a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    Live,
    Zeroed,
    Absent,
}

impl SourceMode {
    pub(crate) fn input<'a, T>(self) -> SourceInput<'a, T> {
        match self {
            SourceMode::Live => SourceInput::Live,
            SourceMode::Zeroed => SourceInput::Zeroed,
            SourceMode::Absent => SourceInput::Absent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Base model on gold English.
    English,
    /// Base model on raw target-language tokens.
    ZeroShot,
    /// Base model on the translation back to English.
    TranslateTest,
    /// Adapted model on target tokens (plus the source side where used).
    Target,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::English => "english",
            Setting::ZeroShot => "zero_shot",
            Setting::TranslateTest => "translate_test",
            Setting::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: u64,
    pub prediction: Gold,
    pub gold: Gold,
    pub language: String,
    pub setting: Setting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Accuracy or exact match in `[0, 1]`.
    pub metric: f64,
    pub records: Vec<PredictionRecord>,
}

/// Fraction of records whose prediction equals the gold answer.
pub fn score(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.prediction == r.gold).count() as f64 / records.len() as f64
}

fn to_gold(p: Prediction) -> Gold {
    match p {
        Prediction::Class(c) => Gold::Label(c),
        Prediction::Span(s, e) => Gold::Span(s, e),
    }
}

fn finish_eval(instances: &[&TaskInstance], preds: Vec<Prediction>, setting: Setting) -> EvalResult {
    let records: Vec<PredictionRecord> = instances
        .iter()
        .zip(preds)
        .map(|(i, p)| PredictionRecord {
            id: i.id,
            prediction: to_gold(p),
            gold: i.gold,
            language: i.language.clone(),
            setting,
        })
        .collect();
    EvalResult {
        metric: score(&records),
        records,
    }
}

/// Writes one JSON record per line.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Base model predictions with no adapters.
pub fn base_predictions(base: &BaseModel<f32>, instances: &[&TaskInstance]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(EVAL_BATCH) {
        let rows: Vec<&[usize]> = chunk.iter().map(|i| i.tokens.as_slice()).collect();
        let tape = Tape::new();
        let bound = base.bind(&tape);
        let (_, logits) = base.forward(&tape, &bound, &TokenBatch::new(&rows)?, &mut NoHooks, None)?;
        out.extend(logits.predictions(DEFAULT_MAX_SPAN_LEN));
    }
    Ok(out)
}

/// Evaluates the base model on English instances.
pub fn evaluate_english(base: &BaseModel<f32>, instances: &[TaskInstance]) -> Result<EvalResult> {
    let refs: Vec<&TaskInstance> = instances.iter().collect();
    Ok(finish_eval(&refs, base_predictions(base, &refs)?, Setting::English))
}

/// Evaluates one setting on parallel test pairs. `Target` requires an
/// adapted model; the others use the base model alone.
pub fn evaluate(
    base: &BaseModel<f32>,
    adapted: Option<&AdaptedModel<f32>>,
    mt: Option<&MtEncoder<f32>>,
    setting: Setting,
    test: &[ParallelPair],
    source: SourceMode,
) -> Result<EvalResult> {
    match setting {
        Setting::English | Setting::TranslateTest => {
            let refs: Vec<&TaskInstance> = test.iter().map(|p| &p.source).collect();
            Ok(finish_eval(&refs, base_predictions(base, &refs)?, setting))
        }
        Setting::ZeroShot => {
            let refs: Vec<&TaskInstance> = test.iter().map(|p| &p.target).collect();
            Ok(finish_eval(&refs, base_predictions(base, &refs)?, setting))
        }
        Setting::Target => {
            let model = adapted.ok_or_else(|| Error::contract("target evaluation needs an adapted model"))?;
            let preds = adapted_predictions(base, model, mt, test, source)?;
            let refs: Vec<&TaskInstance> = test.iter().map(|p| &p.target).collect();
            Ok(finish_eval(&refs, preds, setting))
        }
    }
}

fn adapted_predictions(
    base: &BaseModel<f32>,
    model: &AdaptedModel<f32>,
    mt: Option<&MtEncoder<f32>>,
    pairs: &[ParallelPair],
    source: SourceMode,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let refs: Vec<&ParallelPair> = chunk.iter().collect();
        out.extend(model.predict(base, mt, &pair_batch(&refs)?, source.input(), DEFAULT_MAX_SPAN_LEN)?);
    }
    Ok(out)
}

fn batch_loss(
    base: &BaseModel<f32>,
    model: &AdaptedModel<f32>,
    mt: Option<&MtEncoder<f32>>,
    batch: &PairBatch,
    source: SourceMode,
) -> Result<f64> {
    let tape = Tape::new();
    let b = model.bind(base, &tape);
    let out = model.forward(&tape, base, mt, &b, batch, source.input(), None)?;
    Ok(out.loss(&batch.targets)?.item().into())
}

/// Optimizes `model` on `n` examples served by `make_batch`.
#[allow(clippy::too_many_arguments)]
fn fit(
    base: &BaseModel<f32>,
    mt: Option<&MtEncoder<f32>>,
    model: &mut AdaptedModel<f32>,
    cfg: &TrainConfig,
    n: usize,
    make_batch: &dyn Fn(&[usize]) -> Result<PairBatch>,
    fused_schedule: Option<&dyn Fn(usize, usize, &mut ChaCha8Rng) -> Vec<bool>>,
    validate: &dyn Fn(&AdaptedModel<f32>) -> Result<f64>,
) -> Result<TrainHistory> {
    if n == 0 {
        return Err(Error::contract("empty training split"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_0000);
    let probe: Vec<usize> = (0..n.min(LOSS_PROBE_SIZE)).collect();
    let probe_loss = |model: &AdaptedModel<f32>| -> Result<f64> {
        let mut total = 0.0;
        for chunk in probe.chunks(EVAL_BATCH) {
            total += batch_loss(base, model, mt, &make_batch(chunk)?, SourceMode::Live)? * chunk.len() as f64;
        }
        Ok(total / probe.len() as f64)
    };
    let initial_loss = probe_loss(model)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory {
        initial_loss,
        final_loss: f64::NAN,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        validation: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        steps: 0,
        fused_batches: 0,
        peak_tape_bytes: 0,
        wall_seconds: 0.0,
    };
    let mut snapshots = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let fused = fused_schedule.map(|f| f(epoch, batches.len(), &mut rng));
        let mut epoch_loss = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let batch = make_batch(idx)?;
            let mode = match &fused {
                Some(flags) if !flags[bi] => SourceMode::Zeroed,
                _ => SourceMode::Live,
            };
            if fused.is_some() && mode == SourceMode::Live {
                history.fused_batches += 1;
            }
            let tape = Tape::new();
            let b = model.bind(base, &tape);
            let out = model.forward(&tape, base, mt, &b, &batch, mode.input(), None)?;
            let loss = out.loss(&batch.targets)?;
            let value = f64::from(loss.item());
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: history.steps,
                    loss: value,
                });
            }
            let grads = tape.backward(loss)?;
            history.peak_tape_bytes = history.peak_tape_bytes.max(tape.bytes());
            model.adapters.params_mut().absorb_grads(&b.adapters, &grads);
            model.head.params_mut().absorb_grads(&b.head, &grads);
            drop(b);
            clip_grad_norm(&mut [model.adapters.params_mut(), model.head.params_mut()], cfg.clip_norm);
            let AdaptedModel { adapters, head } = &mut *model;
            opt.step(&mut [
                ParamGroup {
                    params: adapters.params_mut(),
                    lr: cfg.lr,
                },
                ParamGroup {
                    params: head.params_mut(),
                    lr: cfg.head_lr,
                },
            ]);
            model.adapters.params_mut().zero_grads();
            model.head.params_mut().zero_grads();
            epoch_loss += value * idx.len() as f64;
            history.steps += 1;
        }
        history.epoch_losses.push(epoch_loss / n as f64);
        history.validation.push(validate(model)?);
        snapshots.push(model.clone());
    }
    history.final_loss = probe_loss(model)?;
    let best = select_checkpoint(&history.validation).expect("at least one epoch");
    history.best_epoch = best;
    *model = snapshots.swap_remove(best);
    history.wall_seconds = start.elapsed().as_secs_f64();
    Ok(history)
}

pub struct BaseOutcome {
    pub model: BaseModel<f32>,
    /// The model before merging, for equivalence checks.
    pub unmerged: AdaptedModel<f32>,
    pub english_test: EvalResult,
    pub history: TrainHistory,
}

/// Trains a plain low-rank adapter and head on English, then folds the
/// adapter into the frozen weights.
pub fn train_base_english(
    model_cfg: &ModelConfig,
    task: TaskKind,
    english: &Splits<TaskInstance>,
    cfg: &TrainConfig,
) -> Result<BaseOutcome> {
    cfg.validate(model_cfg)?;
    let mut base = BaseModel::new(model_cfg, task, cfg.seed)?;
    let adapters = AdapterSet::new(model_cfg, Method::Lora, &cfg.adapter, cfg.seed)?;
    let mut model = AdaptedModel::new(&base, adapters);
    let make = |idx: &[usize]| {
        let refs: Vec<&TaskInstance> = idx.iter().map(|&i| &english.train[i]).collect();
        instance_batch(&refs)
    };
    let validate = |m: &AdaptedModel<f32>| -> Result<f64> {
        let mut records = Vec::new();
        for chunk in english.validation.chunks(EVAL_BATCH) {
            let refs: Vec<&TaskInstance> = chunk.iter().collect();
            let preds = m.predict(&base, None, &instance_batch(&refs)?, SourceInput::Absent, DEFAULT_MAX_SPAN_LEN)?;
            records.extend(finish_eval(&refs, preds, Setting::English).records);
        }
        Ok(score(&records))
    };
    let history = fit(&base, None, &mut model, cfg, english.train.len(), &make, None, &validate)?;
    model.adapters.merge_into(&mut base.encoder)?;
    base.head = model.head.clone();
    base.head.params_mut().set_trainable(false);
    let english_test = evaluate_english(&base, &english.test)?;
    Ok(BaseOutcome {
        model: base,
        unmerged: model,
        english_test,
        history,
    })
}

pub struct XltOutcome {
    pub model: AdaptedModel<f32>,
    pub history: TrainHistory,
}

fn xlt_train_split(splits: &Splits<ParallelPair>, cfg: &TrainConfig) -> Result<Vec<ParallelPair>> {
    match cfg.low_resource_k {
        Some(k) => low_resource_subsample(&splits.train, k, cfg.seed),
        None => Ok(splits.train.clone()),
    }
}

fn xlt_fit(
    base: &BaseModel<f32>,
    mt: Option<&MtEncoder<f32>>,
    splits: &Splits<ParallelPair>,
    cfg: &TrainConfig,
    fused_schedule: Option<&dyn Fn(usize, usize, &mut ChaCha8Rng) -> Vec<bool>>,
    validation_source: SourceMode,
) -> Result<XltOutcome> {
    let model_cfg = base.config();
    cfg.validate(model_cfg)?;
    if cfg.method == Method::FlareMt && mt.is_none() {
        return Err(Error::contract("flare_mt needs a pretrained MT stand-in"));
    }
    let train = xlt_train_split(splits, cfg)?;
    let adapters = AdapterSet::new(model_cfg, cfg.method, &cfg.adapter, cfg.seed)?;
    let mut model = AdaptedModel::new(base, adapters);
    let make = |idx: &[usize]| {
        let refs: Vec<&ParallelPair> = idx.iter().map(|&i| &train[i]).collect();
        pair_batch(&refs)
    };
    let validate = |m: &AdaptedModel<f32>| {
        evaluate(base, Some(m), mt, Setting::Target, &splits.validation, validation_source).map(|r| r.metric)
    };
    let history = fit(base, mt, &mut model, cfg, train.len(), &make, fused_schedule, &validate)?;
    Ok(XltOutcome { model, history })
}

/// Adapter-stage training on translated target-language data.
pub fn train_translate_train(
    base: &BaseModel<f32>,
    mt: Option<&MtEncoder<f32>>,
    splits: &Splits<ParallelPair>,
    cfg: &TrainConfig,
) -> Result<XltOutcome> {
    xlt_fit(base, mt, splits, cfg, None, SourceMode::Live)
}

/// FLARE trained with fusion on half of each epoch's batches (the source
/// cache is zeroed on the rest) and evaluated without any source. With an
/// odd batch count the extra batch is fused on even epochs only.
pub fn train_only_fusion_variant(
    base: &BaseModel<f32>,
    splits: &Splits<ParallelPair>,
    cfg: &TrainConfig,
) -> Result<XltOutcome> {
    if cfg.method != Method::Flare {
        return Err(Error::contract("the train-only variant applies to flare"));
    }
    let schedule = |epoch: usize, n: usize, rng: &mut ChaCha8Rng| {
        let fused = if epoch % 2 == 0 { n.div_ceil(2) } else { n / 2 };
        let mut flags: Vec<bool> = (0..n).map(|i| i < fused).collect();
        flags.shuffle(rng);
        flags
    };
    xlt_fit(base, None, splits, cfg, Some(&schedule), SourceMode::Absent)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub normal: f64,
    pub zeroed: f64,
    /// `normal - zeroed`
    pub drop: f64,
}

/// Evaluates twice, the second time with an all-zero source.
pub fn ablate_zero_source(
    base: &BaseModel<f32>,
    model: &AdaptedModel<f32>,
    mt: Option<&MtEncoder<f32>>,
    test: &[ParallelPair],
) -> Result<AblationResult> {
    if !model.method().fuses() {
        return Err(Error::contract("source ablation needs a fusion model"));
    }
    let normal = evaluate(base, Some(model), mt, Setting::Target, test, SourceMode::Live)?.metric;
    let zeroed = evaluate(base, Some(model), mt, Setting::Target, test, SourceMode::Zeroed)?.metric;
    Ok(AblationResult {
        normal,
        zeroed,
        drop: normal - zeroed,
    })
}

/// Mean absolute bottleneck activations of both streams over a split.
pub fn probe_activations(
    base: &BaseModel<f32>,
    model: &AdaptedModel<f32>,
    mt: Option<&MtEncoder<f32>>,
    split: &[ParallelPair],
    attachment: Attachment,
) -> Result<ActivationProbe> {
    if !model.method().fuses() {
        return Err(Error::contract("activation probes need a fusion model"));
    }
    let mut probe = ActivationProbe::new(base.config().num_layers, attachment);
    for chunk in split.chunks(EVAL_BATCH) {
        let refs: Vec<&ParallelPair> = chunk.iter().collect();
        let batch = pair_batch(&refs)?;
        let tape = Tape::new();
        let b = model.bind(base, &tape);
        model.forward(&tape, base, mt, &b, &batch, SourceInput::Live, Some(&mut probe))?;
    }
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtTrainConfig {
    pub mt_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MtTrainConfig {
    fn default() -> Self {
        MtTrainConfig {
            mt_dim: 48,
            epochs: 4,
            lr: 5e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Target-language token rows paired with the English token each position
/// came from.
pub fn mt_training_pairs(
    lang: &CipherLanguage,
    english: &[TaskInstance],
    quality: f64,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    english
        .iter()
        .map(|inst| {
            let t = apply_cipher(lang, inst, Direction::ToTarget, quality, seed)?;
            let labels = t.alignment.iter().map(|&j| inst.tokens[j]).collect();
            Ok((t.instance.tokens, labels))
        })
        .collect()
}

/// Trains the MT stand-in to predict the English token at every position
/// of a target-language sequence, then freezes it.
pub fn pretrain_mt_standin(
    model_cfg: &ModelConfig,
    data: &[(Vec<usize>, Vec<usize>)],
    cfg: &MtTrainConfig,
) -> Result<MtEncoder<f32>> {
    let mut mt = MtEncoder::new(&mt_config(model_cfg, cfg.mt_dim), cfg.seed)?;
    mt.set_trainable(true);
    let mut opt = AdamW::new(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3770_0000);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let rows: Vec<&[usize]> = idx.iter().map(|&i| data[i].0.as_slice()).collect();
            let labels: Vec<usize> = idx.iter().flat_map(|&i| data[i].1.iter().copied()).collect();
            let tokens = TokenBatch::new(&rows)?;
            let tape = Tape::new();
            let eb = mt.encoder.params().bind(&tape);
            let hb = mt.head_params().bind(&tape);
            let loss = mt.token_logits(&tape, &eb, &hb, &tokens)?.cross_entropy(&labels)?;
            let value = f64::from(loss.item());
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            let grads = tape.backward(loss)?;
            let (enc, head) = mt.params_mut();
            enc.absorb_grads(&eb, &grads);
            head.absorb_grads(&hb, &grads);
            opt.step(&mut [
                ParamGroup {
                    params: &mut *enc,
                    lr: cfg.lr,
                },
                ParamGroup {
                    params: &mut *head,
                    lr: cfg.lr,
                },
            ]);
            enc.zero_grads();
            head.zero_grads();
            step += 1;
        }
    }
    mt.set_trainable(false);
    Ok(mt)
}

/// Fraction of positions whose predicted English token is right.
pub fn mt_token_accuracy(mt: &MtEncoder<f32>, data: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in data.chunks(EVAL_BATCH) {
        let rows: Vec<&[usize]> = chunk.iter().map(|(t, _)| t.as_slice()).collect();
        let preds = mt.translate(&TokenBatch::new(&rows)?)?;
        let gold = chunk.iter().flat_map(|(_, l)| l.iter().copied());
        for (p, g) in preds.into_iter().zip(gold) {
            correct += usize::from(p == g);
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}
