//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.
//!
//! Numeric arguments select criteria (`cargo test --test acceptance -- 4 7`),
//! other words select by slug, and `--skip acceptance` runs nothing.
//! `FLARE_ACCEPTANCE_DIR` keeps the run trees.

#[path = "common/grad_suite.rs"]
mod grad_suite;
#[path = "common/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use flare_core::adapters::{
    adapter_param_count, cross_attention, AdaptedModel, AdapterConfig, AdapterSet, CrossAttnWeights, FusionKind,
    Method, SourceInput,
};
use flare_core::data::{
    generate_task_corpus, make_parallel_splits, pair_batch, CipherLanguage, LanguageSpec, SplitSizes, TaskSpec,
};
use flare_core::experiment::{
    base_model, default_language, emit_report, english_data, mt_standin, parallel_data, run_experiment, sweep,
    ExperimentConfig, RunSummary, SweepKind,
};
use flare_core::model::{save_model, BaseModel, HeadLogits, ModelConfig, NoHooks, TaskKind};
use flare_core::tensor::{Tape, Tensor};
use flare_core::train::{count_flops, evaluate, train_translate_train, Setting, SourceMode, TrainHistory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<Verdict, String>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Run trees and trained artifacts shared between criteria.
struct Lab {
    dir: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    runs: BTreeMap<&'static str, RunSummary>,
    freeze: Option<Vec<(Method, bool, TrainHistory)>>,
}

impl Lab {
    fn new() -> Self {
        match std::env::var_os("FLARE_ACCEPTANCE_DIR") {
            Some(dir) => Lab {
                dir: PathBuf::from(dir),
                _tmp: None,
                runs: BTreeMap::new(),
                freeze: None,
            },
            None => {
                let tmp = tempfile::tempdir().expect("temp dir");
                Lab {
                    dir: tmp.path().to_path_buf(),
                    _tmp: Some(tmp),
                    runs: BTreeMap::new(),
                    freeze: None,
                }
            }
        }
    }

    /// Default-config experiment on the swap-0.1 language.
    fn config(&self, name: &str, task: TaskKind, methods: Vec<Method>, fusion: FusionKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(task, methods, &self.dir);
        cfg.name = name.into();
        cfg.languages = vec![default_language()];
        cfg.seeds = SEEDS.to_vec();
        cfg.adapter.fusion = fusion;
        cfg
    }

    fn run(&mut self, key: &'static str, cfg: impl FnOnce(&Lab) -> ExperimentConfig) -> Result<&RunSummary, String> {
        if !self.runs.contains_key(key) {
            let summary = run_experiment(&cfg(self)).map_err(err)?;
            self.runs.insert(key, summary);
        }
        Ok(&self.runs[key])
    }

    fn non_inferiority(&mut self, task: TaskKind) -> Result<&RunSummary, String> {
        let key = match task {
            TaskKind::Classification => "non_inferiority_classification",
            TaskKind::Span => "non_inferiority_span",
        };
        self.run(key, |lab| {
            lab.config(key, task, vec![Method::Lora, Method::Flare], FusionKind::AddRelu)
        })
    }

    /// Full translate-train of every method on the seed-0 classification
    /// base; records whether the base bytes survived each run.
    fn freeze_runs(&mut self) -> Result<&[(Method, bool, TrainHistory)], String> {
        if self.freeze.is_none() {
            let cfg = self.config("freeze", TaskKind::Classification, Method::ALL.to_vec(), FusionKind::AddRelu);
            let seed = 0;
            let (corpus, english) = english_data(&cfg, seed).map_err(err)?;
            let base = base_model(&cfg, seed, &english).map_err(err)?.model;
            let (cipher, splits) = parallel_data(&cfg, &corpus, &cfg.languages[0], seed).map_err(err)?;
            let mt = mt_standin(&cfg, &cipher, &english, seed).map_err(err)?;
            let before = model_bytes(&base, &self.dir.join("freeze_before.ckpt"))?;
            let mut out = Vec::new();
            for method in Method::ALL {
                let tc = cfg.xlt_train_config(method, seed);
                let run = train_translate_train(&base, Some(&mt), &splits, &tc).map_err(err)?;
                let after = model_bytes(&base, &self.dir.join("freeze_after.ckpt"))?;
                out.push((method, before == after, run.history));
            }
            self.freeze = Some(out);
        }
        Ok(self.freeze.as_deref().expect("just set"))
    }
}

fn model_bytes(model: &BaseModel<f32>, path: &Path) -> Result<Vec<u8>, String> {
    save_model(model, path).map_err(err)?;
    std::fs::read(path).map_err(err)
}

fn gradients(_: &mut Lab) -> Outcome {
    let start = Instant::now();
    let mut checks = grad_suite::op_checks();
    let ops = checks.len();
    checks.extend(grad_suite::model_checks());
    let secs = start.elapsed().as_secs_f64();
    let worst = checks
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("non-empty");
    let failed: Vec<String> = checks.iter().filter(|c| !c.report.passed()).map(|c| c.describe()).collect();
    verdict(
        failed.is_empty() && secs < 120.0,
        format!(
            "{ops} op checks + {} model parameter checks, worst {} ; {:.1}s{}",
            checks.len() - ops,
            worst.describe(),
            secs,
            if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
        ),
    )
}

fn class_logits(
    base: &BaseModel<f32>,
    model: Option<&AdaptedModel<f32>>,
    batch: &flare_core::adapters::PairBatch,
    source: SourceInput<'_, f32>,
) -> Result<Tensor<f32>, String> {
    let tape = Tape::new();
    let head = match model {
        Some(m) => {
            let b = m.bind(base, &tape);
            m.forward(&tape, base, None, &b, batch, source, None).map_err(err)?.logits
        }
        None => {
            let b = base.bind(&tape);
            base.forward(&tape, &b, &batch.target, &mut NoHooks, None).map_err(err)?.1
        }
    };
    match head {
        HeadLogits::Classes(l) => Ok(l.value()),
        HeadLogits::Span(..) => Err("expected class logits".into()),
    }
}

fn init_equivalence(_: &mut Lab) -> Outcome {
    let cfg = ModelConfig::default();
    let corpus = generate_task_corpus(&TaskSpec::classification(), 200, 1).map_err(err)?;
    let lang = CipherLanguage::new("swap10", cfg.vocab_size, 0.1, 102).map_err(err)?;
    let sizes = SplitSizes {
        train: 40,
        validation: 20,
        test: 40,
    };
    let splits = make_parallel_splits(&corpus, &lang, 0.9, 0.9, sizes, 3).map_err(err)?;
    let pairs: Vec<_> = splits.train.iter().take(16).collect();
    let batch = pair_batch(&pairs).map_err(err)?;
    let base = BaseModel::<f32>::new(&cfg, TaskKind::Classification, 4).map_err(err)?;
    let want = class_logits(&base, None, &batch, SourceInput::Absent)?;

    let mut worst: f64 = 0.0;
    for fusion in FusionKind::ALL {
        let adapter = AdapterConfig {
            fusion,
            ..AdapterConfig::default()
        };
        let set = AdapterSet::new(&cfg, Method::Flare, &adapter, 5).map_err(err)?;
        let model = AdaptedModel::new(&base, set);
        let got = class_logits(&base, Some(&model), &batch, SourceInput::Live)?;
        worst = worst.max(got.cast::<f64>().max_abs_diff(&want.cast::<f64>()));
    }

    // Trained-looking adapters: FLARE-add with a zero source against LoRA
    // holding the same values.
    let adapter = AdapterConfig {
        fusion: FusionKind::Add,
        ..AdapterConfig::default()
    };
    let mut flare = AdapterSet::<f32>::new(&cfg, Method::Flare, &adapter, 6).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (_, t) in flare.params_mut().iter_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-0.2..0.2);
        }
    }
    let mut lora = AdapterSet::<f32>::new(&cfg, Method::Lora, &adapter, 8).map_err(err)?;
    lora.params_mut().copy_values_from(flare.params()).map_err(err)?;
    let flare = AdaptedModel::new(&base, flare);
    let lora = AdaptedModel::new(&base, lora);
    let zeroed = class_logits(&base, Some(&flare), &batch, SourceInput::Zeroed)?;
    let plain = class_logits(&base, Some(&lora), &batch, SourceInput::Live)?;
    let exact = zeroed.bit_eq(&plain);
    verdict(
        worst <= 1e-6 && exact,
        format!("max |FLARE - base| over 4 fusions {worst:.2e} (<= 1e-6); zero-source add == LoRA bitwise: {exact}"),
    )
}

fn freeze_contract(lab: &mut Lab) -> Outcome {
    let runs = lab.freeze_runs()?;
    let broken: Vec<&str> = runs.iter().filter(|(_, ok, _)| !ok).map(|(m, _, _)| m.name()).collect();
    let names: Vec<&str> = runs.iter().map(|(m, _, _)| m.name()).collect();
    verdict(
        broken.is_empty(),
        format!("base checkpoint bytes identical after full translate-train of {names:?}; changed: {broken:?}"),
    )
}

fn cross_attention_oracle(_: &mut Lab) -> Outcome {
    let (m, r) = (3, 2);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut random = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-2.0..2.0));
        let (s, t) = (random(&[1, m, r]), random(&[1, m, r]));
        let w: Vec<Tensor<f64>> = (0..3).map(|_| random(&[r, r])).collect();
        let tape = Tape::new();
        let weights = CrossAttnWeights {
            query: tape.leaf(&w[0]),
            key: tape.leaf(&w[1]),
            value: tape.leaf(&w[2]),
        };
        let (out, _) = cross_attention(tape.leaf(&s), tape.leaf(&t), &weights).map_err(err)?;
        let want = oracles::naive_cross_attention(s.data(), t.data(), w[0].data(), w[1].data(), w[2].data(), m, r);
        let got = out.value();
        worst = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    verdict(worst <= 1e-10, format!("20 random m=3 r=2 cases, max abs diff {worst:.2e} (<= 1e-10)"))
}

fn translate_test_oracle(lab: &mut Lab) -> Outcome {
    let mut cfg = lab.config("translate_test", TaskKind::Classification, vec![Method::Lora], FusionKind::AddRelu);
    cfg.mt_quality = 1.0;
    let lang = LanguageSpec {
        name: "swap00".into(),
        swap_rate: 0.0,
        seed: 101,
    };
    let seed = 0;
    let (corpus, english) = english_data(&cfg, seed).map_err(err)?;
    let base = base_model(&cfg, seed, &english).map_err(err)?;
    let (_, splits) = parallel_data(&cfg, &corpus, &lang, seed).map_err(err)?;
    let tt = evaluate(&base.model, None, None, Setting::TranslateTest, &splits.test, SourceMode::Live).map_err(err)?;
    let same_inputs = splits.test.len() == english.test.len()
        && splits.test.iter().zip(&english.test).all(|(p, e)| p.source.tokens == e.tokens);
    let en = base.english_test.metric;
    verdict(
        tt.metric.to_bits() == en.to_bits() && same_inputs,
        format!("translate-test {} vs English test {en}; de-ciphered inputs identical: {same_inputs}", tt.metric),
    )
}

fn efficiency(lab: &mut Lab) -> Outcome {
    let cfg = ModelConfig::default();
    let adapter = AdapterConfig::default();
    let batch = 16;
    let flare = count_flops(Method::Flare, &cfg, &adapter, 24, 24).flops_per_step(batch);
    let input = count_flops(Method::InputFusion, &cfg, &adapter, 24, 24).flops_per_step(batch);
    let short = count_flops(Method::Lora, &cfg, &adapter, 24, 24).attention_scores;
    let long = count_flops(Method::Lora, &cfg, &adapter, 48, 48).attention_scores;
    let ratio = long as f64 / short as f64;
    let runs = lab.freeze_runs()?;
    let per_step = |m: Method| {
        runs.iter()
            .find(|(method, _, _)| *method == m)
            .map_or(f64::NAN, |(_, _, h)| h.seconds_per_step())
    };
    let (t_flare, t_input) = (per_step(Method::Flare), per_step(Method::InputFusion));
    verdict(
        flare < input && (3.5..=4.1).contains(&ratio),
        format!(
            "FLOPs/step at m=24: FLARE {flare} < input fusion {input} ({:.1}% fewer); attention-score ratio at 2x length {ratio:.2}; \
             wall s/step FLARE {t_flare:.4} vs input fusion {t_input:.4}",
            100.0 * (1.0 - flare as f64 / input as f64)
        ),
    )
}

fn parameter_accounting(_: &mut Lab) -> Outcome {
    let cfg = ModelConfig::default();
    let (l, d) = (cfg.num_layers, cfg.hidden_dim);
    let mut problems = Vec::new();
    let mut checked = 0;
    for rank in [4, 8, 64] {
        // Two adapted projections per block, each d·r down and r·d up.
        let lora_ledger = 2 * l * 2 * d * rank;
        for fusion in FusionKind::ALL {
            let adapter = AdapterConfig {
                rank,
                fusion,
                ..AdapterConfig::default()
            };
            let extra = if fusion == FusionKind::CrossAttn { 3 * rank * rank } else { 0 };
            let ledger = [
                (Method::Lora, lora_ledger),
                (Method::Flare, lora_ledger + 2 * l * extra),
                (Method::FlareMt, lora_ledger + 2 * l * extra + adapter.mt_dim * d),
            ];
            for (method, want) in ledger {
                let set = AdapterSet::<f32>::new(&cfg, method, &adapter, 0).map_err(err)?;
                let actual = set.params().trainable_numel();
                let closed = adapter_param_count(&cfg, method, &adapter);
                checked += 1;
                if actual != want || closed != want {
                    problems.push(format!("{} {} r={rank}: {actual}/{closed} vs {want}", method.name(), fusion.name()));
                }
            }
        }
    }
    verdict(
        problems.is_empty(),
        format!("{checked} (method, fusion, rank) counts match the ledger; mismatches: {problems:?}"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fusion_dependence(lab: &mut Lab) -> Outcome {
    let run = lab.run("fusion_dependence", |lab| {
        lab.config("fusion_dependence", TaskKind::Classification, vec![Method::Flare], FusionKind::Add)
    })?;
    let mut drops = Vec::new();
    for &seed in &SEEDS {
        let m = run.find("flare", "swap10", seed).ok_or("missing FLARE cell")?;
        drops.push(m.zero_source.as_ref().ok_or("missing ablation")?.drop);
    }
    let med = median(drops.clone());
    let pts: Vec<String> = drops.iter().map(|d| format!("{:.1}", 100.0 * d)).collect();
    verdict(
        med >= 0.05,
        format!("median accuracy drop {:.1} points (>= 5); per seed {pts:?}", 100.0 * med),
    )
}

fn non_inferiority(lab: &mut Lab) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for task in [TaskKind::Classification, TaskKind::Span] {
        let run = lab.non_inferiority(task)?;
        let values = |method: &str| -> Result<Vec<f64>, String> {
            SEEDS
                .iter()
                .map(|&s| run.find(method, "swap10", s).map(|m| m.value).ok_or(format!("missing {method} cell")))
                .collect()
        };
        let (flare, lora) = (mean(&values("flare")?), mean(&values("lora")?));
        let tt = mean(&values("translate_test")?);
        let diff = 100.0 * (flare - lora);
        pass &= diff >= -1.0;
        parts.push(format!(
            "{task:?}: FLARE {:.2} vs LoRA {:.2}, diff {diff:+.2} points (>= -1.0); translate-test {:.2}",
            100.0 * flare,
            100.0 * lora,
            100.0 * tt
        ));
    }
    verdict(pass, parts.join("; "))
}

fn sweeps(lab: &mut Lab) -> Outcome {
    let mut base = lab.config("sweep", TaskKind::Classification, vec![Method::Flare], FusionKind::AddRelu);
    base.seeds = vec![0];
    let mut cells = 0;
    let mut problems = Vec::new();
    let mut shape = Vec::new();
    for kind in [SweepKind::Rank, SweepKind::FusionFn, SweepKind::MtQuality] {
        let out = sweep(kind, &base).map_err(err)?;
        let mut values = Vec::new();
        for cell in &out.cells {
            for m in cell.metrics.iter().filter(|m| m.method == "flare") {
                let h = m.history.as_ref().ok_or("missing history")?;
                cells += 1;
                if h.final_loss > 0.5 * h.initial_loss {
                    problems.push(format!("{}: loss {:.3} -> {:.3}", m.name, h.initial_loss, h.final_loss));
                }
                values.push(format!("{}={:.3}", m.name.split('=').nth(1).unwrap_or("?"), m.value));
            }
        }
        if out.table.iter().filter(|s| s.method == "flare").count() != out.cells.len() {
            problems.push(format!("{kind} table is missing cells"));
        }
        shape.push(format!("{kind} [{}]", values.join(" ")));
    }
    let tables = ["sweep_rank.csv", "sweep_fusion_fn.csv", "sweep_mt_quality.csv"];
    let checked = oracles::check_report(&lab.dir, &tables)?;
    verdict(
        problems.is_empty() && cells == 11,
        format!(
            "{cells} cells converged to <= 0.5x initial loss; {checked} summary rows re-aggregated; {}; problems: {problems:?}",
            shape.join("; ")
        ),
    )
}

fn probe_validity(lab: &mut Lab) -> Outcome {
    let mut layers = 0;
    let mut worst = (f64::INFINITY, f64::NEG_INFINITY);
    let mut problems = Vec::new();
    for task in [TaskKind::Classification, TaskKind::Span] {
        let run = lab.non_inferiority(task)?;
        for &seed in &SEEDS {
            let path = run.root.join(format!("flare/swap10/{seed}/probe_layers.csv"));
            let mut rdr = csv::Reader::from_path(&path).map_err(err)?;
            let mut by_layer: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
            for rec in rdr.records() {
                let rec = rec.map_err(err)?;
                let layer: usize = rec[0].parse().map_err(err)?;
                let value: f64 = rec[3].parse().map_err(err)?;
                let slot = if &rec[1] == "source" { 0 } else { 1 };
                by_layer.entry(layer).or_insert([f64::NAN; 2])[slot] = value;
            }
            for (layer, [s, t]) in by_layer {
                layers += 1;
                let ratio = s / t;
                worst = (worst.0.min(ratio), worst.1.max(ratio));
                if !(s.is_finite() && t.is_finite() && s >= 0.0 && t >= 0.0 && ratio > 0.1 && ratio < 10.0) {
                    problems.push(format!("{task:?} seed {seed} layer {layer}: source {s} target {t}"));
                }
            }
        }
    }
    verdict(
        problems.is_empty() && layers == 2 * SEEDS.len() * ModelConfig::default().num_layers,
        format!(
            "{layers} (task, seed, layer) means finite and nonnegative; source/target ratio in [{:.3}, {:.3}]; problems: {problems:?}",
            worst.0, worst.1
        ),
    )
}

fn determinism(lab: &mut Lab) -> Outcome {
    let trees: Vec<PathBuf> = ["rerun_a", "rerun_b"].iter().map(|d| lab.dir.join(d)).collect();
    let mut roots = Vec::new();
    for dir in &trees {
        let mut cfg = ExperimentConfig::new(TaskKind::Classification, Method::ALL.to_vec(), dir);
        cfg.name = "determinism".into();
        cfg.languages = vec![default_language()];
        cfg.seeds = vec![0];
        cfg.sizes = Some(SplitSizes {
            train: 400,
            validation: 100,
            test: 200,
        });
        roots.push(run_experiment(&cfg).map_err(err)?);
        emit_report(dir).map_err(err)?;
    }
    let (a, b) = (&roots[0], &roots[1]);
    let mut files: Vec<(PathBuf, PathBuf)> = a
        .manifest
        .artifacts
        .iter()
        .filter(|f| !f.ends_with("timing.json") && !f.ends_with("config.json"))
        .map(|f| (a.root.join(f), b.root.join(f)))
        .collect();
    files.push((a.root.join("manifest.json"), b.root.join("manifest.json")));
    for table in ["rows.csv", "summary.csv", "summary.json", "activations.csv", "quality_curve.csv"] {
        files.push((trees[0].join("report").join(table), trees[1].join("report").join(table)));
    }
    let mut differing = Vec::new();
    for (x, y) in &files {
        if std::fs::read(x).map_err(err)? != std::fs::read(y).map_err(err)? {
            differing.push(x.strip_prefix(&lab.dir).unwrap_or(x).display().to_string());
        }
    }
    // config.json records output_dir, so the two configs are compared by hash instead
    let hashes: Vec<String> = roots
        .iter()
        .map(|r| ExperimentConfig::load(&r.root.join("config.json")).map(|c| c.config_hash()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    if hashes[0] != hashes[1] {
        differing.push(format!("config hash {} vs {}", hashes[0], hashes[1]));
    }
    let metrics = files.iter().filter(|(x, _)| x.ends_with("metrics.json")).count();
    verdict(
        differing.is_empty() && a.manifest.artifacts == b.manifest.artifacts,
        format!(
            "{} files ({metrics} metrics.json) bitwise identical across two runs of all five methods; differing: {differing:?}",
            files.len()
        ),
    )
}

type Criterion = fn(&mut Lab) -> Outcome;

const CRITERIA: [(u32, &str, Criterion); 12] = [
    (1, "gradients", gradients),
    (2, "init_equivalence", init_equivalence),
    (3, "freeze_contract", freeze_contract),
    (4, "cross_attention_oracle", cross_attention_oracle),
    (5, "translate_test_oracle", translate_test_oracle),
    (6, "efficiency", efficiency),
    (7, "parameter_accounting", parameter_accounting),
    (8, "fusion_dependence", fusion_dependence),
    (9, "non_inferiority", non_inferiority),
    (10, "sweeps", sweeps),
    (11, "probe_validity", probe_validity),
    (12, "determinism", determinism),
];

fn main() {
    let mut raw = std::env::args().skip(1);
    let mut args = Vec::new();
    while let Some(a) = raw.next() {
        if a == "--skip" {
            // `--skip acceptance` (or any prefix of it) skips the suite.
            if raw.next().is_some_and(|pat| "acceptance".contains(pat.as_str())) {
                return;
            }
        } else if !a.starts_with('-') {
            args.push(a);
        }
    }
    let selected = |id: u32, slug: &str| {
        args.is_empty() || args.iter().any(|a| a.parse::<u32>().map_or(slug.contains(a.as_str()), |n| n == id))
    };
    let chosen: Vec<_> = CRITERIA.iter().filter(|(id, slug, _)| selected(*id, slug)).collect();
    if chosen.is_empty() {
        return;
    }
    std::panic::set_hook(Box::new(|_| {}));
    let mut lab = Lab::new();
    let suite = Instant::now();
    let mut failed = Vec::new();
    for (id, slug, f) in chosen {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut lab))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed.push(*id);
        }
        println!(
            "criterion {id:>2} {} {slug} ({:.1}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance finished in {:.1}s; failed: {failed:?}", suite.elapsed().as_secs_f64());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
