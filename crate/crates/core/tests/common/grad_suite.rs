//! Finite-difference suites shared by the op, model and acceptance targets.
#![allow(dead_code)]

use flare_core::adapters::{
    mt_config, AdaptedModel, AdapterConfig, AdapterSet, FusionKind, Method, MtEncoder, PairBatch, SourceInput,
};
use flare_core::model::{BaseModel, Bound, ModelConfig, ParamId, TaskKind, Targets, TokenBatch};
use flare_core::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};
use flare_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub struct Check {
    pub name: String,
    pub report: GradCheckReport,
}

impl Check {
    pub fn describe(&self) -> String {
        let r = &self.report;
        format!(
            "{}: rel err {:.2e} at {} ({:e} vs {:e})",
            self.name, r.max_rel_error, r.worst_index, r.analytic[r.worst_index], r.numeric[r.worst_index]
        )
    }
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random values with every |x| at least `floor`, to stay off relu kinks.
pub fn random_off_kink(shape: &[usize], seed: u64, floor: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| loop {
        let x: f64 = rng.random_range(-1.0..1.0);
        if x.abs() >= floor {
            break x;
        }
    })
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

type Op1 = for<'t> fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>;

/// Each op is wrapped in a scalar readout with random weights so the
/// gradient is non-trivial.
fn weighted_sum<'t>(t: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = t.leaf(&random(&y.shape(), seed));
    Ok(y.mul(&w)?.sum())
}

/// One check per differentiable operation (and per differentiable operand).
pub fn op_checks() -> Vec<Check> {
    let cases: Vec<(&str, Vec<usize>, Op1)> = vec![
        ("matmul_lhs", vec![3, 4], |t, x| {
            let b = t.leaf(&random(&[4, 2], 100));
            weighted_sum(t, x.matmul(&b)?, 1)
        }),
        ("matmul_rhs", vec![4, 2], |t, x| {
            let a = t.leaf(&random(&[3, 4], 101));
            weighted_sum(t, a.matmul(&x)?, 1)
        }),
        ("batched_matmul_t", vec![2, 3, 4], |t, x| {
            let b = t.leaf(&random(&[2, 5, 4], 102));
            let y = x.matmul_t(&b)?;
            let z = b.matmul_t(&x)?; // x as the transposed operand
            weighted_sum(t, y, 2)?.add(&weighted_sum(t, z, 3)?)
        }),
        ("add_broadcast", vec![3], |t, x| {
            let a = t.leaf(&random(&[2, 3], 103));
            weighted_sum(t, a.add(&x)?, 4)
        }),
        ("sub", vec![2, 3], |t, x| {
            let a = t.leaf(&random(&[3], 104));
            weighted_sum(t, x.sub(&a)?, 5)
        }),
        ("mul_broadcast", vec![3], |t, x| {
            let a = t.leaf(&random(&[2, 3], 105));
            weighted_sum(t, a.mul(&x)?, 6)
        }),
        ("scale", vec![5], |t, x| weighted_sum(t, x.scale(-1.7), 7)),
        ("softmax", vec![3, 4], |t, x| weighted_sum(t, x.softmax(), 8)),
        ("layer_norm_x", vec![3, 5], |t, x| {
            let g = t.leaf(&random(&[5], 106));
            let b = t.leaf(&random(&[5], 107));
            weighted_sum(t, x.layer_norm(&g, &b)?, 9)
        }),
        ("layer_norm_gain", vec![5], |t, x| {
            let v = t.leaf(&random(&[3, 5], 108));
            let b = t.leaf(&random(&[5], 107));
            weighted_sum(t, v.layer_norm(&x, &b)?, 10)
        }),
        ("layer_norm_bias", vec![5], |t, x| {
            let v = t.leaf(&random(&[3, 5], 108));
            let g = t.leaf(&random(&[5], 106));
            weighted_sum(t, v.layer_norm(&g, &x)?, 11)
        }),
        ("embedding", vec![6, 3], |t, x| weighted_sum(t, t.embedding(x, &[1, 4, 1, 0])?, 12)),
        ("cross_entropy", vec![4, 3], |_, x| x.cross_entropy(&[0, 2, 1, 2])),
        ("permute", vec![2, 3, 4], |t, x| weighted_sum(t, x.permute(&[1, 0, 2])?, 13)),
        ("reshape", vec![2, 6], |t, x| weighted_sum(t, x.reshape(&[3, 4])?, 14)),
        ("concat", vec![2, 3], |t, x| {
            let a = t.leaf(&random(&[2, 2], 109));
            weighted_sum(t, t.concat(&[a, x, x], 1)?, 15)
        }),
        ("slice", vec![4, 3], |t, x| weighted_sum(t, x.slice(0, 1, 2)?, 16)),
        ("mean", vec![7], |t, x| Ok(x.mul(&t.leaf(&random(&[7], 110)))?.mean())),
        ("mse", vec![2, 3], |t, x| x.mse(&t.leaf(&random(&[2, 3], 111)))),
    ];
    let mut out: Vec<Check> = cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape, f))| Check {
            name: name.to_string(),
            report: grad_check(f, &random(&shape, 200 + i as u64), EPS, TOLERANCE).unwrap(),
        })
        .collect();
    // relu on resampled inputs away from the kink
    let x = random_off_kink(&[3, 4], 300, 2e-5);
    out.push(Check {
        name: "relu".into(),
        report: grad_check(|t, x| weighted_sum(t, x.relu(), 17), &x, EPS, TOLERANCE).unwrap(),
    });
    out
}

/// The 2-layer, d=8 model of the gradient suite.
pub fn tiny() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 16,
        max_seq_len: 8,
        num_classes: 3,
    }
}

#[derive(Clone, Copy, Debug)]
enum Store {
    Encoder,
    Adapters,
    Head,
}

struct Fixture {
    base: BaseModel<f64>,
    model: AdaptedModel<f64>,
    mt: Option<MtEncoder<f64>>,
    batch: PairBatch,
}

fn fixture(method: Method, fusion: FusionKind, task: TaskKind) -> Fixture {
    let cfg = tiny();
    let base = BaseModel::<f64>::new(&cfg, task, 5).unwrap();
    let adapter = AdapterConfig {
        rank: 2,
        alpha: 4.0,
        fusion,
        mt_dim: 8,
        ..AdapterConfig::default()
    };
    let mut set = AdapterSet::new(&cfg, method, &adapter, 6).unwrap();
    // A generic point: zero up-projections and tiny down-projections would
    // leave most gradients near the finite-difference noise floor.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (_, t) in set.params_mut().iter_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-0.8..0.8);
        }
    }
    let model = AdaptedModel::new(&base, set);
    let mt = (method == Method::FlareMt).then(|| MtEncoder::new(&mt_config(&cfg, adapter.mt_dim), 8).unwrap());
    let rows: Vec<Vec<usize>> = (0..2).map(|i| random_tokens(4, cfg.vocab_size, 30 + i)).collect();
    let src: Vec<Vec<usize>> = (0..2).map(|i| random_tokens(3, cfg.vocab_size, 40 + i)).collect();
    let refs: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
    let src_refs: Vec<&[usize]> = src.iter().map(Vec::as_slice).collect();
    let targets = match task {
        TaskKind::Classification => Targets::Classes(vec![0, 2]),
        TaskKind::Span => Targets::Spans(vec![(1, 2), (0, 3)]),
    };
    let batch = PairBatch {
        target: TokenBatch::new(&refs).unwrap(),
        source: Some(TokenBatch::new(&src_refs).unwrap()),
        targets,
    };
    Fixture { base, model, mt, batch }
}

fn loss_with<'t>(fx: &Fixture, tape: &'t Tape<f64>, store: Store, id: ParamId, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let mut b = fx.model.bind(&fx.base, tape);
    let slot: &mut Bound<'t, f64> = match store {
        Store::Encoder => &mut b.encoder,
        Store::Adapters => &mut b.adapters,
        Store::Head => &mut b.head,
    };
    slot.replace(id, x);
    let out = fx.model.forward(tape, &fx.base, fx.mt.as_ref(), &b, &fx.batch, SourceInput::Live, None)?;
    out.loss(&fx.batch.targets)
}

fn check_every_param(fx: &Fixture, label: &str, out: &mut Vec<Check>) {
    let stores = [
        (Store::Encoder, fx.base.encoder.params()),
        (Store::Adapters, fx.model.adapters.params()),
        (Store::Head, fx.model.head.params()),
    ];
    for (store, params) in stores {
        for id in params.ids() {
            let x = params.get(id).clone();
            out.push(Check {
                name: format!("{label} {store:?} {}", params.name(id)),
                report: grad_check(|t, v| loss_with(fx, t, store, id, v), &x, EPS, TOLERANCE).unwrap(),
            });
        }
    }
}

/// Every parameter of the full model, for each method and fusion function.
pub fn model_checks() -> Vec<Check> {
    let mut out = Vec::new();
    for fusion in FusionKind::ALL {
        let label = format!("flare {}", fusion.name());
        check_every_param(&fixture(Method::Flare, fusion, TaskKind::Classification), &label, &mut out);
    }
    let rest = [
        (Method::FlareMt, TaskKind::Classification, "flare_mt"),
        (Method::Lora, TaskKind::Span, "lora span"),
        (Method::InputFusion, TaskKind::Classification, "input_fusion"),
        (Method::Xmixup, TaskKind::Classification, "xmixup"),
    ];
    for (method, task, label) in rest {
        check_every_param(&fixture(method, FusionKind::AddRelu, task), label, &mut out);
    }
    out
}
