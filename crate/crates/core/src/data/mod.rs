//! Synthetic bilingual benchmarks: an English task generator, cipher target
//! languages, and a quality-controlled translation stand-in.

mod cipher;
mod tasks;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::PairBatch;
use crate::error::{Error, Result};
use crate::model::{Targets, TokenBatch};

pub use cipher::{apply_cipher, reproject_span, CipherLanguage, Direction, LanguageSpec, MtStandin, Translation};
pub use tasks::{
    generate_task_corpus, label_rule, span_rule, TaskSpec, KEYWORDS_PER_CLASS, MAX_ANSWER_LEN, NUM_ENTITIES,
};

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const CLS: usize = 2;
pub const QUERY: usize = 3;
/// Smallest id a cipher may remap.
pub const FIRST_CONTENT: usize = 4;

pub const ENGLISH: &str = "en";
pub const SCHEMA_VERSION: u32 = 1;

/// Seeded stream for one instance, independent of every other instance.
pub(crate) fn instance_rng(seed: u64, id: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gold {
    Label(usize),
    /// Inclusive `(start, end)` token positions.
    Span(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub id: u64,
    pub tokens: Vec<usize>,
    pub gold: Gold,
    pub language: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Generated English, never translated.
    Gold,
    /// Training pair: gold English source, machine-translated target.
    GoldSourceMtTarget,
    /// Evaluation pair: gold target, machine-translated English source.
    GoldTargetMtSource,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: TaskInstance,
    pub target: TaskInstance,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn classification() -> Self {
        SplitSizes {
            train: 2000,
            validation: 300,
            test: 500,
        }
    }

    pub fn span() -> Self {
        SplitSizes {
            train: 1500,
            validation: 200,
            test: 400,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits<P> {
    pub train: Vec<P>,
    pub validation: Vec<P>,
    pub test: Vec<P>,
}

/// Seeded order in which corpus instances are assigned to splits.
fn split_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5911_7));
    order
}

/// English train/validation/test partition of a corpus.
pub fn english_splits(corpus: &[TaskInstance], sizes: SplitSizes, seed: u64) -> Result<Splits<TaskInstance>> {
    if sizes.total() > corpus.len() {
        return Err(Error::contract(format!(
            "corpus of {} cannot fill splits of {}",
            corpus.len(),
            sizes.total()
        )));
    }
    let order = split_order(corpus.len(), seed);
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| corpus[i].clone()).collect();
    Ok(Splits {
        train: take(0..sizes.train),
        validation: take(sizes.train..sizes.train + sizes.validation),
        test: take(sizes.train + sizes.validation..sizes.total()),
    })
}

/// Parallel splits for one target language.
///
/// Training pairs hold gold English and its translation at `q_train`.
/// Evaluation pairs hold the gold target (exact cipher) and its translation
/// back to English at `q_eval`. Pairs whose span cannot be re-projected are
/// skipped, so the corpus must be larger than the requested sizes.
pub fn make_parallel_splits(
    corpus: &[TaskInstance],
    lang: &CipherLanguage,
    q_train: f64,
    q_eval: f64,
    sizes: SplitSizes,
    seed: u64,
) -> Result<Splits<ParallelPair>> {
    let train_mt = MtStandin::new(lang.clone(), q_train)?;
    let eval_mt = MtStandin::new(lang.clone(), q_eval)?;
    let exact = MtStandin::new(lang.clone(), 1.0)?;
    let mut order = split_order(corpus.len(), seed).into_iter();
    let mut fill = |n: usize, train: bool| -> Result<Vec<ParallelPair>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let idx = order.next().ok_or_else(|| {
                Error::contract(format!("corpus of {} exhausted before filling {sizes:?}", corpus.len()))
            })?;
            let english = &corpus[idx];
            let pair = if train {
                let t = train_mt.translate(english, Direction::ToTarget, seed)?;
                t.span_valid.then(|| ParallelPair {
                    source: english.clone(),
                    target: t.instance,
                    provenance: Provenance::GoldSourceMtTarget,
                })
            } else {
                let gold = exact.translate(english, Direction::ToTarget, seed)?;
                let back = eval_mt.translate(&gold.instance, Direction::ToEnglish, seed)?;
                (gold.span_valid && back.span_valid).then(|| ParallelPair {
                    source: back.instance,
                    target: gold.instance,
                    provenance: Provenance::GoldTargetMtSource,
                })
            };
            out.extend(pair);
        }
        Ok(out)
    };
    let train = fill(sizes.train, true)?;
    let validation = fill(sizes.validation, false)?;
    let test = fill(sizes.test, false)?;
    Ok(Splits { train, validation, test })
}

/// Seeded subsample of `k` pairs; class counts differ by at most one
/// whenever the classes are large enough. Original order is kept.
pub fn low_resource_subsample(split: &[ParallelPair], k: usize, seed: u64) -> Result<Vec<ParallelPair>> {
    if k > split.len() {
        return Err(Error::contract(format!("cannot draw {k} of {}", split.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10_4E5);
    let key = |p: &ParallelPair| match p.target.gold {
        Gold::Label(c) => c,
        Gold::Span(..) => 0,
    };
    let classes = split.iter().map(key).max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, p) in split.iter().enumerate() {
        groups[key(p)].push(i);
    }
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    // Round-robin over classes in a seeded order keeps counts within one.
    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut rng);
    let mut cursor = vec![0usize; classes];
    let mut chosen = Vec::with_capacity(k);
    while chosen.len() < k {
        for &c in &class_order {
            if chosen.len() == k {
                break;
            }
            if let Some(&i) = groups[c].get(cursor[c]) {
                chosen.push(i);
                cursor[c] += 1;
            }
        }
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| split[i].clone()).collect())
}

fn targets_of<'a>(instances: impl Iterator<Item = &'a TaskInstance>) -> Result<Targets> {
    let golds: Vec<Gold> = instances.map(|i| i.gold).collect();
    if golds.iter().all(|g| matches!(g, Gold::Label(_))) {
        Ok(Targets::Classes(
            golds.iter().map(|g| if let Gold::Label(c) = g { *c } else { 0 }).collect(),
        ))
    } else if golds.iter().all(|g| matches!(g, Gold::Span(..))) {
        Ok(Targets::Spans(
            golds.iter().map(|g| if let Gold::Span(s, e) = g { (*s, *e) } else { (0, 0) }).collect(),
        ))
    } else {
        Err(Error::contract("batch mixes classification and span instances"))
    }
}

fn token_batch<'a>(instances: impl Iterator<Item = &'a TaskInstance>) -> Result<TokenBatch> {
    let rows: Vec<&[usize]> = instances.map(|i| i.tokens.as_slice()).collect();
    TokenBatch::new(&rows)
}

/// Batch of parallel pairs; gold targets come from the target side.
pub fn pair_batch(pairs: &[&ParallelPair]) -> Result<PairBatch> {
    Ok(PairBatch {
        target: token_batch(pairs.iter().map(|p| &p.target))?,
        source: Some(token_batch(pairs.iter().map(|p| &p.source))?),
        targets: targets_of(pairs.iter().map(|p| &p.target))?,
    })
}

/// Batch of monolingual instances with no source side.
pub fn instance_batch(instances: &[&TaskInstance]) -> Result<PairBatch> {
    Ok(PairBatch {
        target: token_batch(instances.iter().copied())?,
        source: None,
        targets: targets_of(instances.iter().copied())?,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    schema_version: u32,
    records: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    span: Option<[usize; 2]>,
    language: String,
    provenance: Provenance,
}

impl Record {
    fn new(i: &TaskInstance, provenance: Provenance) -> Self {
        let (label, span) = match i.gold {
            Gold::Label(c) => (Some(c), None),
            Gold::Span(s, e) => (None, Some([s, e])),
        };
        Record {
            id: i.id,
            tokens: i.tokens.clone(),
            label,
            span,
            language: i.language.clone(),
            provenance,
        }
    }

    fn into_instance(self) -> Result<(TaskInstance, Provenance)> {
        let gold = match (self.label, self.span) {
            (Some(c), None) => Gold::Label(c),
            (None, Some([s, e])) => Gold::Span(s, e),
            _ => return Err(Error::contract(format!("record {} needs exactly one of label or span", self.id))),
        };
        Ok((
            TaskInstance {
                id: self.id,
                tokens: self.tokens,
                gold,
                language: self.language,
            },
            self.provenance,
        ))
    }
}

fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = FileHeader {
        schema_version: SCHEMA_VERSION,
        records: records.len(),
    };
    let mut emit = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
    emit(serde_json::to_string(&header)?)?;
    for r in records {
        emit(serde_json::to_string(r)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::contract(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: FileHeader = serde_json::from_str(&first)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::contract(format!(
            "{} has schema version {}, expected {SCHEMA_VERSION}",
            path.display(),
            header.schema_version
        )));
    }
    let records = lines
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect::<Result<Vec<Record>>>()?;
    if records.len() != header.records {
        return Err(Error::contract(format!(
            "{} declares {} records, holds {}",
            path.display(),
            header.records,
            records.len()
        )));
    }
    Ok(records)
}

pub fn write_instances(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let records: Vec<Record> = instances.iter().map(|i| Record::new(i, Provenance::Gold)).collect();
    write_records(path, &records)
}

pub fn read_instances(path: &Path) -> Result<Vec<TaskInstance>> {
    read_records(path)?
        .into_iter()
        .map(|r| r.into_instance().map(|(i, _)| i))
        .collect()
}

/// Two records per pair, source first.
pub fn write_pairs(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    let records: Vec<Record> = pairs
        .iter()
        .flat_map(|p| [Record::new(&p.source, p.provenance), Record::new(&p.target, p.provenance)])
        .collect();
    write_records(path, &records)
}

pub fn read_pairs(path: &Path) -> Result<Vec<ParallelPair>> {
    let records = read_records(path)?;
    if records.len() % 2 != 0 {
        return Err(Error::contract(format!("{} holds an unpaired record", path.display())));
    }
    let mut out = Vec::with_capacity(records.len() / 2);
    let mut it = records.into_iter();
    while let (Some(a), Some(b)) = (it.next(), it.next()) {
        let (source, provenance) = a.into_instance()?;
        let (target, _) = b.into_instance()?;
        if source.id != target.id {
            return Err(Error::contract(format!("pair ids differ: {} vs {}", source.id, target.id)));
        }
        out.push(ParallelPair {
            source,
            target,
            provenance,
        });
    }
    Ok(out)
}
