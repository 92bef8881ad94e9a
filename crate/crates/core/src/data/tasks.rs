use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{instance_rng, Gold, TaskInstance, CLS, FIRST_CONTENT, QUERY};
use crate::error::{Error, Result};
use crate::model::TaskKind;

/// Shape of a synthetic task: vocabulary, class count and sequence length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub seq_len: usize,
}

/// Keyword tokens per class in the classification task.
pub const KEYWORDS_PER_CLASS: usize = 3;
/// Longest answer run in the span task.
pub const MAX_ANSWER_LEN: usize = 4;
/// Number of entity token ids in the span task.
pub const NUM_ENTITIES: usize = 20;

impl TaskSpec {
    pub fn classification() -> Self {
        TaskSpec {
            task: TaskKind::Classification,
            vocab_size: 64,
            num_classes: 3,
            seq_len: 12,
        }
    }

    pub fn span() -> Self {
        TaskSpec {
            task: TaskKind::Span,
            vocab_size: 64,
            num_classes: 3,
            seq_len: 14,
        }
    }

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => Self::classification(),
            TaskKind::Span => Self::span(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let keywords = FIRST_CONTENT + KEYWORDS_PER_CLASS * self.num_classes;
        let ok = match self.task {
            TaskKind::Classification => {
                self.num_classes >= 2 && keywords < self.vocab_size && self.seq_len > 3 * self.num_classes
            }
            TaskKind::Span => {
                FIRST_CONTENT + NUM_ENTITIES < self.vocab_size && self.seq_len >= MAX_ANSWER_LEN + 8
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("task spec cannot host the {:?} task: {self:?}", self.task)))
        }
    }

    /// Keyword ids of class `c`.
    pub fn keywords(&self, c: usize) -> std::ops::Range<usize> {
        let start = FIRST_CONTENT + KEYWORDS_PER_CLASS * c;
        start..start + KEYWORDS_PER_CLASS
    }

    pub fn class_of_keyword(&self, token: usize) -> Option<usize> {
        (token >= FIRST_CONTENT && token < FIRST_CONTENT + KEYWORDS_PER_CLASS * self.num_classes)
            .then(|| (token - FIRST_CONTENT) / KEYWORDS_PER_CLASS)
    }

    pub fn is_entity(&self, token: usize) -> bool {
        (FIRST_CONTENT..FIRST_CONTENT + NUM_ENTITIES).contains(&token)
    }
}

/// Seeded corpus of English instances with ids `0..n`.
pub fn generate_task_corpus(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::contract("corpus size must be positive"));
    }
    Ok((0..n as u64)
        .map(|id| {
            let mut rng = instance_rng(seed, id, 0xC0_4905);
            let (tokens, gold) = match spec.task {
                TaskKind::Classification => classification_instance(spec, &mut rng),
                TaskKind::Span => span_instance(spec, &mut rng),
            };
            TaskInstance {
                id,
                tokens,
                gold,
                language: super::ENGLISH.to_string(),
            }
        })
        .collect())
}

/// `[CLS]` then keywords and filler. The winning class has two or three
/// keyword occurrences and every other class strictly fewer.
fn classification_instance(spec: &TaskSpec, rng: &mut impl Rng) -> (Vec<usize>, Gold) {
    let c = spec.num_classes;
    let label = rng.random_range(0..c);
    let top = rng.random_range(2..=3);
    let mut placed = Vec::new();
    for class in 0..c {
        let count = if class == label { top } else { rng.random_range(0..top) };
        for _ in 0..count {
            placed.push(rng.random_range(spec.keywords(class)));
        }
    }
    let filler_start = spec.keywords(c - 1).end;
    let body = spec.seq_len - 1;
    while placed.len() < body {
        placed.push(rng.random_range(filler_start..spec.vocab_size));
    }
    placed.shuffle(rng);
    let mut tokens = Vec::with_capacity(spec.seq_len);
    tokens.push(CLS);
    tokens.extend(placed);
    (tokens, Gold::Label(label))
}

/// `[CLS]`, non-entity filler, a distractor entity run, and `QUERY` followed
/// by the answer run and a non-entity terminator.
fn span_instance(spec: &TaskSpec, rng: &mut impl Rng) -> (Vec<usize>, Gold) {
    let m = spec.seq_len;
    let entities: Vec<usize> = (FIRST_CONTENT..FIRST_CONTENT + NUM_ENTITIES).collect();
    let others: Vec<usize> = (FIRST_CONTENT + NUM_ENTITIES..spec.vocab_size).collect();
    let mut tokens: Vec<usize> = (0..m).map(|_| *others.choose(rng).expect("non-empty")).collect();
    tokens[0] = CLS;
    let answer = rng.random_range(1..=MAX_ANSWER_LEN);
    // QUERY, answer, terminator must fit inside 1..m.
    let q = rng.random_range(1..=m - answer - 2);
    tokens[q] = QUERY;
    for t in &mut tokens[q + 1..=q + answer] {
        *t = *entities.choose(rng).expect("non-empty");
    }
    let busy = |i: usize| i == 0 || (q..=q + answer + 1).contains(&i);
    let distractor = rng.random_range(1..=3);
    // QUERY and the terminator fence the answer, so a distractor outside the
    // busy region can never extend it.
    let starts: Vec<usize> = (1..=m - distractor)
        .filter(|&s| (s..s + distractor).all(|i| !busy(i)))
        .collect();
    if let Some(&s) = starts.choose(rng) {
        for t in &mut tokens[s..s + distractor] {
            *t = *entities.choose(rng).expect("non-empty");
        }
    }
    (tokens, Gold::Span(q + 1, q + answer))
}

/// Recomputes a classification label from tokens: the class with the
/// strictly largest keyword count.
pub fn label_rule(spec: &TaskSpec, tokens: &[usize]) -> Option<usize> {
    let mut counts = vec![0usize; spec.num_classes];
    for &t in tokens {
        if let Some(c) = spec.class_of_keyword(t) {
            counts[c] += 1;
        }
    }
    let max = *counts.iter().max()?;
    let winners: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == max).collect();
    (winners.len() == 1).then(|| winners[0])
}

/// Recomputes a span answer: the maximal entity run right after `QUERY`.
pub fn span_rule(spec: &TaskSpec, tokens: &[usize]) -> Option<(usize, usize)> {
    let q = tokens.iter().position(|&t| t == QUERY)?;
    let run = tokens[q + 1..].iter().take_while(|&&t| spec.is_entity(t)).count();
    (run > 0).then(|| (q + 1, q + run))
}
