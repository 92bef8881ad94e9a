use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{instance_rng, Gold, TaskInstance, ENGLISH, FIRST_CONTENT};
use crate::error::{Error, Result};

/// Synthetic target language: a bijection over content ids plus a rate of
/// adjacent-token transpositions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CipherLanguage {
    pub name: String,
    pub swap_rate: f64,
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

/// Serializable description from which a [`CipherLanguage`] is rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub name: String,
    pub swap_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToTarget,
    ToEnglish,
}

impl CipherLanguage {
    pub fn new(name: &str, vocab_size: usize, swap_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&swap_rate) {
            return Err(Error::Config(format!("swap_rate {swap_rate} outside [0, 1]")));
        }
        if name == ENGLISH {
            return Err(Error::Config(format!("language name {ENGLISH:?} is reserved")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut content: Vec<usize> = (FIRST_CONTENT..vocab_size).collect();
        content.shuffle(&mut rng);
        let mut forward: Vec<usize> = (0..vocab_size).collect();
        for (src, dst) in (FIRST_CONTENT..vocab_size).zip(content) {
            forward[src] = dst;
        }
        let mut inverse = vec![0; vocab_size];
        for (src, &dst) in forward.iter().enumerate() {
            inverse[dst] = src;
        }
        Ok(CipherLanguage {
            name: name.to_string(),
            swap_rate,
            forward,
            inverse,
        })
    }

    pub fn from_spec(spec: &LanguageSpec, vocab_size: usize) -> Result<Self> {
        Self::new(&spec.name, vocab_size, spec.swap_rate, spec.seed)
    }

    pub fn vocab_size(&self) -> usize {
        self.forward.len()
    }

    pub fn encode(&self, token: usize) -> usize {
        self.forward[token]
    }

    pub fn decode(&self, token: usize) -> usize {
        self.inverse[token]
    }

    pub fn map(&self, token: usize, direction: Direction) -> usize {
        match direction {
            Direction::ToTarget => self.encode(token),
            Direction::ToEnglish => self.decode(token),
        }
    }
}

/// Quality-controlled translation between English and a cipher language.
#[derive(Clone, Debug, PartialEq)]
pub struct MtStandin {
    pub lang: CipherLanguage,
    /// Per-token probability that the correct mapping is applied.
    pub quality: f64,
}

/// Output of [`apply_cipher`].
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub instance: TaskInstance,
    /// `alignment[j]` is the input position that output position `j` came from.
    pub alignment: Vec<usize>,
    /// False when a swap split the answer span from its surroundings.
    pub span_valid: bool,
}

impl MtStandin {
    pub fn new(lang: CipherLanguage, quality: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&quality) {
            return Err(Error::Config(format!("quality {quality} outside [0, 1]")));
        }
        Ok(MtStandin { lang, quality })
    }

    pub fn translate(&self, instance: &TaskInstance, direction: Direction, seed: u64) -> Result<Translation> {
        apply_cipher(&self.lang, instance, direction, self.quality, seed)
    }
}

/// Maps content tokens through the cipher with per-token fidelity `quality`
/// (a wrong token is any other content id), then transposes disjoint pairs
/// of adjacent content tokens at the language's swap rate. Labels carry
/// over; spans are re-projected through the transpositions.
pub fn apply_cipher(
    lang: &CipherLanguage,
    instance: &TaskInstance,
    direction: Direction,
    quality: f64,
    seed: u64,
) -> Result<Translation> {
    let expected_english = direction == Direction::ToTarget;
    if (instance.language == ENGLISH) != expected_english
        || (!expected_english && instance.language != lang.name)
    {
        return Err(Error::contract(format!(
            "cannot translate a {:?} instance {:?}",
            instance.language, direction
        )));
    }
    let salt = match direction {
        Direction::ToTarget => 0x7A_0001,
        Direction::ToEnglish => 0x7A_0002,
    };
    let mut rng = instance_rng(seed, instance.id, salt);
    let v = lang.vocab_size();
    let content = |t: usize| t >= FIRST_CONTENT;
    let mut tokens: Vec<usize> = instance
        .tokens
        .iter()
        .map(|&t| {
            let correct = lang.map(t, direction);
            if !content(t) || quality >= 1.0 || rng.random::<f64>() < quality {
                return correct;
            }
            loop {
                let wrong = rng.random_range(FIRST_CONTENT..v);
                if wrong != correct {
                    break wrong;
                }
            }
        })
        .collect();
    let mut alignment: Vec<usize> = (0..tokens.len()).collect();
    let mut i = 0;
    while i + 1 < tokens.len() {
        if content(tokens[i]) && content(tokens[i + 1]) && lang.swap_rate > 0.0 && rng.random::<f64>() < lang.swap_rate {
            tokens.swap(i, i + 1);
            alignment.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    let (gold, span_valid) = match instance.gold {
        Gold::Label(c) => (Gold::Label(c), true),
        Gold::Span(s, e) => match reproject_span(&alignment, s, e) {
            Some((ns, ne)) => (Gold::Span(ns, ne), true),
            None => (Gold::Span(s, e), false),
        },
    };
    let language = match direction {
        Direction::ToTarget => lang.name.clone(),
        Direction::ToEnglish => ENGLISH.to_string(),
    };
    Ok(Translation {
        instance: TaskInstance {
            id: instance.id,
            tokens,
            gold,
            language,
        },
        alignment,
        span_valid,
    })
}

/// Output span covering the tokens of input span `[start, end]`.
///
/// `None` when a transposition crossed a span boundary, i.e. the output
/// positions of the span's tokens are not exactly one contiguous block
/// holding only span tokens at the original offsets.
pub fn reproject_span(alignment: &[usize], start: usize, end: usize) -> Option<(usize, usize)> {
    let mut out: Vec<usize> = alignment
        .iter()
        .enumerate()
        .filter(|(_, &src)| (start..=end).contains(&src))
        .map(|(j, _)| j)
        .collect();
    out.sort_unstable();
    let (&lo, &hi) = (out.first()?, out.last()?);
    (hi - lo + 1 == out.len() && (lo, hi) == (start, end)).then_some((lo, hi))
}
