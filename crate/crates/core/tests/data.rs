use std::collections::HashSet;

use flare_core::data::{
    apply_cipher, english_splits, generate_task_corpus, label_rule, low_resource_subsample, make_parallel_splits,
    read_instances, read_pairs, reproject_span, span_rule, write_instances, write_pairs, CipherLanguage, Direction,
    Gold, MtStandin, Provenance, SplitSizes, TaskInstance, TaskSpec, CLS, FIRST_CONTENT, QUERY,
};
use proptest::prelude::*;

fn lang(swap: f64) -> CipherLanguage {
    CipherLanguage::new("xx", 64, swap, 17).unwrap()
}

/// Keyword counts per class, independent of the library's keyword table:
/// class `c` owns ids `4 + 3c .. 4 + 3c + 3`.
fn keyword_counts(tokens: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &t in tokens {
        if (4..4 + 3 * classes).contains(&t) {
            counts[(t - 4) / 3] += 1;
        }
    }
    counts
}

#[test]
fn corpus_is_seeded() {
    let spec = TaskSpec::classification();
    let a = generate_task_corpus(&spec, 50, 1).unwrap();
    assert_eq!(a, generate_task_corpus(&spec, 50, 1).unwrap());
    assert_ne!(a, generate_task_corpus(&spec, 50, 2).unwrap());
    // Instance `i` does not depend on the corpus size.
    assert_eq!(&a[..20], &generate_task_corpus(&spec, 20, 1).unwrap()[..]);
}

#[test]
fn classification_instances_follow_the_rule() {
    let spec = TaskSpec::classification();
    let corpus = generate_task_corpus(&spec, 3000, 3).unwrap();
    let mut per_class = [0usize; 3];
    for inst in &corpus {
        assert_eq!(inst.tokens.len(), 12);
        assert_eq!(inst.tokens[0], CLS);
        assert!(inst.tokens[1..].iter().all(|&t| (FIRST_CONTENT..64).contains(&t)));
        let Gold::Label(y) = inst.gold else { panic!("span gold") };
        let counts = keyword_counts(&inst.tokens, 3);
        assert!((2..=3).contains(&counts[y]), "{counts:?}");
        assert!((0..3).filter(|&c| c != y).all(|c| counts[c] < counts[y]));
        assert_eq!(label_rule(&spec, &inst.tokens), Some(y));
        per_class[y] += 1;
    }
    for n in per_class {
        assert!((900..1100).contains(&n), "{per_class:?}");
    }
}

#[test]
fn span_instances_follow_the_rule() {
    let spec = TaskSpec::span();
    let corpus = generate_task_corpus(&spec, 3000, 4).unwrap();
    let entity = |t: usize| (4..24).contains(&t);
    for inst in &corpus {
        assert_eq!(inst.tokens.len(), 14);
        let Gold::Span(s, e) = inst.gold else { panic!("label gold") };
        assert!(s <= e && e - s < 4);
        assert_eq!(inst.tokens[s - 1], QUERY);
        assert!(inst.tokens[s..=e].iter().all(|&t| entity(t)));
        assert!(e + 1 < 14 && !entity(inst.tokens[e + 1]));
        assert_eq!(inst.tokens.iter().filter(|&&t| t == QUERY).count(), 1);
        assert_eq!(span_rule(&spec, &inst.tokens), Some((s, e)));
    }
}

#[test]
fn invalid_specs_are_config_errors() {
    let bad = TaskSpec {
        vocab_size: 10,
        ..TaskSpec::classification()
    };
    assert!(generate_task_corpus(&bad, 5, 0).unwrap_err().is_config());
    let bad = TaskSpec {
        seq_len: 8,
        ..TaskSpec::span()
    };
    assert!(generate_task_corpus(&bad, 5, 0).unwrap_err().is_config());
    assert!(CipherLanguage::new("en", 64, 0.0, 0).unwrap_err().is_config());
    assert!(CipherLanguage::new("xx", 64, 1.5, 0).unwrap_err().is_config());
    assert!(MtStandin::new(lang(0.0), -0.1).unwrap_err().is_config());
}

#[test]
fn translation_quality_rate() {
    let spec = TaskSpec::classification();
    let corpus = generate_task_corpus(&spec, 2000, 5).unwrap();
    let l = lang(0.0);
    let (mut correct, mut total) = (0usize, 0usize);
    for inst in &corpus {
        let t = apply_cipher(&l, inst, Direction::ToTarget, 0.9, 11).unwrap();
        for (&src, &dst) in inst.tokens.iter().zip(&t.instance.tokens) {
            if src >= FIRST_CONTENT {
                total += 1;
                correct += usize::from(l.encode(src) == dst);
                assert!(dst >= FIRST_CONTENT);
            } else {
                assert_eq!(src, dst);
            }
        }
    }
    let rate = correct as f64 / total as f64;
    assert!((rate - 0.9).abs() <= 0.02, "{rate}");
}

#[test]
fn swap_rate_is_respected() {
    let spec = TaskSpec::classification();
    let corpus = generate_task_corpus(&spec, 2000, 6).unwrap();
    let l = lang(0.3);
    let (mut swapped, mut total) = (0usize, 0usize);
    for inst in &corpus {
        let t = apply_cipher(&l, inst, Direction::ToTarget, 1.0, 12).unwrap();
        swapped += t.alignment.iter().enumerate().filter(|(j, &a)| *j != a).count();
        total += t.alignment.len() - 1;
        let mut sorted = t.alignment.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        for (j, &a) in t.alignment.iter().enumerate() {
            assert_eq!(t.instance.tokens[j], l.encode(inst.tokens[a]));
        }
    }
    // Each transposition moves two tokens; roughly 0.3/(1+0.3) of the
    // eligible positions start one.
    let rate = swapped as f64 / total as f64;
    assert!(rate > 0.3 && rate < 0.6, "{rate}");
}

#[test]
fn exact_round_trip_without_swaps() {
    let spec = TaskSpec::span();
    let l = lang(0.0);
    for inst in generate_task_corpus(&spec, 300, 7).unwrap() {
        let there = apply_cipher(&l, &inst, Direction::ToTarget, 1.0, 1).unwrap();
        assert_eq!(there.instance.language, "xx");
        assert_eq!(there.instance.gold, inst.gold);
        let back = apply_cipher(&l, &there.instance, Direction::ToEnglish, 1.0, 1).unwrap();
        assert_eq!(back.instance, inst);
    }
}

#[test]
fn translation_direction_is_checked() {
    let inst = generate_task_corpus(&TaskSpec::classification(), 1, 0).unwrap().remove(0);
    let l = lang(0.0);
    assert!(apply_cipher(&l, &inst, Direction::ToEnglish, 1.0, 0).is_err());
    let target = apply_cipher(&l, &inst, Direction::ToTarget, 1.0, 0).unwrap().instance;
    assert!(apply_cipher(&l, &target, Direction::ToTarget, 1.0, 0).is_err());
}

#[test]
fn span_reprojection_examples() {
    assert_eq!(reproject_span(&[0, 1, 2, 3], 1, 2), Some((1, 2)));
    assert_eq!(reproject_span(&[0, 2, 1, 3], 1, 2), Some((1, 2)));
    assert_eq!(reproject_span(&[0, 1, 3, 2], 1, 2), None);
    assert_eq!(reproject_span(&[1, 0, 2, 3], 1, 2), None);
}

#[test]
fn valid_reprojected_spans_hold_the_translated_answer() {
    let spec = TaskSpec::span();
    let l = lang(0.3);
    let mut invalid = 0;
    for inst in generate_task_corpus(&spec, 1000, 8).unwrap() {
        let Gold::Span(s, e) = inst.gold else { unreachable!() };
        let t = apply_cipher(&l, &inst, Direction::ToTarget, 1.0, 9).unwrap();
        if !t.span_valid {
            invalid += 1;
            continue;
        }
        let Gold::Span(ns, ne) = t.instance.gold else { unreachable!() };
        let mut got: Vec<usize> = t.instance.tokens[ns..=ne].iter().map(|&x| l.decode(x)).collect();
        let mut want = inst.tokens[s..=e].to_vec();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
    }
    assert!(invalid > 0 && invalid < 500, "{invalid}");
}

fn sizes() -> SplitSizes {
    SplitSizes {
        train: 200,
        validation: 50,
        test: 60,
    }
}

#[test]
fn english_splits_partition_the_corpus() {
    let corpus = generate_task_corpus(&TaskSpec::classification(), 400, 1).unwrap();
    let s = english_splits(&corpus, sizes(), 2).unwrap();
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (200, 50, 60));
    let ids: HashSet<u64> = s.train.iter().chain(&s.validation).chain(&s.test).map(|i| i.id).collect();
    assert_eq!(ids.len(), 310);
    assert!(english_splits(&corpus[..300], sizes(), 2).is_err());
}

#[test]
fn parallel_splits_have_the_right_provenance() {
    let spec = TaskSpec::span();
    let corpus = generate_task_corpus(&spec, 500, 1).unwrap();
    let l = lang(0.1);
    let s = make_parallel_splits(&corpus, &l, 0.9, 0.8, sizes(), 3).unwrap();
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (200, 50, 60));
    let mut ids = HashSet::new();
    for p in &s.train {
        assert_eq!(p.provenance, Provenance::GoldSourceMtTarget);
        assert_eq!(&p.source, &corpus[p.source.id as usize]);
        assert_eq!(p.target.language, "xx");
        assert!(ids.insert(p.source.id));
    }
    for p in s.validation.iter().chain(&s.test) {
        assert_eq!(p.provenance, Provenance::GoldTargetMtSource);
        let gold = apply_cipher(&l, &corpus[p.target.id as usize], Direction::ToTarget, 1.0, 3).unwrap();
        assert_eq!(p.target, gold.instance);
        assert_eq!(p.source.language, "en");
        assert!(ids.insert(p.target.id));
    }
    assert!(make_parallel_splits(&corpus[..300], &l, 0.9, 0.8, sizes(), 3).is_err());
}

#[test]
fn exact_back_translation_recovers_gold_english() {
    let corpus = generate_task_corpus(&TaskSpec::span(), 400, 1).unwrap();
    let s = make_parallel_splits(&corpus, &lang(0.0), 1.0, 1.0, sizes(), 4).unwrap();
    for p in s.test.iter().chain(&s.validation) {
        assert_eq!(&p.source, &corpus[p.source.id as usize]);
    }
}

#[test]
fn low_resource_subsample_is_balanced() {
    let corpus = generate_task_corpus(&TaskSpec::classification(), 500, 1).unwrap();
    let s = make_parallel_splits(&corpus, &lang(0.1), 0.9, 0.9, sizes(), 5).unwrap();
    for k in [10, 31, 100] {
        let sub = low_resource_subsample(&s.train, k, 6).unwrap();
        assert_eq!(sub.len(), k);
        assert_eq!(sub, low_resource_subsample(&s.train, k, 6).unwrap());
        let mut counts = [0usize; 3];
        for p in &sub {
            let Gold::Label(c) = p.target.gold else { unreachable!() };
            counts[c] += 1;
            assert!(s.train.contains(p));
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
        let positions: Vec<usize> = sub.iter().map(|p| s.train.iter().position(|q| q == p).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }
    assert!(low_resource_subsample(&s.train, 201, 6).is_err());
}

#[test]
fn jsonl_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_task_corpus(&TaskSpec::span(), 450, 1).unwrap();
    let path = dir.path().join("en.jsonl");
    write_instances(&path, &corpus).unwrap();
    assert_eq!(read_instances(&path).unwrap(), corpus);
    let text = std::fs::read_to_string(&path).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["schema_version"], 1);
    assert_eq!(header["records"], 450);
    let first: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert_eq!(first["provenance"], "gold");
    assert!(first.get("span").is_some() && first.get("label").is_none());

    let s = make_parallel_splits(&corpus, &lang(0.2), 0.9, 0.9, sizes(), 2).unwrap();
    let path = dir.path().join("pairs.jsonl");
    write_pairs(&path, &s.test).unwrap();
    assert_eq!(read_pairs(&path).unwrap(), s.test);
}

#[test]
fn jsonl_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let record = r#"{"id":0,"tokens":[2,5],"label":1,"language":"en","provenance":"gold"}"#;
    let cases = [
        format!("{{\"schema_version\":2,\"records\":1}}\n{record}\n"),
        format!("{{\"schema_version\":1,\"records\":2}}\n{record}\n"),
        format!("{{\"schema_version\":1,\"records\":1}}\n{}\n", record.replace("}", ",\"extra\":1}")),
        "{\"schema_version\":1,\"records\":1}\n{\"id\":0,\"tokens\":[2],\"language\":\"en\",\"provenance\":\"gold\"}\n"
            .to_string(),
        String::new(),
    ];
    for text in cases {
        std::fs::write(&path, &text).unwrap();
        assert!(read_instances(&path).is_err(), "{text}");
    }
    let ok = format!("{{\"schema_version\":1,\"records\":1}}\n{record}\n");
    std::fs::write(&path, ok).unwrap();
    let got = read_instances(&path).unwrap();
    assert_eq!(
        got,
        vec![TaskInstance {
            id: 0,
            tokens: vec![2, 5],
            gold: Gold::Label(1),
            language: "en".into(),
        }]
    );
}

proptest! {
    #[test]
    fn cipher_is_a_bijection_fixing_reserved_ids(seed in any::<u64>(), vocab in 8usize..200) {
        let l = CipherLanguage::new("zz", vocab, 0.0, seed).unwrap();
        let image: HashSet<usize> = (0..vocab).map(|t| l.encode(t)).collect();
        prop_assert_eq!(image.len(), vocab);
        for t in 0..vocab {
            prop_assert_eq!(l.decode(l.encode(t)), t);
            if t < FIRST_CONTENT {
                prop_assert_eq!(l.encode(t), t);
            }
        }
    }

    #[test]
    fn translation_is_deterministic(seed in any::<u64>(), q in 0.0f64..=1.0) {
        let inst = generate_task_corpus(&TaskSpec::classification(), 3, seed).unwrap().remove(2);
        let l = lang(0.2);
        let a = apply_cipher(&l, &inst, Direction::ToTarget, q, seed).unwrap();
        let b = apply_cipher(&l, &inst, Direction::ToTarget, q, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.instance.gold, inst.gold);
    }
}
