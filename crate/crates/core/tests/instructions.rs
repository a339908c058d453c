//! Phrase banks, instruction sampling, pairing and the attribute templater.

use std::collections::BTreeSet;

use irk_core::instruct::attributes::{attribute_to_sentences, VOCABULARY};
use irk_core::instruct::bank::{sha256_hex, BUILTIN_JSON, BUILTIN_SHA256, PHRASES_PER_TASK};
use irk_core::instruct::{
    build_pair, sample_instruction, Instruction, Payload, PhraseBank, Role, TaskKind, TemplateRef,
};
use irk_core::synth::{Dataset, SampleRecord, Split, SynthConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BANK_TASKS: [TaskKind; 3] = [TaskKind::Trad, TaskKind::Cc, TaskKind::Vi];

#[test]
fn banks_are_twenty_distinct_disjoint_phrases() {
    let bank = PhraseBank::builtin().unwrap();
    assert_eq!(sha256_hex(BUILTIN_JSON.as_bytes()), BUILTIN_SHA256);
    let mut all = BTreeSet::new();
    for t in BANK_TASKS {
        let p = bank.phrases(t).unwrap();
        assert_eq!(p.len(), PHRASES_PER_TASK);
        let own: BTreeSet<&String> = p.iter().collect();
        assert_eq!(own.len(), PHRASES_PER_TASK);
        for s in p {
            assert!(all.insert(s.clone()), "{s} appears in two banks");
        }
    }
    assert!(bank.phrases(TaskKind::Trad).unwrap().iter().any(|p| p == "do not change clothes"));
    assert!(bank.phrases(TaskKind::Vi).unwrap().iter().any(|p| p == "retrieve cross-modality images"));
    assert!(bank.phrases(TaskKind::Ctcc).is_none());
}

#[test]
fn tampered_bank_is_rejected() {
    let tampered = BUILTIN_JSON.replacen("do not change clothes", "do not change clothe", 1);
    assert!(PhraseBank::from_json(&tampered, Some(BUILTIN_SHA256)).is_err());
    assert!(PhraseBank::from_json(&tampered, None).is_ok());
}

#[test]
fn bank_draws_are_uniform() {
    // Chi-square with 19 degrees of freedom; 36.19 is the 0.99 quantile.
    let bank = PhraseBank::builtin().unwrap();
    let ds = Dataset::generate(SynthConfig::default()).unwrap();
    let rec = &ds.records[0];
    for t in BANK_TASKS {
        let phrases = bank.phrases(t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64 + 1);
        let mut counts = vec![0usize; PHRASES_PER_TASK];
        let n = 10_000;
        for _ in 0..n {
            let ins = sample_instruction(&bank, t, rec, Role::Query, &[], &mut rng).unwrap();
            let s = &ins.sentences().unwrap()[0];
            counts[phrases.iter().position(|p| p == s).unwrap()] += 1;
        }
        let e = n as f64 / PHRASES_PER_TASK as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 36.191, "{t}: chi-square {chi2}");
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let bank = PhraseBank::builtin().unwrap();
    let ds = Dataset::generate(SynthConfig::default()).unwrap();
    let gallery: Vec<SampleRecord> = ds.split(Split::Gallery).cloned().collect();
    let q = ds.split(Split::Query).next().unwrap();
    for t in TaskKind::ALL {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| sample_instruction(&bank, t, q, Role::Query, &gallery, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }
}

#[test]
fn template_and_language_instructions_follow_the_gallery() {
    let bank = PhraseBank::builtin().unwrap();
    let ds = Dataset::generate(SynthConfig::default()).unwrap();
    let gallery: Vec<SampleRecord> = ds.split(Split::Gallery).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for q in ds.split(Split::Query) {
        let worn: BTreeSet<usize> = gallery.iter().filter(|g| g.identity == q.identity).map(|g| g.clothes).collect();
        let mut drawn = BTreeSet::new();
        for _ in 0..60 {
            let ins = sample_instruction(&bank, TaskKind::Ctcc, q, Role::Query, &gallery, &mut rng).unwrap();
            match ins.payload {
                Payload::Template(TemplateRef::Wardrobe { identity, clothes }) => {
                    assert_eq!(identity, q.identity);
                    drawn.insert(clothes);
                }
                other => panic!("unexpected payload {other:?}"),
            }
        }
        assert_eq!(drawn, worn);
        let li = sample_instruction(&bank, TaskKind::Li, q, Role::Query, &gallery, &mut rng).unwrap();
        let s = li.sentences().unwrap();
        assert!(gallery.iter().any(|g| g.identity == q.identity && g.description == s));
        let g = &gallery[0];
        let own = sample_instruction(&bank, TaskKind::Ctcc, g, Role::Gallery, &gallery, &mut rng).unwrap();
        assert_eq!(own.payload, Payload::Template(TemplateRef::Crop { record: g.index }));
    }
    let q = ds.split(Split::Query).next().unwrap();
    let strangers: Vec<SampleRecord> = gallery.iter().filter(|g| g.identity != q.identity).cloned().collect();
    assert!(sample_instruction(&bank, TaskKind::Li, q, Role::Query, &strangers, &mut rng).is_err());
}

#[test]
fn pairs_bind_consistent_records() {
    let ds = Dataset::generate(SynthConfig::default()).unwrap();
    let train: Vec<&SampleRecord> = ds.split(Split::Train).filter(|r| r.identity == 0).collect();
    let same_clothes = train.iter().find(|r| r.index != train[0].index && r.clothes == train[0].clothes && r.tasks.contains(&TaskKind::Trad)).unwrap();
    let other_clothes = train.iter().find(|r| r.clothes != train[0].clothes && r.tasks.contains(&TaskKind::Ctcc)).unwrap();
    let phrase = Instruction::text(TaskKind::Trad, vec!["do not change clothes".into()]);
    let p = build_pair(train[0], &phrase, same_clothes).unwrap();
    assert_eq!((p.query, p.target), (Some(train[0].index), same_clothes.index));
    assert!(build_pair(train[0], &phrase, other_clothes).is_err());

    let template = Instruction {
        kind: TaskKind::Ctcc,
        payload: Payload::Template(TemplateRef::Wardrobe {
            identity: 0,
            clothes: other_clothes.clothes,
        }),
    };
    assert!(build_pair(train[0], &template, other_clothes).is_ok());
    assert!(build_pair(train[0], &template, same_clothes).is_err());

    let li = Instruction::text(TaskKind::Li, other_clothes.description.clone());
    assert!(build_pair(train[0], &li, other_clothes).is_ok());
    assert!(build_pair(train[0], &li, same_clothes).is_err());

    let t2i = Instruction::text(TaskKind::T2i, other_clothes.description.clone());
    assert_eq!(build_pair(train[0], &t2i, other_clothes).unwrap().query, None);

    let mismatched = Instruction::text(TaskKind::Ctcc, vec!["x".into()]);
    assert!(build_pair(train[0], &mismatched, other_clothes).is_err());
}

#[test]
fn templater_examples() {
    assert_eq!(
        attribute_to_sentences(&["red coat", "black trousers"]).unwrap(),
        vec!["The person wears a red coat and black trousers.".to_string()]
    );
    assert!(attribute_to_sentences::<&str>(&[]).is_err());
    assert!(attribute_to_sentences(&["plaid kilt"]).is_err());
}

fn word_set() -> impl Strategy<Value = BTreeSet<(usize, usize)>> {
    let words: Vec<(usize, usize)> = VOCABULARY
        .iter()
        .enumerate()
        .flat_map(|(a, (_, w))| (0..w.len()).map(move |i| (a, i)))
        .collect();
    prop::collection::btree_set(prop::sample::select(words), 1..8)
}

fn words(set: &BTreeSet<(usize, usize)>) -> Vec<&'static str> {
    set.iter().map(|&(a, i)| VOCABULARY[a].1[i]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn templater_is_injective_and_covers_every_word(a in word_set(), b in word_set()) {
        let (wa, wb) = (words(&a), words(&b));
        let sa = attribute_to_sentences(&wa).unwrap();
        let sb = attribute_to_sentences(&wb).unwrap();
        prop_assert_eq!(a == b, sa == sb);
        let text = sa.join(" ");
        for w in wa {
            prop_assert!(text.contains(w));
        }
    }
}
