use std::collections::HashSet;
use std::io::Write;

use hyperformer_core::tasks::{
    generate, imbalance_profile, ingest_jsonl, render_synthetic, write_jsonl, Generator, TaskError, TaskRegistry,
    TaskSpec, Vocabulary, END, FIRST_CONTENT, PAD, UNK,
};

fn spec(g: Generator, alphabet: usize) -> TaskSpec {
    TaskSpec {
        train_size: 300,
        valid_size: 50,
        test_size: 50,
        ..TaskSpec::new(g, alphabet, 21)
    }
}

fn write(lines: &[&str]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

// ── generators ──────────────────────────────────────────────────────

/// Transformation written independently of the generator code.
fn oracle(g: Generator, src: &[usize], alphabet: usize) -> Vec<usize> {
    match g {
        Generator::Copy => src.to_vec(),
        Generator::Reverse => {
            let mut out = Vec::new();
            for i in (0..src.len()).rev() {
                out.push(src[i]);
            }
            out
        }
        Generator::SortTokens => {
            // Counting sort over the alphabet.
            let mut counts = vec![0; alphabet];
            for &s in src {
                counts[s] += 1;
            }
            (0..alphabet).flat_map(|s| std::iter::repeat(s).take(counts[s])).collect()
        }
        Generator::Shift(k) => src.iter().map(|&s| (s + k) % alphabet).collect(),
        Generator::ModularSum => vec![src.iter().fold(0, |a, &s| (a + s) % alphabet)],
    }
}

#[test]
fn targets_agree_with_independent_oracles() {
    let gens = [
        Generator::Copy,
        Generator::Reverse,
        Generator::SortTokens,
        Generator::Shift(1),
        Generator::Shift(3),
        Generator::ModularSum,
    ];
    for g in gens {
        let s = spec(g, 7);
        let splits = generate(&s, 16).unwrap();
        for ex in splits.train.iter().chain(&splits.valid).chain(&splits.test) {
            let src: Vec<usize> = ex.source.iter().map(|x| x - FIRST_CONTENT).collect();
            let tgt: Vec<usize> = ex.target.iter().map(|x| x - FIRST_CONTENT).collect();
            assert_eq!(tgt, oracle(g, &src, 7), "{g}");
            assert!(!ex.source.is_empty() && !ex.target.is_empty());
            assert!(ex.source.iter().chain(&ex.target).all(|&t| (FIRST_CONTENT..16).contains(&t)));
            assert_eq!(ex.task, g.to_string());
        }
    }
}

#[test]
fn specification_examples() {
    assert_eq!(Generator::Copy.apply(&[3, 7, 2], 10), vec![3, 7, 2]);
    assert_eq!(Generator::Reverse.apply(&[3, 7, 2], 10), vec![2, 7, 3]);
    assert_eq!(Generator::SortTokens.apply(&[3, 7, 2], 10), vec![2, 3, 7]);
}

#[test]
fn splits_are_disjoint_and_deterministic() {
    let s = spec(Generator::Reverse, 8);
    assert!(s.sequence_space() >= 2 * 400);
    let a = generate(&s, 16).unwrap();
    let hash = |xs: &[hyperformer_core::tasks::Example]| -> HashSet<Vec<usize>> {
        xs.iter().map(|e| e.source.clone()).collect()
    };
    let (tr, va, te) = (hash(&a.train), hash(&a.valid), hash(&a.test));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    assert_eq!(a, generate(&s, 16).unwrap());
    let other = TaskSpec { seed: 22, ..s };
    assert_ne!(a.train, generate(&other, 16).unwrap().train);
}

#[test]
fn small_sequence_space_still_generates() {
    let s = TaskSpec {
        min_len: 1,
        max_len: 1,
        ..spec(Generator::Copy, 3)
    };
    let a = generate(&s, 16).unwrap();
    assert_eq!(a.train.len(), 300);
}

#[test]
fn alphabet_must_fit_vocabulary() {
    let s = spec(Generator::Copy, 20);
    assert!(matches!(generate(&s, 16), Err(TaskError::AlphabetTooLarge { .. })));
    assert!("shift-x".parse::<Generator>().is_err());
    assert_eq!("shift-4".parse::<Generator>().unwrap(), Generator::Shift(4));
}

// ── JSONL ───────────────────────────────────────────────────────────

#[test]
fn ingest_well_formed_file() {
    let f = write(&[
        r#"{"task": "greet", "input": "hello world", "target": "hi"}"#,
        r#"{"task": "greet", "input": "good morning", "target": "morning"}"#,
        r#"{"task": "echo", "input": "a b", "target": "a b"}"#,
    ]);
    let mut v = Vocabulary::new();
    let ex = ingest_jsonl(f.path(), &mut v, true).unwrap();
    assert_eq!(ex.len(), 3);
    assert_eq!(v.token(PAD), Some("<pad>"));
    assert_eq!(v.token(END), Some("</s>"));
    assert_eq!(v.token(UNK), Some("<unk>"));
    assert_eq!(ex[0].source, vec![3, 4]);
    assert_eq!(ex[0].target, vec![5]);
    assert_eq!(ex[1].target, vec![7]);
    assert_eq!(ex[2].task, "echo");

    let mut again = Vocabulary::new();
    assert_eq!(ingest_jsonl(f.path(), &mut again, true).unwrap(), ex);
    assert_eq!(again, v);

    // A frozen vocabulary maps new tokens to UNK.
    let g = write(&[r#"{"task": "greet", "input": "hello there", "target": "hi"}"#]);
    let ex = ingest_jsonl(g.path(), &mut v, false).unwrap();
    assert_eq!(ex[0].source, vec![3, UNK]);
}

#[test]
fn malformed_line_is_reported() {
    let f = write(&[
        r#"{"task": "t", "input": "a", "target": "b"}"#,
        r#"{"task": "t", "input": "a"}"#,
        r#"{"task": "t", "input": "a", "target": "b"}"#,
    ]);
    match ingest_jsonl(f.path(), &mut Vocabulary::new(), true) {
        Err(e @ TaskError::Malformed { line: 2, .. }) => assert!(e.to_string().contains(":2:")),
        other => panic!("expected a line-2 error, got {other:?}"),
    }
    let g = write(&["not json"]);
    assert!(matches!(ingest_jsonl(g.path(), &mut Vocabulary::new(), true), Err(TaskError::Malformed { line: 1, .. })));
}

#[test]
fn export_and_reingest_round_trip() {
    let s = spec(Generator::Shift(2), 6);
    let splits = generate(&s, 16).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&splits.test, render_synthetic, &mut buf).unwrap();
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(&buf).unwrap();
    let back = ingest_jsonl(f.path(), &mut Vocabulary::new(), true).unwrap();
    assert_eq!(back.len(), splits.test.len());
    for (a, b) in back.iter().zip(&splits.test) {
        assert_eq!(a.task, b.task);
        assert_eq!(a.source.len(), b.source.len());
        assert_eq!(a.target.len(), b.target.len());
    }
}

#[test]
fn registry_from_examples_groups_by_task() {
    let f = write(&[
        r#"{"task": "b", "input": "x", "target": "y"}"#,
        r#"{"task": "a", "input": "x", "target": "y"}"#,
        r#"{"task": "b", "input": "y", "target": "x"}"#,
    ]);
    let ex = ingest_jsonl(f.path(), &mut Vocabulary::new(), true).unwrap();
    let reg = TaskRegistry::from_examples(ex.clone(), ex.clone(), ex);
    assert_eq!(reg.names().len(), 2);
    let b = reg.id_of("b").unwrap();
    assert_eq!(reg.task(b).splits.train.len(), 2);
}

// ── imbalance ───────────────────────────────────────────────────────

#[test]
fn imbalance_profiles() {
    let specs = [spec(Generator::Copy, 8), spec(Generator::Reverse, 8), spec(Generator::Shift(1), 8)];
    let reg = imbalance_profile(&specs, &[4000, 400, 400], 16).unwrap();
    let p = reg.size_proportions();
    for (x, want) in p.iter().zip([10.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0]) {
        assert!((x - want).abs() < 1e-15);
    }
    let reg = imbalance_profile(&specs, &[300, 300, 300], 16).unwrap();
    assert!(reg.size_proportions().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    let reg = imbalance_profile(&specs[..1], &[50], 16).unwrap();
    assert_eq!(reg.size_proportions(), vec![1.0]);
    assert!(imbalance_profile(&specs, &[1, 2], 16).is_err());
}
