mod support;

use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use steerlab::model::{ModelConfig, EOS};
use steerlab::tasks::{
    generate_corpus, load_memotrap, memorization_accuracy, parse_memotrap, train_memorizer,
    Corpus, CorpusConfig, TaskError, TrainConfig, WRAPPER_HEAD, WRAPPER_TAIL,
};
use steerlab::Model;
use support::{fixture_path, rng, small_config};

fn small_corpus(seed: u64) -> CorpusConfig {
    CorpusConfig {
        seed,
        n_templates: 40,
        n_mine: 8,
        n_eval: 10,
        n_tuning: 30,
        n_content_words: 30,
        n_ending_words: 12,
        ..CorpusConfig::default()
    }
}

fn export(corpus: &Corpus, cfg: &CorpusConfig) -> Vec<u8> {
    let mut out = Vec::new();
    corpus.write_jsonl(&mut out, cfg, "abc123").unwrap();
    out
}

fn ends_with(haystack: &[usize], needle: &[usize]) -> bool {
    haystack.len() >= needle.len() && haystack[haystack.len() - needle.len()..] == *needle
}

fn check_invariants(cfg: &CorpusConfig) -> Result<(), TestCaseError> {
    let c = generate_corpus(cfg).unwrap();
    let wrapper: HashSet<usize> = WRAPPER_HEAD
        .iter()
        .chain(std::iter::once(&WRAPPER_TAIL))
        .map(|w| c.vocab.id(w).unwrap())
        .collect();
    let prefixes: HashSet<&Vec<usize>> = c.templates.iter().map(|t| &t.proverb_prefix).collect();
    prop_assert_eq!(prefixes.len(), cfg.n_templates);
    for t in &c.templates {
        prop_assert!(!t.alternative_endings.contains(&t.memorized_ending));
        prop_assert!(c.vocab.ending_ids().contains(&t.memorized_ending));
    }

    prop_assert_eq!(c.pretrain.len(), cfg.n_templates * cfg.pretrain_variants);
    for (i, ex) in c.pretrain.iter().enumerate() {
        let t = &c.templates[i / cfg.pretrain_variants];
        prop_assert!(ex.input.iter().all(|w| !wrapper.contains(w)));
        prop_assert!(ends_with(&ex.input, &t.proverb_prefix));
        if i % cfg.pretrain_variants == 0 {
            prop_assert_eq!(&ex.input, &t.proverb_prefix);
        } else {
            let extra = ex.input.len() - t.proverb_prefix.len();
            prop_assert!((1..=cfg.max_context_len).contains(&extra));
        }
        prop_assert_eq!(&ex.target, &vec![t.memorized_ending, EOS]);
    }

    prop_assert_eq!(&c.mining_templates, &(0..cfg.n_mine).collect::<Vec<_>>());
    let held: Vec<&Vec<usize>> = c.templates[..cfg.n_mine + cfg.n_eval]
        .iter()
        .map(|t| &t.proverb_prefix)
        .collect();
    for ex in &c.tuning {
        prop_assert!(!held.iter().any(|p| ends_with(&ex.input, p)));
        prop_assert_eq!(ex.target.len(), 2);
    }
    let mut balance: BTreeMap<usize, i64> = BTreeMap::new();
    for (pair, &tid) in c.mining.iter().zip(&c.mining_templates) {
        let t = &c.templates[tid];
        prop_assert_ne!(pair.target, pair.competing);
        prop_assert_eq!(pair.competing, t.memorized_ending);
        prop_assert_eq!(&pair.input_tokens, &c.vocab.wrap(pair.target, &t.proverb_prefix));
        *balance.entry(pair.target).or_default() += 1;
        *balance.entry(pair.competing).or_default() -= 1;
    }
    prop_assert!(balance.values().all(|&b| b == 0));

    let eval_templates: HashSet<usize> = c.eval.iter().map(|e| e.template_id).collect();
    prop_assert_eq!(eval_templates.len(), cfg.n_eval);
    for e in &c.eval {
        prop_assert!(e.template_id >= cfg.n_mine && e.template_id < cfg.n_mine + cfg.n_eval);
        let t = &c.templates[e.template_id];
        prop_assert_ne!(e.instructed, e.trap);
        prop_assert_eq!(e.trap, t.memorized_ending);
        prop_assert!(t.alternative_endings.contains(&e.instructed));
        prop_assert_eq!(&e.prompt, &c.vocab.wrap(e.instructed, &t.proverb_prefix));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corpus_invariants_hold_for_any_seed(seed in any::<u64>(), variants in 1usize..5, overrides in 0usize..3) {
        check_invariants(&CorpusConfig {
            pretrain_variants: variants,
            n_override_per_template: overrides,
            ..small_corpus(seed)
        })?;
    }
}

#[test]
fn default_corpus_satisfies_invariants() {
    check_invariants(&CorpusConfig::default()).unwrap();
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = small_corpus(7);
    let a = generate_corpus(&cfg).unwrap();
    let b = generate_corpus(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(export(&a, &cfg), export(&b, &cfg));
    let other = generate_corpus(&small_corpus(8)).unwrap();
    assert_ne!(a.templates, other.templates);
}

#[test]
fn jsonl_export_round_trips() {
    let cfg = small_corpus(9);
    let corpus = generate_corpus(&cfg).unwrap();
    let bytes = export(&corpus, &cfg);
    let (back, back_cfg, hash) = Corpus::read_jsonl(bytes.as_slice()).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(back_cfg, cfg);
    assert_eq!(hash, "abc123");
    assert_eq!(export(&back, &back_cfg), bytes);
}

#[test]
fn malformed_exports_report_the_line() {
    let cfg = small_corpus(10);
    let text = String::from_utf8(export(&generate_corpus(&cfg).unwrap(), &cfg)).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "{\"kind\":\"nonsense\"}";
    let joined = lines.join("\n");
    assert!(matches!(
        Corpus::read_jsonl(joined.as_bytes()),
        Err(TaskError::CorpusFile { line: 4, .. })
    ));
    let headless = text.lines().skip(1).collect::<Vec<_>>().join("\n");
    assert!(matches!(
        Corpus::read_jsonl(headless.as_bytes()),
        Err(TaskError::CorpusFile { line: 1, .. })
    ));
}

#[test]
fn invalid_corpus_configs_are_rejected() {
    for cfg in [
        CorpusConfig { n_mine: 30, n_eval: 30, ..small_corpus(0) },
        CorpusConfig { min_prefix_len: 0, ..small_corpus(0) },
        CorpusConfig { pretrain_variants: 0, ..small_corpus(0) },
        CorpusConfig { max_context_len: 0, ..small_corpus(0) },
        CorpusConfig { n_alternatives: 12, ..small_corpus(0) },
        CorpusConfig { n_override_per_template: 4, ..small_corpus(0) },
    ] {
        assert!(generate_corpus(&cfg).is_err(), "{cfg:?}");
    }
}

fn model_for(corpus: &Corpus, seed: u64) -> Model {
    let cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        ..small_config()
    };
    Model::new(cfg, &mut rng(seed)).unwrap()
}

fn quick_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        warmup_steps: 5,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_leave_parameters_untouched() {
    let corpus = generate_corpus(&small_corpus(11)).unwrap();
    let mut model = model_for(&corpus, 12);
    let before = model.params().clone();
    let report = train_memorizer(&mut model, &corpus.pretrain, &corpus.tuning, &quick_train(0)).unwrap();
    assert!(report.loss_curve.is_empty());
    assert_eq!(model.params(), &before);
}

#[test]
fn training_lowers_the_loss_and_is_reproducible() {
    let corpus = generate_corpus(&CorpusConfig { n_templates: 20, n_mine: 4, n_eval: 4, ..small_corpus(13) })
        .unwrap();
    let run = || {
        let mut model = model_for(&corpus, 14);
        let report =
            train_memorizer(&mut model, &corpus.pretrain, &corpus.tuning, &quick_train(150)).unwrap();
        (model, report)
    };
    let (model, report) = run();
    let head: f64 = report.loss_curve[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = report.loss_curve[140..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.6 * head, "{head} -> {tail}");
    assert_eq!(
        report.memorization_accuracy,
        memorization_accuracy(&model, &corpus.pretrain).unwrap()
    );
    let (again, again_report) = run();
    assert_eq!(again_report, report);
    assert_eq!(again.params(), model.params());
}

#[test]
fn invalid_training_configs_are_rejected() {
    let corpus = generate_corpus(&small_corpus(15)).unwrap();
    let mut model = model_for(&corpus, 16);
    for cfg in [
        TrainConfig { batch_size: 0, ..quick_train(1) },
        TrainConfig { learning_rate: 0.0, ..quick_train(1) },
        TrainConfig { tuning_fraction: 1.5, ..quick_train(1) },
        TrainConfig { grad_clip: f64::NAN, ..quick_train(1) },
    ] {
        assert!(train_memorizer(&mut model, &corpus.pretrain, &corpus.tuning, &cfg).is_err());
    }
    assert!(train_memorizer(&mut model, &[], &[], &quick_train(1)).is_err());
}

#[test]
fn memotrap_fixture_loads_and_round_trips() {
    let outcome = support::memotrap_ingestion();
    assert!(outcome.passed, "{}", outcome.detail);
    let records = load_memotrap(&fixture_path("memotrap_10.csv")).unwrap();
    assert!(records.iter().all(|r| r.classes.len() >= 2 && r.answer_index < r.classes.len()));
    assert!(records.last().unwrap().classes[1].contains('\''));
}

#[test]
fn memotrap_records_map_onto_a_vocabulary() {
    let vocab = generate_corpus(&small_corpus(17)).unwrap().vocab;
    let (a, b, c) = (
        vocab.word(10).unwrap(),
        vocab.word(11).unwrap(),
        vocab.word(vocab.ending_ids().start).unwrap(),
    );
    let text = format!(
        "prompt,classes,answer_index\n{a} {b},\"[' {c}', ' {a}']\",0\n{a},\"[' {a} {b}', ' {c}']\",1\n"
    );
    let records = parse_memotrap(text.as_bytes()).unwrap();
    let pair = records[0].to_contrast_pair(&vocab).unwrap();
    assert_eq!(pair.input_tokens, vec![10, 11]);
    assert_eq!((pair.target, pair.competing), (vocab.id(c).unwrap(), 10));
    // a multi-word class has no single-token contrast
    assert!(records[1].to_contrast_pair(&vocab).is_none());
}
