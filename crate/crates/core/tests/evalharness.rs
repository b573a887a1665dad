mod support;

use proptest::prelude::*;
use steerlab::decoding::{greedy_decode, DoLaConfig};
use steerlab::evalharness::{
    emit_report, evaluate, records_jsonl, score_example, trace_token, verify_keyword,
    verify_startend, EvalError, SweepReport,
};
use steerlab::model::{InjectionMode, ModelConfig, EOS, START};
use steerlab::steering::sweep;
use steerlab::tasks::{generate_corpus, Corpus, CorpusConfig, TrapExample};
use steerlab::{Condition, Model};
use support::{rng, small_config};

fn setup(seed: u64) -> (Corpus, Model) {
    let corpus = generate_corpus(&CorpusConfig {
        seed,
        n_templates: 40,
        n_mine: 8,
        n_eval: 12,
        n_tuning: 10,
        n_content_words: 30,
        n_ending_words: 12,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        ..small_config()
    };
    let model = Model::new(cfg, &mut rng(seed + 1)).unwrap();
    (corpus, model)
}

fn full_sort_rank(values: &[f64], token: usize) -> usize {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.iter().position(|&t| t == token).unwrap() + 1
}

#[test]
fn scoring_is_strict_first_token() {
    let ex = TrapExample {
        id: 0,
        template_id: 0,
        prompt: vec![3],
        instructed: 10,
        trap: 11,
    };
    assert!(score_example(&[10, EOS], &ex));
    assert!(score_example(&[10, 11], &ex));
    assert!(!score_example(&[11, 10], &ex));
    assert!(!score_example(&[12], &ex));
    assert!(!score_example(&[EOS], &ex));
    assert!(!score_example(&[], &ex));
}

#[test]
fn records_carry_full_sort_ranks() {
    let (corpus, model) = setup(70);
    let result = evaluate(&model, &Condition::Baseline, &corpus.eval, 3).unwrap();
    assert_eq!(result.records.len(), corpus.eval.len());
    let hits = result.records.iter().filter(|r| r.verdict).count();
    assert_eq!(result.accuracy, hits as f64 / corpus.eval.len() as f64);
    for (rec, ex) in result.records.iter().zip(&corpus.eval) {
        let enc = model.encode(&ex.prompt).unwrap();
        let out = greedy_decode(&model, &enc, 3).unwrap();
        let logits = out.first_logits.data();
        assert_eq!(rec.emitted, out.tokens);
        assert_eq!(rec.rank_instructed, full_sort_rank(logits, ex.instructed));
        assert_eq!(rec.rank_trap, full_sort_rank(logits, ex.trap));
        assert_eq!(rec.verdict, score_example(&out.tokens, ex));
    }
}

#[test]
fn accuracy_ignores_example_order() {
    let (corpus, model) = setup(71);
    let forward = evaluate(&model, &Condition::Baseline, &corpus.eval, 2).unwrap();
    let mut reversed = corpus.eval.clone();
    reversed.reverse();
    let backward = evaluate(&model, &Condition::Baseline, &reversed, 2).unwrap();
    assert_eq!(forward.accuracy, backward.accuracy);
}

#[test]
fn neutral_conditions_reproduce_the_baseline() {
    let (corpus, model) = setup(72);
    let base = evaluate(&model, &Condition::Baseline, &corpus.eval, 3).unwrap();
    let dola = Condition::Dola(DoLaConfig {
        lambda: 0.0,
        repetition_penalty: 1.0,
        ..DoLaConfig::for_depth(model.n_dec_layers())
    });
    let dola = evaluate(&model, &dola, &corpus.eval, 3).unwrap();
    let pairs = steerlab::steering::mine_vector(
        &model,
        &steerlab::steering::MiningConfig {
            layer: 2,
            examples: corpus.mining.clone(),
        },
    )
    .unwrap();
    let steered = Condition::Steered {
        vector: pairs,
        alpha: 0.0,
        mode: InjectionMode::EveryStep,
    };
    let steered = evaluate(&model, &steered, &corpus.eval, 3).unwrap();
    for other in [&dola, &steered] {
        assert_eq!(other.accuracy, base.accuracy);
        for (a, b) in other.records.iter().zip(&base.records) {
            assert_eq!(
                (&a.emitted, a.rank_instructed, a.rank_trap),
                (&b.emitted, b.rank_instructed, b.rank_trap)
            );
        }
    }
}

#[test]
fn empty_eval_set_is_an_error() {
    let (_, model) = setup(73);
    assert!(matches!(
        evaluate(&model, &Condition::Baseline, &[], 3),
        Err(EvalError::EmptyEvalSet)
    ));
}

#[test]
fn trace_is_consistent_with_the_output_layer() {
    let (corpus, model) = setup(74);
    let n = model.n_dec_layers();
    for ex in corpus.eval.iter().take(4) {
        let enc = model.encode(&ex.prompt).unwrap();
        let logits = model.next_logits(&enc, &[START], None).unwrap();
        let top = steerlab::decoding::argmax(logits.data());
        for probe in [top, ex.instructed, ex.trap] {
            let trace = trace_token(&model, &ex.prompt, probe).unwrap();
            assert_eq!(trace.rows.iter().map(|r| r.layer).collect::<Vec<_>>(), (1..=n).collect::<Vec<_>>());
            let last = trace.rows.last().unwrap();
            assert_eq!(last.jsd, 0.0);
            assert_eq!(last.rank, full_sort_rank(logits.data(), probe));
            assert!(trace.rows.iter().all(|r| (0.0..=std::f64::consts::LN_2).contains(&r.jsd)));
        }
        assert_eq!(trace_token(&model, &ex.prompt, top).unwrap().rows[n - 1].rank, 1);
    }
    assert!(matches!(
        trace_token(&model, &[4], model.config().vocab_size),
        Err(EvalError::ProbeOutOfRange { .. })
    ));
}

#[test]
fn sweep_grid_is_consistent_and_reports_reproduce() {
    let (corpus, model) = setup(75);
    let alphas = [0.0, 2.0, 8.0];
    let layers = [1, 3];
    let run = || {
        sweep(
            &model,
            &corpus.mining,
            &layers,
            &alphas,
            InjectionMode::EveryStep,
            &corpus.eval,
            2,
        )
        .unwrap()
    };
    let out = run();
    let report = &out.report;
    assert_eq!(report.cell_count(), layers.len() * alphas.len());
    assert_eq!(out.cells.len(), report.cell_count());
    assert_eq!(out.vectors.iter().map(|v| v.layer).collect::<Vec<_>>(), layers);
    for row in &report.grid {
        assert_eq!(row[0], report.baseline_accuracy);
    }
    let max = report.grid.iter().flatten().copied().fold(f64::MIN, f64::max);
    let best = report.best.unwrap();
    assert_eq!(best.accuracy, max);
    let (i, k) = (
        layers.iter().position(|&l| l == best.layer).unwrap(),
        alphas.iter().position(|&a| a == best.alpha).unwrap(),
    );
    assert_eq!(report.grid[i][k], max);
    for (b, row) in report.layer_best().iter().zip(&report.grid) {
        assert_eq!(b.accuracy, row.iter().copied().fold(f64::MIN, f64::max));
    }

    let (parsed, hash) = SweepReport::parse_grid_csv(&report.grid_csv("feed")).unwrap();
    assert_eq!(&parsed, report);
    assert_eq!(hash, "feed");

    let dirs = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut results = vec![out.baseline.clone()];
    results.extend(out.cells.iter().cloned());
    let trace = trace_token(&model, &corpus.eval[0].prompt, corpus.eval[0].trap).unwrap();
    let traces = [(corpus.eval[0].id, trace)];
    let first = emit_report(&results, Some(report), &traces, dirs.0.path(), "feed").unwrap();
    let second_run = run();
    let mut second_results = vec![second_run.baseline.clone()];
    second_results.extend(second_run.cells.iter().cloned());
    let second = emit_report(&second_results, Some(&second_run.report), &traces, dirs.1.path(), "feed").unwrap();
    assert_eq!(first.len(), 4);
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.file_name(), b.file_name());
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    let jsonl = records_jsonl(&results, "feed").unwrap();
    assert_eq!(jsonl.lines().count(), results.len() * corpus.eval.len());
    assert!(jsonl.lines().all(|l| l.contains("\"config_hash\":\"feed\"")));
}

#[test]
fn malformed_grids_are_rejected() {
    assert!(SweepReport::new(vec![1, 2], vec![0.0], vec![vec![0.5]], 0.5).is_err());
    for text in [
        "",
        "layer,0,1\n1,0.5,0.5\n",
        "# baseline=0.5\nlayer,0\n1,0.5\n",
        "# config_hash=x baseline=0.5\nlevel,0\n1,0.5\n",
        "# config_hash=x baseline=0.5\nlayer,0\n1,zero\n",
        "# config_hash=x baseline=0.5\nlayer,0,1\n1,0.5\n",
    ] {
        assert!(SweepReport::parse_grid_csv(text).is_err(), "{text:?}");
    }
}

#[test]
fn verifiers() {
    assert!(verify_startend(&[1, 2, 3], &[2, 3]));
    assert!(!verify_startend(&[1, 2, 3], &[1, 2]));
    assert!(verify_startend(&[1], &[]));
    assert!(verify_keyword(&[4, 5], 5));
    assert!(!verify_keyword(&[], 5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_csv_round_trips(
        grid in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 3), 1..6),
        baseline in 0.0f64..=1.0,
    ) {
        let layers: Vec<usize> = (1..=grid.len()).collect();
        let report = SweepReport::new(layers, vec![0.0, 0.5, 1000.0], grid, baseline).unwrap();
        let (back, _) = SweepReport::parse_grid_csv(&report.grid_csv("h")).unwrap();
        prop_assert_eq!(back, report);
    }
}

#[test]
fn dola_promotes_a_rising_probe_in_random_traces() {
    let outcome = support::promotion_property(300, 76);
    assert!(outcome.passed, "{}", outcome.detail);
}
