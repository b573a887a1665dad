//! Checks shared by the per-module suites and the acceptance target.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use dashu_float::round::mode::HalfEven;
use dashu_float::FBig;

use steerlab::decoding::{
    contrast_logits, dola_decode, greedy_decode, jsd, rank_of, select_premature_layer, DoLaConfig,
};
use steerlab::model::{InjectionMode, LayerState, ModelConfig};
use steerlab::numerics::{softmax, Slot, Tape, Tensor};
use steerlab::steering::{
    contrastive_loss, mine_vector, steer_decode, ContrastPair, MiningConfig,
};
use steerlab::tasks::{parse_memotrap, serialize_memotrap, TaskError};
use steerlab::{LayerTrace, Model, SteeringVector};

#[derive(Debug)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 8,
        n_enc_layers: 1,
        n_dec_layers: 4,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 12,
        rel_pos_buckets: 8,
        rel_pos_max_distance: 16,
    }
}

pub fn random_model(config: ModelConfig, seed: u64) -> Model {
    Model::new(config, &mut rng(seed)).expect("valid config")
}

/// Random prompt of non-special tokens.
pub fn random_prompt<R: Rng>(rng: &mut R, vocab: usize, max_len: usize) -> Vec<usize> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| rng.gen_range(3..vocab)).collect()
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-7 || diff <= 1e-4 * analytic.abs().max(numeric.abs())
}

// ---------------------------------------------------------------- numerics

type Build = fn(&mut Tape<'_, f64>, &[Slot]) -> Slot;

const PRIMITIVES: [&str; 12] = [
    "matmul",
    "matmul_nt",
    "add",
    "mul",
    "relu",
    "gather_rows",
    "gather_values",
    "rms_norm",
    "softmax",
    "log_softmax",
    "sum",
    "scale",
];

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Inputs for one randomized case and the op that combines them.
fn case(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Build) {
    let mut dim = || rng.gen_range(1..=5usize);
    let (m, k, n) = (dim(), dim(), dim());
    match name {
        "matmul" => (
            vec![randn(rng, &[m, k]), randn(rng, &[k, n])],
            |t, s| t.matmul(s[0], s[1]).unwrap(),
        ),
        "matmul_nt" => (
            vec![randn(rng, &[m, k]), randn(rng, &[n, k])],
            |t, s| t.matmul_nt(s[0], s[1]).unwrap(),
        ),
        "add" => (
            vec![randn(rng, &[m, n]), randn(rng, &[m, n])],
            |t, s| t.add(s[0], s[1]).unwrap(),
        ),
        "mul" => (
            vec![randn(rng, &[m, n]), randn(rng, &[m, n])],
            |t, s| t.mul(s[0], s[1]).unwrap(),
        ),
        "relu" => {
            // Keep clear of the kink so central differences are valid.
            let x = randn(rng, &[m, n]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            (vec![x], |t, s| t.relu(s[0]).unwrap())
        }
        "gather_rows" => (vec![randn(rng, &[4, n])], |t, s| {
            t.gather(s[0], vec![2, 0, 2, 3, 1], vec![5]).unwrap()
        }),
        "gather_values" => (vec![randn(rng, &[6])], |t, s| {
            t.gather(s[0], vec![5, 1, 1, 0], vec![2, 2]).unwrap()
        }),
        "rms_norm" => (
            vec![randn(rng, &[m, n]), randn(rng, &[n])],
            |t, s| t.rms_norm(s[0], s[1], 1e-6).unwrap(),
        ),
        "softmax" => (vec![randn(rng, &[m, n + 1])], |t, s| {
            t.softmax(s[0]).unwrap()
        }),
        "log_softmax" => (vec![randn(rng, &[m, n + 1])], |t, s| {
            t.log_softmax(s[0]).unwrap()
        }),
        "sum" => (vec![randn(rng, &[m, n])], |t, s| t.sum(s[0]).unwrap()),
        "scale" => (vec![randn(rng, &[m, n])], |t, s| t.scale(s[0], -1.7).unwrap()),
        other => unreachable!("{other}"),
    }
}

/// `sum(op(inputs) ⊙ weights)` on a fresh record.
fn weighted_loss(inputs: &[Tensor<f64>], weights: &Tensor<f64>, build: Build) -> f64 {
    let mut tape = Tape::new();
    let slots: Vec<Slot> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &slots);
    let w = tape.input(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.value(loss).unwrap().item().unwrap()
}

/// Entries checked and entries where reverse-mode and central-difference gradients
/// disagree, for one case.
fn check_case(inputs: &[Tensor<f64>], build: Build, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let out_shape = {
        let mut tape = Tape::new();
        let slots: Vec<Slot> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &slots);
        tape.value(out).unwrap().shape().to_vec()
    };
    let weights = randn(rng, &out_shape);
    let mut tape = Tape::new();
    let slots: Vec<Slot> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &slots);
    let w = tape.input(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss, &slots).unwrap();

    let h = 1e-5;
    let (mut checked, mut failed) = (0, 0);
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(slots[i]).expect("gradient for input");
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let numeric =
                (weighted_loss(&plus, &weights, build) - weighted_loss(&minus, &weights, build))
                    / (2.0 * h);
            checked += 1;
            if !close(analytic.data()[e], numeric) {
                failed += 1;
            }
        }
    }
    (checked, failed)
}

/// Finite-difference agreement for every primitive over `cases` randomized inputs each.
pub fn numerics_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = rng(seed);
    let mut worst = Vec::new();
    let mut total = 0;
    for name in PRIMITIVES {
        let mut failed = 0;
        for _ in 0..cases {
            let (inputs, build) = case(name, &mut rng);
            let (c, f) = check_case(&inputs, build, &mut rng);
            total += c;
            failed += f;
        }
        if failed > 0 {
            worst.push(format!("{name}: {failed} entries"));
        }
    }
    Outcome::new(
        worst.is_empty(),
        format!(
            "{} primitives x {cases} cases, {total} entries; mismatches: {}",
            PRIMITIVES.len(),
            if worst.is_empty() {
                "none".to_string()
            } else {
                worst.join(", ")
            }
        ),
    )
}

// ---------------------------------------------------------------- reductions

pub fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// DoLa(λ=0, penalty=1) and steering(α=0) against greedy decoding, bitwise.
pub fn reduction_identities(model: &Model, prompts: usize, seed: u64) -> Outcome {
    let mut rng = rng(seed);
    let n = model.n_dec_layers();
    let vocab = model.config().vocab_size;
    let dola = DoLaConfig {
        lambda: 0.0,
        repetition_penalty: 1.0,
        ..DoLaConfig::for_depth(n)
    };
    let mut mismatches = 0;
    for _ in 0..prompts {
        let prompt = random_prompt(&mut rng, vocab, 10);
        let enc = model.encode(&prompt).unwrap();
        let greedy = greedy_decode(model, &enc, 4).unwrap();
        let contrastive = dola_decode(model, &enc, 4, &dola).unwrap();
        let vector = SteeringVector {
            layer: rng.gen_range(1..=n),
            direction: (0..model.config().d_model)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            n_examples: 1,
        };
        let steered = steer_decode(model, &enc, &vector, 0.0, InjectionMode::EveryStep, 4).unwrap();
        for other in [&contrastive, &steered] {
            if other.tokens != greedy.tokens || bits(&other.first_logits) != bits(&greedy.first_logits)
            {
                mismatches += 1;
            }
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("{prompts} prompts, {mismatches} mismatching decodes"),
    )
}

// ---------------------------------------------------------------- descent

fn pair_loss(model: &Model, pair: &ContrastPair, vector: Option<(&SteeringVector, f64)>) -> f64 {
    let enc = model.encode(&pair.input_tokens).unwrap();
    let spec = vector.map(|(v, alpha)| v.injection(alpha, InjectionMode::EveryStep));
    let logits = model
        .next_logits(&enc, &pair.decoder_prefix, spec.as_ref())
        .unwrap();
    contrastive_loss(&logits, pair).unwrap()
}

/// Sign test of the first-order descent property. Each of `resamples` bootstrap
/// draws of `pairs` is mined at `layer`; the draw passes when its mean contrastive
/// loss is strictly lower with the vector injected at α = 1e-3 than without.
pub fn descent_property(
    model: &Model,
    pairs: &[ContrastPair],
    layer: usize,
    resamples: usize,
    seed: u64,
) -> Outcome {
    let alpha = 1e-3;
    let mut rng = rng(seed);
    let base: Vec<f64> = pairs.iter().map(|p| pair_loss(model, p, None)).collect();
    let mut passed = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..resamples {
        let idx: Vec<usize> = (0..pairs.len()).map(|_| rng.gen_range(0..pairs.len())).collect();
        let draw: Vec<ContrastPair> = idx.iter().map(|&i| pairs[i].clone()).collect();
        let v = mine_vector(model, &MiningConfig { layer, examples: draw }).unwrap();
        let before: f64 = idx.iter().map(|&i| base[i]).sum::<f64>() / idx.len() as f64;
        let after: f64 = idx
            .iter()
            .map(|&i| pair_loss(model, &pairs[i], Some((&v, alpha))))
            .sum::<f64>()
            / idx.len() as f64;
        worst = worst.max(after - before);
        if after < before {
            passed += 1;
        }
    }
    let full = mine_vector(model, &MiningConfig { layer, examples: pairs.to_vec() }).unwrap();
    let per_pair = pairs
        .iter()
        .zip(&base)
        .filter(|&(p, &b)| pair_loss(model, p, Some((&full, alpha))) < b)
        .count();
    Outcome::new(
        passed == resamples,
        format!(
            "layer {layer}: {passed}/{resamples} resamples of {} pairs lower the mean loss (largest change {worst:+.3e}); {per_pair}/{} individual pairs decrease under the full-set vector",
            pairs.len(),
            pairs.len()
        ),
    )
}

// ---------------------------------------------------------------- JSD

pub type Big = FBig<HalfEven, 2>;

/// Exact conversion of an `f64` into a 96-bit binary float.
pub fn big(x: f64) -> Big {
    Big::try_from(x).expect("finite").with_precision(96).value()
}

pub fn to_f64(x: &Big) -> f64 {
    x.to_f64().value()
}

/// Direct high-precision evaluation of the Jensen–Shannon divergence.
pub fn jsd_reference(p: &[f64], q: &[f64]) -> f64 {
    let two = big(2.0);
    let mut total = big(0.0);
    for (&pi, &qi) in p.iter().zip(q) {
        let (pb, qb) = (big(pi), big(qi));
        let sum = &pb + &qb;
        if pi > 0.0 {
            total += &pb * (&two * &pb / &sum).ln();
        }
        if qi > 0.0 {
            total += &qb * (&two * &qb / &sum).ln();
        }
    }
    to_f64(&(total / two))
}

/// Random distribution over `v` outcomes, with some exact zeros when `sparse`.
pub fn random_distribution<R: Rng>(rng: &mut R, v: usize, sparse: bool) -> Vec<f64> {
    let keep = rng.gen_range(0..v);
    let mut w: Vec<f64> = (0..v)
        .map(|i| {
            if sparse && i != keep && rng.gen_bool(0.3) {
                0.0
            } else {
                (rng.gen_range(-4.0..4.0f64)).exp()
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

pub fn jsd_oracle(pairs: usize, seed: u64) -> Outcome {
    let mut rng = rng(seed);
    let (mut worst, mut asym, mut out_of_bounds) = (0.0f64, 0usize, 0usize);
    for i in 0..pairs {
        let v = rng.gen_range(2..=64);
        let p = random_distribution(&mut rng, v, i % 3 == 0);
        let q = random_distribution(&mut rng, v, i % 5 == 0);
        let forward = jsd(&p, &q).unwrap();
        let backward = jsd(&q, &p).unwrap();
        if forward != backward {
            asym += 1;
        }
        if !(0.0..=std::f64::consts::LN_2).contains(&forward) {
            out_of_bounds += 1;
        }
        worst = worst.max((forward - jsd_reference(&p, &q)).abs());
    }
    Outcome::new(
        worst <= 1e-10 && asym == 0 && out_of_bounds == 0,
        format!(
            "{pairs} pairs: max |jsd - reference| = {worst:.2e}, {asym} asymmetric, {out_of_bounds} out of [0, ln 2]"
        ),
    )
}

// ---------------------------------------------------------------- DoLa promotion

pub fn state(logits: Vec<f64>) -> LayerState<f64> {
    let logits = Tensor::from_vec(logits);
    LayerState {
        hidden: Tensor::zeros(&[1]),
        dist: softmax(&logits).unwrap(),
        logits,
    }
}

/// Trace of `n_layers` depths plus the embedding, where every candidate depth holds
/// `final` with the probe lowered by a positive amount and every other token raised
/// by a non-negative amount. The probe's probability therefore rises strictly from
/// each candidate to the final layer, and no other token rises faster.
pub fn promotion_trace<R: Rng>(
    rng: &mut R,
    final_logits: &[f64],
    probe: usize,
    n_layers: usize,
) -> LayerTrace {
    let earlier = |rng: &mut R| {
        let mut l = final_logits.to_vec();
        for (s, v) in l.iter_mut().enumerate() {
            if s == probe {
                *v -= rng.gen_range(0.1..3.0);
            } else {
                *v += rng.gen_range(0.0..1.0);
            }
        }
        state(l)
    };
    let embedding = earlier(rng);
    let mut layers: Vec<LayerState<f64>> = (1..n_layers).map(|_| earlier(rng)).collect();
    layers.push(state(final_logits.to_vec()));
    LayerTrace { embedding, layers }
}

/// `(pre-contrast rank, post-contrast rank)` of `probe` under the default candidates.
pub fn promotion_ranks(trace: &LayerTrace, probe: usize, lambda: f64) -> (usize, usize) {
    let cfg = DoLaConfig {
        lambda,
        ..DoLaConfig::for_depth(trace.n_layers())
    };
    let (m, _) = select_premature_layer(trace, &cfg).unwrap();
    let mature = &trace.final_state().logits;
    let post = contrast_logits(mature, &trace.depth(m).unwrap().logits, lambda).unwrap();
    (rank_of(mature.data(), probe), rank_of(post.data(), probe))
}

pub fn promotion_property(traces: usize, seed: u64) -> Outcome {
    let mut rng = rng(seed);
    let n = 8;
    let candidates: BTreeSet<usize> = DoLaConfig::even_layers(n);
    let mut violations = 0;
    let mut checked = 0;
    for _ in 0..traces {
        let v = rng.gen_range(4..=40);
        let final_logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let probe = rng.gen_range(0..v);
        let trace = promotion_trace(&mut rng, &final_logits, probe, n);
        let q_n = trace.final_state().dist.data()[probe];
        assert!(candidates
            .iter()
            .all(|&j| trace.depth(j).unwrap().dist.data()[probe] < q_n));
        for lambda in [0.5, 1.0, 2.0] {
            let (pre, post) = promotion_ranks(&trace, probe, lambda);
            checked += 1;
            if post > pre {
                violations += 1;
            }
        }
    }
    // Probe fifth at the final layer, sharply rising: contrast lifts it to the top.
    let final_logits = vec![3.0, 2.9, 2.8, 2.7, 2.6, 0.0, 0.0, 0.0];
    let early: Vec<f64> = final_logits
        .iter()
        .enumerate()
        .map(|(s, &v)| if s == 4 { 0.0 } else { v + 0.1 })
        .collect();
    let embedding = state(early.clone());
    let mut layers: Vec<LayerState<f64>> = (1..n).map(|_| state(early.clone())).collect();
    layers.push(state(final_logits));
    let crafted = LayerTrace { embedding, layers };
    let ranks: Vec<(usize, usize)> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&l| promotion_ranks(&crafted, 4, l))
        .collect();
    let lifted = ranks.iter().all(|&(pre, post)| pre == 5 && post == 1);
    Outcome::new(
        violations == 0 && lifted,
        format!(
            "{checked} (trace, λ) checks, {violations} rank regressions; fifth-ranked probe -> ranks {:?}",
            ranks.iter().map(|r| r.1).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- ingestion

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

/// Malformed inputs paired with the 1-based line the parser must report.
pub const MALFORMED: [(&str, usize); 5] = [
    (
        "prompt,classes,answer_index\na,\"[' x', ' y']\",0\nb,\"[' x', ' y']\",5\n",
        3,
    ),
    (
        "prompt,classes,answer_index\na,\"[' x', ' y']\",0\nb,\"[' x', ' y']\",0\nc,\"' x', ' y'\",1\n",
        4,
    ),
    ("prompt,classes,answer_index\na,\"[' x']\",0\n", 2),
    ("prompt,classes,answer_index\na,\"[' x', ' y']\",one\n", 2),
    (
        "prompt,classes,answer_index\na,\"[' x', ' y']\",1\nb,\"[' x', ' y']\"\n",
        3,
    ),
];

pub fn memotrap_ingestion() -> Outcome {
    let path = fixture_path("memotrap_10.csv");
    let original = std::fs::read(&path).expect("fixture present");
    let records = match parse_memotrap(original.as_slice()) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("fixture rejected: {e}")),
    };
    let mut written = Vec::new();
    serialize_memotrap(&records, &mut written).unwrap();
    let identical = written == original;
    let mut wrong_rows = Vec::new();
    for (text, line) in MALFORMED {
        match parse_memotrap(text.as_bytes()) {
            Err(TaskError::Row { row, .. }) if row == line => {}
            other => wrong_rows.push(format!("expected row {line}, got {other:?}")),
        }
    }
    Outcome::new(
        records.len() == 10 && identical && wrong_rows.is_empty(),
        format!(
            "{} rows loaded, byte-identical round trip: {identical}, malformed cases rejected with row numbers: {}/{}",
            records.len(),
            MALFORMED.len() - wrong_rows.len(),
            MALFORMED.len()
        ),
    )
}
