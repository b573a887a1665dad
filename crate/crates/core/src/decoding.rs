//! Greedy decoding and contrastive decoding across decoder depths.
//!
//! At every step the contrastive decoder projects each candidate depth through the
//! shared LM head, picks the depth whose next-token distribution diverges most
//! (Jensen–Shannon) from the final one, and amplifies the final-minus-premature
//! logit difference before applying the repetition penalty.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EncoderStates, InjectionSpec, LayerTrace, Model, ModelError, EOS, START};
use crate::numerics::{Scalar, Tensor};

/// Floor applied to probabilities inside the KL terms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Logit assigned to tokens removed by the plausibility filter.
const FILTERED: f64 = -1e30;
/// Number of tokens listed in per-step diagnostics.
pub const TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum DecodingError {
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid contrastive config: {0}")]
    Config(String),
    #[error("max_len must be at least 1")]
    ZeroLength,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Contrastive decoding settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoLaConfig {
    /// Candidate premature depths. Depth 0 is the token embedding; depth `j ≥ 1` is
    /// the output of decoder block `j`. The final block is never a candidate.
    #[serde(default = "default_candidates")]
    pub candidate_layers: BTreeSet<usize>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_penalty")]
    pub repetition_penalty: f64,
    #[serde(default)]
    pub plausibility_alpha: Option<f64>,
}

fn default_candidates() -> BTreeSet<usize> {
    DoLaConfig::even_layers(8)
}

fn default_lambda() -> f64 {
    1.0
}

fn default_penalty() -> f64 {
    1.2
}

impl Default for DoLaConfig {
    /// Settings for the eight-layer toy decoder.
    fn default() -> Self {
        Self::for_depth(8)
    }
}

impl DoLaConfig {
    /// Even depths `0, 2, 4, …` below the final block.
    pub fn even_layers(n_dec_layers: usize) -> BTreeSet<usize> {
        (0..n_dec_layers).step_by(2).collect()
    }

    pub fn for_depth(n_dec_layers: usize) -> Self {
        Self {
            candidate_layers: Self::even_layers(n_dec_layers),
            lambda: default_lambda(),
            repetition_penalty: default_penalty(),
            plausibility_alpha: None,
        }
    }

    pub fn validate(&self, n_dec_layers: usize) -> Result<(), DecodingError> {
        if self.candidate_layers.is_empty() {
            return Err(DecodingError::Config("empty candidate set".into()));
        }
        if let Some(&j) = self.candidate_layers.iter().find(|&&j| j >= n_dec_layers) {
            return Err(DecodingError::Config(format!(
                "candidate layer {j} not below the final layer {n_dec_layers}"
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DecodingError::Config("lambda must be finite and >= 0".into()));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(DecodingError::Config("repetition_penalty must be >= 1".into()));
        }
        if let Some(a) = self.plausibility_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(DecodingError::Config(
                    "plausibility_alpha must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Diagnostics for one emitted token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub token: usize,
    pub premature_layer: Option<usize>,
    /// `(candidate depth, JSD(q_N, q_j))` in ascending depth order.
    pub jsd: Vec<(usize, f64)>,
    pub top_pre: Vec<(usize, f64)>,
    pub top_post: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult<T> {
    pub tokens: Vec<usize>,
    pub steps: Vec<StepDiagnostics>,
    /// Logits the first token was chosen from, after all adjustments.
    pub first_logits: Tensor<T>,
}

impl<T> DecodeResult<T> {
    /// Writes one JSON record per step.
    pub fn write_diagnostics<W: Write>(&self, mut out: W) -> Result<(), DecodingError> {
        for step in &self.steps {
            serde_json::to_writer(&mut out, step).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn check_distribution<T: Scalar>(p: &[T], name: &str) -> Result<(), DecodingError> {
    let tol = (T::epsilon().as_f64() * p.len() as f64).max(1e-9);
    let mut total = 0.0;
    for &v in p {
        let v = v.as_f64();
        if !(v >= 0.0) || !v.is_finite() {
            return Err(DecodingError::NotADistribution(format!(
                "{name} has entry {v}"
            )));
        }
        total += v;
    }
    if (total - 1.0).abs() > tol {
        return Err(DecodingError::NotADistribution(format!(
            "{name} sums to {total}"
        )));
    }
    Ok(())
}

fn kl_to_mixture<T: Scalar>(p: &[T], q: &[T]) -> T {
    let floor = T::lit(PROB_FLOOR);
    let half = T::lit(0.5);
    let mut total = T::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > T::zero() {
            let m = half * (pi + qi);
            total += pi * (pi.max(floor).ln() - m.max(floor).ln());
        }
    }
    total
}

/// Jensen–Shannon divergence in nats, clamped to `[0, ln 2]`.
pub fn jsd<T: Scalar>(p: &[T], q: &[T]) -> Result<T, DecodingError> {
    if p.len() != q.len() {
        return Err(DecodingError::LengthMismatch(p.len(), q.len()));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let half = T::lit(0.5);
    let value = half * kl_to_mixture(p, q) + half * kl_to_mixture(q, p);
    Ok(value.max(T::zero()).min(T::lit(std::f64::consts::LN_2)))
}

/// Candidate depth maximizing `JSD(q_N, q_j)`; ties go to the smallest depth.
/// Also returns every candidate's divergence.
pub fn select_premature_layer<T: Scalar>(
    trace: &LayerTrace<T>,
    config: &DoLaConfig,
) -> Result<(usize, Vec<(usize, T)>), DecodingError> {
    config.validate(trace.n_layers())?;
    let mature = trace.final_state().dist.data();
    let mut best: Option<(usize, T)> = None;
    let mut all = Vec::with_capacity(config.candidate_layers.len());
    for &j in &config.candidate_layers {
        let state = trace
            .depth(j)
            .ok_or_else(|| DecodingError::Config(format!("trace has no depth {j}")))?;
        let d = jsd(mature, state.dist.data())?;
        all.push((j, d));
        if best.map_or(true, |(_, b)| d > b) {
            best = Some((j, d));
        }
    }
    let (m, _) = best.ok_or_else(|| DecodingError::Config("empty candidate set".into()))?;
    Ok((m, all))
}

/// `ℓ_N + λ(ℓ_N − ℓ_M)`.
pub fn contrast_logits<T: Scalar>(
    mature: &Tensor<T>,
    premature: &Tensor<T>,
    lambda: T,
) -> Result<Tensor<T>, DecodingError> {
    if mature.len() != premature.len() {
        return Err(DecodingError::LengthMismatch(mature.len(), premature.len()));
    }
    if lambda == T::zero() {
        return Ok(mature.clone());
    }
    let data = mature
        .data()
        .iter()
        .zip(premature.data())
        .map(|(&n, &m)| n + lambda * (n - m))
        .collect();
    Ok(Tensor::new(mature.shape().to_vec(), data).expect("same shape"))
}

/// Divides positive logits and multiplies non-positive logits of every token
/// already generated by `penalty`.
pub fn apply_repetition_penalty<T: Scalar>(
    logits: &Tensor<T>,
    history: &[usize],
    penalty: T,
) -> Tensor<T> {
    let mut out = logits.clone();
    if penalty == T::one() {
        return out;
    }
    let seen: BTreeSet<usize> = history.iter().copied().collect();
    let data = out.data_mut();
    for t in seen {
        if let Some(v) = data.get_mut(t) {
            *v = if *v > T::zero() { *v / penalty } else { *v * penalty };
        }
    }
    out
}

/// Masks tokens whose final-layer probability is below `alpha · max q_N`.
pub fn plausibility_filter<T: Scalar>(
    logits: &Tensor<T>,
    mature_dist: &Tensor<T>,
    alpha: T,
) -> Tensor<T> {
    let max = mature_dist
        .data()
        .iter()
        .fold(T::zero(), |m, &v| m.max(v));
    let cutoff = alpha * max;
    let data = logits
        .data()
        .iter()
        .zip(mature_dist.data())
        .map(|(&l, &p)| if p < cutoff { T::lit(FILTERED) } else { l })
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// 1-based rank of `token`; ties ordered by ascending token id.
pub fn rank_of<T: Scalar>(values: &[T], token: usize) -> usize {
    let target = values[token];
    1 + values
        .iter()
        .enumerate()
        .filter(|&(u, &v)| v > target || (v == target && u < token))
        .count()
}

/// The `k` highest entries, best first, ties by ascending id.
pub fn top_k<T: Scalar>(values: &[T], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.into_iter()
        .take(k)
        .map(|i| (i, values[i].as_f64()))
        .collect()
}

/// Greedy decoding with an optional steering injection active at every step.
pub(crate) fn greedy_with<T: Scalar>(
    model: &Model<T>,
    enc: &EncoderStates<T>,
    max_len: usize,
    injection: Option<&InjectionSpec<T>>,
) -> Result<DecodeResult<T>, DecodingError> {
    if max_len == 0 {
        return Err(DecodingError::ZeroLength);
    }
    let mut prefix = vec![START];
    let mut steps = Vec::new();
    let mut first_logits = None;
    for step in 0..max_len {
        let logits = model.next_logits(enc, &prefix, injection)?;
        let token = argmax(logits.data());
        let top = top_k(logits.data(), TOP_K);
        steps.push(StepDiagnostics {
            step,
            token,
            premature_layer: None,
            jsd: vec![],
            top_pre: top.clone(),
            top_post: top,
        });
        first_logits.get_or_insert(logits);
        prefix.push(token);
        if token == EOS {
            break;
        }
    }
    Ok(DecodeResult {
        tokens: prefix[1..].to_vec(),
        steps,
        first_logits: first_logits.expect("at least one step"),
    })
}

/// Argmax decoding until `EOS` or `max_len` tokens.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    enc: &EncoderStates<T>,
    max_len: usize,
) -> Result<DecodeResult<T>, DecodingError> {
    greedy_with(model, enc, max_len, None)
}

/// Contrastive decoding: select premature depth, contrast, optional plausibility
/// mask, repetition penalty, argmax.
pub fn dola_decode<T: Scalar>(
    model: &Model<T>,
    enc: &EncoderStates<T>,
    max_len: usize,
    config: &DoLaConfig,
) -> Result<DecodeResult<T>, DecodingError> {
    config.validate(model.n_dec_layers())?;
    if max_len == 0 {
        return Err(DecodingError::ZeroLength);
    }
    let lambda = T::lit(config.lambda);
    let penalty = T::lit(config.repetition_penalty);
    let mut prefix = vec![START];
    let mut steps = Vec::new();
    let mut first_logits = None;
    for step in 0..max_len {
        let (mature, trace) = model.decode_step(enc, &prefix, None)?;
        let (m, divergences) = select_premature_layer(&trace, config)?;
        let premature = &trace.depth(m).expect("validated depth").logits;
        let mut logits = contrast_logits(&mature, premature, lambda)?;
        if let Some(alpha) = config.plausibility_alpha {
            logits = plausibility_filter(&logits, &trace.final_state().dist, T::lit(alpha));
        }
        let logits = apply_repetition_penalty(&logits, &prefix[1..], penalty);
        let token = argmax(logits.data());
        steps.push(StepDiagnostics {
            step,
            token,
            premature_layer: Some(m),
            jsd: divergences
                .into_iter()
                .map(|(j, d)| (j, d.as_f64()))
                .collect(),
            top_pre: top_k(mature.data(), TOP_K),
            top_post: top_k(logits.data(), TOP_K),
        });
        first_logits.get_or_insert(logits);
        prefix.push(token);
        if token == EOS {
            break;
        }
    }
    Ok(DecodeResult {
        tokens: prefix[1..].to_vec(),
        steps,
        first_logits: first_logits.expect("at least one step"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsd_identity_and_disjoint() {
        let p = [0.2f64, 0.3, 0.5];
        assert!(jsd(&p, &p).unwrap() <= 1e-12);
        let a = [1.0f64, 0.0];
        let b = [0.0f64, 1.0];
        assert!((jsd(&a, &b).unwrap() - std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn jsd_two_point_case() {
        // mpmath, 40 digits
        let expected = 0.101_749_225_079_196_69;
        let v = jsd(&[0.5f64, 0.5], &[0.9, 0.1]).unwrap();
        assert!((v - expected).abs() < 1e-15, "{v}");
    }

    #[test]
    fn jsd_rejects_non_distribution() {
        assert!(jsd(&[0.5f64, 0.6], &[0.5, 0.5]).is_err());
        assert!(jsd(&[1.5f64, -0.5], &[0.5, 0.5]).is_err());
        assert!(jsd(&[1.0f64], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn contrast_cases() {
        let n = Tensor::from_vec(vec![2.0f64, 1.0]);
        let m = Tensor::from_vec(vec![0.0f64, 3.0]);
        assert_eq!(contrast_logits(&n, &m, 1.0).unwrap().data(), &[4.0, -1.0]);
        assert_eq!(contrast_logits(&n, &m, 0.0).unwrap(), n);
        assert_eq!(contrast_logits(&n, &n, 3.5).unwrap(), n);
    }

    #[test]
    fn repetition_penalty_rule() {
        let logits = Tensor::from_vec(vec![3.0f64, -3.0, 1.0, 0.0]);
        assert_eq!(apply_repetition_penalty(&logits, &[0, 1], 1.0), logits);
        assert_eq!(apply_repetition_penalty(&logits, &[], 1.2), logits);
        let out = apply_repetition_penalty(&logits, &[0, 1, 1], 1.2);
        assert!((out.data()[0] - 2.5).abs() < 1e-12);
        assert!((out.data()[1] + 3.6).abs() < 1e-12);
        assert_eq!(out.data()[2], 1.0);
        assert_eq!(out.data()[3], 0.0);
    }

    #[test]
    fn argmax_and_rank_ties() {
        let v = [1.0f64, 3.0, 3.0, 0.5];
        assert_eq!(argmax(&v), 1);
        assert_eq!(rank_of(&v, 1), 1);
        assert_eq!(rank_of(&v, 2), 2);
        assert_eq!(rank_of(&v, 3), 4);
        assert_eq!(top_k(&v, 2), vec![(1, 3.0), (2, 3.0)]);
    }

    #[test]
    fn config_validation() {
        let mut c = DoLaConfig::for_depth(8);
        assert_eq!(c.candidate_layers, [0, 2, 4, 6].into_iter().collect());
        c.validate(8).unwrap();
        c.candidate_layers.insert(8);
        assert!(c.validate(8).is_err());
        let mut c = DoLaConfig::for_depth(8);
        c.candidate_layers.clear();
        assert!(c.validate(8).is_err());
        let mut c = DoLaConfig::for_depth(8);
        c.repetition_penalty = 0.9;
        assert!(c.validate(8).is_err());
    }

    #[test]
    fn plausibility_masks_unlikely_tokens() {
        let logits = Tensor::from_vec(vec![1.0f64, 2.0, 3.0]);
        let dist = Tensor::from_vec(vec![0.05f64, 0.45, 0.5]);
        let out = plausibility_filter(&logits, &dist, 0.5);
        assert_eq!(out.data()[0], FILTERED);
        assert_eq!(&out.data()[1..], &[2.0, 3.0]);
    }
}
