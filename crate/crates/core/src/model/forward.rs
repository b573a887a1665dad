//! Encoder and decoder stacks written against the computation record.
//!
//! Inference and training share this code path; inference simply discards the
//! record once the needed values are read out.

use super::config::{relative_position_bucket, PAD, START};
use super::params::{AttnIds, FfnIds};
use super::{InjectionMode, InjectionSpec, Model, ModelError};
use crate::numerics::{Scalar, Slot, Tape, Tensor};

/// Large negative score used for masked attention positions.
const MASKED: f64 = -1e9;

/// Slots produced by one decoder pass.
pub(crate) struct DecoderTaps {
    /// Token embeddings entering the first block, `[len, d_model]`.
    pub embedding: Slot,
    /// One entry per block; the last is taken after the final normalization.
    pub layers: Vec<Slot>,
}

impl<T: Scalar> Model<T> {
    /// Registers every parameter tensor on `tape` as a borrowed input.
    pub(crate) fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Vec<Slot> {
        self.params
            .tensors()
            .iter()
            .map(|t| tape.input_ref(t))
            .collect()
    }

    pub(crate) fn check_tokens(&self, ids: &[usize]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(ModelError::Overlength {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn eps(&self) -> T {
        T::lit(super::NORM_EPS)
    }

    /// Position bias for every head plus the additive mask, `[lq, lk]` each.
    fn self_attn_bias<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &[Slot],
        tables: &[usize],
        len: usize,
        bidirectional: bool,
        mask: Vec<T>,
    ) -> Result<Vec<Slot>, ModelError> {
        let c = &self.config;
        let mut buckets = Vec::with_capacity(len * len);
        for q in 0..len {
            for k in 0..len {
                buckets.push(relative_position_bucket(
                    k as i64 - q as i64,
                    bidirectional,
                    c.rel_pos_buckets,
                    c.rel_pos_max_distance,
                ));
            }
        }
        let mask = tape.input(Tensor::new(vec![len, len], mask)?);
        let mut out = Vec::with_capacity(tables.len());
        for &table in tables {
            let bias = tape.gather(p[table], buckets.clone(), vec![len, len])?;
            out.push(tape.add(bias, mask)?);
        }
        Ok(out)
    }

    fn attention<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &[Slot],
        ids: &AttnIds,
        query_in: Slot,
        kv_in: Slot,
        bias: &[Slot],
    ) -> Result<Slot, ModelError> {
        let scale = T::one() / T::lit(self.config.d_head() as f64).sqrt();
        let mut out: Option<Slot> = None;
        for h in 0..self.config.n_heads {
            let q = tape.matmul(query_in, p[ids.q[h]])?;
            let k = tape.matmul(kv_in, p[ids.k[h]])?;
            let v = tape.matmul(kv_in, p[ids.v[h]])?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, bias[h])?;
            let weights = tape.softmax(scores)?;
            let mixed = tape.matmul(weights, v)?;
            let projected = tape.matmul(mixed, p[ids.o[h]])?;
            out = Some(match out {
                None => projected,
                Some(acc) => tape.add(acc, projected)?,
            });
        }
        Ok(out.expect("at least one head"))
    }

    fn feed_forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &[Slot],
        ids: &FfnIds,
        x: Slot,
    ) -> Result<Slot, ModelError> {
        let hidden = tape.matmul(x, p[ids.wi])?;
        let hidden = tape.relu(hidden)?;
        Ok(tape.matmul(hidden, p[ids.wo])?)
    }

    /// Encoder stack; returns the final-normalized states `[len, d_model]`.
    pub(crate) fn encode_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &[Slot],
        ids: &[usize],
    ) -> Result<Slot, ModelError> {
        self.check_tokens(ids)?;
        let len = ids.len();
        let l = &self.layout;
        let mut mask = Vec::with_capacity(len * len);
        for _ in 0..len {
            for &k in ids {
                mask.push(if k == PAD { T::lit(MASKED) } else { T::zero() });
            }
        }
        let bias = self.self_attn_bias(tape, p, &l.enc_bias, len, true, mask)?;
        let mut x = tape.gather(p[l.embed], ids.to_vec(), vec![len])?;
        for layer in &l.enc {
            let normed = tape.rms_norm(x, p[layer.attn_norm], self.eps())?;
            let attn = self.attention(tape, p, &layer.attn, normed, normed, &bias)?;
            x = tape.add(x, attn)?;
            let normed = tape.rms_norm(x, p[layer.ff_norm], self.eps())?;
            let ff = self.feed_forward(tape, p, &layer.ff, normed)?;
            x = tape.add(x, ff)?;
        }
        Ok(tape.rms_norm(x, p[l.enc_final_norm], self.eps())?)
    }

    /// Decoder stack over `prefix` attending to encoder states in slot `enc`.
    pub(crate) fn decode_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &[Slot],
        enc: Slot,
        enc_pad: &[bool],
        prefix: &[usize],
        injection: Option<&InjectionSpec<T>>,
    ) -> Result<DecoderTaps, ModelError> {
        self.check_tokens(prefix)?;
        if prefix[0] != START {
            return Err(ModelError::InvalidPrefix);
        }
        let c = &self.config;
        let l = &self.layout;
        let len = prefix.len();
        let injection = match injection {
            Some(spec) => {
                spec.validate(c.n_dec_layers, c.d_model)?;
                spec.is_active().then_some(spec)
            }
            None => None,
        };

        let mut causal = Vec::with_capacity(len * len);
        for q in 0..len {
            for k in 0..len {
                causal.push(if k > q { T::lit(MASKED) } else { T::zero() });
            }
        }
        let self_bias = self.self_attn_bias(tape, p, &l.dec_bias, len, false, causal)?;
        let mut cross = Vec::with_capacity(len * enc_pad.len());
        for _ in 0..len {
            for &pad in enc_pad {
                cross.push(if pad { T::lit(MASKED) } else { T::zero() });
            }
        }
        let cross_mask = tape.input(Tensor::new(vec![len, enc_pad.len()], cross)?);
        let cross_bias = vec![cross_mask; c.n_heads];

        let embedding = tape.gather(p[l.embed], prefix.to_vec(), vec![len])?;
        let mut x = embedding;
        let mut layers = Vec::with_capacity(c.n_dec_layers);
        for (j, layer) in l.dec.iter().enumerate() {
            let normed = tape.rms_norm(x, p[layer.self_norm], self.eps())?;
            let attn = self.attention(tape, p, &layer.self_attn, normed, normed, &self_bias)?;
            x = tape.add(x, attn)?;
            let normed = tape.rms_norm(x, p[layer.cross_norm], self.eps())?;
            let attn = self.attention(tape, p, &layer.cross_attn, normed, enc, &cross_bias)?;
            x = tape.add(x, attn)?;
            let normed = tape.rms_norm(x, p[layer.ff_norm], self.eps())?;
            let ff = self.feed_forward(tape, p, &layer.ff, normed)?;
            x = tape.add(x, ff)?;
            if j + 1 == c.n_dec_layers {
                x = tape.rms_norm(x, p[l.dec_final_norm], self.eps())?;
            }
            if let Some(spec) = injection.filter(|s| s.layer == j + 1) {
                let offset = injection_rows(spec, len, c.d_model)?;
                let offset = tape.input(offset);
                x = tape.add(x, offset)?;
            }
            layers.push(x);
        }
        Ok(DecoderTaps { embedding, layers })
    }
}

fn injection_rows<T: Scalar>(
    spec: &InjectionSpec<T>,
    len: usize,
    d: usize,
) -> Result<Tensor<T>, ModelError> {
    let offset = spec.offset();
    let mut rows = vec![T::zero(); len * d];
    for pos in 0..len {
        let steer = match spec.mode {
            InjectionMode::EveryStep => true,
            InjectionMode::FirstStep => pos == 0,
        };
        if steer {
            rows[pos * d..(pos + 1) * d].copy_from_slice(offset.data());
        }
    }
    Ok(Tensor::new(vec![len, d], rows)?)
}
