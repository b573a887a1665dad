//! Synthetic memorization-trap corpus, memorizer training, and ingestion of
//! MemoTrap-format files.
//!
//! Each template is a short fixed "proverb" prefix with a memorized ending.
//! Pretraining maps the prefix, bare or after a few random content words, to that
//! ending; the wrapper words never occur there. Evaluation and mining prompts wrap
//! the prefix in an instruction naming a different ending, so the instruction and
//! the memorized continuation conflict. A light instruction-tuning set pairs the
//! wrapper with fresh random prefixes so the model learns the format. Optional
//! override examples also wrap background template prefixes.

mod memotrap;
mod train;
mod vocab;

pub use memotrap::{load_memotrap, parse_memotrap, serialize_memotrap, MemoTrapRecord};
pub use train::{memorization_accuracy, train_memorizer, AdamState, TrainConfig, TrainReport};
pub use vocab::{Vocabulary, WRAPPER_HEAD, WRAPPER_TAIL};

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TrainExample, EOS, START};
use crate::steering::ContrastPair;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("insufficient templates: {needed} needed, {available} available")]
    InsufficientTemplates { needed: usize, available: usize },
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("training diverged at step {0}")]
    Diverged(usize),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("corpus file line {line}: {msg}")]
    CorpusFile { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decoding(#[from] crate::decoding::DecodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrapTemplate {
    pub id: usize,
    pub proverb_prefix: Vec<usize>,
    pub memorized_ending: usize,
    pub alternative_endings: Vec<usize>,
}

/// Instruction-wrapped prompt whose instruction conflicts with the memorized ending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrapExample {
    pub id: usize,
    pub template_id: usize,
    pub prompt: Vec<usize>,
    pub instructed: usize,
    pub trap: usize,
}

impl TrapExample {
    pub fn contrast_pair(&self) -> ContrastPair {
        ContrastPair {
            input_tokens: self.prompt.clone(),
            decoder_prefix: vec![START],
            target: self.instructed,
            competing: self.trap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_templates: usize,
    pub n_mine: usize,
    pub n_eval: usize,
    /// Pretraining copies of each template: the bare prefix, then copies preceded
    /// by `1..=max_context_len` random content words.
    pub pretrain_variants: usize,
    pub max_context_len: usize,
    /// Instruction-tuning examples built on fresh random prefixes.
    pub n_tuning: usize,
    /// Instruction-tuning examples per background template whose instruction
    /// overrides the memorized ending, one per alternative ending up to this count.
    pub n_override_per_template: usize,
    pub n_content_words: usize,
    pub n_ending_words: usize,
    pub min_prefix_len: usize,
    pub max_prefix_len: usize,
    pub n_alternatives: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_templates: 500,
            n_mine: 100,
            n_eval: 300,
            pretrain_variants: 4,
            max_context_len: 4,
            n_tuning: 2000,
            n_override_per_template: 0,
            n_content_words: 320,
            n_ending_words: 160,
            min_prefix_len: 4,
            max_prefix_len: 6,
            n_alternatives: 3,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        let needed = self.n_mine + self.n_eval;
        if needed > self.n_templates {
            return Err(TaskError::InsufficientTemplates {
                needed,
                available: self.n_templates,
            });
        }
        if self.min_prefix_len == 0 || self.min_prefix_len > self.max_prefix_len {
            return Err(TaskError::Config("bad prefix length range".into()));
        }
        if self.n_alternatives == 0 || self.n_alternatives >= self.n_ending_words {
            return Err(TaskError::Config(
                "n_alternatives must lie in 1..n_ending_words".into(),
            ));
        }
        if self.pretrain_variants == 0 {
            return Err(TaskError::Config("pretrain_variants must be positive".into()));
        }
        if self.pretrain_variants > 1 && self.max_context_len == 0 {
            return Err(TaskError::Config(
                "context variants need max_context_len > 0".into(),
            ));
        }
        if self.n_override_per_template > self.n_alternatives {
            return Err(TaskError::Config(
                "n_override_per_template exceeds n_alternatives".into(),
            ));
        }
        if self.n_content_words < 2 {
            return Err(TaskError::Config("need at least two content words".into()));
        }
        Ok(())
    }
}

/// Every split of the synthetic experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub templates: Vec<TrapTemplate>,
    /// Prefix, optionally after random context words, → `[memorized_ending, EOS]`.
    pub pretrain: Vec<TrainExample>,
    /// Wrapped prefix → `[instructed, EOS]`: fresh random prefixes first, then
    /// background templates with an overriding instruction.
    pub tuning: Vec<TrainExample>,
    pub mining: Vec<ContrastPair>,
    pub mining_templates: Vec<usize>,
    pub eval: Vec<TrapExample>,
}

fn random_prefix(rng: &mut ChaCha8Rng, vocab: &Vocabulary, cfg: &CorpusConfig) -> Vec<usize> {
    let len = rng.gen_range(cfg.min_prefix_len..=cfg.max_prefix_len);
    let content = vocab.content_ids();
    (0..len).map(|_| rng.gen_range(content.clone())).collect()
}

/// Instructed endings for the mining templates: a permutation of their own
/// memorized endings with no fixed point, so every token is `x⁺` exactly as often
/// as it is `x⁻` across the split.
fn balanced_instructions(
    templates: &[TrapTemplate],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, TaskError> {
    let traps: Vec<usize> = templates.iter().map(|t| t.memorized_ending).collect();
    if traps.is_empty() {
        return Ok(vec![]);
    }
    let mut order: Vec<usize> = (0..traps.len()).collect();
    for _ in 0..1000 {
        order.shuffle(rng);
        // repair collisions by swapping with a compatible partner
        for i in 0..order.len() {
            if traps[order[i]] != traps[i] {
                continue;
            }
            if let Some(j) = (0..order.len()).find(|&j| {
                traps[order[j]] != traps[i] && traps[order[i]] != traps[j]
            }) {
                order.swap(i, j);
            }
        }
        if order.iter().enumerate().all(|(i, &o)| traps[o] != traps[i]) {
            return Ok(order.into_iter().map(|o| traps[o]).collect());
        }
    }
    Err(TaskError::Config(
        "mining templates cannot be paired with distinct endings".into(),
    ))
}

/// Builds all splits from `cfg.seed`. Template order is random; the first
/// `n_mine` templates feed mining, the next `n_eval` feed evaluation, and the
/// remainder are background templates, the only ones that appear wrapped in
/// training.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus, TaskError> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg.n_content_words, cfg.n_ending_words)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let endings: Vec<usize> = vocab.ending_ids().collect();

    let mut seen = HashSet::new();
    let mut templates = Vec::with_capacity(cfg.n_templates);
    let mut attempts = 0usize;
    while templates.len() < cfg.n_templates {
        attempts += 1;
        if attempts > cfg.n_templates * 100 {
            return Err(TaskError::Config("cannot draw enough distinct prefixes".into()));
        }
        let prefix = random_prefix(&mut rng, &vocab, cfg);
        if !seen.insert(prefix.clone()) {
            continue;
        }
        let mut picks = endings.choose_multiple(&mut rng, cfg.n_alternatives + 1);
        let memorized_ending = *picks.next().expect("non-empty");
        let alternative_endings = picks.copied().collect();
        templates.push(TrapTemplate {
            id: templates.len(),
            proverb_prefix: prefix,
            memorized_ending,
            alternative_endings,
        });
    }

    let content = vocab.content_ids();
    let mut pretrain = Vec::with_capacity(cfg.n_templates * cfg.pretrain_variants);
    for t in &templates {
        for variant in 0..cfg.pretrain_variants {
            let mut input = Vec::new();
            if variant > 0 {
                let n = rng.gen_range(1..=cfg.max_context_len);
                input.extend((0..n).map(|_| rng.gen_range(content.clone())));
            }
            input.extend_from_slice(&t.proverb_prefix);
            pretrain.push(TrainExample {
                input,
                target: vec![t.memorized_ending, EOS],
            });
        }
    }

    let trap_example = |id: usize, t: &TrapTemplate, rng: &mut ChaCha8Rng| {
        let instructed = *t.alternative_endings.choose(rng).expect("alternatives");
        TrapExample {
            id,
            template_id: t.id,
            prompt: vocab.wrap(instructed, &t.proverb_prefix),
            instructed,
            trap: t.memorized_ending,
        }
    };
    let mining_templates: Vec<usize> = (0..cfg.n_mine).collect();
    let instructed = balanced_instructions(&templates[..cfg.n_mine], &mut rng)?;
    let mining = templates[..cfg.n_mine]
        .iter()
        .zip(instructed)
        .map(|(t, x)| ContrastPair {
            input_tokens: vocab.wrap(x, &t.proverb_prefix),
            decoder_prefix: vec![START],
            target: x,
            competing: t.memorized_ending,
        })
        .collect();
    let eval = templates[cfg.n_mine..cfg.n_mine + cfg.n_eval]
        .iter()
        .enumerate()
        .map(|(i, t)| trap_example(i, t, &mut rng))
        .collect();

    let mut tuning = Vec::with_capacity(cfg.n_tuning);
    while tuning.len() < cfg.n_tuning {
        let prefix = random_prefix(&mut rng, &vocab, cfg);
        if seen.contains(&prefix) {
            continue;
        }
        let instructed = *endings.choose(&mut rng).expect("endings");
        tuning.push(TrainExample {
            input: vocab.wrap(instructed, &prefix),
            target: vec![instructed, EOS],
        });
    }
    for t in &templates[cfg.n_mine + cfg.n_eval..] {
        for &alt in &t.alternative_endings[..cfg.n_override_per_template] {
            tuning.push(TrainExample {
                input: vocab.wrap(alt, &t.proverb_prefix),
                target: vec![alt, EOS],
            });
        }
    }

    Ok(Corpus {
        vocab,
        templates,
        pretrain,
        tuning,
        mining,
        mining_templates,
        eval,
    })
}

/// One line of the corpus export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusLine {
    Header {
        config_hash: String,
        config: CorpusConfig,
    },
    Template(TrapTemplate),
    Pretrain {
        text: String,
        example: TrainExample,
    },
    Tuning {
        text: String,
        example: TrainExample,
    },
    Mining {
        template_id: usize,
        text: String,
        #[serde(flatten)]
        pair: ContrastPair,
    },
    Eval {
        text: String,
        #[serde(flatten)]
        example: TrapExample,
    },
}

impl Corpus {
    /// Line-delimited JSON: a header, then templates, pretrain, tuning, mining
    /// and eval records in order.
    pub fn write_jsonl<W: Write>(
        &self,
        mut out: W,
        cfg: &CorpusConfig,
        config_hash: &str,
    ) -> Result<(), TaskError> {
        let mut emit = |line: CorpusLine| -> Result<(), TaskError> {
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        emit(CorpusLine::Header {
            config_hash: config_hash.to_string(),
            config: cfg.clone(),
        })?;
        for t in &self.templates {
            emit(CorpusLine::Template(t.clone()))?;
        }
        for ex in &self.pretrain {
            emit(CorpusLine::Pretrain {
                text: self.vocab.decode(&ex.input),
                example: ex.clone(),
            })?;
        }
        for ex in &self.tuning {
            emit(CorpusLine::Tuning {
                text: self.vocab.decode(&ex.input),
                example: ex.clone(),
            })?;
        }
        for (pair, &template_id) in self.mining.iter().zip(&self.mining_templates) {
            emit(CorpusLine::Mining {
                template_id,
                text: self.vocab.decode(&pair.input_tokens),
                pair: pair.clone(),
            })?;
        }
        for ex in &self.eval {
            emit(CorpusLine::Eval {
                text: self.vocab.decode(&ex.prompt),
                example: ex.clone(),
            })?;
        }
        Ok(())
    }

    /// Parses an export written by [`Corpus::write_jsonl`]; returns the corpus,
    /// its config and the embedded config hash.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<(Self, CorpusConfig, String), TaskError> {
        let mut header = None;
        let mut corpus: Option<Corpus> = None;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let bad = |msg: String| TaskError::CorpusFile { line: i + 1, msg };
            let parsed: CorpusLine =
                serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if let CorpusLine::Header {
                config_hash,
                config,
            } = parsed
            {
                if header.is_some() {
                    return Err(bad("second header".into()));
                }
                let vocab = Vocabulary::new(config.n_content_words, config.n_ending_words)?;
                corpus = Some(Corpus {
                    vocab,
                    templates: vec![],
                    pretrain: vec![],
                    tuning: vec![],
                    mining: vec![],
                    mining_templates: vec![],
                    eval: vec![],
                });
                header = Some((config, config_hash));
                continue;
            }
            let c = corpus
                .as_mut()
                .ok_or_else(|| bad("record before header".into()))?;
            match parsed {
                CorpusLine::Header { .. } => unreachable!(),
                CorpusLine::Template(t) => c.templates.push(t),
                CorpusLine::Pretrain { example, .. } => c.pretrain.push(example),
                CorpusLine::Tuning { example, .. } => c.tuning.push(example),
                CorpusLine::Mining {
                    template_id, pair, ..
                } => {
                    c.mining_templates.push(template_id);
                    c.mining.push(pair);
                }
                CorpusLine::Eval { example, .. } => c.eval.push(example),
            }
        }
        let (config, hash) = header.ok_or(TaskError::CorpusFile {
            line: 0,
            msg: "missing header".into(),
        })?;
        Ok((corpus.expect("set with header"), config, hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insufficient_templates() {
        let cfg = CorpusConfig {
            n_templates: 10,
            n_mine: 5,
            n_eval: 6,
            ..Default::default()
        };
        assert!(matches!(
            generate_corpus(&cfg),
            Err(TaskError::InsufficientTemplates { needed: 11, .. })
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = CorpusConfig {
            n_templates: 20,
            n_mine: 5,
            n_eval: 10,
            n_tuning: 7,
            ..Default::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let mut buf = Vec::new();
        corpus.write_jsonl(&mut buf, &cfg, "abc").unwrap();
        let (back, back_cfg, hash) = Corpus::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back_cfg, cfg);
        assert_eq!(hash, "abc");
    }
}
