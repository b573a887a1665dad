//! Scoring of trap prompts, layerwise rank traces, and report files.
//!
//! Report files written by [`emit_report`]:
//!
//! * `sweep_grid.csv`: a `# config_hash=<hex> baseline=<acc>` line, a header row
//!   `layer,<α₁>,<α₂>,…`, then one row per layer of accuracies.
//! * `sweep_layer_best.csv`: a hash line, then `layer,alpha,accuracy` with the
//!   best α per layer.
//! * `records.jsonl`: one [`ExampleRecord`] per line, tagged with the config hash.
//! * `trace_<example>_<token>.csv`: a hash line, then `layer,rank,jsd` rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::{dola_decode, greedy_decode, jsd, rank_of, DecodingError, DoLaConfig};
use crate::model::{InjectionMode, Model, ModelError, START};
use crate::numerics::Scalar;
use crate::steering::{steer_decode, SteeringError, SteeringVector};
use crate::tasks::{TrapExample, Vocabulary};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("probe token {probe} outside vocabulary of {vocab_size}")]
    ProbeOutOfRange { probe: usize, vocab_size: usize },
    #[error("malformed report: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decoding(#[from] DecodingError),
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Decoding condition under evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition<T> {
    Baseline,
    Dola(DoLaConfig),
    Steered {
        vector: SteeringVector<T>,
        alpha: T,
        mode: InjectionMode,
    },
}

impl<T: Scalar> Condition<T> {
    pub fn label(&self) -> String {
        match self {
            Condition::Baseline => "baseline".into(),
            Condition::Dola(_) => "dola".into(),
            Condition::Steered { vector, alpha, .. } => {
                format!("steered(l={},alpha={})", vector.layer, alpha.as_f64())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example_id: usize,
    pub condition: String,
    pub emitted: Vec<usize>,
    pub verdict: bool,
    /// 1-based ranks of `x⁺` and `x⁻` in the logits that chose the first token.
    pub rank_instructed: usize,
    pub rank_trap: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub condition: String,
    pub accuracy: f64,
    pub records: Vec<ExampleRecord>,
}

/// Instruction followed iff the first non-special emitted token is `x⁺`.
pub fn score_example(emitted: &[usize], example: &TrapExample) -> bool {
    emitted
        .iter()
        .find(|&&t| !Vocabulary::is_special(t))
        .is_some_and(|&t| t == example.instructed)
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    condition: &Condition<T>,
    eval_set: &[TrapExample],
    max_len: usize,
) -> Result<EvalResult, EvalError> {
    if eval_set.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let label = condition.label();
    let mut records = Vec::with_capacity(eval_set.len());
    for ex in eval_set {
        let enc = model.encode(&ex.prompt)?;
        let out = match condition {
            Condition::Baseline => greedy_decode(model, &enc, max_len)?,
            Condition::Dola(cfg) => dola_decode(model, &enc, max_len, cfg)?,
            Condition::Steered {
                vector,
                alpha,
                mode,
            } => steer_decode(model, &enc, vector, *alpha, *mode, max_len)?,
        };
        let logits = out.first_logits.data();
        records.push(ExampleRecord {
            example_id: ex.id,
            condition: label.clone(),
            verdict: score_example(&out.tokens, ex),
            rank_instructed: rank_of(logits, ex.instructed),
            rank_trap: rank_of(logits, ex.trap),
            emitted: out.tokens,
        });
    }
    let hits = records.iter().filter(|r| r.verdict).count();
    Ok(EvalResult {
        condition: label,
        accuracy: hits as f64 / records.len() as f64,
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub layer: usize,
    pub rank: usize,
    pub jsd: f64,
}

/// Rank of one probe token at every decoder depth of the first decoding step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTrace {
    pub probe: usize,
    pub rows: Vec<TraceRow>,
}

/// Ranks and `JSD(q_N, q_j)` for `j = 1..=N` at the answer position of `prompt`.
pub fn trace_token<T: Scalar>(
    model: &Model<T>,
    prompt: &[usize],
    probe: usize,
) -> Result<RankTrace, EvalError> {
    let vocab_size = model.config().vocab_size;
    if probe >= vocab_size {
        return Err(EvalError::ProbeOutOfRange { probe, vocab_size });
    }
    let enc = model.encode(prompt)?;
    let (_, trace) = model.decode_step(&enc, &[START], None)?;
    let mature = trace.final_state().dist.data();
    let rows = trace
        .layers
        .iter()
        .enumerate()
        .map(|(i, state)| {
            Ok(TraceRow {
                layer: i + 1,
                rank: rank_of(state.logits.data(), probe),
                jsd: jsd(mature, state.dist.data())?.as_f64(),
            })
        })
        .collect::<Result<_, DecodingError>>()?;
    Ok(RankTrace { probe, rows })
}

/// `text` ends exactly with `suffix`.
pub fn verify_startend(text: &[usize], suffix: &[usize]) -> bool {
    text.ends_with(suffix)
}

/// `keyword` occurs anywhere in `text`.
pub fn verify_keyword(text: &[usize], keyword: usize) -> bool {
    text.contains(&keyword)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub layer: usize,
    pub alpha: f64,
    pub accuracy: f64,
}

/// Accuracy over a layer × α grid. `grid[i][k]` is layer `layers[i]` at `alphas[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub layers: Vec<usize>,
    pub alphas: Vec<f64>,
    pub grid: Vec<Vec<f64>>,
    pub baseline_accuracy: f64,
    pub best: Option<BestCell>,
}

impl SweepReport {
    /// Builds a report; the best cell is the first maximum in layer-major order.
    pub fn new(
        layers: Vec<usize>,
        alphas: Vec<f64>,
        grid: Vec<Vec<f64>>,
        baseline_accuracy: f64,
    ) -> Result<Self, EvalError> {
        if grid.len() != layers.len() || grid.iter().any(|row| row.len() != alphas.len()) {
            return Err(EvalError::Parse("grid does not match its axes".into()));
        }
        let mut best: Option<BestCell> = None;
        for (row, &layer) in grid.iter().zip(&layers) {
            for (&accuracy, &alpha) in row.iter().zip(&alphas) {
                if best.map_or(true, |b| accuracy > b.accuracy) {
                    best = Some(BestCell {
                        layer,
                        alpha,
                        accuracy,
                    });
                }
            }
        }
        Ok(Self {
            layers,
            alphas,
            grid,
            baseline_accuracy,
            best,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.grid.iter().map(Vec::len).sum()
    }

    /// Best α per layer (first maximum in α order).
    pub fn layer_best(&self) -> Vec<BestCell> {
        self.grid
            .iter()
            .zip(&self.layers)
            .filter_map(|(row, &layer)| {
                let mut best: Option<BestCell> = None;
                for (&accuracy, &alpha) in row.iter().zip(&self.alphas) {
                    if best.map_or(true, |b| accuracy > b.accuracy) {
                        best = Some(BestCell {
                            layer,
                            alpha,
                            accuracy,
                        });
                    }
                }
                best
            })
            .collect()
    }

    pub fn grid_csv(&self, config_hash: &str) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# config_hash={config_hash} baseline={}",
            self.baseline_accuracy
        )
        .expect("string write");
        out.push_str("layer");
        for a in &self.alphas {
            write!(out, ",{a}").expect("string write");
        }
        out.push('\n');
        for (row, layer) in self.grid.iter().zip(&self.layers) {
            write!(out, "{layer}").expect("string write");
            for v in row {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`SweepReport::grid_csv`]; returns the report and the hash.
    pub fn parse_grid_csv(text: &str) -> Result<(Self, String), EvalError> {
        let bad = |m: &str| EvalError::Parse(m.to_string());
        let mut lines = text.lines();
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| bad("missing metadata line"))?;
        let fields: BTreeMap<&str, &str> = meta
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let hash = fields
            .get("config_hash")
            .ok_or_else(|| bad("missing config_hash"))?
            .to_string();
        let baseline: f64 = fields
            .get("baseline")
            .ok_or_else(|| bad("missing baseline"))?
            .parse()
            .map_err(|_| bad("bad baseline"))?;
        let header = lines.next().ok_or_else(|| bad("missing header row"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("layer") {
            return Err(bad("header must start with 'layer'"));
        }
        let alphas = cols
            .map(|c| c.parse::<f64>().map_err(|_| bad("bad alpha")))
            .collect::<Result<Vec<_>, _>>()?;
        let mut layers = Vec::new();
        let mut grid = Vec::new();
        for line in lines {
            let mut cols = line.split(',');
            let layer = cols
                .next()
                .and_then(|c| c.parse::<usize>().ok())
                .ok_or_else(|| bad("bad layer"))?;
            let row = cols
                .map(|c| c.parse::<f64>().map_err(|_| bad("bad accuracy")))
                .collect::<Result<Vec<_>, _>>()?;
            layers.push(layer);
            grid.push(row);
        }
        Ok((Self::new(layers, alphas, grid, baseline)?, hash))
    }

    pub fn layer_best_csv(&self, config_hash: &str) -> String {
        let mut out = format!("# config_hash={config_hash}\nlayer,alpha,accuracy\n");
        for b in self.layer_best() {
            writeln!(out, "{},{},{}", b.layer, b.alpha, b.accuracy).expect("string write");
        }
        out
    }
}

impl RankTrace {
    pub fn csv(&self, config_hash: &str) -> String {
        let mut out = format!("# config_hash={config_hash} probe={}\nlayer,rank,jsd\n", self.probe);
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.layer, r.rank, r.jsd).expect("string write");
        }
        out
    }
}

#[derive(Serialize)]
struct TaggedRecord<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    record: &'a ExampleRecord,
}

/// Line-delimited records, each tagged with the config hash.
pub fn records_jsonl(results: &[EvalResult], config_hash: &str) -> Result<String, EvalError> {
    let mut out = String::new();
    for result in results {
        for record in &result.records {
            out.push_str(&serde_json::to_string(&TaggedRecord {
                config_hash,
                record,
            })?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Writes the grid, per-layer best, record and trace files into `dir` and returns
/// their paths. An absent sweep or empty result list writes no file for it.
pub fn emit_report(
    results: &[EvalResult],
    sweep: Option<&SweepReport>,
    traces: &[(usize, RankTrace)],
    dir: &Path,
    config_hash: &str,
) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: &str| -> Result<(), EvalError> {
        let path = dir.join(name);
        std::fs::File::create(&path)?.write_all(body.as_bytes())?;
        written.push(path);
        Ok(())
    };
    if let Some(sweep) = sweep {
        put("sweep_grid.csv".into(), &sweep.grid_csv(config_hash))?;
        put("sweep_layer_best.csv".into(), &sweep.layer_best_csv(config_hash))?;
    }
    if !results.is_empty() {
        put("records.jsonl".into(), &records_jsonl(results, config_hash)?)?;
    }
    for (example_id, trace) in traces {
        put(
            format!("trace_{example_id}_{}.csv", trace.probe),
            &trace.csv(config_hash),
        )?;
    }
    Ok(written)
}
