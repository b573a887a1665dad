//! `steerlab` command line: corpus generation, training, evaluation, mining,
//! sweeping and tracing driven by one experiment config.
//!
//! Every command writes into a staging directory inside the output directory and
//! moves its files into place only after it succeeds, together with a
//! `manifest_<command>.json` listing config hash, seed and file digests.

pub mod config;
mod stage;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use steerlab::evalharness::{emit_report, evaluate, records_jsonl, trace_token};
use steerlab::steering::{mine_vector, sweep, MiningConfig};
use steerlab::tasks::{generate_corpus, memorization_accuracy, train_memorizer, Corpus};
use steerlab::{Condition, Model, SteeringVector};

pub use config::{EvalConfig, ExperimentConfig, SteeringConfig};
use stage::Stage;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// `error kind=<kind> code=<n>: <message>` on a single line.
    pub fn line(&self) -> String {
        format!(
            "error kind={} code={}: {}",
            self.kind(),
            self.exit_code(),
            config::one_line(&self.to_string())
        )
    }
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "steerlab", version, about = "Layer-contrast decoding and activation steering lab")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replace artifacts that already exist.
    #[arg(long, global = true)]
    pub overwrite: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConditionArg {
    Baseline,
    Dola,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    Gen,
    /// Train the memorizer and write a checkpoint.
    Train,
    /// Evaluate trap prompts under one decoding condition.
    Eval {
        #[arg(long, value_enum)]
        condition: ConditionArg,
    },
    /// Mine a steering vector at one decoder layer.
    Mine {
        #[arg(long)]
        layer: usize,
    },
    /// Evaluate every layer × α cell of the steering grid.
    Sweep {
        /// Restrict the grid to these layers (repeatable).
        #[arg(long)]
        layer: Vec<usize>,
        /// Restrict the grid to these strengths (repeatable).
        #[arg(long)]
        alpha: Vec<f64>,
    },
    /// Layerwise rank of one token for one evaluation prompt.
    Trace {
        #[arg(long)]
        prompt_id: usize,
        /// Token id, vocabulary word, `instructed` or `trap`.
        #[arg(long)]
        token: String,
    },
}

/// Files a successful command produced, manifest last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub command: String,
    pub config_hash: String,
    pub files: Vec<PathBuf>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<RunOutput, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(config::one_line(&e.to_string())))?;
    execute(cli)
}

/// Process entry point: runs `args` and returns the exit code. Help and version
/// requests print to stdout and succeed; failures print one line to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.line());
            return err.exit_code();
        }
    };
    match execute(cli) {
        Ok(out) => {
            for f in &out.files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<RunOutput, CliError> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => return Err(CliError::Usage("--config PATH is required".into())),
    };
    let cfg = base.resolve(cli.seed, cli.out.clone())?;
    let ctx = Context {
        hash: cfg.hash(),
        out: cfg.out_dir.clone(),
        overwrite: cli.overwrite,
        cfg,
    };
    match &cli.command {
        Command::Gen => ctx.gen(),
        Command::Train => ctx.train(),
        Command::Eval { condition } => ctx.eval(*condition),
        Command::Mine { layer } => ctx.mine(*layer),
        Command::Sweep { layer, alpha } => ctx.sweep(layer, alpha),
        Command::Trace { prompt_id, token } => ctx.trace(*prompt_id, token),
    }
}

struct Context {
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
    overwrite: bool,
}

#[derive(Serialize, Deserialize)]
struct TrainSummary {
    config_hash: String,
    seed: u64,
    steps: usize,
    final_loss: f64,
    memorization_accuracy: f64,
    tuning_accuracy: f64,
    loss_curve: Vec<f64>,
}

/// Steering vector file: the vector tagged with the config that produced it.
#[derive(Serialize, Deserialize)]
pub struct VectorFile {
    pub config_hash: String,
    pub vector: SteeringVector,
}

#[derive(Serialize, Deserialize)]
pub struct SweepSummary {
    pub config_hash: String,
    pub baseline_accuracy: f64,
    pub best_layer: usize,
    pub best_alpha: f64,
    pub best_accuracy: f64,
}

fn json_line<S: Serialize>(value: &S) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializes");
    bytes.push(b'\n');
    bytes
}

impl Context {
    fn stage(&self, id: &str) -> Result<Stage, CliError> {
        Stage::open(&self.out, id, &self.hash, self.cfg.seed, self.overwrite)
    }

    fn mismatch(&self, file: &Path, found: &str) -> CliError {
        CliError::Config(format!(
            "{} has config hash {found}, current config is {}",
            file.display(),
            self.hash
        ))
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "missing {}; run `{producer}` first",
                path.display()
            )));
        }
        Ok(path)
    }

    fn load_corpus(&self) -> Result<Corpus, CliError> {
        let path = self.require(CORPUS_FILE, "gen")?;
        let file = std::fs::File::open(&path).map_err(runtime)?;
        let (corpus, _, hash) =
            Corpus::read_jsonl(std::io::BufReader::new(file)).map_err(runtime)?;
        if hash != self.hash {
            return Err(self.mismatch(&path, &hash));
        }
        Ok(corpus)
    }

    fn load_model(&self) -> Result<Model, CliError> {
        let path = self.require(CHECKPOINT_FILE, "train")?;
        let (model, meta) = Model::load_with(&path).map_err(runtime)?;
        let hash = meta.get("config_hash").map(String::as_str).unwrap_or("none");
        if hash != self.hash {
            return Err(self.mismatch(&path, hash));
        }
        Ok(model)
    }

    /// Every vector file in the output directory must come from this config.
    fn check_vector_files(&self) -> Result<(), CliError> {
        let Ok(entries) = std::fs::read_dir(&self.out) else {
            return Ok(());
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("vector_L") && n.ends_with(".json"))
            })
            .collect();
        paths.sort();
        for path in paths {
            let text = std::fs::read_to_string(&path).map_err(runtime)?;
            let file: VectorFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            if file.config_hash != self.hash {
                return Err(self.mismatch(&path, &file.config_hash));
            }
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<(), CliError> {
        let n = self.cfg.model.n_dec_layers;
        if layer == 0 || layer > n {
            return Err(CliError::Usage(format!("layer {layer} outside 1..={n}")));
        }
        Ok(())
    }

    fn gen(&self) -> Result<RunOutput, CliError> {
        let mut stage = self.stage("gen")?;
        let corpus = generate_corpus(&self.cfg.corpus).map_err(runtime)?;
        let mut bytes = Vec::new();
        corpus
            .write_jsonl(&mut bytes, &self.cfg.corpus, &self.hash)
            .map_err(runtime)?;
        stage.write(CORPUS_FILE, &bytes)?;
        stage.commit()
    }

    fn train(&self) -> Result<RunOutput, CliError> {
        let corpus = self.load_corpus()?;
        let mut stage = self.stage("train")?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut model = Model::new(self.cfg.model.clone(), &mut rng).map_err(runtime)?;
        let report = train_memorizer(&mut model, &corpus.pretrain, &corpus.tuning, &self.cfg.train)
            .map_err(runtime)?;
        let tuning_accuracy = memorization_accuracy(&model, &corpus.tuning).map_err(runtime)?;
        let meta = BTreeMap::from([
            ("config_hash".to_string(), self.hash.clone()),
            ("seed".to_string(), self.cfg.seed.to_string()),
        ]);
        stage.write(CHECKPOINT_FILE, &model.to_checkpoint_bytes_with(&meta))?;
        let summary = TrainSummary {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            steps: report.loss_curve.len(),
            final_loss: report.loss_curve.last().copied().unwrap_or(f64::NAN),
            memorization_accuracy: report.memorization_accuracy,
            tuning_accuracy,
            loss_curve: report.loss_curve,
        };
        stage.write(TRAIN_REPORT_FILE, &json_line(&summary))?;
        stage.commit()
    }

    fn eval(&self, condition: ConditionArg) -> Result<RunOutput, CliError> {
        let corpus = self.load_corpus()?;
        let model = self.load_model()?;
        let (name, cond) = match condition {
            ConditionArg::Baseline => ("baseline", Condition::Baseline),
            ConditionArg::Dola => ("dola", Condition::Dola(self.cfg.dola.clone())),
        };
        let mut stage = self.stage(&format!("eval_{name}"))?;
        let result =
            evaluate(&model, &cond, &corpus.eval, self.cfg.eval.max_len).map_err(runtime)?;
        let hits = result.records.iter().filter(|r| r.verdict).count();
        let accuracy = format!(
            "# config_hash={}\naccuracy={}\ncorrect={hits}/{}\n",
            self.hash,
            result.accuracy,
            result.records.len()
        );
        stage.write(&format!("eval_{name}/accuracy.txt"), accuracy.as_bytes())?;
        let records = records_jsonl(std::slice::from_ref(&result), &self.hash).map_err(runtime)?;
        stage.write(&format!("eval_{name}/records.jsonl"), records.as_bytes())?;
        stage.commit()
    }

    fn mine(&self, layer: usize) -> Result<RunOutput, CliError> {
        self.check_layer(layer)?;
        let corpus = self.load_corpus()?;
        let model = self.load_model()?;
        let mut stage = self.stage(&format!("mine_L{layer}"))?;
        let vector = mine_vector(
            &model,
            &MiningConfig {
                layer,
                examples: corpus.mining,
            },
        )
        .map_err(runtime)?;
        let file = VectorFile {
            config_hash: self.hash.clone(),
            vector,
        };
        stage.write(&format!("vector_L{layer}.json"), &json_line(&file))?;
        stage.commit()
    }

    fn sweep(&self, layers: &[usize], alphas: &[f64]) -> Result<RunOutput, CliError> {
        let layers = if layers.is_empty() { &self.cfg.steering.layers[..] } else { layers };
        let alphas = if alphas.is_empty() { &self.cfg.steering.alphas[..] } else { alphas };
        for &l in layers {
            self.check_layer(l)?;
        }
        if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(CliError::Usage(format!("alpha {a} must be finite and >= 0")));
        }
        let corpus = self.load_corpus()?;
        let model = self.load_model()?;
        self.check_vector_files()?;
        let mut stage = self.stage("sweep")?;
        let out = sweep(
            &model,
            &corpus.mining,
            layers,
            alphas,
            self.cfg.steering.mode,
            &corpus.eval,
            self.cfg.eval.max_len,
        )
        .map_err(runtime)?;
        let mut results = vec![out.baseline.clone()];
        results.extend(out.cells.iter().cloned());
        let dir = stage.dir().join("sweep");
        let written =
            emit_report(&results, Some(&out.report), &[], &dir, &self.hash).map_err(runtime)?;
        for path in written {
            stage.adopt(&path)?;
        }
        let best = out.report.best.expect("non-empty grid");
        let summary = SweepSummary {
            config_hash: self.hash.clone(),
            baseline_accuracy: out.report.baseline_accuracy,
            best_layer: best.layer,
            best_alpha: best.alpha,
            best_accuracy: best.accuracy,
        };
        stage.write("sweep/summary.json", &json_line(&summary))?;
        stage.commit()
    }

    fn trace(&self, prompt_id: usize, token: &str) -> Result<RunOutput, CliError> {
        let corpus = self.load_corpus()?;
        let model = self.load_model()?;
        let example = corpus
            .eval
            .iter()
            .find(|e| e.id == prompt_id)
            .ok_or_else(|| CliError::Usage(format!("no evaluation prompt with id {prompt_id}")))?;
        let probe = match token {
            "instructed" => example.instructed,
            "trap" => example.trap,
            t => match t.parse::<usize>() {
                Ok(id) => id,
                Err(_) => corpus
                    .vocab
                    .id(t)
                    .ok_or_else(|| CliError::Usage(format!("unknown token {t:?}")))?,
            },
        };
        let trace = trace_token(&model, &example.prompt, probe).map_err(|e| match e {
            steerlab::evalharness::EvalError::ProbeOutOfRange { .. } => {
                CliError::Usage(e.to_string())
            }
            other => runtime(other),
        })?;
        let mut stage = self.stage(&format!("trace_{prompt_id}_{probe}"))?;
        let written = emit_report(&[], None, &[(prompt_id, trace)], stage.dir(), &self.hash)
            .map_err(runtime)?;
        for path in written {
            stage.adopt(&path)?;
        }
        stage.commit()
    }
}
