use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{
    fit_word_tokenizer, gen_arithmetic, gen_template, load_jsonl, ArithmeticSpec, Dataset, Split,
    Tokenizer, TokenizerMode, EOS,
};
use crate::distill::{FilterConfig, Objective, TrainConfig};
use crate::error::{Error, Result};
use crate::specdec::SDConfig;
use crate::tinylm::LMConfig;

/// Environment variable that replaces `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "SPECDISTILL_OUTPUT";

/// Offset between the training seed and the evaluation generator seed.
const EVAL_SEED_OFFSET: u64 = 1_000_003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Arithmetic {
        #[serde(default = "default_digits")]
        digits: u32,
        #[serde(default = "default_steps")]
        steps: u32,
    },
    Template,
    /// Prompt/completion pairs read from JSON-lines files.
    Jsonl {
        train: PathBuf,
        eval: PathBuf,
    },
}

fn default_digits() -> u32 {
    ArithmeticSpec::default().digits
}

fn default_steps() -> u32 {
    ArithmeticSpec::default().steps
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Arithmetic { .. } => "arithmetic",
            TaskSpec::Template => "template",
            TaskSpec::Jsonl { .. } => "jsonl",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub bins: usize,
    /// Mismatch sites listed per group in the error-overlap case study.
    pub case_study_sites: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            bins: 20,
            case_study_sites: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskSpec,
    #[serde(default = "default_tokenizer")]
    pub tokenizer: TokenizerMode,
    pub n_train: usize,
    pub n_eval: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub target: LMConfig,
    pub draft: LMConfig,
    pub target_train: TrainConfig,
    pub reference_train: TrainConfig,
    pub draft_train: TrainConfig,
    pub sd: SDConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_tokenizer() -> TokenizerMode {
    TokenizerMode::Char
}

impl ExperimentConfig {
    /// The default arithmetic experiment.
    pub fn arithmetic_default() -> Self {
        let vocab = Tokenizer::char_default().vocab_size();
        ExperimentConfig {
            name: "arithmetic".into(),
            task: TaskSpec::Arithmetic {
                digits: default_digits(),
                steps: default_steps(),
            },
            tokenizer: TokenizerMode::Char,
            n_train: 4000,
            n_eval: 200,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            target: LMConfig::target_default(vocab),
            draft: LMConfig::draft_default(vocab),
            target_train: TrainConfig {
                objective: Objective::FineTune,
                batch_size: 8,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            reference_train: TrainConfig {
                batch_size: 8,
                lr: 5e-3,
                ..TrainConfig::default()
            },
            draft_train: TrainConfig {
                batch_size: 8,
                lr: 5e-3,
                filter: FilterConfig::top(0.4),
                lr_scaling: false,
                ..TrainConfig::default()
            },
            sd: SDConfig {
                gamma: 5,
                max_new_tokens: 64,
                eos: EOS,
            },
            analysis: AnalysisConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Parses `text` after applying `key=value` overrides on dotted paths.
    /// Values are TOML literals; anything unparsable is taken as a string.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Output directory after the environment override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_root()
            .join(&self.name)
            .join(format!("seed{seed}"))
    }

    /// Checks everything that can be checked before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            problems.push("name must be a non-empty path component".to_string());
        }
        if self.seeds.is_empty() {
            problems.push("seeds must not be empty".into());
        }
        if self.n_train == 0 || self.n_eval == 0 {
            problems.push("n_train and n_eval must be positive".into());
        }
        for (stage, c) in [("target", &self.target), ("draft", &self.draft)] {
            if let Err(e) = c.validate() {
                problems.push(format!("{stage}: {e}"));
            }
        }
        if self.target.vocab_size != self.draft.vocab_size {
            problems.push(format!(
                "target vocabulary {} differs from draft vocabulary {}",
                self.target.vocab_size, self.draft.vocab_size
            ));
        }
        for (stage, t) in [
            ("target_train", &self.target_train),
            ("reference_train", &self.reference_train),
            ("draft_train", &self.draft_train),
        ] {
            if let Err(e) = t.validate() {
                problems.push(format!("{stage}: {e}"));
            }
        }
        if self.target_train.objective != Objective::FineTune {
            problems.push("target_train must use the fine_tune objective".into());
        }
        if self.target_train.filter.is_active() {
            problems.push("target_train must not filter tokens".into());
        }
        if self.reference_train.filter.is_active() {
            problems.push("reference_train must not filter tokens".into());
        }
        if self.draft_train.objective != self.reference_train.objective {
            problems.push("draft_train and reference_train must share an objective".into());
        }
        if let Err(e) = self.sd.validate() {
            problems.push(format!("sd: {e}"));
        }
        if (self.sd.eos as usize) >= self.target.vocab_size {
            problems.push(format!("sd.eos {} is outside the vocabulary", self.sd.eos));
        }
        if let TaskSpec::Arithmetic { digits, steps } = self.task {
            if let Err(e) = (ArithmeticSpec { digits, steps }).validate() {
                problems.push(format!("task: {e}"));
            }
        }
        if !matches!(self.task, TaskSpec::Jsonl { .. }) && self.tokenizer != TokenizerMode::Char {
            problems.push("generated tasks need the char tokenizer".into());
        }
        if self.analysis.bins == 0 {
            problems.push("analysis.bins must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Tokenizer plus training and evaluation sets for one seed.
    pub fn data(&self, seed: u64) -> Result<TaskData> {
        let (tokenizer, train, eval) = match &self.task {
            TaskSpec::Arithmetic { digits, steps } => {
                let tok = Tokenizer::char_default();
                let spec = ArithmeticSpec {
                    digits: *digits,
                    steps: *steps,
                };
                let train = gen_arithmetic(seed, self.n_train, spec, Split::Train, &tok)?;
                let eval = gen_arithmetic(
                    seed.wrapping_add(EVAL_SEED_OFFSET),
                    self.n_eval,
                    spec,
                    Split::Test,
                    &tok,
                )?;
                (tok, train, eval)
            }
            TaskSpec::Template => {
                let tok = Tokenizer::char_default();
                let train = gen_template(seed, self.n_train, Split::Train, &tok)?;
                let eval = gen_template(
                    seed.wrapping_add(EVAL_SEED_OFFSET),
                    self.n_eval,
                    Split::Test,
                    &tok,
                )?;
                (tok, train, eval)
            }
            TaskSpec::Jsonl { train, eval } => {
                let tok = match self.tokenizer {
                    TokenizerMode::Char => Tokenizer::char_default(),
                    TokenizerMode::Word => fit_word_tokenizer([train.as_path(), eval.as_path()])?,
                };
                let context = self.target.context_len.min(self.draft.context_len);
                let mut tr = load_jsonl(train, &tok, context, Split::Train)?;
                let mut ev = load_jsonl(eval, &tok, context, Split::Test)?;
                tr.examples.truncate(self.n_train);
                ev.examples.truncate(self.n_eval);
                (tok, tr, ev)
            }
        };
        if tokenizer.vocab_size() != self.target.vocab_size {
            return Err(Error::config(format!(
                "tokenizer has {} symbols but the models expect {}",
                tokenizer.vocab_size(),
                self.target.vocab_size
            )));
        }
        let context = self.target.context_len.min(self.draft.context_len);
        train.check_fits(context)?;
        eval.check_fits(context)?;
        if train.is_empty() || eval.is_empty() {
            return Err(Error::config(
                "training and evaluation sets must be non-empty",
            ));
        }
        let key = hash_json(&(
            &self.task,
            self.tokenizer,
            self.n_train,
            self.n_eval,
            seed,
            content_hash(&train, &eval),
        ));
        Ok(TaskData {
            tokenizer,
            train,
            eval,
            key,
        })
    }
}

fn content_hash(train: &Dataset, eval: &Dataset) -> String {
    let mut h = Sha256::new();
    for ex in train.examples.iter().chain(&eval.examples) {
        for t in ex.prompt.iter().chain(&ex.completion) {
            h.update(t.to_le_bytes());
        }
        h.update([0xff]);
    }
    hex::encode(h.finalize())
}

pub struct TaskData {
    pub tokenizer: Tokenizer,
    pub train: Dataset,
    pub eval: Dataset,
    /// Content key of the data for stage caching.
    pub key: String,
}

/// Hex sha256 of a value's JSON form.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    hex::encode(Sha256::digest(bytes))
}

fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_literal(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
