//! Tokenizer, synthetic tasks, JSONL ingestion and batching.

mod tasks;
mod tokenizer;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Token;

pub use tasks::{
    gen_arithmetic, gen_template, parse_chain, split_of, template_pair, ArithmeticSpec, Step,
};
pub use tokenizer::{Tokenizer, TokenizerMode, CHAR_ALPHABET, EOS, IGNORE, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<Token>,
    /// Ends with [`EOS`].
    pub completion: Vec<Token>,
}

impl Example {
    pub fn from_text(tokenizer: &Tokenizer, prompt: &str, completion: &str) -> Result<Self> {
        let prompt = tokenizer.encode(prompt)?;
        let mut completion = tokenizer.encode(completion)?;
        completion.push(EOS);
        Ok(Example { prompt, completion })
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.completion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Vec<Token> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.completion);
        t
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub task: String,
    pub split: Split,
    pub seed: u64,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(Example::len).max().unwrap_or(0)
    }

    pub fn supervised_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.completion.len()).sum()
    }

    /// Fails if any example does not fit a model context of `context_len`.
    pub fn check_fits(&self, context_len: usize) -> Result<()> {
        match self.examples.iter().position(|e| e.len() > context_len) {
            Some(i) => Err(Error::ContextOverflow {
                len: self.examples[i].len(),
                context: context_len,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    prompt: String,
    completion: String,
}

/// Word tokenizer fitted to every prompt and completion in the files.
pub fn fit_word_tokenizer<P: AsRef<Path>>(paths: impl IntoIterator<Item = P>) -> Result<Tokenizer> {
    let mut texts = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            texts.push(rec.prompt);
            texts.push(rec.completion);
        }
    }
    Ok(Tokenizer::fit_words(texts.iter().map(String::as_str)))
}

/// Reads one `{"prompt", "completion"}` object per line.
pub fn load_jsonl(
    path: impl AsRef<Path>,
    tokenizer: &Tokenizer,
    context_len: usize,
    split: Split,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let ex = Example::from_text(tokenizer, &rec.prompt, &rec.completion)
            .map_err(|e| parse_err(e.to_string()))?;
        if ex.prompt.is_empty() || ex.completion.len() < 2 {
            return Err(parse_err("prompt and completion must be non-empty".into()));
        }
        if ex.len() > context_len {
            return Err(parse_err(format!(
                "example of {} tokens exceeds context {context_len}",
                ex.len()
            )));
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        log::warn!("{} holds no examples", path.display());
    }
    Ok(Dataset {
        task: path
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        split,
        seed: 0,
        examples,
    })
}

pub fn export_jsonl(
    dataset: &Dataset,
    tokenizer: &Tokenizer,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in &dataset.examples {
        let rec = Record {
            prompt: tokenizer.decode(&ex.prompt),
            completion: tokenizer.decode_text(&ex.completion),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A padded block of `batch` rows of `seq` positions, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Token>,
    /// Next-token labels; [`IGNORE`] at prompt and padding positions.
    pub labels: Vec<Token>,
    pub batch: usize,
    pub seq: usize,
    /// Dataset indices of the rows.
    pub example_ids: Vec<usize>,
}

impl Batch {
    /// Flattened positions carrying a label, in row-major order.
    pub fn supervised_positions(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] != IGNORE)
            .collect()
    }

    pub fn supervised_labels(&self) -> Vec<Token> {
        self.labels
            .iter()
            .copied()
            .filter(|&l| l != IGNORE)
            .collect()
    }

    pub fn supervised_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Cuts `dataset` into batches of `seq` positions. Inputs are each
/// example without its last token, labels are the example shifted by one.
/// With `shuffle_seed` the example order is a seeded permutation.
pub fn batchify(
    dataset: &Dataset,
    batch_size: usize,
    seq: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if let Some(ex) = dataset.examples.iter().find(|e| e.len() > seq + 1) {
        return Err(Error::ContextOverflow {
            len: ex.len() - 1,
            context: seq,
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let batches = order
        .chunks(batch_size)
        .map(|ids| {
            let mut inputs = vec![PAD; ids.len() * seq];
            let mut labels = vec![IGNORE; ids.len() * seq];
            for (r, &id) in ids.iter().enumerate() {
                let ex = &dataset.examples[id];
                let toks = ex.tokens();
                for t in 0..toks.len() - 1 {
                    inputs[r * seq + t] = toks[t];
                    if t + 1 >= ex.prompt.len() {
                        labels[r * seq + t] = toks[t + 1];
                    }
                }
            }
            Batch {
                inputs,
                labels,
                batch: ids.len(),
                seq,
                example_ids: ids.to_vec(),
            }
        })
        .collect();
    Ok(batches)
}
