//! Greedy speculative decoding with exact-match verification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::argmax;
use crate::tinylm::TinyLM;
use crate::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SDConfig {
    pub gamma: usize,
    pub max_new_tokens: usize,
    pub eos: Token,
}

impl SDConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 || self.max_new_tokens == 0 {
            return Err(Error::config("gamma and max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SDStats {
    pub accept: usize,
    pub reject: usize,
    pub blocks: usize,
    pub per_block_accepted: Vec<usize>,
}

impl SDStats {
    pub fn decisions(&self) -> usize {
        self.accept + self.reject
    }

    pub fn merge(&mut self, other: &SDStats) {
        self.accept += other.accept;
        self.reject += other.reject;
        self.blocks += other.blocks;
        self.per_block_accepted
            .extend_from_slice(&other.per_block_accepted);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    Length,
}

/// Verification outcome of one draft proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    /// Index in the output sequence the proposal was made for.
    pub position: usize,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<Token>,
    pub prompt_len: usize,
    pub stats: SDStats,
    pub stopped_by: StopReason,
    pub decisions: Vec<Decision>,
}

impl GenerationResult {
    pub fn generated(&self) -> &[Token] {
        &self.tokens[self.prompt_len..]
    }
}

fn window(model: &TinyLM, context: &[Token]) -> usize {
    context.len().saturating_sub(model.config().context_len)
}

/// The model's greedy next token; contexts longer than the window are
/// truncated from the left. Ties resolve to the lowest id.
pub fn greedy_next(model: &TinyLM, context: &[Token]) -> Result<Token> {
    if context.is_empty() {
        return Err(Error::precondition("empty context"));
    }
    let logits = model.last_logits(&context[window(model, context)..])?;
    Ok(argmax(&logits) as Token)
}

/// Greedy next tokens after each of the prefixes `seq[..=p]` for `p` in
/// `from..seq.len()`. Uses one forward pass whenever `seq` fits the window.
fn greedy_after_prefixes(model: &TinyLM, seq: &[Token], from: usize) -> Result<Vec<Token>> {
    if seq.len() <= model.config().context_len {
        let positions: Vec<usize> = (from..seq.len()).collect();
        let logits = model.forward_at(seq, &positions)?;
        return Ok((0..positions.len())
            .map(|r| argmax(logits.row(r)) as Token)
            .collect());
    }
    (from..seq.len())
        .map(|p| greedy_next(model, &seq[..=p]))
        .collect()
}

/// One-token-at-a-time greedy decoding.
pub fn generate_greedy(
    model: &TinyLM,
    prompt: &[Token],
    max_new_tokens: usize,
    eos: Token,
) -> Result<Vec<Token>> {
    if prompt.is_empty() {
        return Err(Error::precondition("empty prompt"));
    }
    let mut tokens = prompt.to_vec();
    for _ in 0..max_new_tokens {
        let next = greedy_next(model, &tokens)?;
        tokens.push(next);
        if next == eos {
            break;
        }
    }
    Ok(tokens)
}

/// Speculative decoding: the draft proposes up to `gamma` tokens, the
/// target scores every proposal in one pass, and proposals are kept while
/// they equal the target's greedy choice. A mismatch appends the target's
/// token instead; a fully accepted block appends the target's next token.
///
/// The output equals `generate_greedy(target, ..)`. The generated suffix
/// never exceeds `max_new_tokens`.
pub fn speculative_generate(
    target: &TinyLM,
    draft: &TinyLM,
    prompt: &[Token],
    cfg: &SDConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    if target.config().vocab_size != draft.config().vocab_size {
        return Err(Error::config(format!(
            "target vocabulary {} differs from draft vocabulary {}",
            target.config().vocab_size,
            draft.config().vocab_size
        )));
    }
    if prompt.is_empty() {
        return Err(Error::precondition("empty prompt"));
    }
    let mut tokens = prompt.to_vec();
    let mut stats = SDStats::default();
    let mut decisions = Vec::new();
    let limit = prompt.len() + cfg.max_new_tokens;

    loop {
        let remaining = limit - tokens.len();
        let n = tokens.len();
        let mut proposal = tokens.clone();
        for _ in 0..cfg.gamma.min(remaining) {
            let z = greedy_next(draft, &proposal)?;
            proposal.push(z);
            if z == cfg.eos {
                break;
            }
        }
        let proposed = proposal.len() - n;
        // verdicts[i] is the target's choice after proposal[..n + i].
        let verdicts = greedy_after_prefixes(target, &proposal, n - 1)?;
        stats.blocks += 1;
        let mut accepted = 0;
        for i in 0..proposed {
            let ok = proposal[n + i] == verdicts[i];
            decisions.push(Decision {
                position: n + i,
                accepted: ok,
            });
            if !ok {
                break;
            }
            accepted += 1;
            tokens.push(proposal[n + i]);
            if proposal[n + i] == cfg.eos {
                stats.accept += accepted;
                stats.per_block_accepted.push(accepted);
                return Ok(done(
                    tokens,
                    prompt.len(),
                    stats,
                    StopReason::Eos,
                    decisions,
                ));
            }
        }
        stats.accept += accepted;
        stats.per_block_accepted.push(accepted);
        if accepted < proposed {
            stats.reject += 1;
        }
        if tokens.len() == limit {
            return Ok(done(
                tokens,
                prompt.len(),
                stats,
                StopReason::Length,
                decisions,
            ));
        }
        let next = verdicts[accepted];
        tokens.push(next);
        if next == cfg.eos {
            return Ok(done(
                tokens,
                prompt.len(),
                stats,
                StopReason::Eos,
                decisions,
            ));
        }
        if tokens.len() == limit {
            return Ok(done(
                tokens,
                prompt.len(),
                stats,
                StopReason::Length,
                decisions,
            ));
        }
    }
}

fn done(
    tokens: Vec<Token>,
    prompt_len: usize,
    stats: SDStats,
    stopped_by: StopReason,
    decisions: Vec<Decision>,
) -> GenerationResult {
    GenerationResult {
        tokens,
        prompt_len,
        stats,
        stopped_by,
        decisions,
    }
}
