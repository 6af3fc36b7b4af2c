//! Synthetic prompt/completion generators.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Example, Split};
use crate::datasets::Tokenizer;
use crate::error::{Error, Result};

const MAX_VALUE: u32 = 999;

/// Split a prompt belongs to, fixed by a hash of its text: 80% train,
/// 10% validation, 10% test.
pub fn split_of(prompt: &str) -> Split {
    let h = Sha256::digest(prompt.as_bytes());
    match h[0] % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArithmeticSpec {
    pub digits: u32,
    pub steps: u32,
}

impl Default for ArithmeticSpec {
    fn default() -> Self {
        ArithmeticSpec {
            digits: 2,
            steps: 3,
        }
    }
}

impl ArithmeticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.digits) || !(1..=4).contains(&self.steps) {
            return Err(Error::config(format!(
                "arithmetic task needs digits in 1..=3 and steps in 1..=4, got {} and {}",
                self.digits, self.steps
            )));
        }
        Ok(())
    }
}

/// One left-to-right step of a chain: `lhs op rhs = result`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    pub lhs: u32,
    pub op: char,
    pub rhs: u32,
    pub result: u32,
}

/// Draws an operand chain whose intermediate values stay in `0..=999`.
/// Multiplication always uses a single-digit factor.
fn draw_chain(rng: &mut ChaCha8Rng, spec: ArithmeticSpec) -> (u32, Vec<(char, u32)>) {
    let top = 10u32.pow(spec.digits) - 1;
    let start = rng.gen_range(0..=top);
    let mut cur = start;
    let mut ops = Vec::new();
    for _ in 0..spec.steps {
        let op = *['+', '-', '*'].choose(rng).expect("non-empty");
        let rhs = match op {
            '+' => rng.gen_range(0..=top.min(MAX_VALUE - cur)),
            '-' => rng.gen_range(0..=top.min(cur)),
            _ => {
                let hi = MAX_VALUE.checked_div(cur).map_or(9, |q| q.min(9));
                rng.gen_range(0..=hi)
            }
        };
        cur = apply(cur, op, rhs).expect("operands drawn in range");
        ops.push((op, rhs));
    }
    (start, ops)
}

fn apply(lhs: u32, op: char, rhs: u32) -> Option<u32> {
    match op {
        '+' => lhs.checked_add(rhs),
        '-' => lhs.checked_sub(rhs),
        '*' => lhs.checked_mul(rhs),
        _ => None,
    }
}

/// Prompt and completion text of a chain, e.g. `"12+7*2:"` and
/// `"12+7 is 19, 19*2 is 38, so 38"`.
fn render_chain(start: u32, ops: &[(char, u32)]) -> (String, String) {
    let mut prompt = start.to_string();
    let mut completion = String::new();
    let mut cur = start;
    for &(op, rhs) in ops {
        prompt.push_str(&format!("{op}{rhs}"));
        let next = apply(cur, op, rhs).expect("valid chain");
        completion.push_str(&format!("{cur}{op}{rhs} is {next}, "));
        cur = next;
    }
    prompt.push(':');
    completion.push_str(&format!("so {cur}"));
    (prompt, completion)
}

/// Parses an arithmetic completion back into its steps and final answer.
pub fn parse_chain(completion: &str) -> Option<(Vec<Step>, u32)> {
    let (body, answer) = completion.rsplit_once("so ")?;
    let mut steps = Vec::new();
    for part in body.split(", ").filter(|s| !s.is_empty()) {
        let (expr, result) = part.split_once(" is ")?;
        let at = expr.find(['+', '-', '*'])?;
        let op = expr[at..].chars().next()?;
        steps.push(Step {
            lhs: expr[..at].parse().ok()?,
            op,
            rhs: expr[at + 1..].parse().ok()?,
            result: result.parse().ok()?,
        });
    }
    Some((steps, answer.parse().ok()?))
}

/// Collects `n` examples of the requested split from an endless stream of
/// candidate prompt/completion pairs.
fn collect_split(
    task: &str,
    seed: u64,
    n: usize,
    split: Split,
    tokenizer: &Tokenizer,
    mut next: impl FnMut(&mut ChaCha8Rng) -> (String, String),
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while examples.len() < n {
        attempts += 1;
        if attempts > 1000 * (n + 10) {
            return Err(Error::config(format!(
                "task {task} cannot produce {n} distinct-split examples"
            )));
        }
        let (prompt, completion) = next(&mut rng);
        if split_of(&prompt) != split {
            continue;
        }
        examples.push(Example::from_text(tokenizer, &prompt, &completion)?);
    }
    Ok(Dataset {
        task: task.to_string(),
        split,
        seed,
        examples,
    })
}

pub fn gen_arithmetic(
    seed: u64,
    n: usize,
    spec: ArithmeticSpec,
    split: Split,
    tokenizer: &Tokenizer,
) -> Result<Dataset> {
    spec.validate()?;
    collect_split("arithmetic", seed, n, split, tokenizer, |rng| {
        let (start, ops) = draw_chain(rng, spec);
        render_chain(start, &ops)
    })
}

const LETTERS: &[u8] = b"abcdefghijk";

fn random_word(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let len = rng.gen_range(min..=max);
    (0..len)
        .map(|_| *LETTERS.choose(rng).expect("non-empty") as char)
        .collect()
}

/// Copy (`"abcab|"` → `"abcab"`), sorted copy (`"cab>"` → `"abc"`) and
/// key-value recall (`"a3,b7,c1?b"` → `"7"`) in equal proportion.
pub fn template_pair(rng: &mut ChaCha8Rng) -> (String, String) {
    match rng.gen_range(0..3) {
        0 => {
            let w = random_word(rng, 3, 8);
            (format!("{w}|"), w)
        }
        1 => {
            let w = random_word(rng, 3, 8);
            let mut sorted: Vec<char> = w.chars().collect();
            sorted.sort_unstable();
            (format!("{w}>"), sorted.into_iter().collect())
        }
        _ => {
            let mut keys: Vec<u8> = LETTERS.to_vec();
            keys.shuffle(rng);
            let count = rng.gen_range(2..=5);
            let pairs: Vec<(char, u32)> = keys[..count]
                .iter()
                .map(|&k| (k as char, rng.gen_range(0..10)))
                .collect();
            let (key, value) = pairs[rng.gen_range(0..count)];
            let listing: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}{v}")).collect();
            (format!("{}?{key}", listing.join(",")), value.to_string())
        }
    }
}

pub fn gen_template(seed: u64, n: usize, split: Split, tokenizer: &Tokenizer) -> Result<Dataset> {
    collect_split("template", seed, n, split, tokenizer, template_pair)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rendering_matches_the_documented_shape() {
        let (p, c) = render_chain(12, &[('+', 7), ('*', 2)]);
        assert_eq!(p, "12+7*2:");
        assert_eq!(c, "12+7 is 19, 19*2 is 38, so 38");
        let (steps, ans) = parse_chain(&c).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!(ans, 38);
    }

    #[test]
    fn template_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (p, c) = template_pair(&mut rng);
            if let Some(w) = p.strip_suffix('|') {
                assert_eq!(w, c);
            } else if let Some(w) = p.strip_suffix('>') {
                let mut s: Vec<char> = w.chars().collect();
                s.sort_unstable();
                assert_eq!(c, s.into_iter().collect::<String>());
            } else {
                let (listing, key) = p.split_once('?').unwrap();
                let hit = listing.split(',').find(|kv| kv.starts_with(key)).unwrap();
                assert_eq!(&hit[1..], c);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_spec() {
        let t = Tokenizer::char_default();
        let bad = ArithmeticSpec {
            digits: 4,
            steps: 1,
        };
        assert!(matches!(
            gen_arithmetic(0, 1, bad, Split::Train, &t),
            Err(Error::Config(_))
        ));
    }
}
