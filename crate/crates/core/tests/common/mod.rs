//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specdistill::datasets::{Dataset, Example, Split, Tokenizer, EOS};
use specdistill::distill::{finetune, Objective, TrainConfig};
use specdistill::numcore::{Graph, Tensor, Var};
use specdistill::tinylm::{LMConfig, Role, TinyLM};
use specdistill::Token;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Evaluates `build` on fresh graph leaves and returns the scalar loss.
fn eval<F>(params: &[Tensor<f64>], build: &F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars);
    g.value(loss).data()[0]
}

/// Central finite-difference check of reverse-mode gradients at `probes`
/// randomly chosen parameter coordinates. Returns the worst relative error.
pub fn gradcheck<F>(params: &[Tensor<f64>], build: F, probes: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    const H: f64 = 1e-4;
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let pi = r.gen_range(0..params.len());
        let ei = r.gen_range(0..params[pi].numel());
        let mut plus = params.to_vec();
        plus[pi].data_mut()[ei] += H;
        let mut minus = params.to_vec();
        minus[pi].data_mut()[ei] -= H;
        let numeric = (eval(&plus, &build) - eval(&minus, &build)) / (2.0 * H);
        let a = analytic[pi].data()[ei];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Naive triple-loop matrix product.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                c[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    c
}

/// Examples cut from an endless repetition of `pattern`: a prompt of
/// `prompt_len` symbols at a random phase followed by `completion_len` more.
pub fn repeating_dataset(
    pattern: &str,
    n: usize,
    prompt_len: usize,
    completion_len: usize,
    seed: u64,
) -> Dataset {
    let tok = Tokenizer::char_default();
    let ids = tok.encode(pattern).unwrap();
    let mut r = rng(seed);
    let examples = (0..n)
        .map(|_| {
            let phase = r.gen_range(0..ids.len());
            let seq: Vec<Token> = (0..prompt_len + completion_len)
                .map(|i| ids[(phase + i) % ids.len()])
                .collect();
            let mut completion = seq[prompt_len..].to_vec();
            completion.push(EOS);
            Example {
                prompt: seq[..prompt_len].to_vec(),
                completion,
            }
        })
        .collect();
    Dataset {
        task: "repeat".into(),
        split: Split::Train,
        seed,
        examples,
    }
}

pub const PATTERN: &str = "abcabdaec";

/// A two-layer model trained on [`PATTERN`] until it continues it reliably.
pub fn trained_pattern_model(seed: u64) -> TinyLM {
    let v = Tokenizer::char_default().vocab_size();
    let config = LMConfig {
        vocab_size: v,
        context_len: 32,
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        tie_embeddings: true,
    };
    let mut m = TinyLM::init(config, seed, Role::Target).unwrap();
    let train = repeating_dataset(PATTERN, 256, 5, 12, seed + 100);
    let cfg = TrainConfig {
        objective: Objective::FineTune,
        batch_size: 16,
        lr: 3e-3,
        epochs: 12,
        seed,
        ..TrainConfig::default()
    };
    finetune(&mut m, &train, None, &cfg).unwrap();
    m
}

/// Copy of `model` with uniform noise of half-width `scale` on every weight.
pub fn perturbed(model: &TinyLM, scale: f32, seed: u64) -> TinyLM {
    let mut r = rng(seed);
    let mut m = model.clone().with_role(Role::Draft);
    for p in m.params_mut() {
        for x in p.data_mut() {
            *x += r.gen_range(-scale..=scale);
        }
    }
    m
}

fn small_config(vocab: usize, context_len: usize, layers: usize, d: usize) -> LMConfig {
    LMConfig {
        vocab_size: vocab,
        context_len,
        n_layers: layers,
        d_model: d,
        n_heads: 2,
        d_ff: 2 * d,
        tie_embeddings: layers.is_multiple_of(2),
    }
}

/// `count` seeded (target, draft, prompt) triples. Trained targets are paired
/// with clones, lightly and heavily perturbed copies, and fresh drafts; random
/// targets use short windows so generation slides past the context.
pub fn sd_triples(count: usize, seed: u64) -> Vec<(TinyLM, TinyLM, Vec<Token>)> {
    let trained = trained_pattern_model(seed);
    let tok = Tokenizer::char_default();
    let v = tok.vocab_size();
    let pattern = tok.encode(PATTERN).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    (0..count)
        .map(|i| {
            let s = seed * 1000 + i as u64;
            let (target, draft) = match i % 5 {
                0 => (trained.clone(), trained.clone()),
                1 => (trained.clone(), perturbed(&trained, 0.02, s)),
                2 => (trained.clone(), perturbed(&trained, 0.2, s)),
                3 => (
                    trained.clone(),
                    TinyLM::init(small_config(v, 32, 1, 8), s, Role::Draft).unwrap(),
                ),
                _ => {
                    let t = TinyLM::init(small_config(v, 6, 2, 16), s, Role::Target).unwrap();
                    let d = perturbed(&t, 0.05, s + 1);
                    (t, d)
                }
            };
            let len = r.gen_range(1..=8);
            let prompt = if i % 5 == 4 || i % 7 == 0 {
                (0..len).map(|_| r.gen_range(0..v as Token)).collect()
            } else {
                let phase = r.gen_range(0..pattern.len());
                (0..len)
                    .map(|j| pattern[(phase + j) % pattern.len()])
                    .collect()
            };
            (target, draft, prompt)
        })
        .collect()
}
