mod common;

use common::{perturbed, rng, sd_triples, trained_pattern_model, PATTERN};
use rand::Rng;
use specdistill::datasets::{Tokenizer, EOS};
use specdistill::metrics::acceptance_rate;
use specdistill::numcore::argmax;
use specdistill::specdec::{
    generate_greedy, greedy_next, speculative_generate, SDConfig, SDStats, StopReason,
};
use specdistill::tinylm::{LMConfig, Role, TinyLM};
use specdistill::{Error, Token};

fn sd(gamma: usize, max_new_tokens: usize) -> SDConfig {
    SDConfig {
        gamma,
        max_new_tokens,
        eos: EOS,
    }
}

fn pattern_prompts(n: usize, seed: u64) -> Vec<Vec<Token>> {
    let ids = Tokenizer::char_default().encode(PATTERN).unwrap();
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let phase = r.gen_range(0..ids.len());
            let len = r.gen_range(2..7);
            (0..len).map(|j| ids[(phase + j) % ids.len()]).collect()
        })
        .collect()
}

fn check_counts(stats: &SDStats, gamma: usize, decisions: &[specdistill::specdec::Decision]) {
    assert_eq!(stats.blocks, stats.per_block_accepted.len());
    assert!(stats.per_block_accepted.iter().all(|&a| a <= gamma));
    assert_eq!(stats.per_block_accepted.iter().sum::<usize>(), stats.accept);
    assert!(stats.reject <= stats.blocks);
    assert_eq!(decisions.len(), stats.decisions());
    assert_eq!(
        decisions.iter().filter(|d| d.accepted).count(),
        stats.accept
    );
}

#[test]
fn speculative_output_equals_target_greedy_decoding() {
    for (i, (target, draft, prompt)) in sd_triples(60, 7).into_iter().enumerate() {
        let gamma = 1 + i % 6;
        let max_new = 1 + (i * 7) % 30;
        let cfg = sd(gamma, max_new);
        let res = speculative_generate(&target, &draft, &prompt, &cfg).unwrap();
        let oracle = generate_greedy(&target, &prompt, max_new, EOS).unwrap();
        assert_eq!(res.tokens, oracle, "triple {i}");
        assert_eq!(res.prompt_len, prompt.len());
        assert!(res.generated().len() <= max_new);
        match res.stopped_by {
            StopReason::Eos => assert_eq!(res.tokens.last(), Some(&EOS)),
            StopReason::Length => assert_eq!(res.generated().len(), max_new),
        }
        check_counts(&res.stats, gamma, &res.decisions);
    }
}

#[test]
fn identical_draft_is_never_rejected() {
    let target = trained_pattern_model(1);
    let draft = target.clone().with_role(Role::Draft);
    for prompt in pattern_prompts(10, 2) {
        let res = speculative_generate(&target, &draft, &prompt, &sd(4, 24)).unwrap();
        assert_eq!(res.stats.reject, 0);
        assert_eq!(
            res.tokens,
            generate_greedy(&target, &prompt, 24, EOS).unwrap()
        );
        assert_eq!(acceptance_rate(&res.stats).unwrap(), 1.0);
    }
}

#[test]
fn random_draft_agrees_near_chance_with_trained_target() {
    let target = trained_pattern_model(0);
    let v = target.config().vocab_size;
    assert!(v >= 16);
    let draft = TinyLM::init(LMConfig::draft_default(v), 99, Role::Draft).unwrap();
    let mut stats = SDStats::default();
    for prompt in pattern_prompts(20, 3) {
        let res = speculative_generate(&target, &draft, &prompt, &sd(5, 24)).unwrap();
        stats.merge(&res.stats);
    }
    let alpha = acceptance_rate(&stats).unwrap();
    assert!(alpha < 0.2, "alpha {alpha}");
}

#[test]
fn generation_is_deterministic() {
    let target = trained_pattern_model(2);
    let draft = perturbed(&target, 0.1, 5);
    for prompt in pattern_prompts(5, 4) {
        let a = speculative_generate(&target, &draft, &prompt, &sd(3, 20)).unwrap();
        let b = speculative_generate(&target, &draft, &prompt, &sd(3, 20)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn greedy_next_matches_softmax_argmax() {
    let mut r = rng(11);
    let model = TinyLM::<f32>::init(LMConfig::draft_default(40), 3, Role::Draft).unwrap();
    for _ in 0..50 {
        let len = r.gen_range(1..80);
        let ctx: Vec<Token> = (0..len).map(|_| r.gen_range(0..40)).collect();
        let window = &ctx[ctx.len().saturating_sub(model.config().context_len)..];
        let logits = model.last_logits(window).unwrap();
        let max = logits
            .iter()
            .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
        let z: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
        let probs: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp() / z).collect();
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        assert_eq!(greedy_next(&model, &ctx).unwrap(), best as Token);
        assert_eq!(argmax(&logits), best);
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = TinyLM::<f32>::init(LMConfig::draft_default(20), 0, Role::Draft).unwrap();
    assert!(matches!(
        speculative_generate(&m, &m, &[], &sd(2, 4)),
        Err(Error::Precondition(_))
    ));
    assert!(matches!(
        speculative_generate(&m, &m, &[3], &sd(0, 4)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        speculative_generate(&m, &m, &[3], &sd(2, 0)),
        Err(Error::Config(_))
    ));
    assert_eq!(generate_greedy(&m, &[3, 4], 0, EOS).unwrap(), vec![3, 4]);
}
