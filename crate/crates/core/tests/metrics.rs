mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use specdistill::metrics::{
    acceptance_rate, block_efficiency, measure_cost_coefficient, simulate_block_efficiency, speedup,
};
use specdistill::specdec::SDStats;
use specdistill::tinylm::{LMConfig, Role, TinyLM};
use specdistill::{Error, Token};

#[test]
fn block_efficiency_matches_monte_carlo() {
    let mut r = rng(1);
    let simulated = simulate_block_efficiency(0.5, 3, 1_000_000, &mut r);
    assert!((simulated - 1.875).abs() < 0.02, "{simulated}");
    assert_eq!(block_efficiency(0.5, 3).unwrap(), 1.875);
}

/// Draft blocks where every proposal independently agrees with probability
/// `p`; a block ends at the first disagreement or after `gamma` proposals.
fn bernoulli_stats(p: f64, gamma: usize, blocks: usize, seed: u64) -> SDStats {
    let mut r = rng(seed);
    let mut stats = SDStats::default();
    for _ in 0..blocks {
        let mut accepted = 0;
        let mut rejected = false;
        while accepted < gamma {
            if r.gen::<f64>() < p {
                accepted += 1;
            } else {
                rejected = true;
                break;
            }
        }
        stats.blocks += 1;
        stats.accept += accepted;
        stats.reject += usize::from(rejected);
        stats.per_block_accepted.push(accepted);
    }
    stats
}

#[test]
fn acceptance_rate_recovers_bernoulli_agreement() {
    let alpha = acceptance_rate(&bernoulli_stats(0.8, 5, 50, 0)).unwrap();
    assert!((alpha - 0.8).abs() < 0.05, "{alpha}");
    let alpha = acceptance_rate(&bernoulli_stats(0.8, 5, 100_000, 1)).unwrap();
    assert!((alpha - 0.8).abs() < 0.005, "{alpha}");
}

#[test]
fn acceptance_rate_needs_decisions() {
    assert!(matches!(
        acceptance_rate(&SDStats::default()),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn speedup_hand_values() {
    assert!((speedup(5.0, 4, 0.25).unwrap() - 2.5).abs() < 1e-15);
    assert!((speedup(1.0, 1, 1e-9).unwrap() - 1.0).abs() < 1e-8);
    assert!(speedup(2.0, 4, 0.3).unwrap() < 1.0);
    for bad in [(0.0, 1, 0.5), (1.0, 0, 0.5), (1.0, 1, -0.1)] {
        assert!(speedup(bad.0, bad.1, bad.2).is_err());
    }
}

fn probe() -> Vec<Token> {
    (0..40).map(|i| (i * 7 % 60) as Token).collect()
}

#[test]
fn identical_models_cost_about_the_same() {
    let m = TinyLM::<f32>::init(LMConfig::target_default(64), 0, Role::Target).unwrap();
    let c = measure_cost_coefficient(&m, &m, &probe(), 21).unwrap();
    assert!(c.c > 0.5 && c.c < 2.0, "c = {}", c.c);
    assert_eq!(c.target_secs.len(), 21);
    assert_eq!(c.draft_secs.len(), 21);
}

#[test]
fn default_draft_is_much_cheaper_than_default_target() {
    let t = TinyLM::<f32>::init(LMConfig::target_default(64), 0, Role::Target).unwrap();
    let d = TinyLM::<f32>::init(LMConfig::draft_default(64), 1, Role::Draft).unwrap();
    let c = measure_cost_coefficient(&t, &d, &probe(), 11).unwrap();
    assert!(c.c > 0.0 && c.c < 0.5, "c = {}", c.c);
}

#[test]
fn too_few_timing_trials_is_an_error() {
    let m = TinyLM::<f32>::init(LMConfig::draft_default(64), 0, Role::Draft).unwrap();
    assert!(matches!(
        measure_cost_coefficient(&m, &m, &probe(), 1),
        Err(Error::Precondition(_))
    ));
}

proptest! {
    #[test]
    fn block_efficiency_is_the_truncated_geometric_series(alpha in 0.0f64..=1.0, gamma in 1usize..12) {
        let series: f64 = (0..=gamma).map(|i| alpha.powi(i as i32)).sum();
        let tau = block_efficiency(alpha, gamma).unwrap();
        prop_assert!((tau - series).abs() < 1e-12);
        prop_assert!((1.0..=(gamma + 1) as f64).contains(&tau));
    }

    #[test]
    fn block_efficiency_rejects_out_of_range_alpha(alpha in prop_oneof![-10.0f64..-1e-9, 1.0 + 1e-9..10.0]) {
        prop_assert!(block_efficiency(alpha, 3).is_err());
    }

    #[test]
    fn speedup_decreases_with_cost(tau in 1.0f64..9.0, gamma in 1usize..9, c in 1e-3f64..2.0, dc in 1e-3f64..1.0) {
        prop_assert!(speedup(tau, gamma, c + dc).unwrap() < speedup(tau, gamma, c).unwrap());
    }
}

#[test]
fn block_efficiency_increases_on_a_grid() {
    for gamma in 1..=8 {
        let values: Vec<f64> = (0..99)
            .map(|i| block_efficiency(i as f64 / 99.0, gamma).unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[0] < w[1]), "gamma {gamma}");
    }
}
