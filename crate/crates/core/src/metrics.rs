//! Acceptance rate, block efficiency, analytic speedup and cost measurement.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::specdec::SDStats;
use crate::tinylm::TinyLM;
use crate::Token;

/// `accept / (accept + reject)`.
pub fn acceptance_rate(stats: &SDStats) -> Result<f64> {
    acceptance_from_counts(stats.accept, stats.reject)
}

pub fn acceptance_from_counts(accept: usize, reject: usize) -> Result<f64> {
    let total = accept + reject;
    if total == 0 {
        return Err(Error::precondition("no draft decisions were made"));
    }
    Ok(accept as f64 / total as f64)
}

/// Expected tokens per target pass, `(1 - α^(γ+1)) / (1 - α)`, with the
/// limit `γ + 1` at `α = 1`.
pub fn block_efficiency(alpha: f64, gamma: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::precondition(format!(
            "acceptance rate {alpha} outside [0, 1]"
        )));
    }
    if gamma == 0 {
        return Err(Error::precondition("gamma must be at least 1"));
    }
    if alpha == 1.0 {
        return Ok((gamma + 1) as f64);
    }
    Ok((1.0 - alpha.powi(gamma as i32 + 1)) / (1.0 - alpha))
}

/// `τ / (γ·c + 1)`.
pub fn speedup(tau: f64, gamma: usize, c: f64) -> Result<f64> {
    if !(tau > 0.0) || gamma == 0 || !(c > 0.0) {
        return Err(Error::precondition(format!(
            "speedup needs positive inputs, got tau={tau}, gamma={gamma}, c={c}"
        )));
    }
    Ok(tau / (gamma as f64 * c + 1.0))
}

/// Mean tokens per block when every proposal is independently accepted
/// with probability `alpha`: accepted prefix length plus the target token.
pub fn simulate_block_efficiency(
    alpha: f64,
    gamma: usize,
    blocks: usize,
    rng: &mut impl Rng,
) -> f64 {
    let mut total = 0u64;
    for _ in 0..blocks {
        let mut accepted = 0;
        while accepted < gamma && rng.gen::<f64>() < alpha {
            accepted += 1;
        }
        total += accepted as u64 + 1;
    }
    total as f64 / blocks as f64
}

/// Draft-to-target forward latency ratio with its raw timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficient {
    pub c: f64,
    pub target_secs: Vec<f64>,
    pub draft_secs: Vec<f64>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times single forward passes of both models over `probe` and returns the
/// ratio of the median draft time to the median target time.
pub fn measure_cost_coefficient(
    target: &TinyLM,
    draft: &TinyLM,
    probe: &[Token],
    trials: usize,
) -> Result<CostCoefficient> {
    if trials < 3 {
        return Err(Error::precondition(format!(
            "need at least 3 timing trials, got {trials}"
        )));
    }
    if probe.is_empty() {
        return Err(Error::precondition("empty probe sequence"));
    }
    let time = |m: &TinyLM| -> Result<Vec<f64>> {
        m.forward(probe)?;
        (0..trials)
            .map(|_| {
                let start = Instant::now();
                m.forward(probe)?;
                Ok(start.elapsed().as_secs_f64())
            })
            .collect()
    };
    let target_secs = time(target)?;
    let draft_secs = time(draft)?;
    let c = median(&draft_secs) / median(&target_secs);
    Ok(CostCoefficient {
        c: c.max(f64::MIN_POSITIVE),
        target_secs,
        draft_secs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let s = SDStats {
            accept: 3,
            reject: 1,
            ..Default::default()
        };
        assert_eq!(acceptance_rate(&s).unwrap(), 0.75);
        assert_eq!(acceptance_from_counts(4, 0).unwrap(), 1.0);
        assert!(acceptance_from_counts(0, 0).is_err());
        assert_eq!(block_efficiency(0.0, 3).unwrap(), 1.0);
        assert_eq!(block_efficiency(1.0, 4).unwrap(), 5.0);
        assert!((block_efficiency(0.5, 3).unwrap() - 1.875).abs() < 1e-15);
        assert!(block_efficiency(1.5, 3).is_err());
        assert!((speedup(5.0, 4, 0.25).unwrap() - 2.5).abs() < 1e-15);
        assert!(speedup(1.0, 1, 0.0).is_err());
        assert!((speedup(1.0, 1, 1e-12).unwrap() - 1.0).abs() < 1e-11);
        assert!(speedup(2.0, 4, 0.5).unwrap() < 1.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
