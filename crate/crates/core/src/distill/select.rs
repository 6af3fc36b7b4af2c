use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep the largest loss gaps.
    #[default]
    Top,
    /// Keep the smallest loss gaps.
    Bottom,
    /// Keep everything.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub k: f64,
    pub mode: FilterMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig::none()
    }
}

impl FilterConfig {
    pub fn none() -> Self {
        FilterConfig {
            k: 1.0,
            mode: FilterMode::None,
        }
    }

    pub fn top(k: f64) -> Self {
        FilterConfig {
            k,
            mode: FilterMode::Top,
        }
    }

    pub fn bottom(k: f64) -> Self {
        FilterConfig {
            k,
            mode: FilterMode::Bottom,
        }
    }

    pub fn is_active(&self) -> bool {
        self.mode != FilterMode::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_active() && !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::config(format!(
                "filter fraction k must lie in (0, 1], got {}",
                self.k
            )));
        }
        Ok(())
    }

    /// Number of tokens kept out of `n`: `ceil(k·n)`, or `n` when inactive.
    pub fn retained(&self, n: usize) -> usize {
        if !self.is_active() {
            return n;
        }
        // Absorbs representation error such as 0.7 * 10 = 7.000000000000001.
        let m = (self.k * n as f64 - 1e-9).ceil();
        (m.max(0.0) as usize).min(n)
    }
}

/// Per-token token-loss bookkeeping for one supervised position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLossRecord {
    /// Row of the batch the token belongs to.
    pub example: usize,
    /// Position within the row.
    pub offset: usize,
    pub l_ref: f64,
    pub l_draft: f64,
    pub delta: f64,
}

impl TokenLossRecord {
    pub fn new(example: usize, offset: usize, l_ref: f64, l_draft: f64) -> Self {
        TokenLossRecord {
            example,
            offset,
            l_ref,
            l_draft,
            delta: l_draft - l_ref,
        }
    }
}

/// Tokens kept by a filter, aligned with the supervised positions of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    pub selected: Vec<bool>,
    pub retained: usize,
}

impl SelectionMask {
    pub fn all(n: usize) -> Self {
        SelectionMask {
            selected: vec![true; n],
            retained: n,
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Keeps the `ceil(k·N)` largest (top) or smallest (bottom) gaps. Ties go
/// to the earlier position.
pub fn select_by_delta(deltas: &[f64], filter: &FilterConfig) -> Result<SelectionMask> {
    if deltas.is_empty() {
        return Err(Error::precondition("no supervised tokens to select from"));
    }
    filter.validate()?;
    if !filter.is_active() {
        return Ok(SelectionMask::all(deltas.len()));
    }
    let m = filter.retained(deltas.len());
    if m == 0 {
        return Err(Error::config("filter keeps no tokens"));
    }
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    match filter.mode {
        FilterMode::Top => order.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]).then(a.cmp(&b))),
        _ => order.sort_by(|&a, &b| deltas[a].total_cmp(&deltas[b]).then(a.cmp(&b))),
    }
    let mut selected = vec![false; deltas.len()];
    for &i in &order[..m] {
        selected[i] = true;
    }
    Ok(SelectionMask {
        selected,
        retained: m,
    })
}

pub fn select_tokens(records: &[TokenLossRecord], filter: &FilterConfig) -> Result<SelectionMask> {
    let deltas: Vec<f64> = records.iter().map(|r| r.delta).collect();
    select_by_delta(&deltas, filter)
}

/// `(1 / (k·N)) · Σ_selected L_draft` over the `N` supervised tokens.
pub fn filtered_loss(records: &[TokenLossRecord], mask: &SelectionMask, k: f64) -> Result<f64> {
    if records.len() != mask.len() {
        return Err(Error::precondition(format!(
            "{} records but mask of {}",
            records.len(),
            mask.len()
        )));
    }
    if mask.retained == 0 || !mask.selected.iter().any(|&s| s) {
        return Err(Error::precondition("empty selection"));
    }
    let total: f64 = records
        .iter()
        .zip(&mask.selected)
        .filter(|(_, &s)| s)
        .map(|(r, _)| r.l_draft)
        .sum();
    Ok(total / (k * records.len() as f64))
}

/// Learning rate after the linear scaling rule: `base_lr · k` when scaling
/// is enabled and the filter is active.
pub fn scaled_lr(base_lr: f64, filter: &FilterConfig, lr_scaling: bool) -> f64 {
    if lr_scaling && filter.is_active() {
        base_lr * filter.k
    } else {
        base_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_tokens_top_forty_percent() {
        let d: Vec<f64> = (0..10).map(f64::from).collect();
        let m = select_by_delta(&d, &FilterConfig::top(0.4)).unwrap();
        let kept: Vec<usize> = (0..10).filter(|&i| m.selected[i]).collect();
        assert_eq!(kept, vec![6, 7, 8, 9]);
        let m = select_by_delta(&d, &FilterConfig::bottom(0.4)).unwrap();
        let kept: Vec<usize> = (0..10).filter(|&i| m.selected[i]).collect();
        assert_eq!(kept, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ties_break_toward_earlier_positions() {
        let m = select_by_delta(&[1.0; 7], &FilterConfig::top(0.5)).unwrap();
        assert_eq!(m.retained, 4);
        assert_eq!(
            m.selected,
            vec![true, true, true, true, false, false, false]
        );
    }

    #[test]
    fn k_zero_is_rejected() {
        assert!(select_by_delta(&[1.0], &FilterConfig::top(0.0)).is_err());
    }

    #[test]
    fn retained_counts() {
        assert_eq!(FilterConfig::top(0.7).retained(10), 7);
        assert_eq!(FilterConfig::top(0.4).retained(3), 2);
        assert_eq!(FilterConfig::top(1.0).retained(9), 9);
        assert_eq!(FilterConfig::top(0.01).retained(1), 1);
    }

    #[test]
    fn lr_scaling() {
        assert_eq!(scaled_lr(3e-4, &FilterConfig::top(1.0), true), 3e-4);
        assert_eq!(scaled_lr(3e-4, &FilterConfig::top(0.4), false), 3e-4);
        assert!((scaled_lr(3e-4, &FilterConfig::top(0.4), true) - 1.2e-4).abs() < 1e-18);
        assert_eq!(scaled_lr(3e-4, &FilterConfig::none(), true), 3e-4);
    }

    #[test]
    fn filtered_loss_arithmetic() {
        let recs = vec![
            TokenLossRecord::new(0, 0, 0.0, 2.0),
            TokenLossRecord::new(0, 1, 0.0, 5.0),
        ];
        let mask = SelectionMask {
            selected: vec![true, false],
            retained: 1,
        };
        assert_eq!(filtered_loss(&recs, &mask, 1.0).unwrap(), 1.0);
        let all = SelectionMask::all(2);
        assert_eq!(filtered_loss(&recs, &all, 1.0).unwrap(), 3.5);
    }
}
