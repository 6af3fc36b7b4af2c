//! Diagnostics comparing draft models against a target: acceptance
//! histograms, logit margins, per-token divergences, error overlap and
//! dumps of the tokens a filter selected.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Tokenizer;
use crate::distill::{divergence_logits, BatchSelection, DivergenceKind};
use crate::error::{Error, Result};
use crate::metrics::acceptance_rate;
use crate::numcore::{argmax, Tensor};
use crate::specdec::GenerationResult;
use crate::tinylm::TinyLM;
use crate::Token;

/// A prompt followed by a continuation, scored teacher-forced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<Token>,
    pub prompt_len: usize,
}

impl From<&GenerationResult> for Trajectory {
    fn from(r: &GenerationResult) -> Self {
        Trajectory {
            tokens: r.tokens.clone(),
            prompt_len: r.prompt_len,
        }
    }
}

impl Trajectory {
    /// Positions whose next token is part of the continuation.
    pub fn scored_positions(&self) -> std::ops::Range<usize> {
        self.prompt_len.saturating_sub(1)..self.tokens.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub fraction_positive: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub summary: HistogramSummary,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Histogram {
    /// Bins `values` on fixed edges. Bin `i` is `[edges[i], edges[i+1])`,
    /// the last bin is closed, and out-of-range values land in the end bins.
    pub fn with_edges(values: &[f64], edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::precondition(
                "histogram edges must be strictly increasing",
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("histogram input"));
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0; bins];
        for &v in values {
            let i = edges[1..bins].partition_point(|&e| e <= v);
            counts[i] += 1;
        }
        let count = values.len();
        let mean = if count == 0 {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / count as f64
        };
        Ok(Histogram {
            edges,
            counts,
            summary: HistogramSummary {
                count,
                mean,
                median: median(values),
                fraction_positive: None,
            },
        })
    }

    /// Evenly spaced bins over `[lo, hi]`.
    pub fn uniform(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(lo < hi) {
            return Err(Error::precondition(format!(
                "bad histogram range [{lo}, {hi}] with {bins} bins"
            )));
        }
        let edges = (0..=bins)
            .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
            .collect();
        Self::with_edges(values, edges)
    }

    /// Evenly spaced bins spanning the data.
    pub fn spanning(values: &[f64], bins: usize) -> Result<Self> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Self::uniform(values, 0.0, 1.0, bins);
        }
        if lo == hi {
            return Self::uniform(values, lo - 0.5, hi + 0.5, bins);
        }
        Self::uniform(values, lo, hi, bins)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-example acceptance rates of speculative rollouts.
pub fn per_example_acceptance(results: &[GenerationResult]) -> Result<Vec<f64>> {
    if results.is_empty() {
        return Err(Error::precondition("no generation results"));
    }
    results.iter().map(|r| acceptance_rate(&r.stats)).collect()
}

/// Per-example acceptance rates binned over `[0, 1]`.
pub fn acceptance_histogram(results: &[GenerationResult], bins: usize) -> Result<Histogram> {
    let rates = per_example_acceptance(results)?;
    Histogram::uniform(&rates, 0.0, 1.0, bins)
}

/// Logit rows for predicting the token after each position in `positions`.
/// Sequences longer than the context are scored per prefix on a left-truncated window.
fn logits_at(model: &TinyLM, seq: &[Token], positions: &[usize]) -> Result<Tensor<f32>> {
    let context = model.config().context_len;
    if seq.len() <= context {
        return model.forward_at(seq, positions);
    }
    let rows = positions
        .iter()
        .map(|&p| {
            let start = (p + 1).saturating_sub(context);
            model.last_logits(&seq[start..=p])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Teacher-forced logits of both models along one trajectory.
struct Aligned {
    positions: Vec<usize>,
    target: Tensor<f32>,
    draft: Tensor<f32>,
}

fn align(target: &TinyLM, draft: &TinyLM, t: &Trajectory) -> Result<Aligned> {
    if target.config().vocab_size != draft.config().vocab_size {
        return Err(Error::config(format!(
            "target vocabulary {} differs from draft vocabulary {}",
            target.config().vocab_size,
            draft.config().vocab_size
        )));
    }
    let positions: Vec<usize> = t.scored_positions().collect();
    if positions.is_empty() {
        let v = target.config().vocab_size;
        return Ok(Aligned {
            positions,
            target: Tensor::zeros(vec![0, v]),
            draft: Tensor::zeros(vec![0, v]),
        });
    }
    Ok(Aligned {
        target: logits_at(target, &t.tokens, &positions)?,
        draft: logits_at(draft, &t.tokens, &positions)?,
        positions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub example: usize,
    /// Sequence index of the predicted token, as in specdec decisions.
    pub position: usize,
    /// Target's greedy token after the context.
    pub target_token: Token,
    /// Draft logit of the target's token minus the best other draft logit.
    pub margin: f64,
    /// Whether the draft's greedy choice equals the target's. Differs from
    /// `margin > 0` only at an exact tie the target token wins on id.
    pub positive: bool,
}

/// Signed draft margins in favour of the target's greedy token.
pub fn margin_of(draft_row: &[f32], target_token: usize) -> (f64, bool) {
    let best_other = draft_row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target_token)
        .map(|(_, &x)| x as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = draft_row[target_token] as f64 - best_other;
    (margin, argmax(draft_row) == target_token)
}

pub fn margin_distribution(
    target: &TinyLM,
    draft: &TinyLM,
    trajectories: &[Trajectory],
    bins: usize,
) -> Result<(Vec<MarginRecord>, Histogram)> {
    let mut records = Vec::new();
    for (example, t) in trajectories.iter().enumerate() {
        let a = align(target, draft, t)?;
        for (r, &position) in a.positions.iter().enumerate() {
            let target_token = argmax(a.target.row(r));
            let (margin, positive) = margin_of(a.draft.row(r), target_token);
            records.push(MarginRecord {
                example,
                position: position + 1,
                target_token: target_token as Token,
                margin,
                positive,
            });
        }
    }
    let margins: Vec<f64> = records.iter().map(|r| r.margin).collect();
    let mut hist = Histogram::spanning(&margins, bins)?;
    if !records.is_empty() {
        let pos = records.iter().filter(|r| r.positive).count();
        hist.summary.fraction_positive = Some(pos as f64 / records.len() as f64);
    }
    Ok((records, hist))
}

/// Forward KL from target to draft at every scored position.
pub fn kl_distribution(
    target: &TinyLM,
    draft: &TinyLM,
    trajectories: &[Trajectory],
    bins: usize,
) -> Result<(Vec<f64>, Histogram)> {
    let mut values = Vec::new();
    for t in trajectories {
        let a = align(target, draft, t)?;
        for r in 0..a.positions.len() {
            values.push(divergence_logits(
                a.target.row(r),
                a.draft.row(r),
                DivergenceKind::ForwardKl,
            ));
        }
    }
    let hi = values.iter().copied().fold(0.0, f64::max);
    let hist = Histogram::uniform(&values, 0.0, if hi > 0.0 { hi } else { 1.0 }, bins)?;
    Ok((values, hist))
}

/// A position where at least one draft disagrees with the target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchSite {
    pub example: usize,
    /// Sequence index of the predicted token.
    pub position: usize,
    pub target_token: Token,
    pub a_token: Token,
    pub b_token: Token,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub scored: usize,
    pub both: Vec<MismatchSite>,
    pub only_a: Vec<MismatchSite>,
    pub only_b: Vec<MismatchSite>,
}

impl OverlapReport {
    pub fn errors_a(&self) -> usize {
        self.both.len() + self.only_a.len()
    }

    pub fn errors_b(&self) -> usize {
        self.both.len() + self.only_b.len()
    }

    /// Share of `a`'s errors that `b` does not make; 0 when `a` makes none.
    pub fn a_outside_b(&self) -> f64 {
        if self.errors_a() == 0 {
            0.0
        } else {
            self.only_a.len() as f64 / self.errors_a() as f64
        }
    }

    /// Human-readable case study with up to `limit` sites per group.
    pub fn render(
        &self,
        tokenizer: &Tokenizer,
        trajectories: &[Trajectory],
        limit: usize,
    ) -> String {
        let sym = |t: Token| tokenizer.symbol(t).unwrap_or("?").to_string();
        let mut out = format!(
            "scored {}  errors a {}  errors b {}  shared {}  only a {}  only b {}  a outside b {:.4}\n",
            self.scored,
            self.errors_a(),
            self.errors_b(),
            self.both.len(),
            self.only_a.len(),
            self.only_b.len(),
            self.a_outside_b()
        );
        for (name, sites) in [
            ("shared", &self.both),
            ("only a", &self.only_a),
            ("only b", &self.only_b),
        ] {
            out.push_str(&format!("[{name}]\n"));
            for s in sites.iter().take(limit) {
                let t = &trajectories[s.example];
                let context = tokenizer.decode(&t.tokens[..s.position]);
                out.push_str(&format!(
                    "  #{} {:?} -> target {:?} a {:?} b {:?}\n",
                    s.example,
                    context,
                    sym(s.target_token),
                    sym(s.a_token),
                    sym(s.b_token)
                ));
            }
        }
        out
    }
}

/// Teacher-forced greedy mismatches of two drafts against one target.
pub fn error_overlap(
    target: &TinyLM,
    draft_a: &TinyLM,
    draft_b: &TinyLM,
    trajectories: &[Trajectory],
) -> Result<OverlapReport> {
    let mut report = OverlapReport::default();
    for (example, t) in trajectories.iter().enumerate() {
        let a = align(target, draft_a, t)?;
        let b = align(target, draft_b, t)?;
        for (r, &position) in a.positions.iter().enumerate() {
            let site = MismatchSite {
                example,
                position: position + 1,
                target_token: argmax(a.target.row(r)) as Token,
                a_token: argmax(a.draft.row(r)) as Token,
                b_token: argmax(b.draft.row(r)) as Token,
            };
            report.scored += 1;
            let wrong_a = site.a_token != site.target_token;
            let wrong_b = site.b_token != site.target_token;
            match (wrong_a, wrong_b) {
                (true, true) => report.both.push(site),
                (true, false) => report.only_a.push(site),
                (false, true) => report.only_b.push(site),
                (false, false) => {}
            }
        }
    }
    Ok(report)
}

/// Mismatch positions as `(example, position)` pairs.
pub fn error_set(sites: &[&[MismatchSite]]) -> BTreeSet<(usize, usize)> {
    sites
        .iter()
        .flat_map(|s| s.iter().map(|m| (m.example, m.position)))
        .collect()
}

/// One supervised token of a training batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub batch: usize,
    pub index: usize,
    pub token: String,
    pub delta: f64,
    pub selected: bool,
}

/// Writes every supervised token of the captured batches as tab-separated
/// rows with its loss gap and whether the filter kept it.
pub fn dump_selected_tokens(
    selections: &[BatchSelection],
    tokenizer: &Tokenizer,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if selections.is_empty() {
        return Err(Error::precondition("no batches to dump"));
    }
    if let Some(b) = selections
        .iter()
        .position(|s| !s.mask.selected.iter().any(|&x| x))
    {
        return Err(Error::precondition(format!(
            "batch {b} has an empty selection"
        )));
    }
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    for (batch, s) in selections.iter().enumerate() {
        for (index, (&label, &delta)) in s.labels.iter().zip(&s.deltas).enumerate() {
            let token = tokenizer.symbol(label).unwrap_or("?").to_string();
            w.serialize(DumpRow {
                batch,
                index,
                token,
                delta,
                selected: s.mask.selected[index],
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_token_dump(path: impl AsRef<Path>) -> Result<Vec<DumpRow>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
    r.deserialize()
        .collect::<std::result::Result<Vec<DumpRow>, _>>()
        .map_err(Error::from)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Enrichment {
    pub selected_rate: f64,
    pub base_rate: f64,
    pub ratio: f64,
}

/// How much more often tokens matching `class` occur among selected tokens
/// than among all dumped tokens.
pub fn enrichment(rows: &[DumpRow], class: impl Fn(&str) -> bool) -> Result<Enrichment> {
    let selected: Vec<&DumpRow> = rows.iter().filter(|r| r.selected).collect();
    if selected.is_empty() {
        return Err(Error::precondition("no selected tokens"));
    }
    let rate =
        |rs: &[&DumpRow]| rs.iter().filter(|r| class(&r.token)).count() as f64 / rs.len() as f64;
    let all: Vec<&DumpRow> = rows.iter().collect();
    let base_rate = rate(&all);
    if base_rate == 0.0 {
        return Err(Error::precondition("no dumped token belongs to the class"));
    }
    let selected_rate = rate(&selected);
    Ok(Enrichment {
        selected_rate,
        base_rate,
        ratio: selected_rate / base_rate,
    })
}

/// Digits and arithmetic operators.
pub fn is_numeric_token(token: &str) -> bool {
    !token.is_empty()
        && token
            .chars()
            .all(|c| c.is_ascii_digit() || "+-*/=".contains(c))
}
