use serde::{Deserialize, Serialize};

use super::divergence::{
    cross_entropy_graph, cross_entropy_logits, divergence_graph, divergence_logits, DivergenceKind,
};
use super::select::{scaled_lr, select_by_delta, FilterConfig, SelectionMask, TokenLossRecord};
use crate::datasets::{batchify, Batch, Dataset};
use crate::error::{Error, Result};
use crate::numcore::{clip_grad_norm, Adam, AdamConfig, Graph, Tensor};
use crate::tinylm::TinyLM;
use crate::Token;

/// Rows per forward pass when scoring a frozen model over a dataset.
const SCORE_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Match a teacher's next-token distribution.
    #[default]
    Distill,
    /// Cross-entropy against dataset labels.
    FineTune,
}

/// How a single supervised token is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenLoss {
    Divergence(DivergenceKind),
    CrossEntropy,
}

impl TokenLoss {
    /// Scores one student row against a teacher row or a label.
    pub fn score(self, teacher: Option<&[f32]>, student: &[f32], label: Token) -> f64 {
        match self {
            TokenLoss::Divergence(kind) => divergence_logits(
                teacher.expect("divergence needs a teacher row"),
                student,
                kind,
            ),
            TokenLoss::CrossEntropy => cross_entropy_logits(student, label as usize),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Decays linearly from the peak rate towards zero over the run.
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub divergence: DivergenceKind,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default = "default_true")]
    pub lr_scaling: bool,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Global gradient-norm ceiling; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
}

fn default_true() -> bool {
    true
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            epochs: 3,
            seed: 0,
            objective: Objective::Distill,
            divergence: DivergenceKind::ForwardKl,
            filter: FilterConfig::none(),
            lr_scaling: true,
            schedule: LrSchedule::Linear,
            clip_norm: default_clip(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        AdamConfig::with_lr(self.lr).validate()?;
        self.filter.validate()
    }

    pub fn token_loss(&self) -> TokenLoss {
        match self.objective {
            Objective::Distill => TokenLoss::Divergence(self.divergence),
            Objective::FineTune => TokenLoss::CrossEntropy,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        scaled_lr(self.lr, &self.filter, self.lr_scaling)
    }

    /// Shuffle seed for one epoch.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1)
    }
}

/// Logits of a frozen model at every supervised position of a dataset,
/// one `[completion_len, vocab]` block per example.
///
/// Forward passes are row-independent and causal, so these rows are
/// bit-identical to the ones a batched training forward would produce.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs {
    rows: Vec<Tensor<f32>>,
    vocab: usize,
}

impl ModelOutputs {
    pub fn compute(model: &TinyLM, dataset: &Dataset) -> Result<Self> {
        let vocab = model.config().vocab_size;
        let mut rows = vec![Tensor::zeros(vec![0, vocab]); dataset.len()];
        if dataset.is_empty() {
            return Ok(ModelOutputs { rows, vocab });
        }
        let seq = dataset.max_len() - 1;
        for batch in batchify(dataset, SCORE_BATCH, seq, None)? {
            let sup = batch.supervised_positions();
            let mut g = Graph::new();
            let out =
                model.forward_graph(&mut g, &batch.inputs, batch.batch, seq, Some(&sup), false)?;
            let logits = g.value(out.logits).data();
            let mut cursor = 0;
            for &id in &batch.example_ids {
                let n = dataset.examples[id].completion.len();
                let block = logits[cursor * vocab..(cursor + n) * vocab].to_vec();
                rows[id] = Tensor::new(vec![n, vocab], block)?;
                cursor += n;
            }
        }
        Ok(ModelOutputs { rows, vocab })
    }

    pub fn example(&self, id: usize) -> &Tensor<f32> {
        &self.rows[id]
    }

    /// Rows of the listed examples stacked in order.
    pub fn stack(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut n = 0;
        for &id in ids {
            data.extend_from_slice(self.rows[id].data());
            n += self.rows[id].rows();
        }
        Tensor::new(vec![n, self.vocab], data)
    }
}

/// Frozen per-token losses of the reference model, one vector per example.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceLosses {
    per_example: Vec<Vec<f64>>,
    pub loss: TokenLoss,
}

impl ReferenceLosses {
    pub fn compute(
        reference: &ModelOutputs,
        teacher: Option<&ModelOutputs>,
        dataset: &Dataset,
        loss: TokenLoss,
    ) -> Result<Self> {
        if matches!(loss, TokenLoss::Divergence(_)) && teacher.is_none() {
            return Err(Error::config("divergence losses need teacher outputs"));
        }
        let per_example = dataset
            .examples
            .iter()
            .enumerate()
            .map(|(id, ex)| {
                let r = reference.example(id);
                (0..r.rows())
                    .map(|i| {
                        loss.score(
                            teacher.map(|t| t.example(id).row(i)),
                            r.row(i),
                            ex.completion[i],
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(ReferenceLosses { per_example, loss })
    }

    pub fn example(&self, id: usize) -> &[f64] {
        &self.per_example[id]
    }

    pub fn stack(&self, ids: &[usize]) -> Vec<f64> {
        ids.iter()
            .flat_map(|&id| self.per_example[id].iter().copied())
            .collect()
    }
}

/// One batch's selection, kept for token dumps.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSelection {
    pub labels: Vec<Token>,
    pub deltas: Vec<f64>,
    pub mask: SelectionMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    /// Mean of the optimized (possibly filtered) objective per step.
    pub mean_loss: f64,
    /// Mean unfiltered per-token loss over all supervised tokens.
    pub mean_token_loss: f64,
    pub supervised_tokens: usize,
    pub selected_tokens: usize,
    pub lr: f64,
    pub mean_grad_norm: f64,
}

impl EpochStats {
    pub fn perplexity(&self) -> f64 {
        self.mean_token_loss.exp()
    }
}

/// Optimizer state and bookkeeping across epochs of one training stage.
pub struct Trainer {
    cfg: TrainConfig,
    adam: Adam<f32>,
    epoch: usize,
    steps_taken: usize,
    /// When set, the selections of the most recent epoch are retained.
    pub capture: bool,
    pub last_selections: Vec<BatchSelection>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(AdamConfig::with_lr(cfg.effective_lr()))?;
        Ok(Trainer {
            cfg,
            adam,
            epoch: 0,
            steps_taken: 0,
            capture: false,
            last_selections: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One cross-entropy pass over `dataset`. With a reference the loss
    /// gaps are cross-entropy differences and the configured filter applies.
    pub fn finetune_epoch(
        &mut self,
        model: &mut TinyLM,
        dataset: &Dataset,
        reference: Option<&ReferenceLosses>,
    ) -> Result<EpochStats> {
        if self.cfg.objective != Objective::FineTune {
            return Err(Error::config(
                "finetune_epoch needs the fine-tune objective",
            ));
        }
        self.run_epoch(model, dataset, None, reference)
    }

    /// One distillation pass from frozen teacher outputs. Without a
    /// reference and with no filter this is plain forward-KL distillation.
    pub fn distill_epoch(
        &mut self,
        student: &mut TinyLM,
        teacher: &ModelOutputs,
        reference: Option<&ReferenceLosses>,
        dataset: &Dataset,
    ) -> Result<EpochStats> {
        if self.cfg.objective != Objective::Distill {
            return Err(Error::config("distill_epoch needs the distill objective"));
        }
        self.run_epoch(student, dataset, Some(teacher), reference)
    }

    /// Learning rate for the next step of a run lasting `total_steps`.
    fn lr_at(&self, total_steps: usize) -> f64 {
        let peak = self.cfg.effective_lr();
        match self.cfg.schedule {
            LrSchedule::Constant => peak,
            LrSchedule::Linear => {
                let done = self.steps_taken.min(total_steps) as f64;
                peak * (1.0 - done / total_steps.max(1) as f64)
            }
        }
    }

    fn run_epoch(
        &mut self,
        student: &mut TinyLM,
        dataset: &Dataset,
        teacher: Option<&ModelOutputs>,
        reference: Option<&ReferenceLosses>,
    ) -> Result<EpochStats> {
        if self.cfg.filter.is_active() && reference.is_none() {
            return Err(Error::config("token filtering requires a reference model"));
        }
        if let Some(r) = reference {
            if r.loss != self.cfg.token_loss() {
                return Err(Error::config(
                    "reference losses were scored with a different loss",
                ));
            }
        }
        if dataset.is_empty() {
            return Err(Error::precondition("empty training set"));
        }
        let seq = dataset.max_len() - 1;
        let batches = batchify(
            dataset,
            self.cfg.batch_size,
            seq,
            Some(self.cfg.epoch_seed(self.epoch)),
        )?;
        let total_steps = batches.len() * self.cfg.epochs;
        self.last_selections.clear();
        let mut stats = EpochStats {
            epoch: self.epoch,
            steps: 0,
            mean_loss: 0.0,
            mean_token_loss: 0.0,
            supervised_tokens: 0,
            selected_tokens: 0,
            lr: self.lr_at(total_steps),
            mean_grad_norm: 0.0,
        };
        for batch in &batches {
            self.adam.set_lr(self.lr_at(total_steps));
            let Some(step) = self.step(student, batch, teacher, reference)? else {
                continue;
            };
            stats.steps += 1;
            stats.mean_loss += step.loss;
            stats.mean_token_loss += step.token_loss_sum;
            stats.supervised_tokens += step.mask.len();
            stats.selected_tokens += step.mask.retained;
            stats.mean_grad_norm += step.grad_norm;
            if self.capture {
                self.last_selections.push(BatchSelection {
                    labels: batch.supervised_labels(),
                    deltas: step.deltas,
                    mask: step.mask,
                });
            }
        }
        if stats.steps > 0 {
            stats.mean_loss /= stats.steps as f64;
            stats.mean_grad_norm /= stats.steps as f64;
        }
        if stats.supervised_tokens > 0 {
            stats.mean_token_loss /= stats.supervised_tokens as f64;
        }
        self.epoch += 1;
        Ok(stats)
    }

    fn step(
        &mut self,
        student: &mut TinyLM,
        batch: &Batch,
        teacher: Option<&ModelOutputs>,
        reference: Option<&ReferenceLosses>,
    ) -> Result<Option<StepOutcome>> {
        let sup = batch.supervised_positions();
        if sup.is_empty() {
            return Ok(None);
        }
        let labels = batch.supervised_labels();
        let loss_kind = self.cfg.token_loss();
        let mut g = Graph::new();
        let fv = student.forward_graph(
            &mut g,
            &batch.inputs,
            batch.batch,
            batch.seq,
            Some(&sup),
            true,
        )?;
        let teacher_logits = teacher.map(|t| t.stack(&batch.example_ids)).transpose()?;
        let per_token = match loss_kind {
            TokenLoss::Divergence(kind) => {
                let t = teacher_logits
                    .as_ref()
                    .ok_or_else(|| Error::config("distillation needs a teacher"))?;
                divergence_graph(&mut g, t, fv.logits, kind)?
            }
            TokenLoss::CrossEntropy => {
                let idx: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
                cross_entropy_graph(&mut g, fv.logits, &idx)?
            }
        };

        let q = g.value(fv.logits);
        let l_draft: Vec<f64> = (0..sup.len())
            .map(|i| {
                loss_kind.score(
                    teacher_logits.as_ref().map(|t| t.row(i)),
                    q.row(i),
                    labels[i],
                )
            })
            .collect();
        let (deltas, mask) = match reference {
            Some(r) if self.cfg.filter.is_active() => {
                let l_ref = r.stack(&batch.example_ids);
                let deltas: Vec<f64> = l_draft.iter().zip(&l_ref).map(|(d, r)| d - r).collect();
                let mask = select_by_delta(&deltas, &self.cfg.filter)?;
                (deltas, mask)
            }
            _ => (Vec::new(), SelectionMask::all(sup.len())),
        };

        let k = if self.cfg.filter.is_active() {
            self.cfg.filter.k
        } else {
            1.0
        };
        let scale = (1.0 / (k * sup.len() as f64)) as f32;
        let weights: Vec<f32> = mask
            .selected
            .iter()
            .map(|&s| if s { scale } else { 0.0 })
            .collect();
        let w = g.constant(Tensor::new(vec![sup.len()], weights)?);
        let weighted = g.mul(per_token, w)?;
        let loss = g.sum(weighted);
        let loss_value = g.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        g.backward(loss)?;
        let mut grads: Vec<Tensor<f32>> = fv
            .params
            .iter()
            .zip(student.params())
            .map(|(&v, p)| {
                g.take_grad(v)
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect();
        let grad_norm = match self.cfg.clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => clip_grad_norm(&mut grads, f64::INFINITY),
        };
        self.adam.step(student.params_mut(), &grads)?;
        student.step += 1;
        self.steps_taken += 1;
        Ok(Some(StepOutcome {
            loss: loss_value,
            token_loss_sum: l_draft.iter().sum(),
            grad_norm,
            deltas,
            mask,
        }))
    }
}

struct StepOutcome {
    loss: f64,
    token_loss_sum: f64,
    grad_norm: f64,
    deltas: Vec<f64>,
    mask: SelectionMask,
}

/// Runs every configured epoch of cross-entropy training.
pub fn finetune(
    model: &mut TinyLM,
    dataset: &Dataset,
    reference: Option<&ReferenceLosses>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    let mut trainer = Trainer::new(cfg.clone())?;
    (0..cfg.epochs)
        .map(|_| trainer.finetune_epoch(model, dataset, reference))
        .collect()
}

/// Runs every configured epoch of distillation.
pub fn distill(
    student: &mut TinyLM,
    teacher: &ModelOutputs,
    reference: Option<&ReferenceLosses>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    let mut trainer = Trainer::new(cfg.clone())?;
    (0..cfg.epochs)
        .map(|_| trainer.distill_epoch(student, teacher, reference, dataset))
        .collect()
}

/// Per-token loss records for one batch, computed from fresh forward passes
/// of the three models. `target` may be omitted for cross-entropy losses.
pub fn compute_deltas(
    target: Option<&TinyLM>,
    reference: &TinyLM,
    draft: &TinyLM,
    batch: &Batch,
    loss: TokenLoss,
) -> Result<Vec<TokenLossRecord>> {
    let sup = batch.supervised_positions();
    if sup.is_empty() {
        return Err(Error::precondition("batch has no supervised tokens"));
    }
    let vocab = draft.config().vocab_size;
    if reference.config().vocab_size != vocab
        || target.is_some_and(|t| t.config().vocab_size != vocab)
    {
        return Err(Error::config("models disagree on vocabulary size"));
    }
    let logits = |m: &TinyLM| -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let out = m.forward_graph(
            &mut g,
            &batch.inputs,
            batch.batch,
            batch.seq,
            Some(&sup),
            false,
        )?;
        Ok(g.value(out.logits).clone())
    };
    let t = match (loss, target) {
        (TokenLoss::Divergence(_), None) => {
            return Err(Error::config("divergence losses need the target"))
        }
        (_, Some(t)) => Some(logits(t)?),
        _ => None,
    };
    let r = logits(reference)?;
    let d = logits(draft)?;
    let labels = batch.supervised_labels();
    Ok(sup
        .iter()
        .enumerate()
        .map(|(i, &pos)| {
            let trow = t.as_ref().map(|t| t.row(i));
            TokenLossRecord::new(
                pos / batch.seq,
                pos % batch.seq,
                loss.score(trow, r.row(i), labels[i]),
                loss.score(trow, d.row(i), labels[i]),
            )
        })
        .collect())
}

/// Mean cross-entropy per supervised token; its exponential is the perplexity.
pub fn evaluate_cross_entropy(model: &TinyLM, dataset: &Dataset) -> Result<f64> {
    let outputs = ModelOutputs::compute(model, dataset)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (id, ex) in dataset.examples.iter().enumerate() {
        let rows = outputs.example(id);
        for (i, &label) in ex.completion.iter().enumerate() {
            total += cross_entropy_logits(rows.row(i), label as usize);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::precondition("no supervised tokens"));
    }
    Ok(total / n as f64)
}
