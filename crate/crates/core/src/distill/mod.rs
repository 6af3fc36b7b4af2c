//! Token-wise divergences, loss-gap token selection, and the training
//! loops for fine-tuning and (filtered) distillation.

mod divergence;
mod select;
mod train;

pub use divergence::{
    cross_entropy_graph, cross_entropy_logits, divergence_graph, divergence_logits,
    divergence_probs, tokenwise_divergence, DivergenceKind,
};
pub use select::{
    filtered_loss, scaled_lr, select_by_delta, select_tokens, FilterConfig, FilterMode,
    SelectionMask, TokenLossRecord,
};
pub use train::{
    compute_deltas, distill, evaluate_cross_entropy, finetune, BatchSelection, EpochStats,
    LrSchedule, ModelOutputs, Objective, ReferenceLosses, TokenLoss, TrainConfig, Trainer,
};
