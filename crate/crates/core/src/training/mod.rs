//! In-batch softmax training, the auxiliary cross-lingual entity task, and
//! per-entity balanced hard-negative mining.

mod loss;
mod mining;
mod optim;
mod pairs;
mod trainer;

pub use loss::{inbatch_softmax_loss, masked_softmax_loss};
pub use mining::{mine_from_rankings, mine_hard_negatives, mine_with_queries, HardNegativeSet, NegativeBalance};
pub use optim::{learning_rate, warmup_steps, Adam};
pub use pairs::{build_entity_entity_pairs, EntityPair};
pub use trainer::{
    adam_for, adam_schedule_step, batch_losses, entity_entity_loss, mention_entity_loss, mine_for,
    multitask_step, train, train_phase1, train_phase2, EntityFeatures, LogRow, MentionBatch, PairBatch, StepLosses, TrainConfig,
    TrainData, TrainMode, TrainOutcome, TrainingLog,
};
