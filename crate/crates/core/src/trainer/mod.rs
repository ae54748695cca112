//! Losses, negative sampling, schedule, optimizer and the training loop.

mod ablation;
mod checkpoint;
mod config;
mod fit;
mod losses;
mod mlm;
mod model;
mod negatives;
mod optim;
mod schedule;
mod twin;

pub use ablation::{Ablation, Variant};
pub use checkpoint::{layout_of, Checkpoint, CheckpointMeta, ParamLayout, CHECKPOINT_MAGIC};
pub use config::{Preset, TrainConfig, TwinConfig};
pub use fit::{
    build_pool, dry_losses, epoch_order, external_starts, fit, plan_nfc, retrieval_set, Embedded, EpochRecord, FitOutcome, LossValues,
    Pipeline, StepMetrics, Trainer, RECALL_KS,
};
pub use losses::{paired_contrastive_loss, retrieval_loss, retrieval_loss_batch};
pub use mlm::{init_mlm, masked_contrastive, mlm_aux_loss, plan_mask};
pub use model::{composite_loss, encode_utterances, stack_frames, AudioVisualModel, Boundaries, Encoded, LossTerms, LossWeights, StepPlan};
pub use negatives::{sample_negatives, ClusteredSampler, NegativeRegistry, NegativeSampler, SamplerBuilder, UniformSampler};
pub use optim::Adam;
pub use schedule::{loss_schedule, step_lr, ActiveLosses};
pub use twin::{
    both_branches, captions_by_image, epoch_pairs, extract_features, fit_twin, project_right, semantic_retrieval, twin_forward, twin_loss,
    Branch, TwinEpochRecord, TwinModel, TwinOutcome, TwinPlan, TwinTerms,
};
