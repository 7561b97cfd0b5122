//! Encoder pre-training: a student encoder trained on degraded crops against
//! an EMA teacher on the clean crops, with a queue of past teacher keys as
//! contrastive negatives.

pub mod encoder;
pub mod export;
pub mod losses;
pub mod optim;
pub mod queue;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod train;

pub use encoder::{
    encoder_forward, encoder_forward_batch, images_to_tensor, is_trainable, momentum_update, ConvStage,
    EncoderConfig, EncoderState, Mode, ParamTensor, PromptBundle,
};
pub use export::{
    export_encoder, load_checkpoint, load_encoder, save_checkpoint, weights_summary, TensorEntry, WeightsMeta,
    WeightsSummary,
};
pub use losses::{content_loss, cross_entropy, info_nce, kl_distill, log_softmax, softmax, style_loss};
pub use optim::{adamw_step, cosine_lr, AdamState, TrainConfig};
pub use queue::NegativeQueue;
pub use tape::{BatchStats, Grads, Tape, Var};
pub use tensor::Tensor;
pub use toy::{texture, ToyDataset, TOY_CLASSES, TOY_CLASS_NAMES};
pub use train::{
    classifier_accuracy, contrastive_gap, pretrain_loop, pretrain_step, CheckpointPlan, LogRecord, LossBreakdown,
    LossWeights, PretrainConfig, PretrainOutcome, PretrainState, ToyDataConfig,
};
