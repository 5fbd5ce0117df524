//! Contrastive objective, pre-training and fine-tuning loops, and the
//! ablation and sweep harness.

pub mod finetune;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model_check;
pub mod pretrain;

pub use finetune::{
    evaluate, finetune, finetune_keep_best, finetune_once, labelled_windows, select_checkpoint, subsample_per_class,
    CandidateScore, CheckpointSelection, Evaluation, FinetuneConfig, FinetuneReport, RunResult,
};
pub use harness::{run_ablation, sweep_pq, AblationRow, AblationTable, CellOutcome, SweepCell, SweepGrid, Variant};
pub use loss::{
    cosine_similarity, cross_retrieval_accuracy, group_ntxent_loss, pretrain_accuracy, retrieval_accuracy, LossConfig,
    NtXent, NORM_FLOOR,
};
pub use metrics::{mean_sd, ConfusionMatrix};
pub use model_check::{check_model_config, model_grad_check, ModelCheckReport};
pub use pretrain::{
    contrastive_forward, group_representations, heldout_acc_pre, pretrain, stimulus_retrieval, EpochRecord,
    IterationRecord, PretrainConfig, Pretrainer, RunLog,
};
