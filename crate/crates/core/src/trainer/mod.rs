//! Joint objective, the end-to-end training loop, checkpoints and ablations.

mod ablation;
mod checkpoint;
mod config;
mod model;
mod run;
mod step;

pub use ablation::{ablation_run, inference_view, median, run_arm, AblationReport, ArmResult};
pub use checkpoint::{
    decode_params_into, encode_params, load_checkpoint, read_checkpoint_config, save_checkpoint, CheckpointConfig, CODEBOOK_FILE,
    CONFIG_FILE, METRICS_FILE, PARAMS_FILE, SID_FILE,
};
pub use config::{TrainConfig, Variant};
pub use model::{cross_tensor, DigModel, ModelShape};
pub use run::{build_stat_table, evaluate, train, TrainData, Trainer, RECALL_KS};
pub use step::{batch_teacher, joint_loss, CrossSource, JointLoss, LossBreakdown, Request, Teacher, TrainingBatch};
