//! Run configuration, the training loop and end-to-end inference.

mod ablate;
mod config;
mod gradcheck;
mod infer;
mod train;

pub use ablate::{ratio_sets, run_ablation, AblationGrid, AblationRow, ABLATION_HEADER};
pub use config::{EvalConfig, LossConfig, PathsConfig, RunConfig, TrainConfig};
pub use gradcheck::{gradcheck_config, gradcheck_model, gradcheck_scene, GradcheckOutcome, GRADCHECK_EPS, GRADCHECK_TOL};
pub use infer::{detect_all, detect_scene, detect_tensor, Detection, InferSettings, LevelStats};
pub use train::{
    batch_indices, loss_and_grads, scene_index, scene_loss, train, train_step, LogRow, TrainScene, CHECKPOINT_FILE, NAN_DUMP, TRAIN_LOG, TRAIN_LOG_HEADER,
};
