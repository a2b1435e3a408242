mod clip;
mod compile;
mod ddp;
mod optim;
pub mod precision;
mod schedule;
mod trainer;

pub use clip::clip_gradients;
pub use compile::compile_hook;
pub use ddp::{ddp_step_contract, ReplicaGrads};
pub use optim::{AdamW, AdamWConfig};
pub use precision::{apply_precision_policy, ExecContext, LossScaler, Precision};
pub use schedule::{default_warmup, linear_warmup_lr};
pub use trainer::{
    mix_seed, Artifacts, BestCheckpoint, EvalLog, Stage, StepLog, TrainConfig, TrainHistory, Trainer, HISTORY_CSV,
    OPTIMIZER_STEM, STATE_FILE,
};
