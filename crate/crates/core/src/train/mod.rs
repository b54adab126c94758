pub mod agent;
pub mod config;
pub mod eval;
pub mod plot;
pub mod trainer;
pub mod trend;

pub use agent::{Agent, Checkpoint, Policy};
pub use config::{Ablation, TrainConfig};
pub use eval::{evaluate, EvalReport};
pub use trainer::{MetricsRow, Trainer, EVAL_SEED_OFFSET};
