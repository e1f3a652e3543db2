//! Run configuration and the command implementations behind the `mars` binary.

mod commands;
mod config;
mod render;

pub use commands::{
    class_name, cmd_ablate, cmd_detect, cmd_eval, cmd_synth, cmd_train, AblationFile, DetectArgs,
    DetectOutcome, DetectionEntry, EvalArgs, OutputLock, SynthArgs, TableSelection, TrainOutcome,
    FULL_MATRIX, LOCK_FILE,
};
pub use config::{env_seed, load_dataset, DataConfig, RunConfig, SyntheticData, SEED_ENV};
pub use render::{annotate, draw_box, draw_text};
