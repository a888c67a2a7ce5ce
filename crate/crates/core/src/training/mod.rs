//! Front-end adaptive training: per-utterance front-end sampling, mixed-style
//! inputs, and the masked-prediction pretraining loop.

mod config;
mod prepare;
mod pretrain;

pub use config::{BaselineInput, FatConfig, Granularity, ImstConfig, PretrainConfig};
pub use prepare::{fat_prepare, imst_apply, imst_apply_cached, EnhanceCache, PrepRecord, Prepared};
pub use pretrain::{
    baseline_pretrain, batch_index, pretrain, read_loss_csv, replay_step, run_pretraining, ItemRecord, LossRecord, PretrainData,
    PretrainOutcome, PretrainOutput, Regime, StepProvenance, Utterance,
};
