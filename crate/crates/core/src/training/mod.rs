//! Three-stage transfer training: parameter archives, embedding surgery,
//! freeze policies, stage plans and their execution.

mod archive;
mod plan;
mod stage;
mod surgery;

pub use archive::{
    fingerprint_bytes, ArchiveMeta, ModelKind, ParameterArchive, ProvenanceEntry, DTYPE_F32, DTYPE_F64,
    FORMAT_VERSION, MAGIC,
};
pub use plan::{
    strategy_plans, ModelSpec, Plateau, StageId, StagePlan, StopRule, Strategy, StrategyInputs, Surgery,
    DEFAULT_BATCH_SIZE, FINETUNE_LR, PLAN_SCHEMA_VERSION, PRETRAIN_LR,
};
pub use stage::{
    example_gradient, example_seed, length_buckets, load_utterances, mel_tensor, pad_rows, prepare_stage, run_recipe,
    run_stage, stage_vocabulary, ExampleResult, HaltReason, LossPoint, PrefixDelta, StageReport, Utterance,
};
pub use surgery::{apply_freeze, embedding_names, surgery_reset_embedding, FreezePolicy};

#[cfg(test)]
mod tests;
