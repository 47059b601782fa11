//! Configuration, the two training phases, evaluation, checkpoints and the
//! metrics stream.

mod checkpoint;
mod config;
mod eval;
mod metrics;
mod model;
mod train;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use config::{
    AdversarySection, ClubSection, First, PhaseDefaults, Second, DataSection, EvalSection, ModelSection, Phase1Section, Phase2Section, PhaseSection, RunConfig, RunPhase,
    RunSection,
};
pub use eval::{decoupled_rows, dice_score, evaluate, iou, miou_ciou, overlap, threshold, EvalReport};
pub use metrics::{read_metrics, JsonlWriter, StepRecord};
pub use model::{factor_rows, fused_states, mask_tensor, Branches, Model};
pub use train::{
    evaluate_checkpoint, load_dataset, run_phase1, run_phase1_on, run_phase2, run_phase2_on, RunRecord, METRICS_FILE,
    PHASE1_CKPT, PHASE2_CKPT, TIMING_FILE,
};
