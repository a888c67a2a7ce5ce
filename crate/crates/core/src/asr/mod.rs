//! CTC fine-tuning, best-path decoding, error rates, and the front-end by
//! SNR evaluation grid.

mod ctc;
mod eval;
mod finetune;
mod vocab;
mod wer;

pub use ctc::{best_path, ctc_loss, ctc_nll, greedy_decode, min_frames};
pub use eval::{
    evaluate_matrix, evaluate_system, transcribe, AverageRow, EvalCell, EvalInputs, EvalReport, FrontendColumn, SnrBand, TestSet,
    TestUtterance, CSV_HEADER, NO_ENH,
};
pub use finetune::{ctc_batch_loss, ctc_finetune, FinetuneConfig, FinetuneOutcome, LabeledUtterance};
pub use vocab::{Vocab, BLANK};
pub use wer::{wer, ErrorCounts};
