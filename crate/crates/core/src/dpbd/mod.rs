//! Data programming by demonstration: user feedback on a column becomes
//! labeling functions, weakly labeled training data from a source corpus,
//! and a retrained local model.

pub mod feedback;
pub mod lf;

pub use feedback::{process_feedback, AdaptationReport, DpbdError, FeedbackEvent, FeedbackKind, FeedbackResult};
pub use lf::{
    evaluate_lf, generate_training_data, infer_labeling_functions, select_training_columns, Direction,
    GenerateParams, InferParams, LabelingFunction, LfBody, LfContext, LfRegistry, LfVote,
};
