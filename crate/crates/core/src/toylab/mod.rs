//! Desk-scale end-to-end pipeline: procedural grayscale images, a fixed
//! PCA patch encoder, schedule-restricted tokenization, reconstruction
//! metrics and the Constant-versus-variable schedule comparison.

mod dataset;
mod encoder;
mod experiment;

pub use dataset::{generate_dataset, ImageSet, SyntheticSpec};
pub use encoder::{
    encode_dataset, fit_encoder, reconstruction_metrics, tokenize_dataset, EncoderConfig, LinearEncoder,
    Reconstruction,
};
pub use experiment::{
    run_cliff_experiment, write_report, CodebookFitting, Comparison, ExperimentConfig, ExperimentReport,
    ExperimentRun, GenerationConfig, NamedSchedule, ScheduleOutcome, ScheduleResult, PSNR_PEAK,
};
