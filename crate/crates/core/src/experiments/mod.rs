//! Training, evaluation and the analysis harnesses: front-end ablation,
//! word-order perturbation and capsule-noise reconstruction.

pub mod ablation;
pub mod parallel;
pub mod perturbation;
pub mod reconstruction;
pub mod training;

pub use ablation::{run_ablation, AblationRow, AblationTable, ABLATION_SEEDS};
pub use parallel::{worker_threads, SHARDS, THREADS_ENV};
pub use perturbation::{run_order_perturbation, Perturbation, PerturbationReport, PerturbationRow};
pub use reconstruction::{decode_to_words, noise_rows_to_tsv, run_reconstruction_noise, NoiseRow};
pub use training::{
    evaluate_accuracy, predict_all, prepare, run_training, EpochRecord, Prepared, RunRecord, TrainOutcome,
};
