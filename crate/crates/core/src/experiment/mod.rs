//! Running the active-learning loop for every scenario, recording the
//! results and aggregating over seeds.

mod config;
mod record;
mod run;
mod sweep;

pub use config::{AnnotatorMode, DatasetConfig, Datasets, ExperimentConfig, Scenario};
pub use record::{curve_csv, AnnotationTallies, AnnotatorCall, QueryRecord, RunRecord, StageTiming};
pub use run::{continue_run, derive_seed, generate_ai_saliency, run_experiment, AiMask, ModelRole, RunState};
pub use sweep::{aggregate, aggregate_csv, summary_csv, sweep, sweep_one, AggregatePoint, AggregateReport, MeanStd};
