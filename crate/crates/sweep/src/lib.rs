//! Embedding-dimension sweeps over the `cfscale` models: resumable CSV
//! runs, drop-loss comparisons and curve-shape classification.

pub mod curve;
pub mod error;
pub mod runner;

pub use curve::{classify_curve, ClassifyOptions, CurveClass, CurveEvidence, CurveVariant};
pub use error::{Result, SweepError};
pub use runner::{
    compare_drop, load_records, mean_curve, powers_of_two, run_sweep, run_sweep_on, run_variants, write_comparison,
    ComparisonRow, Precision, Prepared, SweepConfig, SweepRecord, SweepResult, Variant,
};
