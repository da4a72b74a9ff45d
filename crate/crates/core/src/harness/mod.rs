//! Synthetic evaluation: planted-head tensors, ablations, sweeps and latency.

pub mod ablation;
pub mod latency;
pub mod planted;
pub mod sweep;
pub mod synthetic;

pub use ablation::{
    evaluate_localization, run_ablation, run_ablation_model, run_ablation_with, sign_test, AblationConfig,
    AblationReport, HarnessMode, LocalizationReport, ModelTruth, SignTest, Variant, VariantResult,
};
pub use latency::{measure_latency, LatencyConfig, LatencyReport, LatencyRow};
pub use planted::{generate_planted, PlantedDataset, PlantedInstance, PlantedParams};
pub use sweep::{run_sweep, SweepConfig, SweepRow};
pub use synthetic::{synthetic_pairs, SyntheticParams};
