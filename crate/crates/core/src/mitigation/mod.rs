//! Defenses: performance-aware retraining and a linear input filter on
//! first-stage features.

mod detector;
mod retrain;

pub use detector::{
    auc, evaluate_detector, extract_features, feature_hash, suite_features, train_detector, train_detector_on_suite,
    DetectorConfig, DetectorDiagnostics, DetectorEvaluation, DetectorModel,
};
pub use retrain::{retrain_adnn, RetrainConfig, RetrainReport};
