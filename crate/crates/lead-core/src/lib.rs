//! Source-free universal domain adaptation on feature embeddings.
//!
//! The library decomposes target features against the row space of a frozen
//! linear classifier, models the resulting unknown-space magnitudes with a
//! two-component Gaussian mixture, derives instance-level pseudo-labeling
//! boundaries from prototype and anchor proximity, and adapts a small MLP
//! feature extractor end-to-end on synthetic label-shift scenarios.

pub mod decomposition;
pub mod density;
pub mod evaluation;
pub mod labeling;
pub mod linalg;
pub mod objectives;
pub mod prototypes;
pub mod synthdata;

pub use decomposition::{
    build_spaces, decompose, decompose_batch, DecomposedFeature, DecompositionError, SubspaceBasis,
};
pub use density::{fit_two_component, posterior_private, DensityError, MagnitudeModel};
pub use evaluation::{evaluate, h_score, infer, EvalError, EvalReport};
pub use labeling::{
    assign, assign_global_threshold, certainty, common_score, decision_boundary, Label,
    LabelingError, PseudoLabelRecord,
};
pub use linalg::{cosine_distance, l2_normalize, svd, LinalgError, Matrix, SvdResult, Vector};
pub use objectives::{
    adapt, smooth_ce_pretrain, AdaptOutcome, EpochMetrics, LabelingMode, LossReport, MlpExtractor,
    ObjectiveError, OptimizerState, RunConfig, SourceModel,
};
pub use prototypes::{
    estimate_class_count, kmeans, silhouette_score, source_anchors, top_k_prototypes,
    ClusterResult, PrototypeError, PrototypeSet,
};
pub use synthdata::{DataError, FeatureMatrix, Scenario, ScenarioSpec, ShiftSpec};
