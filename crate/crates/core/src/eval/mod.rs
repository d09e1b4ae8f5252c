//! Evaluation: erased fraction, Fréchet distance, paired divergence,
//! alignment, interference, reports and plots.

mod metrics;
mod plot;
mod report;

pub use metrics::{
    alignment_score, erased_fraction, frechet_distance, frechet_from_moments, generate_samples,
    interference_matrix, interference_row, paired_divergence, prototype_score, Moments,
    PrototypeScorer,
};
pub use plot::scatter_svg;
pub use report::{evaluate, prototype_scorer_for, ConceptMetrics, EvalConfig, EvalReport};
