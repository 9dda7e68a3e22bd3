//! Image realism scoring from pairwise NLI over generated atomic facts.
//!
//! A vision-language backend describes an image with several short facts.
//! Every ordered pair of facts is scored by an NLI backend, the scores are
//! combined with [`ScoreWeights`] into one number per unordered pair, and
//! that multiset is reduced to a single [`RealityScore`]. Images that
//! violate common sense tend to provoke hallucinated facts which contradict
//! the accurate ones, pulling the score down.

pub mod aggregate;
pub mod analysis;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod model;
pub mod pipeline;

pub use aggregate::{
    agg_absmax, agg_clust, agg_min, combine_scores, kmeans_1d_two, reality_check, symmetric_sums,
    TwoMeans,
};
pub use error::{Error, Result};
pub use model::{
    FactSet, GenerationMode, GenerationParams, Method, NliMatrix, NliTriple, RealityScore,
    ScoreWeights, DEFAULT_PROMPT,
};
