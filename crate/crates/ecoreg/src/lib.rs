//! Ecological inference by distribution regression.
//!
//! Individual-level survey microdata is summarized per region as a weighted
//! kernel mean embedding (orthogonal random Fourier features for real
//! variables, reference-omitted indicators for categorical ones). Regional
//! three-way outcome counts are then regressed on the embeddings with a
//! grouped elastic-net multinomial-logit model. The fitted coefficients let
//! us infer outcome shares and participation rates for arbitrary demographic
//! subgroups, and a per-feature-group exploration ranks which variables
//! predict the outcome.

pub mod cli;
pub mod data_model;
pub mod explorer;
pub mod featurizer;
pub mod inference;
pub mod io;
pub mod seed;
pub mod solver;
