//! Majorness annotation and modeling toolkit.
//!
//! The crate covers the full desk-scale pipeline: pairwise comparisons are
//! aggregated into a ranking ([`ranking`]), anchors taken from that ranking
//! drive an anchored placement protocol ([`scale`]), the resulting ratings are
//! checked for consistency ([`reliability`]), audio is turned into log-mel and
//! chroma features ([`audio`]), majorness predictors are fit on those features
//! ([`models`]) and evaluated ([`evaluation`]). [`sim`] provides synthetic
//! corpora and simulated raters for all of it.

pub mod audio;
pub mod evaluation;
pub mod models;
pub mod ranking;
pub mod reliability;
pub mod scale;
pub mod sim;
pub mod stats;

pub use ranking::{
    fit_bradley_terry, ingest_comparisons, select_anchors, AnchorSet, Choice, ComparisonRecord, ComparisonSet,
    FitConfig, Ranking, RankingError,
};
pub use scale::{
    aggregate_ratings, rating_from_placement, start_placement, step_placement, ItemRatingSummary, Judgment,
    PlacementSession, RatingRecord, ScaleError, WalkOrder,
};
