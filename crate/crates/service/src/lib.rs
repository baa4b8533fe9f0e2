//! Annotation service and batch pipeline for majorness studies.
//!
//! A study lives in one data directory. The HTTP service hands out pairwise
//! and placement tasks and appends results to JSON-lines logs; the pipeline
//! stages turn those logs into a ranking, anchors, reliability figures,
//! features, a trained model and an evaluation report.

pub mod config;
pub mod pipeline;
pub mod server;
pub mod study;

pub use config::StudyConfig;
pub use pipeline::{run_stage, PipelineError, Stage};
pub use study::{Study, StudyError, TaskKind, TaskResponse};

/// File and directory names inside a study directory.
pub mod layout {
    pub const ITEMS: &str = "items.txt";
    pub const RANKING_ITEMS: &str = "ranking_items.txt";
    pub const COMPARISONS: &str = "comparisons.jsonl";
    pub const RATINGS: &str = "ratings.jsonl";
    pub const ANCHORS: &str = "anchors.txt";
    pub const AUDIO_DIR: &str = "audio";
    pub const LATENT: &str = "latent.csv";
    pub const RANKING: &str = "ranking.csv";
    pub const RELIABILITY: &str = "reliability.json";
    pub const RATINGS_SUMMARY: &str = "ratings_summary.csv";
    pub const FEATURES_DIR: &str = "features";
    pub const SPLIT: &str = "split.json";
    pub const MODEL: &str = "model.mjrn";
    pub const PREDICTIONS: &str = "predictions.csv";
    pub const MODE_AUDIO_DIR: &str = "mode_audio";
    pub const MODE_LABELS: &str = "mode_labels.csv";
    pub const MODE_STRIP: &str = "mode_strip.txt";
    pub const EMOTIONS: &str = "emotions.csv";
    pub const SUMMARY: &str = "summary.json";

    pub fn audio_file(item: &str) -> String {
        format!("{AUDIO_DIR}/{item}.wav")
    }

    pub fn feature_file(item: &str) -> String {
        format!("{FEATURES_DIR}/{item}.mels")
    }
}
