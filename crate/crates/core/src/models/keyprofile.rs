//! Key-profile majorness baseline.
//!
//! The chroma vector is correlated with all twelve rotations of a major and a
//! minor tone profile; the best major and best minor correlations are turned
//! into a score with a logistic squash of their difference.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::audio::ChromaVector;
use crate::stats;

/// Krumhansl & Kessler (1982) probe-tone ratings, tonic first.
pub const KRUMHANSL_KESSLER_MAJOR: [f64; 12] = [6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88];
/// Krumhansl & Kessler (1982) probe-tone ratings, tonic first.
pub const KRUMHANSL_KESSLER_MINOR: [f64; 12] = [6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyProfileModel {
    pub major_profile: [f64; 12],
    pub minor_profile: [f64; 12],
    /// Slope of the logistic map from correlation difference to score.
    pub gain: f64,
}

impl Default for KeyProfileModel {
    fn default() -> Self {
        Self { major_profile: KRUMHANSL_KESSLER_MAJOR, minor_profile: KRUMHANSL_KESSLER_MINOR, gain: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KeyProfileScore {
    /// In [0, 1]; above 0.5 leans major.
    pub score: f64,
    pub r_major: f64,
    pub r_minor: f64,
    /// Pitch class (C = 0) of the best-fitting major key.
    pub major_tonic: usize,
    pub minor_tonic: usize,
}

fn rotated(profile: &[f64; 12], tonic: usize) -> [f64; 12] {
    std::array::from_fn(|pc| profile[(pc + 12 - tonic) % 12])
}

fn best_rotation(chroma: &[f64; 12], profile: &[f64; 12]) -> (f64, usize) {
    (0..12)
        .map(|tonic| (stats::correlation(chroma, &rotated(profile, tonic)).unwrap_or(0.0), tonic))
        .fold((f64::NEG_INFINITY, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

impl KeyProfileModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = |p: &[f64; 12]| p.iter().all(|v| *v > 0.0 && v.is_finite());
        if !ok(&self.major_profile) || !ok(&self.minor_profile) {
            return Err(ModelError::Config("key profiles must be strictly positive".into()));
        }
        if !self.gain.is_finite() {
            return Err(ModelError::Config("gain must be finite".into()));
        }
        Ok(())
    }

    pub fn score(&self, chroma: &ChromaVector) -> Result<KeyProfileScore, ModelError> {
        self.validate()?;
        if chroma.silent {
            return Err(ModelError::UndefinedInput("chroma of silent audio".into()));
        }
        let (r_major, major_tonic) = best_rotation(&chroma.energies, &self.major_profile);
        let (r_minor, minor_tonic) = best_rotation(&chroma.energies, &self.minor_profile);
        Ok(KeyProfileScore {
            score: stats::sigmoid(self.gain * (r_major - r_minor)),
            r_major,
            r_minor,
            major_tonic,
            minor_tonic,
        })
    }
}

/// Majorness in [0, 1] from the default Krumhansl–Kessler model.
pub fn keyprofile_majorness(chroma: &ChromaVector) -> Result<f64, ModelError> {
    KeyProfileModel::default().score(chroma).map(|s| s.score)
}
