//! Synthetic corpora and simulated annotators.
//!
//! Each item is a progression of sine-wave root-position triads; every triad
//! is major with probability equal to the item's latent majorness. Raters
//! perceive latent + bias + Gaussian noise and answer both protocols from it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::audio::{AudioBuffer, CANONICAL_SAMPLE_RATE};
use crate::ranking::{AnchorSet, Choice, ComparisonRecord};
use crate::scale::{start_placement, Judgment, RatingRecord, ScaleError, WalkOrder};

pub const DEFAULT_CLIP_SECONDS: f64 = 15.0;
/// Base of simulated timestamps (seconds since the epoch).
pub const SIM_EPOCH: i64 = 1_700_000_000;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Scale(#[from] ScaleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triad {
    /// MIDI note number of the root.
    pub root: u8,
    pub major: bool,
}

impl Triad {
    pub fn notes(&self) -> [u8; 3] {
        [self.root, self.root + if self.major { 4 } else { 3 }, self.root + 7]
    }
}

pub fn midi_to_hz(note: u8) -> f64 {
    440.0 * 2f64.powf((note as f64 - 69.0) / 12.0)
}

/// Chords played back to back, each for an equal share of the clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChordPlan {
    pub chords: Vec<Triad>,
    pub clip_seconds: f64,
    pub sample_rate: u32,
}

const NOTE_AMPLITUDE: f64 = 0.25;
const FADE_SECONDS: f64 = 0.01;

impl ChordPlan {
    pub fn sample_count(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn major_fraction(&self) -> f64 {
        self.chords.iter().filter(|c| c.major).count() as f64 / self.chords.len().max(1) as f64
    }

    pub fn render(&self) -> AudioBuffer {
        let len = self.sample_count();
        let sr = self.sample_rate as f64;
        let mut samples = vec![0f32; len];
        let n = self.chords.len().max(1);
        let fade = (FADE_SECONDS * sr).round().max(1.0);
        for (c, chord) in self.chords.iter().enumerate() {
            let (start, end) = (c * len / n, (c + 1) * len / n);
            let freqs = chord.notes().map(midi_to_hz);
            for (k, s) in samples[start..end].iter_mut().enumerate() {
                let t = k as f64 / sr;
                let env = ((k as f64 + 1.0) / fade).min((end - start - k) as f64 / fade).min(1.0);
                let v: f64 = freqs.iter().map(|f| (std::f64::consts::TAU * f * t).sin()).sum();
                *s = (NOTE_AMPLITUDE * env * v) as f32;
            }
        }
        AudioBuffer { samples, sample_rate: self.sample_rate }
    }
}

/// Audio is rendered on demand from the chord plan so large corpora stay small
/// in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticItem {
    pub item_id: String,
    pub latent_majorness: f64,
    /// Pitch-class transposition applied to the progression.
    pub key: u8,
    pub plan: ChordPlan,
}

impl SyntheticItem {
    pub fn audio(&self) -> AudioBuffer {
        self.plan.render()
    }
}

/// Root offsets (semitones above the key) of the progression every item uses.
pub const PROGRESSION: [u8; 12] = [0, 5, 7, 0, 9, 2, 7, 0, 5, 4, 7, 0];
/// Lowest root (G3); roots stay within one octave above it.
const ROOT_BASE: u8 = 55;

pub fn item_id(index: usize) -> String {
    format!("s{index:04}")
}

pub fn gen_corpus(n: usize, seed: u64, clip_seconds: f64) -> Result<Vec<SyntheticItem>, SimError> {
    if n == 0 {
        return Err(SimError::Parameter("corpus size must be at least 1".into()));
    }
    if !(clip_seconds > 0.0 && clip_seconds.is_finite()) {
        return Err(SimError::Parameter(format!("clip length must be positive, got {clip_seconds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let latent: f64 = rng.random();
            let key: u8 = rng.random_range(0..12);
            let chords = PROGRESSION
                .iter()
                .map(|off| Triad { root: ROOT_BASE + (key + off) % 12, major: rng.random::<f64>() < latent })
                .collect();
            SyntheticItem {
                item_id: item_id(i),
                latent_majorness: latent,
                key,
                plan: ChordPlan { chords, clip_seconds, sample_rate: CANONICAL_SAMPLE_RATE },
            }
        })
        .collect())
}

/// Excerpt with a binary mode label, built from a diatonic progression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeExcerpt {
    pub item_id: String,
    pub major: bool,
    pub key: u8,
    pub plan: ChordPlan,
}

const MAJOR_MODE_PROGRESSIONS: [[(u8, bool); 4]; 3] = [
    [(0, true), (9, false), (5, true), (7, true)],
    [(0, true), (5, true), (2, false), (7, true)],
    [(0, true), (4, false), (5, true), (7, true)],
];
const MINOR_MODE_PROGRESSIONS: [[(u8, bool); 4]; 3] = [
    [(0, false), (8, true), (5, false), (7, true)],
    [(0, false), (5, false), (10, true), (3, true)],
    [(0, false), (5, false), (7, false), (0, false)],
];

/// `n_major` major-mode and `n_minor` minor-mode excerpts in random keys, each
/// cycling a randomly chosen four-chord diatonic progression.
pub fn gen_mode_corpus(n_major: usize, n_minor: usize, seed: u64, clip_seconds: f64) -> Result<Vec<ModeExcerpt>, SimError> {
    if n_major + n_minor == 0 {
        return Err(SimError::Parameter("corpus size must be at least 1".into()));
    }
    if !(clip_seconds > 0.0 && clip_seconds.is_finite()) {
        return Err(SimError::Parameter(format!("clip length must be positive, got {clip_seconds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chords_per_clip = (clip_seconds / 1.25).round().max(1.0) as usize;
    let mut out: Vec<ModeExcerpt> = (0..n_major + n_minor)
        .map(|i| {
            let major = i < n_major;
            let table = if major { &MAJOR_MODE_PROGRESSIONS } else { &MINOR_MODE_PROGRESSIONS };
            let prog = table[rng.random_range(0..table.len())];
            let key: u8 = rng.random_range(0..12);
            let chords = (0..chords_per_clip)
                .map(|c| {
                    let (off, maj) = prog[c % prog.len()];
                    Triad { root: ROOT_BASE + (key + off) % 12, major: maj }
                })
                .collect();
            ModeExcerpt { item_id: String::new(), major, key, plan: ChordPlan { chords, clip_seconds, sample_rate: CANONICAL_SAMPLE_RATE } }
        })
        .collect();
    out.shuffle(&mut rng);
    for (i, e) in out.iter_mut().enumerate() {
        e.item_id = format!("m{i:03}");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterModel {
    pub rater_id: String,
    pub noise_sigma: f64,
    pub bias: f64,
}

impl RaterModel {
    pub fn new(rater_id: impl Into<String>, noise_sigma: f64, bias: f64) -> Result<Self, SimError> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) || !bias.is_finite() {
            return Err(SimError::Parameter(format!("noise_sigma must be finite and non-negative, got {noise_sigma}")));
        }
        Ok(Self { rater_id: rater_id.into(), noise_sigma, bias })
    }

    fn perceive<R: Rng>(&self, latent: f64, rng: &mut R) -> f64 {
        if self.noise_sigma == 0.0 {
            latent + self.bias
        } else {
            latent + self.bias + Normal::new(0.0, self.noise_sigma).expect("valid sigma").sample(rng)
        }
    }
}

/// `n` raters sharing one noise level, with biases drawn from N(0, bias_sigma²).
pub fn rater_panel(n: usize, noise_sigma: f64, bias_sigma: f64, seed: u64) -> Result<Vec<RaterModel>, SimError> {
    if !(bias_sigma >= 0.0 && bias_sigma.is_finite()) {
        return Err(SimError::Parameter(format!("bias_sigma must be finite and non-negative, got {bias_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let bias = if bias_sigma == 0.0 { 0.0 } else { Normal::new(0.0, bias_sigma).expect("valid sigma").sample(&mut rng) };
            RaterModel::new(format!("r{i:03}"), noise_sigma, bias)
        })
        .collect()
}

/// Every unordered pair of `0..n`.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Every rater judges every pair once. Presentation order is randomized;
/// equal perceived values produce `Equal`.
pub fn sim_pairwise(
    items: &[SyntheticItem],
    raters: &[RaterModel],
    pairs: &[(usize, usize)],
    seed: u64,
) -> Result<Vec<ComparisonRecord>, SimError> {
    check_pairs(items, pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs.len() * raters.len());
    for &(a, b) in pairs {
        for rater in raters {
            let record = judge_pair(items, rater, a, b, SIM_EPOCH + out.len() as i64, &mut rng);
            out.push(record);
        }
    }
    Ok(out)
}

/// Each pair is judged by `raters_per_pair` distinct raters drawn from the
/// panel, as in a scheduled study.
pub fn sim_pairwise_sampled(
    items: &[SyntheticItem],
    raters: &[RaterModel],
    pairs: &[(usize, usize)],
    raters_per_pair: usize,
    seed: u64,
) -> Result<Vec<ComparisonRecord>, SimError> {
    check_pairs(items, pairs)?;
    if raters_per_pair == 0 || raters_per_pair > raters.len() {
        return Err(SimError::Parameter(format!("raters_per_pair must be in 1..={}, got {raters_per_pair}", raters.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs.len() * raters_per_pair);
    for &(a, b) in pairs {
        for ri in rand::seq::index::sample(&mut rng, raters.len(), raters_per_pair) {
            let record = judge_pair(items, &raters[ri], a, b, SIM_EPOCH + out.len() as i64, &mut rng);
            out.push(record);
        }
    }
    Ok(out)
}

fn check_pairs(items: &[SyntheticItem], pairs: &[(usize, usize)]) -> Result<(), SimError> {
    match pairs.iter().find(|&&(a, b)| a >= items.len() || b >= items.len() || a == b) {
        Some(&(a, b)) => Err(SimError::Parameter(format!("pair ({a}, {b}) does not reference two distinct items"))),
        None => Ok(()),
    }
}

fn judge_pair<R: Rng>(items: &[SyntheticItem], rater: &RaterModel, a: usize, b: usize, ts: i64, rng: &mut R) -> ComparisonRecord {
    let (l, r) = if rng.random::<bool>() { (a, b) } else { (b, a) };
    let pl = rater.perceive(items[l].latent_majorness, rng);
    let pr = rater.perceive(items[r].latent_majorness, rng);
    let choice = match pl.partial_cmp(&pr) {
        Some(std::cmp::Ordering::Greater) => Choice::LeftMoreMajor,
        Some(std::cmp::Ordering::Less) => Choice::RightMoreMajor,
        _ => Choice::Equal,
    };
    ComparisonRecord {
        rater: rater.rater_id.clone(),
        left: items[l].item_id.clone(),
        right: items[r].item_id.clone(),
        choice,
        ts,
        task_id: None,
    }
}

/// `ratings_per_item` distinct raters place each item against the anchors
/// through a real placement session. The rater's bias shifts the item under
/// placement; every anchor is heard afresh with noise but no bias.
pub fn sim_placements(
    items: &[SyntheticItem],
    anchors: &AnchorSet,
    raters: &[RaterModel],
    ratings_per_item: usize,
    order: WalkOrder,
    seed: u64,
) -> Result<Vec<RatingRecord>, SimError> {
    if ratings_per_item == 0 || ratings_per_item > raters.len() {
        return Err(SimError::Parameter(format!("ratings_per_item must be in 1..={}, got {ratings_per_item}", raters.len())));
    }
    let latent: HashMap<&str, f64> = items.iter().map(|i| (i.item_id.as_str(), i.latent_majorness)).collect();
    let anchor_latents = anchors
        .anchors
        .iter()
        .map(|a| latent.get(a.as_str()).copied().ok_or_else(|| SimError::Parameter(format!("anchor {a} is not a corpus item"))))
        .collect::<Result<Vec<f64>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(items.len() * ratings_per_item);
    for item in items {
        for ri in rand::seq::index::sample(&mut rng, raters.len(), ratings_per_item) {
            let rater = &raters[ri];
            let unbiased = RaterModel { bias: 0.0, ..rater.clone() };
            let perceived = rater.perceive(item.latent_majorness, &mut rng);
            let mut session = start_placement(&item.item_id, anchors, order)?;
            while let Some(idx) = session.current_anchor_index() {
                let anchor = unbiased.perceive(anchor_latents[idx], &mut rng);
                let judgment = if perceived > anchor { Judgment::ItemLessMinor } else { Judgment::ItemMoreMinor };
                session.step(judgment)?;
            }
            let ts = SIM_EPOCH + out.len() as i64;
            out.push(RatingRecord::from_session(&session, rater.rater_id.clone(), ts).expect("walk ended in a placement"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{chroma, FeatureConfig};
    use crate::scale::aggregate_ratings;
    use std::collections::HashSet;

    #[test]
    fn corpus_is_seeded_and_validated() {
        assert!(gen_corpus(0, 1, 15.0).is_err());
        let a = gen_corpus(5, 9, 2.0).unwrap();
        assert_eq!(a, gen_corpus(5, 9, 2.0).unwrap());
        assert_ne!(a, gen_corpus(5, 10, 2.0).unwrap());
        for item in &a {
            assert!((0.0..=1.0).contains(&item.latent_majorness));
            assert_eq!(item.audio().samples.len(), 88_200);
        }
        assert_eq!(a[0].audio(), a[0].audio());
    }

    #[test]
    fn default_clip_is_fifteen_seconds() {
        let c = gen_corpus(1, 0, DEFAULT_CLIP_SECONDS).unwrap();
        assert_eq!(c[0].plan.sample_count(), 661_500);
    }

    #[test]
    fn extreme_latents_fix_chord_quality() {
        let mut c = gen_corpus(1, 3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        c[0].latent_majorness = 1.0;
        assert!((0..100).all(|_| rng.random::<f64>() < c[0].latent_majorness));
        let many = gen_corpus(400, 4, 0.5).unwrap();
        let high = many.iter().filter(|i| i.latent_majorness > 0.9).map(|i| i.plan.major_fraction()).sum::<f64>();
        let n_high = many.iter().filter(|i| i.latent_majorness > 0.9).count() as f64;
        assert!(high / n_high > 0.85);
    }

    #[test]
    fn rendered_triad_has_expected_chroma() {
        let plan = ChordPlan { chords: vec![Triad { root: 60, major: false }], clip_seconds: 1.0, sample_rate: 44_100 };
        let c = chroma(&plan.render(), &FeatureConfig::default()).unwrap();
        let mut top: Vec<usize> = c.ranked_classes()[..3].to_vec();
        top.sort();
        assert_eq!(top, vec![0, 3, 7]);
        assert!(plan.render().samples.iter().all(|s| s.abs() <= 0.75));
    }

    #[test]
    fn mode_corpus_is_balanced() {
        let c = gen_mode_corpus(48, 48, 2, 12.0).unwrap();
        assert_eq!(c.iter().filter(|e| e.major).count(), 48);
        assert_eq!(c.len(), 96);
        assert!(gen_mode_corpus(0, 0, 2, 12.0).is_err());
    }

    #[test]
    fn noiseless_pairwise_follows_latents() {
        let items = gen_corpus(12, 5, 0.1).unwrap();
        let raters = rater_panel(3, 0.0, 0.0, 1).unwrap();
        let recs = sim_pairwise(&items, &raters, &all_pairs(12), 7).unwrap();
        assert_eq!(recs.len(), 66 * 3);
        let lat: HashMap<_, _> = items.iter().map(|i| (i.item_id.clone(), i.latent_majorness)).collect();
        for r in &recs {
            let left_higher = lat[&r.left] > lat[&r.right];
            assert_eq!(r.choice, if left_higher { Choice::LeftMoreMajor } else { Choice::RightMoreMajor });
        }
        assert_eq!(recs, sim_pairwise(&items, &raters, &all_pairs(12), 7).unwrap());
    }

    #[test]
    fn sampled_pairwise_uses_distinct_raters() {
        let items = gen_corpus(6, 5, 0.1).unwrap();
        let raters = rater_panel(8, 0.0, 0.0, 1).unwrap();
        let recs = sim_pairwise_sampled(&items, &raters, &all_pairs(6), 5, 4).unwrap();
        assert_eq!(recs.len(), 15 * 5);
        for chunk in recs.chunks(5) {
            let who: HashSet<_> = chunk.iter().map(|r| r.rater.as_str()).collect();
            assert_eq!(who.len(), 5);
        }
        assert!(sim_pairwise_sampled(&items, &raters, &all_pairs(6), 9, 4).is_err());
        assert!(sim_pairwise_sampled(&items, &raters, &all_pairs(6), 0, 4).is_err());
    }

    #[test]
    fn equal_latents_tie() {
        let mut items = gen_corpus(2, 5, 0.1).unwrap();
        items[1].latent_majorness = items[0].latent_majorness;
        let raters = rater_panel(2, 0.0, 0.3, 1).unwrap();
        let recs = sim_pairwise(&items, &raters, &[(0, 1)], 0).unwrap();
        assert!(recs.iter().all(|r| r.choice == Choice::Equal));
    }

    #[test]
    fn huge_noise_is_a_coin_flip() {
        let mut items = gen_corpus(2, 5, 0.1).unwrap();
        items[0].latent_majorness = 0.0;
        items[1].latent_majorness = 1.0;
        let raters = rater_panel(1, 1e6, 0.0, 1).unwrap();
        let pairs = vec![(0, 1); 10_000];
        let recs = sim_pairwise(&items, &raters, &pairs, 3).unwrap();
        let wins = recs.iter().filter(|r| (r.left == "s0001") == (r.choice == Choice::LeftMoreMajor)).count() as f64;
        assert!((wins / 1e4 - 0.5).abs() < 0.05);
    }

    #[test]
    fn invalid_pairs_and_raters() {
        let items = gen_corpus(2, 5, 0.1).unwrap();
        assert!(sim_pairwise(&items, &[], &[(0, 2)], 0).is_err());
        assert!(sim_pairwise(&items, &[], &[(1, 1)], 0).is_err());
        assert!(RaterModel::new("x", -0.1, 0.0).is_err());
    }

    fn anchors_of(items: &[SyntheticItem], k: usize) -> AnchorSet {
        let mut sorted: Vec<&SyntheticItem> = items.iter().collect();
        sorted.sort_by(|a, b| a.latent_majorness.total_cmp(&b.latent_majorness));
        let step = items.len() / k;
        AnchorSet::new((0..k).map(|i| sorted[i * step + step / 2].item_id.clone()).collect(), "test").unwrap()
    }

    #[test]
    fn noiseless_placement_counts_lower_anchors() {
        let items = gen_corpus(60, 8, 0.1).unwrap();
        let anchors = anchors_of(&items, 10);
        let lat: HashMap<_, _> = items.iter().map(|i| (i.item_id.clone(), i.latent_majorness)).collect();
        let raters = rater_panel(3, 0.0, 0.0, 1).unwrap();
        for order in [WalkOrder::FromMostMajor, WalkOrder::FromMostMinor, WalkOrder::Bisect] {
            let recs = sim_placements(&items, &anchors, &raters, 3, order, 4).unwrap();
            assert_eq!(recs.len(), 180);
            for r in &recs {
                let lower = anchors.anchors.iter().filter(|a| lat[*a] < lat[&r.item]).count();
                assert_eq!(r.rating as usize, lower.clamp(1, 10), "{order:?}");
            }
        }
    }

    #[test]
    fn top_item_rates_ten() {
        let mut items = gen_corpus(30, 8, 0.1).unwrap();
        let anchors = anchors_of(&items, 10);
        items[0].latent_majorness = 1.5;
        let raters = rater_panel(5, 0.0, 0.0, 1).unwrap();
        let recs = sim_placements(&items[..1], &anchors, &raters, 5, WalkOrder::FromMostMajor, 0);
        assert!(recs.is_err());
        let recs = sim_placements(&items, &anchors, &raters, 5, WalkOrder::FromMostMajor, 0).unwrap();
        assert!(recs.iter().filter(|r| r.item == items[0].item_id).all(|r| r.rating == 10));
    }

    #[test]
    fn mild_noise_keeps_raters_close() {
        let items = gen_corpus(100, 21, 0.1).unwrap();
        let anchors = anchors_of(&items, 10);
        let raters = rater_panel(5, 0.05, 0.0, 2).unwrap();
        let recs = sim_placements(&items, &anchors, &raters, 5, WalkOrder::FromMostMajor, 5).unwrap();
        let summaries = aggregate_ratings(&recs);
        assert_eq!(summaries.len(), 100);
        assert!(summaries.iter().all(|s| s.std <= 1.5));
    }

    #[test]
    fn noisy_means_avoid_saturation() {
        let items = gen_corpus(200, 22, 0.1).unwrap();
        let anchors = anchors_of(&items, 10);
        let raters = rater_panel(20, 0.1, 0.05, 3).unwrap();
        let recs = sim_placements(&items, &anchors, &raters, 5, WalkOrder::FromMostMajor, 6).unwrap();
        let summaries = aggregate_ratings(&recs);
        let extreme = summaries.iter().filter(|s| s.mean == 1.0 || s.mean == 10.0).count();
        assert!((extreme as f64) < 0.1 * summaries.len() as f64, "{extreme}");
    }
}
