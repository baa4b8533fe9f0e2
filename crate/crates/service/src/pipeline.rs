//! Batch stages over a study directory.
//!
//! Every stage reads its inputs from the directory, writes its outputs plus
//! `<stage>.json`, and produces byte-identical files when rerun on unchanged
//! inputs. A stage whose inputs are missing names the stage to run first.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use majorness_core::audio::{mel_spectrogram_for, read_wav_file, resample_to_44100, encode_wav_pcm16, FeatureConfig, MelSpectrogram, CANONICAL_SAMPLE_RATE};
use majorness_core::evaluation::{
    emotion_correlation, figure_strip, keyprofile_scorer, mode_experiment, pearson, EmotionReport, EmotionTable, LabeledCorpus, LabeledItem,
    ModeExperimentConfig,
};
use majorness_core::models::{forward, init_model, read_checkpoint_file, train, write_checkpoint_file, ModelParams};
use majorness_core::ranking::{fit_bradley_terry, ingest_comparisons, select_anchors, AnchorSet, FitConfig, IngestStats, Ranking};
use majorness_core::reliability::{filter_raters, RaterMatrix, ReliabilityReport};
use majorness_core::scale::{aggregate_ratings, read_summaries_csv, write_summaries_csv, ItemRatingSummary, RatingRecord};
use majorness_core::sim::{gen_corpus, gen_mode_corpus, rater_panel, sim_pairwise_sampled, sim_placements};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::StudyConfig;
use crate::layout;
use crate::study::pair_plan;

pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate,
    Rank,
    Anchors,
    Reliability,
    Features,
    Train,
    Evaluate,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Rank => "rank",
            Stage::Anchors => "anchors",
            Stage::Reliability => "reliability",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::All => "all",
        }
    }

    /// Stages chained by `all`.
    pub const CHAIN: [Stage; 6] = [Stage::Rank, Stage::Anchors, Stage::Reliability, Stage::Features, Stage::Train, Stage::Evaluate];
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{stage}: missing {path}; run `{run_first}` first")]
    MissingPrerequisite { stage: &'static str, path: PathBuf, run_first: &'static str },
    #[error("{stage}: {message}")]
    Failed { stage: &'static str, message: String },
    #[error("{stage}: {path}: {source}")]
    Io { stage: &'static str, path: PathBuf, source: std::io::Error },
}

type Result<T> = std::result::Result<T, PipelineError>;

struct Ctx<'a> {
    dir: &'a Path,
    config: &'a StudyConfig,
    stage: &'static str,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn fail(&self, message: impl std::fmt::Display) -> PipelineError {
        PipelineError::Failed { stage: self.stage, message: message.to_string() }
    }

    fn io<'p>(&self, path: &'p Path) -> impl FnOnce(std::io::Error) -> PipelineError + 'p {
        let stage = self.stage;
        move |source| PipelineError::Io { stage, path: path.to_path_buf(), source }
    }

    fn require(&self, name: &str, run_first: &'static str) -> Result<PathBuf> {
        let path = self.path(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingPrerequisite { stage: self.stage, path, run_first })
        }
    }

    fn read(&self, path: &Path) -> Result<Vec<u8>> {
        fs::read(path).map_err(self.io(path))
    }

    fn read_text(&self, path: &Path) -> Result<String> {
        fs::read_to_string(path).map_err(self.io(path))
    }

    /// Writes through a temporary file so readers never see half a file.
    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(self.io(parent))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(self.io(&tmp))?;
        fs::rename(&tmp, &path).map_err(self.io(&path))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| self.fail(e))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<T> {
        serde_json::from_slice(&self.read(path)?).map_err(|e| self.fail(format!("{}: {e}", path.display())))
    }

    fn seed(&self, stream: u64) -> u64 {
        self.config.seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

fn id_list(ids: &[String]) -> String {
    ids.iter().map(|id| format!("{id}\n")).collect()
}

fn lines(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(ctx: &Ctx, path: &Path) -> Result<Vec<T>> {
    ctx.read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ctx.fail(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub stage: String,
    pub version: u32,
    pub seed: u64,
    pub items: usize,
    pub ranking_items: usize,
    pub pairs: usize,
    pub raters: usize,
    pub comparison_records: usize,
    pub rating_records: usize,
    pub mode_excerpts: usize,
}

#[derive(Serialize, Deserialize)]
struct LatentRow {
    item_id: String,
    latent: f64,
    major_fraction: f64,
}

/// Writes a synthetic study: audio, item lists, simulated comparisons and
/// placements, the ranking and anchors they imply, and a labeled mode corpus.
pub fn simulate(dir: &Path, config: &StudyConfig) -> Result<SimulateSummary> {
    let ctx = Ctx { dir, config, stage: "simulate" };
    fs::create_dir_all(dir).map_err(ctx.io(dir))?;
    let sim = &config.simulation;
    let items = gen_corpus(sim.items, ctx.seed(1), config.excerpt_seconds).map_err(|e| ctx.fail(e))?;
    items.par_iter().try_for_each(|item| {
        let wav = encode_wav_pcm16(&item.audio()).map_err(|e| ctx.fail(e))?;
        ctx.write(&layout::audio_file(&item.item_id), &wav)
    })?;
    let ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
    let n_rank = sim.ranking_items.min(items.len());
    ctx.write(layout::ITEMS, id_list(&ids).as_bytes())?;
    ctx.write(layout::RANKING_ITEMS, id_list(&ids[..n_rank]).as_bytes())?;
    let mut latent = csv::Writer::from_writer(Vec::new());
    for item in &items {
        let row = LatentRow { item_id: item.item_id.clone(), latent: item.latent_majorness, major_fraction: item.plan.major_fraction() };
        latent.serialize(row).map_err(|e| ctx.fail(e))?;
    }
    ctx.write(layout::LATENT, &latent.into_inner().map_err(|e| ctx.fail(e))?)?;

    let raters = rater_panel(sim.raters, sim.noise_sigma, sim.bias_sigma, ctx.seed(2)).map_err(|e| ctx.fail(e))?;
    let pairs = pair_plan(n_rank, config.full_pair_limit, config.pair_sample_size, config.seed);
    let comparisons = sim_pairwise_sampled(&items[..n_rank], &raters, &pairs, config.raters_per_pair, ctx.seed(3)).map_err(|e| ctx.fail(e))?;
    ctx.write(layout::COMPARISONS, &to_jsonl(&comparisons))?;
    ctx.write(layout::RATINGS, b"")?;
    rank(dir, config)?;
    let anchors_summary = anchors(dir, config)?;
    let anchor_set = AnchorSet::new(anchors_summary.anchors, anchors_summary.source_ranking).map_err(|e| ctx.fail(e))?;
    let ratings = sim_placements(&items, &anchor_set, &raters, config.ratings_per_item, config.walk_order, ctx.seed(4)).map_err(|e| ctx.fail(e))?;
    ctx.write(layout::RATINGS, &to_jsonl(&ratings))?;

    let mut mode_excerpts = 0;
    if sim.mode_major + sim.mode_minor > 0 {
        let mode = gen_mode_corpus(sim.mode_major, sim.mode_minor, ctx.seed(5), config.evaluation.clip_seconds).map_err(|e| ctx.fail(e))?;
        mode.par_iter().try_for_each(|e| {
            let wav = encode_wav_pcm16(&e.plan.render()).map_err(|e| ctx.fail(e))?;
            ctx.write(&format!("{}/{}.wav", layout::MODE_AUDIO_DIR, e.item_id), &wav)
        })?;
        let corpus = LabeledCorpus {
            items: mode
                .iter()
                .map(|e| LabeledItem { item_id: e.item_id.clone(), path: dir.join(format!("{}/{}.wav", layout::MODE_AUDIO_DIR, e.item_id)), major: e.major })
                .collect(),
        };
        let mut out = Vec::new();
        corpus.write_csv(&mut out, dir).map_err(|e| ctx.fail(e))?;
        ctx.write(layout::MODE_LABELS, &out)?;
        mode_excerpts = mode.len();
    }

    let summary = SimulateSummary {
        stage: ctx.stage.into(),
        version: SUMMARY_VERSION,
        seed: config.seed,
        items: items.len(),
        ranking_items: n_rank,
        pairs: pairs.len(),
        raters: raters.len(),
        comparison_records: comparisons.len(),
        rating_records: ratings.len(),
        mode_excerpts,
    };
    ctx.write_json("simulate.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub stage: String,
    pub version: u32,
    pub ingest: IngestCounts,
    pub records: usize,
    pub items: usize,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub ranking_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestCounts {
    pub lines: usize,
    pub malformed_skipped: usize,
    pub duplicates_dropped: usize,
}

impl From<IngestStats> for IngestCounts {
    fn from(s: IngestStats) -> Self {
        Self { lines: s.lines, malformed_skipped: s.malformed_skipped, duplicates_dropped: s.duplicates_dropped }
    }
}

/// Fits Bradley–Terry strengths to every logged comparison.
pub fn rank(dir: &Path, config: &StudyConfig) -> Result<RankSummary> {
    let ctx = Ctx { dir, config, stage: "rank" };
    let path = ctx.require(layout::COMPARISONS, "simulate` or `serve")?;
    let file = fs::File::open(&path).map_err(ctx.io(&path))?;
    let (set, stats) = ingest_comparisons(BufReader::new(file)).map_err(|e| ctx.fail(e))?;
    if set.is_empty() {
        return Err(ctx.fail(format!("{} holds no usable comparisons", path.display())));
    }
    let ranking = fit_bradley_terry(&set, &FitConfig::default()).map_err(|e| ctx.fail(e))?;
    let mut out = Vec::new();
    ranking.write_csv(&mut out).map_err(|e| ctx.fail(e))?;
    ctx.write(layout::RANKING, &out)?;
    let summary = RankSummary {
        stage: ctx.stage.into(),
        version: SUMMARY_VERSION,
        ingest: stats.into(),
        records: set.records.len(),
        items: ranking.len(),
        log_likelihood: ranking.log_likelihood,
        iterations: ranking.iterations,
        ranking_id: ranking.fingerprint(),
    };
    ctx.write_json("rank.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorsSummary {
    pub stage: String,
    pub version: u32,
    /// Most minor first.
    pub anchors: Vec<String>,
    pub source_ranking: String,
}

/// Picks evenly spaced anchors from the ranking. Refuses to replace anchors
/// that existing placement ratings were made against.
pub fn anchors(dir: &Path, config: &StudyConfig) -> Result<AnchorsSummary> {
    let ctx = Ctx { dir, config, stage: "anchors" };
    let path = ctx.require(layout::RANKING, "rank")?;
    let ranking = Ranking::read_csv(ctx.read(&path)?.as_slice()).map_err(|e| ctx.fail(e))?;
    let set = select_anchors(&ranking, config.anchor_count).map_err(|e| ctx.fail(e))?;
    let text = set.to_text();
    let existing = fs::read_to_string(ctx.path(layout::ANCHORS)).ok();
    let ratings = fs::read_to_string(ctx.path(layout::RATINGS)).unwrap_or_default();
    if existing.as_deref().is_some_and(|old| lines(old) != set.anchors) && ratings.lines().any(|l| !l.trim().is_empty()) {
        return Err(ctx.fail(format!(
            "the new anchors differ from {} and {} already holds placements made against it; move the ratings aside to start over",
            layout::ANCHORS,
            layout::RATINGS
        )));
    }
    ctx.write(layout::ANCHORS, text.as_bytes())?;
    let summary = AnchorsSummary { stage: ctx.stage.into(), version: SUMMARY_VERSION, anchors: set.anchors, source_ranking: set.source_ranking_id };
    ctx.write_json("anchors.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilitySummary {
    pub stage: String,
    pub version: u32,
    pub rating_records: usize,
    pub items_rated: usize,
    pub report: ReliabilityReport,
}

/// Reliability before and after dropping disagreeing raters; writes per-item
/// mean ratings over the kept raters.
pub fn reliability(dir: &Path, config: &StudyConfig) -> Result<ReliabilitySummary> {
    let ctx = Ctx { dir, config, stage: "reliability" };
    let path = ctx.require(layout::RATINGS, "simulate` or `serve")?;
    let records: Vec<RatingRecord> = read_jsonl(&ctx, &path)?;
    if records.is_empty() {
        return Err(ctx.fail(format!("{} holds no ratings; collect placements first", path.display())));
    }
    let matrix = RaterMatrix::from_ratings(&records).map_err(|e| ctx.fail(e))?;
    let (_, report) = filter_raters(&matrix, &config.reliability).map_err(|e| ctx.fail(e))?;
    let removed: Vec<&str> = report.removed_raters.iter().map(|r| r.rater.as_str()).collect();
    let kept: Vec<RatingRecord> = records.iter().filter(|r| !removed.contains(&r.rater.as_str())).cloned().collect();
    let summaries = aggregate_ratings(&kept);
    let mut out = Vec::new();
    write_summaries_csv(&summaries, &mut out).map_err(|e| ctx.fail(e))?;
    ctx.write(layout::RATINGS_SUMMARY, &out)?;
    let summary = ReliabilitySummary {
        stage: ctx.stage.into(),
        version: SUMMARY_VERSION,
        rating_records: records.len(),
        items_rated: summaries.len(),
        report,
    };
    ctx.write_json(layout::RELIABILITY, &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesSummary {
    pub stage: String,
    pub version: u32,
    pub items: usize,
    pub n_mels: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

fn load_excerpt(ctx: &Ctx, path: &Path, seconds: f64) -> Result<majorness_core::audio::AudioBuffer> {
    let buffer = read_wav_file(path).map_err(|e| ctx.fail(format!("{}: {e}", path.display())))?;
    let buffer = if buffer.sample_rate == CANONICAL_SAMPLE_RATE { buffer } else { resample_to_44100(&buffer) };
    Ok(buffer.head(seconds))
}

/// Log-mel spectrogram of the first `excerpt_seconds` of every item.
pub fn features(dir: &Path, config: &StudyConfig) -> Result<FeaturesSummary> {
    let ctx = Ctx { dir, config, stage: "features" };
    let items = lines(&ctx.read_text(&ctx.require(layout::ITEMS, "simulate")?)?);
    if items.is_empty() {
        return Err(ctx.fail(format!("{} is empty", layout::ITEMS)));
    }
    let feature_config = FeatureConfig::default();
    let shapes = items
        .par_iter()
        .map(|id| {
            let wav = ctx.require(&layout::audio_file(id), "simulate")?;
            let buffer = load_excerpt(&ctx, &wav, config.excerpt_seconds)?;
            let mel = mel_spectrogram_for(id, &buffer, &feature_config).map_err(|e| ctx.fail(format!("{id}: {e}")))?;
            let mut out = Vec::new();
            mel.write_to(&mut out).map_err(|e| ctx.fail(e))?;
            ctx.write(&layout::feature_file(id), &out)?;
            Ok(mel.frames)
        })
        .collect::<Result<Vec<usize>>>()?;
    let summary = FeaturesSummary {
        stage: ctx.stage.into(),
        version: SUMMARY_VERSION,
        items: items.len(),
        n_mels: feature_config.n_mels,
        min_frames: shapes.iter().copied().min().unwrap_or(0),
        max_frames: shapes.iter().copied().max().unwrap_or(0),
    };
    ctx.write_json("features.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: String,
    pub version: u32,
    pub train_items: usize,
    pub test_items: usize,
    pub weight_count: usize,
    pub epochs: usize,
    pub steps: usize,
    pub target_mean: f64,
    pub loss_trace: Vec<f64>,
}

fn load_mel(ctx: &Ctx, id: &str) -> Result<MelSpectrogram> {
    let path = ctx.require(&layout::feature_file(id), "features")?;
    MelSpectrogram::read_from(ctx.read(&path)?.as_slice(), id).map_err(|e| ctx.fail(format!("{}: {e}", path.display())))
}

fn load_summaries(ctx: &Ctx) -> Result<Vec<ItemRatingSummary>> {
    let path = ctx.require(layout::RATINGS_SUMMARY, "reliability")?;
    read_summaries_csv(ctx.read(&path)?.as_slice()).map_err(|e| ctx.fail(e))
}

/// Trains the regressor on mean ratings with a seeded held-out split.
pub fn train_stage(dir: &Path, config: &StudyConfig) -> Result<TrainSummary> {
    let ctx = Ctx { dir, config, stage: "train" };
    let summaries = load_summaries(&ctx)?;
    if summaries.len() < 2 {
        return Err(ctx.fail(format!("need at least 2 rated items, found {}", summaries.len())));
    }
    let mut ids: Vec<String> = summaries.iter().map(|s| s.item_id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.seed(6)));
    let n_test = ((ids.len() as f64 * config.training.holdout_fraction).round() as usize).min(ids.len() - 1);
    let mut test = ids.split_off(ids.len() - n_test);
    let mut train_ids = ids;
    train_ids.sort();
    test.sort();
    let split = Split { train: train_ids, test };
    ctx.write_json(layout::SPLIT, &split)?;

    let target: HashMap<&str, f64> = summaries.iter().map(|s| (s.item_id.as_str(), s.mean)).collect();
    let dataset = split.train.par_iter().map(|id| Ok((load_mel(&ctx, id)?, target[id.as_str()]))).collect::<Result<Vec<_>>>()?;
    let target_mean = dataset.iter().map(|(_, t)| t).sum::<f64>() / dataset.len() as f64;
    let arch = &config.training.arch;
    let params = init_model(arch, ctx.seed(7), Some(target_mean)).map_err(|e| ctx.fail(e))?;
    let mut train_config = config.training.train.clone();
    train_config.seed ^= ctx.seed(8);
    let outcome = train(params, &dataset, &train_config).map_err(|e| ctx.fail(e))?;
    write_checkpoint_file(&outcome.params, &ctx.path(layout::MODEL)).map_err(|e| ctx.fail(e))?;
    let summary = TrainSummary {
        stage: ctx.stage.into(),
        version: SUMMARY_VERSION,
        train_items: split.train.len(),
        test_items: split.test.len(),
        weight_count: arch.weight_count(),
        epochs: train_config.epochs,
        steps: outcome.steps,
        target_mean,
        loss_trace: outcome.loss_trace,
    };
    ctx.write_json("train.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub stage: String,
    pub version: u32,
    /// Held-out Pearson r of predictions against `pearson_reference`.
    pub pearson_r: Option<f64>,
    /// `latent` when simulated ground truth exists, otherwise `ratings`.
    pub pearson_reference: String,
    pub pearson_r_ratings: Option<f64>,
    pub train_pearson_r_ratings: Option<f64>,
    pub test_items: usize,
    /// Mode-classification accuracy of the trained model's scores.
    pub cv_accuracy: Option<f64>,
    pub keyprofile_cv_accuracy: Option<f64>,
    pub mode_items: usize,
    pub emotion: Option<EmotionReport>,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    item_id: &'a str,
    split: &'a str,
    prediction: f64,
    mean_rating: f64,
    latent: Option<f64>,
}

fn read_latent(ctx: &Ctx) -> Result<Option<BTreeMap<String, f64>>> {
    let path = ctx.path(layout::LATENT);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = ctx.read(&path)?;
    let mut out = BTreeMap::new();
    for row in csv::Reader::from_reader(bytes.as_slice()).deserialize::<LatentRow>() {
        let row = row.map_err(|e| ctx.fail(format!("{}: {e}", path.display())))?;
        out.insert(row.item_id, row.latent);
    }
    Ok(Some(out))
}

fn optional_r(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(x, y).ok()
}

/// Predicts every split item, correlates held-out predictions with the
/// reference, and cross-validates mode classification on the labeled corpus.
pub fn evaluate(dir: &Path, config: &StudyConfig) -> Result<EvaluateSummary> {
    let ctx = Ctx { dir, config, stage: "evaluate" };
    let model_path = ctx.require(layout::MODEL, "train")?;
    let split: Split = ctx.read_json(&ctx.require(layout::SPLIT, "train")?)?;
    let params: ModelParams = read_checkpoint_file(&model_path).map_err(|e| ctx.fail(e))?;
    let summaries = load_summaries(&ctx)?;
    let rating: HashMap<&str, f64> = summaries.iter().map(|s| (s.item_id.as_str(), s.mean)).collect();
    let latent = read_latent(&ctx)?;

    let all: Vec<(&str, &String)> = split.train.iter().map(|id| ("train", id)).chain(split.test.iter().map(|id| ("test", id))).collect();
    let predictions = all
        .par_iter()
        .map(|(_, id)| forward(&params, &load_mel(&ctx, id)?).map_err(|e| ctx.fail(format!("{id}: {e}"))))
        .collect::<Result<Vec<f64>>>()?;
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    for ((split_name, id), p) in all.iter().zip(&predictions) {
        let mean_rating = *rating.get(id.as_str()).ok_or_else(|| ctx.fail(format!("{id} has no mean rating; rerun `reliability` and `train`")))?;
        let row = PredictionRow { item_id: id, split: split_name, prediction: *p, mean_rating, latent: latent.as_ref().and_then(|l| l.get(*id).copied()) };
        csv_out.serialize(row).map_err(|e| ctx.fail(e))?;
    }
    ctx.write(layout::PREDICTIONS, &csv_out.into_inner().map_err(|e| ctx.fail(e))?)?;

    let pick = |which: &str, reference: &dyn Fn(&str) -> Option<f64>| -> (Vec<f64>, Vec<f64>) {
        all.iter().zip(&predictions).filter(|((s, _), _)| *s == which).filter_map(|((_, id), p)| reference(id).map(|r| (*p, r))).unzip()
    };
    let by_rating = |id: &str| rating.get(id).copied();
    let (tp, tr) = pick("test", &by_rating);
    let pearson_r_ratings = optional_r(&tp, &tr);
    let (trp, trr) = pick("train", &by_rating);
    let train_pearson_r_ratings = optional_r(&trp, &trr);
    let (pearson_r, pearson_reference) = match &latent {
        Some(l) => {
            let (p, r) = pick("test", &|id: &str| l.get(id).copied());
            (optional_r(&p, &r), "latent")
        }
        None => (pearson_r_ratings, "ratings"),
    };

    let (mut cv_accuracy, mut keyprofile_cv_accuracy, mut mode_items) = (None, None, 0);
    let labels_path = ctx.path(layout::MODE_LABELS);
    if labels_path.exists() {
        let corpus = LabeledCorpus::read_csv(ctx.read(&labels_path)?.as_slice(), dir).map_err(|e| ctx.fail(e))?;
        let mode_config = ModeExperimentConfig { clip_seconds: config.evaluation.clip_seconds, folds: config.evaluation.folds, seed: ctx.seed(9) };
        let feature_config = FeatureConfig::default();
        let model_scorer = |buffer: &majorness_core::audio::AudioBuffer| -> std::result::Result<f64, String> {
            let mel = mel_spectrogram_for("clip", buffer, &feature_config).map_err(|e| e.to_string())?;
            forward(&params, &mel).map_err(|e| e.to_string())
        };
        let report = mode_experiment(&corpus, &model_scorer, &mode_config).map_err(|e| ctx.fail(e))?;
        ctx.write(layout::MODE_STRIP, figure_strip(&report).as_bytes())?;
        let baseline = mode_experiment(&corpus, &keyprofile_scorer, &mode_config).map_err(|e| ctx.fail(e))?;
        cv_accuracy = report.cv_accuracy;
        keyprofile_cv_accuracy = baseline.cv_accuracy;
        mode_items = corpus.items.len();
    }

    let emotions_path = ctx.path(layout::EMOTIONS);
    let emotion = if emotions_path.exists() {
        let table = EmotionTable::read_csv(ctx.read(&emotions_path)?.as_slice()).map_err(|e| ctx.fail(e))?;
        Some(emotion_correlation(&summaries, &table).map_err(|e| ctx.fail(e))?)
    } else {
        None
    };

    let summary = EvaluateSummary {
        stage: ctx.stage.into(),
        version: SUMMARY_VERSION,
        pearson_r,
        pearson_reference: pearson_reference.into(),
        pearson_r_ratings,
        train_pearson_r_ratings,
        test_items: split.test.len(),
        cv_accuracy,
        keyprofile_cv_accuracy,
        mode_items,
        emotion,
    };
    ctx.write_json("evaluate.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub stage: String,
    pub version: u32,
    pub seed: u64,
    pub stages: Vec<String>,
    pub comparison_records: usize,
    pub ranked_items: usize,
    pub anchors: Vec<String>,
    pub rating_records: usize,
    pub raters_before: usize,
    pub raters_after: usize,
    pub removed_raters: Vec<String>,
    pub cronbach_alpha: Option<f64>,
    pub krippendorff_alpha: Option<f64>,
    pub train_items: usize,
    pub test_items: usize,
    pub pearson_r: Option<f64>,
    pub pearson_reference: String,
    pub pearson_r_ratings: Option<f64>,
    pub cv_accuracy: Option<f64>,
    pub keyprofile_cv_accuracy: Option<f64>,
}

/// Chains rank → anchors → reliability → features → train → evaluate.
pub fn all(dir: &Path, config: &StudyConfig) -> Result<StudySummary> {
    let ranked = rank(dir, config)?;
    let anchored = anchors(dir, config)?;
    let rel = reliability(dir, config)?;
    features(dir, config)?;
    let trained = train_stage(dir, config)?;
    let evaluated = evaluate(dir, config)?;
    let summary = StudySummary {
        stage: "all".into(),
        version: SUMMARY_VERSION,
        seed: config.seed,
        stages: Stage::CHAIN.iter().map(|s| s.name().to_string()).collect(),
        comparison_records: ranked.records,
        ranked_items: ranked.items,
        anchors: anchored.anchors,
        rating_records: rel.rating_records,
        raters_before: rel.report.raters_before,
        raters_after: rel.report.raters_after,
        removed_raters: rel.report.removed_raters.iter().map(|r| r.rater.clone()).collect(),
        cronbach_alpha: rel.report.cronbach_alpha,
        krippendorff_alpha: rel.report.krippendorff_alpha,
        train_items: trained.train_items,
        test_items: trained.test_items,
        pearson_r: evaluated.pearson_r,
        pearson_reference: evaluated.pearson_reference,
        pearson_r_ratings: evaluated.pearson_r_ratings,
        cv_accuracy: evaluated.cv_accuracy,
        keyprofile_cv_accuracy: evaluated.keyprofile_cv_accuracy,
    };
    let ctx = Ctx { dir, config, stage: "all" };
    ctx.write_json(layout::SUMMARY, &summary)?;
    Ok(summary)
}

/// Runs one stage and returns its summary as JSON.
pub fn run_stage(dir: &Path, config: &StudyConfig, stage: Stage) -> Result<serde_json::Value> {
    fn json<T: Serialize>(v: T) -> serde_json::Value {
        serde_json::to_value(v).expect("summaries serialize")
    }
    Ok(match stage {
        Stage::Simulate => json(simulate(dir, config)?),
        Stage::Rank => json(rank(dir, config)?),
        Stage::Anchors => json(anchors(dir, config)?),
        Stage::Reliability => json(reliability(dir, config)?),
        Stage::Features => json(features(dir, config)?),
        Stage::Train => json(train_stage(dir, config)?),
        Stage::Evaluate => json(evaluate(dir, config)?),
        Stage::All => json(all(dir, config)?),
    })
}
