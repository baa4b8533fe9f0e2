//! Correlation, cross-validated 1-D logistic regression, the labeled mode
//! experiment and emotion-dimension correlation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{chroma, read_wav_file, resample_to_44100, AudioBuffer, AudioError, FeatureConfig, CANONICAL_SAMPLE_RATE};
use crate::models::keyprofile_majorness;
use crate::scale::ItemRatingSummary;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("{}: {source}", path.display())]
    Audio { path: PathBuf, source: AudioError },
    #[error("scoring {item} failed: {message}")]
    Scorer { item: String, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Parameter(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(EvalError::InsufficientData(format!("pearson needs at least 3 pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(EvalError::Parameter("non-finite value".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::UndefinedStatistic("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// P(major | x) = σ(intercept + slope·x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub slope: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn probability(&self, x: f64) -> f64 {
        crate::stats::sigmoid(self.intercept + self.slope * x)
    }

    /// Feature value where the probability crosses 0.5.
    pub fn boundary(&self) -> Option<f64> {
        (self.slope != 0.0).then(|| -self.intercept / self.slope)
    }
}

pub const LOGISTIC_TOL: f64 = 1e-8;
const LOGISTIC_MAX_ITER: usize = 100_000;

fn log_lik(a: f64, b: f64, x: &[f64], y: &[bool]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let z = a + b * xi;
            // log σ(z) = -softplus(-z)
            let softplus = |t: f64| if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
            if yi { -softplus(-z) } else { -softplus(z) }
        })
        .sum()
}

/// Maximum-likelihood 1-D logistic regression by full-batch gradient ascent
/// with step halving on a standardized copy of the feature. Stops when the
/// mean log-likelihood gains less than 1e-8 per iteration.
pub fn fit_logistic(x: &[f64], y: &[bool]) -> Result<LogisticFit, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Parameter(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(EvalError::InsufficientData("no samples".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Parameter("non-finite feature".into()));
    }
    if y.iter().all(|v| *v) || y.iter().all(|v| !*v) {
        return Err(EvalError::SingleClass);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let z: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
    let (mut a, mut b) = (0.0f64, 0.0f64);
    let mut ll = log_lik(a, b, &z, y) / n;
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < LOGISTIC_MAX_ITER {
        iterations += 1;
        let (mut ga, mut gb) = (0.0, 0.0);
        for (&zi, &yi) in z.iter().zip(y) {
            let r = if yi { 1.0 } else { 0.0 } - crate::stats::sigmoid(a + b * zi);
            ga += r;
            gb += r * zi;
        }
        ga /= n;
        gb /= n;
        if ga.abs().max(gb.abs()) < LOGISTIC_TOL {
            break;
        }
        let mut accepted = None;
        while step > 1e-12 {
            let (na, nb) = (a + step * ga, b + step * gb);
            let nll = log_lik(na, nb, &z, y) / n;
            if nll > ll {
                accepted = Some((na, nb, nll));
                break;
            }
            step *= 0.5;
        }
        let Some((na, nb, nll)) = accepted else { break };
        let gain = nll - ll;
        (a, b, ll) = (na, nb, nll);
        step = (step * 2.0).min(64.0);
        if gain < LOGISTIC_TOL {
            break;
        }
    }
    let slope = b / sd;
    let intercept = a - slope * mean;
    Ok(LogisticFit { intercept, slope, log_likelihood: log_lik(intercept, slope, x, y), iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    pub feature: f64,
    pub label: Option<bool>,
    /// Out-of-fold P(major), or a regression prediction.
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pearson_r: Option<f64>,
    pub cv_accuracy: Option<f64>,
    pub fold_accuracies: Vec<f64>,
    pub per_item: Vec<ItemOutcome>,
    pub mistakes: Vec<String>,
}

/// Fold index per sample: each class is shuffled and dealt round-robin, the
/// second class continuing where the first stopped.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    assignment
}

/// k-fold cross-validated logistic regression of `labels` (true = major) on a
/// scalar feature, with items named by index.
pub fn logistic_cv(feature: &[f64], labels: &[bool], folds: usize, seed: u64) -> Result<EvalReport, EvalError> {
    let ids: Vec<String> = (0..feature.len()).map(|i| i.to_string()).collect();
    logistic_cv_named(&ids, feature, labels, folds, seed)
}

/// A fold whose training part holds a single class predicts that class's
/// share (0 or 1) for its test items.
pub fn logistic_cv_named(ids: &[String], feature: &[f64], labels: &[bool], folds: usize, seed: u64) -> Result<EvalReport, EvalError> {
    if ids.len() != feature.len() || feature.len() != labels.len() {
        return Err(EvalError::Parameter("ids, features and labels differ in length".into()));
    }
    if folds < 2 {
        return Err(EvalError::Parameter(format!("need at least 2 folds, got {folds}")));
    }
    if feature.len() < folds {
        return Err(EvalError::InsufficientData(format!("{} samples for {folds} folds", feature.len())));
    }
    if labels.iter().all(|v| *v) || labels.iter().all(|v| !*v) {
        return Err(EvalError::SingleClass);
    }
    let assignment = stratified_folds(labels, folds, seed);
    let mut prob = vec![0.0; feature.len()];
    let mut fold_accuracies = Vec::with_capacity(folds);
    for f in 0..folds {
        let (mut tx, mut ty) = (Vec::new(), Vec::new());
        for i in (0..feature.len()).filter(|&i| assignment[i] != f) {
            tx.push(feature[i]);
            ty.push(labels[i]);
        }
        let fit = match fit_logistic(&tx, &ty) {
            Ok(fit) => Some(fit),
            Err(EvalError::SingleClass) => None,
            Err(e) => return Err(e),
        };
        let test: Vec<usize> = (0..feature.len()).filter(|&i| assignment[i] == f).collect();
        let mut correct = 0;
        for &i in &test {
            prob[i] = match fit {
                Some(fit) => fit.probability(feature[i]),
                None => if ty[0] { 1.0 } else { 0.0 },
            };
            if (prob[i] >= 0.5) == labels[i] {
                correct += 1;
            }
        }
        fold_accuracies.push(correct as f64 / test.len() as f64);
    }
    let label_num: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let per_item: Vec<ItemOutcome> = (0..feature.len())
        .map(|i| ItemOutcome { item_id: ids[i].clone(), feature: feature[i], label: Some(labels[i]), prediction: prob[i] })
        .collect();
    let mistakes = per_item.iter().filter(|o| (o.prediction >= 0.5) != o.label.unwrap_or(false)).map(|o| o.item_id.clone()).collect();
    Ok(EvalReport {
        pearson_r: pearson(feature, &label_num).ok(),
        cv_accuracy: Some(fold_accuracies.iter().sum::<f64>() / folds as f64),
        fold_accuracies,
        per_item,
        mistakes,
    })
}

/// Regression report: correlation between predictions and reference values.
pub fn regression_report(ids: &[String], predictions: &[f64], reference: &[f64]) -> Result<EvalReport, EvalError> {
    if ids.len() != predictions.len() {
        return Err(EvalError::Parameter("ids and predictions differ in length".into()));
    }
    let r = pearson(predictions, reference)?;
    let per_item = ids
        .iter()
        .zip(predictions.iter().zip(reference))
        .map(|(id, (p, f))| ItemOutcome { item_id: id.clone(), feature: *f, label: None, prediction: *p })
        .collect();
    Ok(EvalReport { pearson_r: Some(r), cv_accuracy: None, fold_accuracies: Vec::new(), per_item, mistakes: Vec::new() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub item_id: String,
    pub path: PathBuf,
    pub major: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub items: Vec<LabeledItem>,
}

#[derive(Deserialize, Serialize)]
struct LabelRow {
    item_id: String,
    path: String,
    mode: String,
}

impl LabeledCorpus {
    /// CSV with columns `item_id,path,mode` where mode is `major` or `minor`;
    /// relative paths resolve against `base`.
    pub fn read_csv<R: std::io::Read>(input: R, base: &Path) -> Result<Self, EvalError> {
        let mut items = Vec::new();
        for row in csv::Reader::from_reader(input).deserialize() {
            let row: LabelRow = row?;
            let major = match row.mode.as_str() {
                "major" => true,
                "minor" => false,
                other => return Err(EvalError::Format(format!("item {}: mode must be major or minor, got {other:?}", row.item_id))),
            };
            items.push(LabeledItem { item_id: row.item_id, path: base.join(row.path), major });
        }
        Ok(Self { items })
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W, base: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        for item in &self.items {
            let path = item.path.strip_prefix(base).unwrap_or(&item.path);
            w.serialize(LabelRow {
                item_id: item.item_id.clone(),
                path: path.to_string_lossy().into_owned(),
                mode: if item.major { "major" } else { "minor" }.into(),
            })?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Scalar majorness of an audio excerpt.
pub type Scorer<'a> = &'a (dyn Fn(&AudioBuffer) -> Result<f64, String> + Sync);

/// Key-profile majorness of the chroma of `buffer` under default features.
pub fn keyprofile_scorer(buffer: &AudioBuffer) -> Result<f64, String> {
    let c = chroma(buffer, &FeatureConfig::default()).map_err(|e| e.to_string())?;
    keyprofile_majorness(&c).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeExperimentConfig {
    pub clip_seconds: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for ModeExperimentConfig {
    fn default() -> Self {
        Self { clip_seconds: 12.0, folds: 10, seed: 0 }
    }
}

fn load_clip(path: &Path, clip_seconds: f64) -> Result<AudioBuffer, EvalError> {
    let buffer = read_wav_file(path).map_err(|source| EvalError::Audio { path: path.to_path_buf(), source })?;
    let buffer = if buffer.sample_rate == CANONICAL_SAMPLE_RATE { buffer } else { resample_to_44100(&buffer) };
    Ok(buffer.head(clip_seconds))
}

/// Scores the first `clip_seconds` of every file and cross-validates a
/// logistic regression of the mode labels on the scores.
pub fn mode_experiment(corpus: &LabeledCorpus, scorer: Scorer, config: &ModeExperimentConfig) -> Result<EvalReport, EvalError> {
    if corpus.items.is_empty() {
        return Err(EvalError::InsufficientData("empty corpus".into()));
    }
    let scores = corpus
        .items
        .par_iter()
        .map(|item| {
            let clip = load_clip(&item.path, config.clip_seconds)?;
            scorer(&clip).map_err(|message| EvalError::Scorer { item: format!("{} ({})", item.item_id, item.path.display()), message })
        })
        .collect::<Result<Vec<f64>, _>>()?;
    finish_mode_experiment(corpus.items.iter().map(|i| (i.item_id.clone(), i.major)).collect(), scores, config)
}

/// In-memory variant of [`mode_experiment`]; buffers are clipped here.
pub fn mode_experiment_buffers(items: &[(String, AudioBuffer, bool)], scorer: Scorer, config: &ModeExperimentConfig) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::InsufficientData("empty corpus".into()));
    }
    let scores = items
        .par_iter()
        .map(|(id, buffer, _)| scorer(&buffer.head(config.clip_seconds)).map_err(|message| EvalError::Scorer { item: id.clone(), message }))
        .collect::<Result<Vec<f64>, _>>()?;
    finish_mode_experiment(items.iter().map(|(id, _, m)| (id.clone(), *m)).collect(), scores, config)
}

fn finish_mode_experiment(labels: Vec<(String, bool)>, scores: Vec<f64>, config: &ModeExperimentConfig) -> Result<EvalReport, EvalError> {
    let ids: Vec<String> = labels.iter().map(|(id, _)| id.clone()).collect();
    let y: Vec<bool> = labels.iter().map(|(_, m)| *m).collect();
    let mut report = logistic_cv_named(&ids, &scores, &y, config.folds, config.seed)?;
    report.per_item.sort_by(|a, b| a.feature.total_cmp(&b.feature).then_with(|| a.item_id.cmp(&b.item_id)));
    Ok(report)
}

/// Plain-text strip of items ordered by feature, one per line; mistakes are
/// marked with `x`.
pub fn figure_strip(report: &EvalReport) -> String {
    let mut items: Vec<&ItemOutcome> = report.per_item.iter().collect();
    items.sort_by(|a, b| a.feature.total_cmp(&b.feature).then_with(|| a.item_id.cmp(&b.item_id)));
    let mut s = String::new();
    let _ = writeln!(s, "{:>4}  {:<12} {:>9}  {:<5}  {:>6}  ", "#", "item", "majorness", "mode", "p", );
    for (i, o) in items.iter().enumerate() {
        let label = match o.label {
            Some(true) => "major",
            Some(false) => "minor",
            None => "-",
        };
        let wrong = o.label.is_some_and(|l| (o.prediction >= 0.5) != l);
        let _ = writeln!(s, "{:>4}  {:<12} {:>9.4}  {:<5}  {:>6.3}  {}", i + 1, o.item_id, o.feature, label, o.prediction, if wrong { "x" } else { "" });
    }
    if let Some(acc) = report.cv_accuracy {
        let _ = writeln!(s, "accuracy {acc:.4}  mistakes {}", report.mistakes.len());
    }
    s
}

/// Per-item emotion ratings; missing cells are absent from `values`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmotionTable {
    pub dimensions: Vec<String>,
    pub values: BTreeMap<String, BTreeMap<String, f64>>,
}

impl EmotionTable {
    /// CSV with an `item_id` column followed by one numeric column per dimension.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, EvalError> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("item_id") || headers.len() < 2 {
            return Err(EvalError::Format("emotion table needs an item_id column followed by dimension columns".into()));
        }
        let dimensions: Vec<String> = headers.iter().skip(1).map(String::from).collect();
        let mut values = BTreeMap::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let item = record.get(0).unwrap_or_default().to_string();
            let mut row = BTreeMap::new();
            for (dim, cell) in dimensions.iter().zip(record.iter().skip(1)) {
                if cell.trim().is_empty() {
                    continue;
                }
                let v: f64 = cell.trim().parse().map_err(|_| EvalError::Format(format!("row {}: {dim} is not a number: {cell:?}", line + 2)))?;
                row.insert(dim.clone(), v);
            }
            values.insert(item, row);
        }
        Ok(Self { dimensions, values })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionReport {
    /// Items present in both tables.
    pub join_size: usize,
    pub correlations: BTreeMap<String, f64>,
    pub pairs_per_dimension: BTreeMap<String, usize>,
}

/// Pearson r between mean majorness ratings and each emotion dimension over
/// the items both tables share.
pub fn emotion_correlation(summaries: &[ItemRatingSummary], table: &EmotionTable) -> Result<EmotionReport, EvalError> {
    let joined: Vec<(&ItemRatingSummary, &BTreeMap<String, f64>)> =
        summaries.iter().filter_map(|s| table.values.get(&s.item_id).map(|row| (s, row))).collect();
    if joined.len() < 3 {
        return Err(EvalError::InsufficientData(format!("only {} items in the join, need at least 3", joined.len())));
    }
    let mut correlations = BTreeMap::new();
    let mut pairs_per_dimension = BTreeMap::new();
    for dim in &table.dimensions {
        let (x, y): (Vec<f64>, Vec<f64>) = joined.iter().filter_map(|(s, row)| row.get(dim).map(|v| (s.mean, *v))).unzip();
        let r = pearson(&x, &y).map_err(|e| match e {
            EvalError::InsufficientData(m) | EvalError::UndefinedStatistic(m) => EvalError::InsufficientData(format!("dimension {dim}: {m}")),
            other => other,
        })?;
        correlations.insert(dim.clone(), r);
        pairs_per_dimension.insert(dim.clone(), x.len());
    }
    Ok(EmotionReport { join_size: joined.len(), correlations, pairs_per_dimension })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(EvalError::UndefinedStatistic(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(EvalError::InsufficientData(_))));
    }

    #[test]
    fn pearson_matches_hand_evaluation() {
        // means 2.75 and 3.25; Sxy = 7.25, Sxx = 8.75, Syy = 6.75
        let expected = 7.25 / (8.75f64 * 6.75).sqrt();
        let r = pearson(&[1.0, 2.0, 3.0, 5.0], &[2.0, 2.0, 4.0, 5.0]).unwrap();
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn logistic_matches_grid_search() {
        let x = [0.0, 1.0, 3.0];
        let y = [false, true, false];
        let fit = fit_logistic(&x, &y).unwrap();
        let (mut best, mut ba, mut bb) = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=800 {
            for j in 0..=800 {
                let (a, b) = (-4.0 + i as f64 * 0.01, -4.0 + j as f64 * 0.01);
                let ll = log_lik(a, b, &x, &y);
                if ll > best {
                    (best, ba, bb) = (ll, a, b);
                }
            }
        }
        assert!((fit.intercept - ba).abs() < 0.02 && (fit.slope - bb).abs() < 0.02, "{fit:?} vs ({ba}, {bb})");
        assert!(fit.log_likelihood >= best - 1e-6);
    }

    #[test]
    fn logistic_needs_two_classes() {
        assert!(matches!(fit_logistic(&[1.0, 2.0], &[true, true]), Err(EvalError::SingleClass)));
        assert!(matches!(logistic_cv(&[1.0, 2.0, 3.0], &[false; 3], 2, 0), Err(EvalError::SingleClass)));
        assert!(logistic_cv(&[1.0, 2.0, 3.0], &[false, true, true], 4, 0).is_err());
    }

    #[test]
    fn separable_feature_is_perfect() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let y: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let r = logistic_cv(&x, &y, 10, 3).unwrap();
        assert_eq!(r.cv_accuracy, Some(1.0));
        assert!(r.mistakes.is_empty());
        assert_eq!(r.fold_accuracies.len(), 10);
    }

    #[test]
    fn independent_feature_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        let y: Vec<bool> = (0..1000).map(|_| rng.random()).collect();
        let acc = logistic_cv(&x, &y, 10, 5).unwrap().cv_accuracy.unwrap();
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn folds_are_stratified() {
        let y: Vec<bool> = (0..96).map(|i| i % 2 == 0).collect();
        let a = stratified_folds(&y, 10, 1);
        for f in 0..10 {
            let major = (0..96).filter(|&i| a[i] == f && y[i]).count();
            let minor = (0..96).filter(|&i| a[i] == f && !y[i]).count();
            assert!((4..=5).contains(&major) && (4..=5).contains(&minor));
        }
    }

    #[test]
    fn cv_accuracy_is_mean_of_folds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let x: Vec<f64> = y.iter().map(|&l| if l { 1.0 } else { 0.0 } + rng.random::<f64>()).collect();
        let r = logistic_cv(&x, &y, 7, 4).unwrap();
        let mean = r.fold_accuracies.iter().sum::<f64>() / 7.0;
        assert!((r.cv_accuracy.unwrap() - mean).abs() < 1e-15);
        let wrong = r.per_item.iter().filter(|o| (o.prediction >= 0.5) != o.label.unwrap()).count();
        assert_eq!(wrong, r.mistakes.len());
    }

    #[test]
    fn monotone_transform_keeps_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<bool> = (0..120).map(|i| i % 2 == 0).collect();
        let x: Vec<f64> = y.iter().map(|&l| if l { 0.6 } else { 0.0 } + rng.random::<f64>()).collect();
        let base = logistic_cv(&x, &y, 10, 1).unwrap().cv_accuracy.unwrap();
        let affine: Vec<f64> = x.iter().map(|v| 3.0 * v - 7.0).collect();
        assert!((logistic_cv(&affine, &y, 10, 1).unwrap().cv_accuracy.unwrap() - base).abs() < 1e-12);
        let cubed: Vec<f64> = x.iter().map(|v| v.powi(3) + v).collect();
        assert!((logistic_cv(&cubed, &y, 10, 1).unwrap().cv_accuracy.unwrap() - base).abs() <= 0.05);
    }

    #[test]
    fn label_oracle_scorer_is_perfect() {
        let tone = |major: bool| AudioBuffer { samples: vec![if major { 0.5 } else { 0.25 }; 100], sample_rate: 44_100 };
        let items: Vec<_> = (0..20).map(|i| (format!("i{i}"), tone(i % 2 == 0), i % 2 == 0)).collect();
        let oracle = |b: &AudioBuffer| Ok(if b.samples[0] > 0.4 { 1.0 } else { 0.0 });
        let r = mode_experiment_buffers(&items, &oracle, &ModeExperimentConfig::default()).unwrap();
        assert_eq!(r.cv_accuracy, Some(1.0));
        assert!(r.per_item.windows(2).all(|w| w[0].feature <= w[1].feature));
        assert!(figure_strip(&r).contains("accuracy 1.0000"));
        assert!(mode_experiment_buffers(&[], &oracle, &ModeExperimentConfig::default()).is_err());
        assert!(mode_experiment(&LabeledCorpus::default(), &oracle, &ModeExperimentConfig::default()).is_err());
    }

    #[test]
    fn missing_file_is_named() {
        let corpus = LabeledCorpus { items: vec![LabeledItem { item_id: "a".into(), path: "/nonexistent/a.wav".into(), major: true }] };
        let err = mode_experiment(&corpus, &keyprofile_scorer, &ModeExperimentConfig::default()).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/a.wav"), "{err}");
    }

    #[test]
    fn labeled_corpus_csv_round_trip() {
        let base = Path::new("/data");
        let corpus = LabeledCorpus {
            items: vec![
                LabeledItem { item_id: "a".into(), path: "/data/audio/a.wav".into(), major: true },
                LabeledItem { item_id: "b".into(), path: "/data/audio/b.wav".into(), major: false },
            ],
        };
        let mut buf = Vec::new();
        corpus.write_csv(&mut buf, base).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("a,audio/a.wav,major"));
        assert_eq!(LabeledCorpus::read_csv(&buf[..], base).unwrap(), corpus);
        assert!(LabeledCorpus::read_csv(&b"item_id,path,mode\na,x.wav,dorian\n"[..], base).is_err());
    }

    fn summaries(means: &[f64]) -> Vec<ItemRatingSummary> {
        means.iter().enumerate().map(|(i, m)| ItemRatingSummary { item_id: format!("i{i}"), mean: *m, std: 0.0, n: 5 }).collect()
    }

    #[test]
    fn emotion_identity_and_negation() {
        let s = summaries(&[2.0, 5.5, 3.0, 9.0, 7.25]);
        let mut csv_text = String::from("item_id,happiness,sadness\n");
        for x in &s {
            csv_text.push_str(&format!("{},{},{}\n", x.item_id, x.mean, -x.mean));
        }
        csv_text.push_str("zz,1,2\n");
        let table = EmotionTable::read_csv(csv_text.as_bytes()).unwrap();
        let r = emotion_correlation(&s, &table).unwrap();
        assert_eq!(r.join_size, 5);
        assert!((r.correlations["happiness"] - 1.0).abs() < 1e-12);
        assert!((r.correlations["sadness"] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn emotion_join_too_small() {
        let s = summaries(&[2.0, 5.5, 3.0]);
        let table = EmotionTable::read_csv("item_id,valence\ni0,1\ni1,2\nq,3\n".as_bytes()).unwrap();
        assert!(matches!(emotion_correlation(&s, &table), Err(EvalError::InsufficientData(_))));
        assert!(EmotionTable::read_csv("id,valence\n".as_bytes()).is_err());
        assert!(EmotionTable::read_csv("item_id,valence\na,happy\n".as_bytes()).is_err());
    }

    #[test]
    fn noisy_happiness_tracks_majorness() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let means: Vec<f64> = (0..200).map(|_| rng.random_range(1.0..10.0)).collect();
        let sd = crate::stats::sample_variance(&means).sqrt();
        let noise = rand_distr::Normal::new(0.0, 0.5 * sd).unwrap();
        let s = summaries(&means);
        let mut table = EmotionTable { dimensions: vec!["happiness".into()], values: BTreeMap::new() };
        for x in &s {
            let v = x.mean + rand_distr::Distribution::sample(&noise, &mut rng);
            table.values.insert(x.item_id.clone(), BTreeMap::from([("happiness".to_string(), v)]));
        }
        assert!(emotion_correlation(&s, &table).unwrap().correlations["happiness"] > 0.8);
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            pts in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30),
            scale in 0.01f64..100.0,
            shift in -1e3f64..1e3,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            if let Ok(r) = pearson(&x, &y) {
                prop_assume!(crate::stats::sample_variance(&x) > 1e-6 && crate::stats::sample_variance(&y) > 1e-6);
                let xt: Vec<f64> = x.iter().map(|v| v * scale + shift).collect();
                prop_assert!((pearson(&xt, &y).unwrap() - r).abs() < 1e-9);
                let neg: Vec<f64> = y.iter().map(|v| -v).collect();
                prop_assert!((pearson(&x, &neg).unwrap() + r).abs() < 1e-12);
                prop_assert!(r.abs() <= 1.0);
            }
        }
    }
}
