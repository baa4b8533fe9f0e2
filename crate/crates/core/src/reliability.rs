//! Inter-rater consistency and disagreement-based rater filtering.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scale::{RatingRecord, MAX_RATING, MIN_RATING};
use crate::stats;

#[derive(Debug, Error)]
pub enum ReliabilityError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("policy would remove all raters")]
    WouldRemoveAll,
    #[error("alpha is undefined: ratings show no variation")]
    NoVariation,
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Items × raters grid of optional ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterMatrix {
    pub raters: Vec<String>,
    pub items: Vec<String>,
    /// `values[item][rater]`
    pub values: Vec<Vec<Option<f64>>>,
}

impl RaterMatrix {
    /// Checks shape and finiteness. Values may lie on any numeric scale.
    pub fn new(raters: Vec<String>, items: Vec<String>, values: Vec<Vec<Option<f64>>>) -> Result<Self, ReliabilityError> {
        if values.len() != items.len() {
            return Err(ReliabilityError::InvalidMatrix(format!(
                "{} rows for {} items",
                values.len(),
                items.len()
            )));
        }
        for (item, row) in items.iter().zip(&values) {
            if row.len() != raters.len() {
                return Err(ReliabilityError::InvalidMatrix(format!(
                    "row {item} has {} cells for {} raters",
                    row.len(),
                    raters.len()
                )));
            }
            if row.iter().flatten().any(|v| !v.is_finite()) {
                return Err(ReliabilityError::InvalidMatrix(format!("row {item} has a non-finite value")));
            }
        }
        Ok(Self { raters, items, values })
    }

    /// Like [`RaterMatrix::new`], additionally requiring every present value
    /// to lie on the 1..=10 rating scale and every item to have a rating.
    pub fn new_ratings(raters: Vec<String>, items: Vec<String>, values: Vec<Vec<Option<f64>>>) -> Result<Self, ReliabilityError> {
        let m = Self::new(raters, items, values)?;
        let (lo, hi) = (f64::from(MIN_RATING), f64::from(MAX_RATING));
        for (item, row) in m.items.iter().zip(&m.values) {
            if row.iter().flatten().any(|v| *v < lo || *v > hi) {
                return Err(ReliabilityError::InvalidMatrix(format!("row {item} has a value outside [1, 10]")));
            }
            if row.iter().all(Option::is_none) {
                return Err(ReliabilityError::InvalidMatrix(format!("item {item} has no ratings")));
            }
        }
        Ok(m)
    }

    /// Builds the matrix from placement records. Repeated ratings by one
    /// rater on one item are averaged.
    pub fn from_ratings(records: &[RatingRecord]) -> Result<Self, ReliabilityError> {
        let raters: Vec<String> = records.iter().map(|r| r.rater.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let items: Vec<String> = records.iter().map(|r| r.item.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let mut sums: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
        for r in records {
            let e = sums.entry((r.item.as_str(), r.rater.as_str())).or_insert((0.0, 0));
            e.0 += f64::from(r.rating);
            e.1 += 1;
        }
        let values = items
            .iter()
            .map(|item| {
                raters
                    .iter()
                    .map(|rater| sums.get(&(item.as_str(), rater.as_str())).map(|(s, n)| s / *n as f64))
                    .collect()
            })
            .collect();
        Self::new_ratings(raters, items, values)
    }

    pub fn n_raters(&self) -> usize {
        self.raters.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn column(&self, rater: usize) -> impl Iterator<Item = Option<f64>> + '_ {
        self.values.iter().map(move |row| row[rater])
    }

    /// Same matrix with every present value mapped through `f`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            raters: self.raters.clone(),
            items: self.items.clone(),
            values: self.values.iter().map(|row| row.iter().map(|v| v.map(&f)).collect()).collect(),
        }
    }

    /// Keeps only the listed rater columns (by index, in the given order).
    pub fn select_raters(&self, keep: &[usize]) -> Self {
        Self {
            raters: keep.iter().map(|&r| self.raters[r].clone()).collect(),
            items: self.items.clone(),
            values: self.values.iter().map(|row| keep.iter().map(|&r| row[r]).collect()).collect(),
        }
    }

    /// Reads the CSV layout: header `item_id,<rater>...`, one row per item,
    /// empty cells for missing ratings.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, ReliabilityError> {
        let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(input);
        let header = reader.headers()?.clone();
        let raters: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let mut items = Vec::new();
        let mut values = Vec::new();
        for row in reader.records() {
            let row = row?;
            let item = row.get(0).unwrap_or_default().to_string();
            let cells = row
                .iter()
                .skip(1)
                .map(|cell| {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>().map(Some).map_err(|_| {
                            ReliabilityError::InvalidMatrix(format!("item {item}: cannot parse {cell:?}"))
                        })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            items.push(item);
            values.push(cells);
        }
        Self::new_ratings(raters, items, values)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ReliabilityError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["item_id".to_string()];
        header.extend(self.raters.iter().cloned());
        w.write_record(&header)?;
        for (item, row) in self.items.iter().zip(&self.values) {
            let mut rec = vec![item.clone()];
            rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Cronbach's alpha over the items every rater has rated.
///
/// Returns `Ok(None)` when the total-score variance is zero.
pub fn cronbach_alpha(matrix: &RaterMatrix) -> Result<Option<f64>, ReliabilityError> {
    let k = matrix.n_raters();
    if k < 2 {
        return Err(ReliabilityError::InsufficientData(format!("need at least 2 raters, got {k}")));
    }
    let complete: Vec<Vec<f64>> = matrix
        .values
        .iter()
        .filter_map(|row| row.iter().copied().collect::<Option<Vec<f64>>>())
        .collect();
    if complete.len() < 2 {
        return Err(ReliabilityError::InsufficientData(format!(
            "need at least 2 items rated by all {k} raters, got {}",
            complete.len()
        )));
    }
    let item_var_sum: f64 = (0..k)
        .map(|r| stats::sample_variance(&complete.iter().map(|row| row[r]).collect::<Vec<_>>()))
        .sum();
    let totals: Vec<f64> = complete.iter().map(|row| row.iter().sum()).collect();
    let total_var = stats::sample_variance(&totals);
    if total_var == 0.0 {
        return Ok(None);
    }
    let k = k as f64;
    Ok(Some(k / (k - 1.0) * (1.0 - item_var_sum / total_var)))
}

/// Difference function used by Krippendorff's alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Interval,
    Ordinal,
}

/// Krippendorff's alpha via the coincidence matrix. Missing cells are
/// skipped; only items with at least two ratings contribute.
pub fn krippendorff_alpha(matrix: &RaterMatrix, metric: Metric) -> Result<f64, ReliabilityError> {
    let units: Vec<Vec<f64>> = matrix
        .values
        .iter()
        .map(|row| row.iter().flatten().copied().collect::<Vec<f64>>())
        .filter(|u| u.len() >= 2)
        .collect();
    if units.is_empty() {
        return Err(ReliabilityError::InsufficientData("no item has at least 2 ratings".into()));
    }

    let mut levels: Vec<f64> = units.iter().flatten().copied().collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let index = |v: f64| levels.binary_search_by(|x| x.total_cmp(&v)).expect("level present");
    let l = levels.len();

    let mut coincidence = vec![vec![0.0_f64; l]; l];
    for unit in &units {
        let w = 1.0 / (unit.len() - 1) as f64;
        for (a, &va) in unit.iter().enumerate() {
            for (b, &vb) in unit.iter().enumerate() {
                if a != b {
                    coincidence[index(va)][index(vb)] += w;
                }
            }
        }
    }
    let marginals: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();

    let delta2 = |c: usize, k: usize| -> f64 {
        match metric {
            Metric::Interval => (levels[c] - levels[k]).powi(2),
            Metric::Ordinal => {
                let (lo, hi) = if c <= k { (c, k) } else { (k, c) };
                let between: f64 = marginals[lo..=hi].iter().sum();
                (between - (marginals[c] + marginals[k]) / 2.0).powi(2)
            }
        }
    };

    let (mut observed, mut expected) = (0.0, 0.0);
    for c in 0..l {
        for k in 0..l {
            if c == k {
                continue;
            }
            let d = delta2(c, k);
            observed += coincidence[c][k] * d;
            expected += marginals[c] * marginals[k] * d;
        }
    }
    if expected == 0.0 {
        return Err(ReliabilityError::NoVariation);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_corr: f64,
    pub max_removed_frac: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self { min_corr: 0.2, max_removed_frac: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedRater {
    pub rater: String,
    /// Agreement at the moment of removal.
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    /// `None` when undefined (no variance or too few complete items).
    pub cronbach_alpha: Option<f64>,
    pub krippendorff_alpha: Option<f64>,
    pub cronbach_alpha_before: Option<f64>,
    pub krippendorff_alpha_before: Option<f64>,
    /// Removal order.
    pub removed_raters: Vec<RemovedRater>,
    /// Agreement of every rater with the others before filtering.
    pub per_rater_agreement: BTreeMap<String, f64>,
    pub policy: FilterPolicy,
    pub raters_before: usize,
    pub raters_after: usize,
    pub items: usize,
}

/// Pearson correlation of each listed rater with the mean of the other
/// listed raters, over items both sides have rated. Undefined correlations
/// (fewer than 3 shared items or no variance) count as 0.
pub fn rater_agreement(matrix: &RaterMatrix, raters: &[usize]) -> Vec<f64> {
    raters
        .iter()
        .map(|&r| {
            let (mut own, mut others) = (Vec::new(), Vec::new());
            for row in &matrix.values {
                let Some(v) = row[r] else { continue };
                let rest: Vec<f64> = raters.iter().filter(|&&o| o != r).filter_map(|&o| row[o]).collect();
                if rest.is_empty() {
                    continue;
                }
                own.push(v);
                others.push(stats::mean(&rest));
            }
            if own.len() < 3 {
                return 0.0;
            }
            stats::correlation(&own, &others).unwrap_or(0.0)
        })
        .collect()
}

/// Iteratively drops the rater who agrees least with the others while that
/// agreement is below `min_corr` and the removal budget allows it.
pub fn filter_raters(matrix: &RaterMatrix, policy: &FilterPolicy) -> Result<(RaterMatrix, ReliabilityReport), ReliabilityError> {
    if !(0.0..=1.0).contains(&policy.max_removed_frac) || !policy.min_corr.is_finite() {
        return Err(ReliabilityError::Policy(format!("{policy:?}")));
    }
    let n = matrix.n_raters();
    if n < 3 {
        return Err(ReliabilityError::InsufficientData(format!(
            "need at least 3 raters to assess disagreement, got {n}"
        )));
    }
    let budget = (policy.max_removed_frac * n as f64).floor() as usize;
    if budget >= n {
        return Err(ReliabilityError::WouldRemoveAll);
    }

    let mut kept: Vec<usize> = (0..n).collect();
    let initial = rater_agreement(matrix, &kept);
    let mut removed = Vec::new();
    while removed.len() < budget && kept.len() >= 3 {
        let agreement = rater_agreement(matrix, &kept);
        let (worst, &score) = agreement
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .expect("nonempty");
        if score >= policy.min_corr {
            break;
        }
        let r = kept.remove(worst);
        removed.push(RemovedRater { rater: matrix.raters[r].clone(), agreement: score });
    }

    let filtered = matrix.select_raters(&kept);
    let alphas = |m: &RaterMatrix| {
        let c = cronbach_alpha(m).ok().flatten();
        let k = krippendorff_alpha(m, Metric::Interval).ok();
        (c, k)
    };
    let (cb, kb) = alphas(matrix);
    let (ca, ka) = alphas(&filtered);
    let report = ReliabilityReport {
        cronbach_alpha: ca,
        krippendorff_alpha: ka,
        cronbach_alpha_before: cb,
        krippendorff_alpha_before: kb,
        removed_raters: removed,
        per_rater_agreement: matrix.raters.iter().cloned().zip(initial).collect(),
        policy: *policy,
        raters_before: n,
        raters_after: filtered.n_raters(),
        items: matrix.n_items(),
    };
    Ok((filtered, report))
}
