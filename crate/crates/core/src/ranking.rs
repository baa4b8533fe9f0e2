//! Pairwise comparison ingestion, Bradley–Terry fitting and anchor selection.
//!
//! Comparisons arrive as JSON lines with the fields `rater`, `left`, `right`,
//! `choice` and `ts`. They are aggregated into a latent strength per item by
//! maximizing the Bradley–Terry likelihood
//!
//! ```text
//! P(i beats j) = exp(θ_i) / (exp(θ_i) + exp(θ_j))
//! ```
//!
//! with minorization–maximization updates. The resulting [`Ranking`] is
//! normalized so that the strengths sum to zero.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while ingesting comparisons, fitting or selecting anchors.
#[derive(Debug, Error)]
pub enum RankingError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Validation { line: usize, reason: String },
    #[error("comparison graph is disconnected into {} components: {}", .components.len(), format_components(.components))]
    Disconnected { components: Vec<Vec<String>> },
    #[error("maximum likelihood estimate does not exist without regularization (items {items:?} have only wins or only losses within their component)")]
    Divergent { items: Vec<String> },
    #[error("no convergence after {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("need at least 2 items to fit a ranking, got {0}")]
    TooFewItems(usize),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

fn format_components(components: &[Vec<String>]) -> String {
    components
        .iter()
        .map(|c| format!("{{{}}}", c.join(", ")))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Outcome of a single pairwise judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    LeftMoreMajor,
    RightMoreMajor,
    Equal,
}

impl Choice {
    pub fn inverted(self) -> Self {
        match self {
            Choice::LeftMoreMajor => Choice::RightMoreMajor,
            Choice::RightMoreMajor => Choice::LeftMoreMajor,
            Choice::Equal => Choice::Equal,
        }
    }
}

/// One rater's judgment on one pair of excerpts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonRecord {
    pub rater: String,
    pub left: String,
    pub right: String,
    pub choice: Choice,
    /// UTC seconds.
    pub ts: i64,
    /// Service task that produced the record, when collected online.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
}

impl ComparisonRecord {
    /// Same judgment with the sides swapped.
    pub fn mirrored(&self) -> Self {
        Self {
            rater: self.rater.clone(),
            left: self.right.clone(),
            right: self.left.clone(),
            choice: self.choice.inverted(),
            ts: self.ts,
            task_id: self.task_id.clone(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.left.is_empty() || self.right.is_empty() {
            return Err("record references an empty item id".into());
        }
        if self.left == self.right {
            return Err(format!("item {} compared with itself", self.left));
        }
        Ok(())
    }
}

/// A deduplicated collection of comparisons and the items they mention.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComparisonSet {
    pub records: Vec<ComparisonRecord>,
    pub items: BTreeSet<String>,
}

/// Summary of an ingestion pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub lines: usize,
    pub malformed_skipped: usize,
    pub duplicates_dropped: usize,
}

impl ComparisonSet {
    /// Builds a set from in-memory records, dropping exact duplicates.
    pub fn from_records<I>(records: I) -> Result<Self, RankingError>
    where
        I: IntoIterator<Item = ComparisonRecord>,
    {
        let mut set = Self::default();
        let mut seen = HashSet::new();
        for (idx, record) in records.into_iter().enumerate() {
            record
                .validate()
                .map_err(|reason| RankingError::Validation { line: idx + 1, reason })?;
            if seen.insert(record.clone()) {
                set.items.insert(record.left.clone());
                set.items.insert(record.right.clone());
                set.records.push(record);
            }
        }
        Ok(set)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Connected components of the comparison graph, each sorted, ordered by
    /// their smallest member.
    pub fn components(&self) -> Vec<Vec<String>> {
        let index: BTreeMap<&str, usize> =
            self.items.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut uf = UnionFind::new(self.items.len());
        for r in &self.records {
            uf.union(index[r.left.as_str()], index[r.right.as_str()]);
        }
        let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (id, &i) in &index {
            groups.entry(uf.find(i)).or_default().push((*id).to_string());
        }
        let mut out: Vec<Vec<String>> = groups.into_values().collect();
        out.sort();
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// Writes the records as JSON lines.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads comparison events from JSON lines.
///
/// Blank lines are ignored. Lines that fail to parse are skipped and counted;
/// records that parse but reference an empty item id are a hard error.
pub fn ingest_comparisons<R: BufRead>(reader: R) -> Result<(ComparisonSet, IngestStats), RankingError> {
    let mut stats = IngestStats::default();
    let mut set = ComparisonSet::default();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        let record: ComparisonRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                stats.malformed_skipped += 1;
                continue;
            }
        };
        if record.left.is_empty() || record.right.is_empty() {
            return Err(RankingError::Validation {
                line: idx + 1,
                reason: "record references an empty item id".into(),
            });
        }
        if record.left == record.right {
            stats.malformed_skipped += 1;
            continue;
        }
        if !seen.insert(record.clone()) {
            stats.duplicates_dropped += 1;
            continue;
        }
        set.items.insert(record.left.clone());
        set.items.insert(record.right.clone());
        set.records.push(record);
    }
    Ok((set, stats))
}

/// How "equal" judgments enter the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Each tie counts as half a win for both sides.
    #[default]
    Half,
    /// Ties are dropped.
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Convergence threshold on max |Δθ| between iterations.
    pub tol: f64,
    pub tie_policy: TiePolicy,
    /// Pseudo-wins added in both directions on every observed pair.
    /// `None` fits the plain likelihood.
    pub regularization: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-9,
            tie_policy: TiePolicy::Half,
            regularization: Some(0.5),
        }
    }
}

impl FitConfig {
    pub fn unregularized() -> Self {
        Self { regularization: None, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub item_id: String,
    pub theta: f64,
    pub rank: usize,
}

/// Latent strengths sorted from most to least major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub entries: Vec<RankingEntry>,
    /// Log-likelihood of the observed comparisons (without pseudo-counts).
    pub log_likelihood: f64,
    pub iterations: usize,
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn theta(&self, item: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.item_id == item).map(|e| e.theta)
    }

    /// Item ids from most to least major.
    pub fn order(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.item_id.as_str()).collect()
    }

    /// Content-derived identifier, stable across runs with identical results.
    pub fn fingerprint(&self) -> String {
        let mut hasher = crc32fast::Hasher::new();
        for e in &self.entries {
            hasher.update(e.item_id.as_bytes());
            hasher.update(&e.theta.to_le_bytes());
        }
        format!("ranking-{:08x}", hasher.finalize())
    }

    /// CSV with header `item_id,theta,rank`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(input);
        let mut entries: Vec<RankingEntry> = r.deserialize().collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.rank);
        Ok(Self { entries, log_likelihood: f64::NAN, iterations: 0 })
    }
}

/// Aggregated win counts on an indexed item set.
struct PairCounts {
    ids: Vec<String>,
    /// wins[i][j]: (possibly fractional) number of times i beat j.
    wins: Vec<Vec<f64>>,
}

impl PairCounts {
    fn build(set: &ComparisonSet, ties: TiePolicy) -> Self {
        let ids: Vec<String> = set.items.iter().cloned().collect();
        let index: BTreeMap<&str, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let n = ids.len();
        let mut wins = vec![vec![0.0; n]; n];
        for r in &set.records {
            let (l, rt) = (index[r.left.as_str()], index[r.right.as_str()]);
            match (r.choice, ties) {
                (Choice::LeftMoreMajor, _) => wins[l][rt] += 1.0,
                (Choice::RightMoreMajor, _) => wins[rt][l] += 1.0,
                (Choice::Equal, TiePolicy::Half) => {
                    wins[l][rt] += 0.5;
                    wins[rt][l] += 0.5;
                }
                (Choice::Equal, TiePolicy::Ignore) => {}
            }
        }
        Self { ids, wins }
    }

    fn n(&self) -> usize {
        self.ids.len()
    }

    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        let n = self.n();
        let mut ll = 0.0;
        for i in 0..n {
            for j in 0..n {
                let w = self.wins[i][j];
                if w > 0.0 {
                    let d = theta[j] - theta[i];
                    // -ln(1 + e^d), stable for large |d|
                    ll -= w * (d.max(0.0) + (-d.abs()).exp().ln_1p());
                }
            }
        }
        ll
    }

    /// Items that cannot be reached from, or cannot reach, the rest of the
    /// win graph. Empty iff the directed win graph is strongly connected.
    fn non_strongly_connected(&self) -> Vec<String> {
        let n = self.n();
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    let w = if forward { self.wins[i][j] } else { self.wins[j][i] };
                    if w > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen
        };
        let fwd = reach(true);
        let bwd = reach(false);
        (0..n)
            .filter(|&i| !(fwd[i] && bwd[i]))
            .map(|i| self.ids[i].clone())
            .collect()
    }
}

/// Fits Bradley–Terry strengths by MM iterations.
pub fn fit_bradley_terry(set: &ComparisonSet, config: &FitConfig) -> Result<Ranking, RankingError> {
    if config.tol <= 0.0 || !config.tol.is_finite() {
        return Err(RankingError::Parameter(format!("tol must be positive, got {}", config.tol)));
    }
    if let Some(eps) = config.regularization {
        if eps < 0.0 || !eps.is_finite() {
            return Err(RankingError::Parameter(format!(
                "regularization must be non-negative, got {eps}"
            )));
        }
    }
    let n = set.items.len();
    if n < 2 {
        return Err(RankingError::TooFewItems(n));
    }
    let components = set.components();
    if components.len() > 1 {
        return Err(RankingError::Disconnected { components });
    }

    let observed = PairCounts::build(set, config.tie_policy);
    let mut fitted = PairCounts { ids: observed.ids.clone(), wins: observed.wins.clone() };
    if let Some(eps) = config.regularization.filter(|&e| e > 0.0) {
        // pseudo-counts on every pair that has at least one observation
        let mut touched = vec![vec![false; n]; n];
        for r in &set.records {
            let l = observed.ids.binary_search(&r.left).expect("indexed");
            let rt = observed.ids.binary_search(&r.right).expect("indexed");
            touched[l][rt] = true;
            touched[rt][l] = true;
        }
        for i in 0..n {
            for j in 0..n {
                if touched[i][j] {
                    fitted.wins[i][j] += eps;
                }
            }
        }
    }
    let stuck = fitted.non_strongly_connected();
    if !stuck.is_empty() {
        return Err(RankingError::Divergent { items: stuck });
    }

    let total_wins: Vec<f64> = fitted.wins.iter().map(|row| row.iter().sum()).collect();
    let games: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| fitted.wins[i][j] + fitted.wins[j][i]).collect())
        .collect();

    let mut strength = vec![1.0_f64; n];
    let mut theta = vec![0.0_f64; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iter {
        iterations += 1;
        for i in 0..n {
            let denom: f64 = (0..n)
                .filter(|&j| j != i && games[i][j] > 0.0)
                .map(|j| games[i][j] / (strength[i] + strength[j]))
                .sum();
            strength[i] = total_wins[i] / denom;
        }
        let log_mean = strength.iter().map(|s| s.ln()).sum::<f64>() / n as f64;
        let mut max_delta = 0.0_f64;
        for i in 0..n {
            let t = strength[i].ln() - log_mean;
            max_delta = max_delta.max((t - theta[i]).abs());
            theta[i] = t;
            strength[i] = t.exp();
        }
        if max_delta < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RankingError::NotConverged { iterations });
    }

    let log_likelihood = observed.log_likelihood(&theta);
    let mut entries: Vec<RankingEntry> = observed
        .ids
        .iter()
        .zip(&theta)
        .map(|(id, &t)| RankingEntry { item_id: id.clone(), theta: t, rank: 0 })
        .collect();
    entries.sort_by(|a, b| b.theta.total_cmp(&a.theta).then_with(|| a.item_id.cmp(&b.item_id)));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(Ranking { entries, log_likelihood, iterations })
}

/// Reference items spanning the scale, ordered from most minor to most major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<String>,
    pub source_ranking_id: String,
}

impl AnchorSet {
    pub fn new(anchors: Vec<String>, source_ranking_id: impl Into<String>) -> Result<Self, RankingError> {
        let distinct: HashSet<&String> = anchors.iter().collect();
        if distinct.len() != anchors.len() {
            return Err(RankingError::Parameter("anchors must be distinct".into()));
        }
        Ok(Self { anchors, source_ranking_id: source_ranking_id.into() })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// One id per line, most minor first.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for a in &self.anchors {
            s.push_str(a);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, source_ranking_id: impl Into<String>) -> Result<Self, RankingError> {
        let anchors = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(anchors, source_ranking_id)
    }
}

/// 1-based ranks picked for `k` anchors out of `n` ranked items.
pub fn anchor_ranks(n: usize, k: usize) -> Result<Vec<usize>, RankingError> {
    if k < 2 || k > n {
        return Err(RankingError::Parameter(format!(
            "anchor count must satisfy 2 <= k <= N, got k={k}, N={n}"
        )));
    }
    Ok((1..=k)
        .map(|i| ((i as f64 - 0.5) * n as f64 / k as f64).round() as usize)
        .collect())
}

/// Picks `k` anchors at evenly spaced rank quantiles.
pub fn select_anchors(ranking: &Ranking, k: usize) -> Result<AnchorSet, RankingError> {
    let ranks = anchor_ranks(ranking.len(), k)?;
    // rank 1 is most major; anchors are listed most minor first
    let anchors = ranks
        .iter()
        .rev()
        .map(|&r| ranking.entries[r - 1].item_id.clone())
        .collect();
    AnchorSet::new(anchors, ranking.fingerprint())
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}
