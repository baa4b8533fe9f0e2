//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. `ACCEPTANCE_ONLY=3,7` runs a subset.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use majorness_core::audio::{chroma, hz_to_mel, mel_energies, mel_to_hz, mel_spectrogram, AudioBuffer, FeatureConfig};
use majorness_core::evaluation::{keyprofile_scorer, logistic_cv, mode_experiment_buffers, ModeExperimentConfig};
use majorness_core::models::{forward, grad_check, init_model, keyprofile_majorness, random_mel, train, ArchConfig, TrainConfig};
use majorness_core::ranking::{fit_bradley_terry, Choice, ComparisonRecord, ComparisonSet, FitConfig};
use majorness_core::reliability::{cronbach_alpha, filter_raters, krippendorff_alpha, FilterPolicy, Metric, RaterMatrix};
use majorness_core::sim::{all_pairs, gen_corpus, gen_mode_corpus, rater_panel, sim_pairwise};
use majorness_core::stats::{kendall_tau, spearman};
use majorness_service::pipeline;
use majorness_service::study::{Study, SystemClock, TaskResponse};
use majorness_service::StudyConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn record(rater: &str, left: &str, right: &str, choice: Choice) -> ComparisonRecord {
    ComparisonRecord { rater: rater.into(), left: left.into(), right: right.into(), choice, ts: 0, task_id: None }
}

/// Log-likelihood of a win-count table, with `theta[2] = 0` fixed.
fn bt_loglik(wins: &[[f64; 3]; 3], a: f64, b: f64) -> f64 {
    let t = [a, b, 0.0];
    let mut ll = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j && wins[i][j] > 0.0 {
                ll += wins[i][j] * (t[i] - (t[i].exp() + t[j].exp()).ln());
            }
        }
    }
    ll
}

/// Coarse-to-fine grid search, then shifted so strengths sum to zero.
fn bt_grid(wins: &[[f64; 3]; 3]) -> [f64; 3] {
    let (mut ca, mut cb, mut half, mut step) = (0.0f64, 0.0f64, 4.0f64, 0.02f64);
    for _ in 0..3 {
        let mut best = (f64::NEG_INFINITY, ca, cb);
        let n = (2.0 * half / step).round() as i64;
        for i in 0..=n {
            for j in 0..=n {
                let (a, b) = (ca - half + i as f64 * step, cb - half + j as f64 * step);
                let ll = bt_loglik(wins, a, b);
                if ll > best.0 {
                    best = (ll, a, b);
                }
            }
        }
        (ca, cb) = (best.1, best.2);
        half = step * 2.0;
        step /= 10.0;
    }
    let m = (ca + cb) / 3.0;
    [ca - m, cb - m, -m]
}

fn criterion_1() -> Outcome {
    let ids = ["a", "b", "c"];
    let counts = [(0, 1, 3), (1, 0, 1), (1, 2, 2), (2, 1, 1), (0, 2, 2), (2, 0, 1)];
    let mut records = Vec::new();
    let mut k = 0;
    for &(w, l, n) in &counts {
        for _ in 0..n {
            records.push(record(&format!("r{k}"), ids[w], ids[l], Choice::LeftMoreMajor));
            k += 1;
        }
    }
    let set = ComparisonSet::from_records(records).unwrap();
    let mut worst: f64 = 0.0;
    for (config, eps) in [(FitConfig::unregularized(), 0.0), (FitConfig::default(), 0.5)] {
        let mut wins = [[0.0; 3]; 3];
        for &(w, l, n) in &counts {
            wins[w][l] += n as f64;
        }
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    wins[i][j] += eps;
                }
            }
        }
        let oracle = bt_grid(&wins);
        let fit = fit_bradley_terry(&set, &config).unwrap();
        for (i, id) in ids.iter().enumerate() {
            worst = worst.max((fit.theta(id).unwrap() - oracle[i]).abs());
        }
    }
    outcome(worst < 1e-2, format!("max |theta - grid MLE| = {worst:.2e} (plain and regularized)"))
}

fn criterion_2() -> Outcome {
    let items = gen_corpus(100, 11, 1.0).unwrap();
    let latent: Vec<f64> = items.iter().map(|i| i.latent_majorness).collect();
    let pairs = all_pairs(100);
    let fit_order = |noise: f64| {
        let raters = rater_panel(5, noise, 0.0, 12).unwrap();
        let recs = sim_pairwise(&items, &raters, &pairs, 13).unwrap();
        let ranking = fit_bradley_terry(&ComparisonSet::from_records(recs).unwrap(), &FitConfig::default()).unwrap();
        items.iter().map(|i| ranking.theta(&i.item_id).unwrap()).collect::<Vec<f64>>()
    };
    let rho = spearman(&fit_order(0.1), &latent).unwrap();
    let tau = kendall_tau(&fit_order(0.0), &latent).unwrap();
    outcome(rho >= 0.95 && tau == 1.0, format!("Spearman at sigma 0.1 = {rho:.4}; noiseless Kendall tau = {tau}"))
}

fn matrix(values: Vec<Vec<Option<f64>>>) -> RaterMatrix {
    let raters = (0..values[0].len()).map(|r| format!("r{r}")).collect();
    let items = (0..values.len()).map(|i| format!("i{i}")).collect();
    RaterMatrix::new(raters, items, values).unwrap()
}

/// Interval alpha by enumerating every ordered pair of pairable values.
fn krippendorff_enumerated(values: &[Vec<Option<f64>>]) -> f64 {
    let units: Vec<Vec<f64>> = values.iter().map(|r| r.iter().flatten().copied().collect::<Vec<f64>>()).filter(|u| u.len() >= 2).collect();
    let all: Vec<f64> = units.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let mut d_o = 0.0;
    for u in &units {
        let m = u.len() as f64;
        for (i, a) in u.iter().enumerate() {
            for (j, b) in u.iter().enumerate() {
                if i != j {
                    d_o += (a - b).powi(2) / (m - 1.0);
                }
            }
        }
    }
    d_o /= n;
    let mut d_e = 0.0;
    for (i, a) in all.iter().enumerate() {
        for (j, b) in all.iter().enumerate() {
            if i != j {
                d_e += (a - b).powi(2);
            }
        }
    }
    d_e /= n * (n - 1.0);
    1.0 - d_o / d_e
}

fn criterion_3() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let cells = vec![
        vec![Some(1.0), Some(2.0), None],
        vec![Some(3.0), Some(3.0), Some(4.0)],
        vec![None, Some(5.0), Some(5.0)],
        vec![Some(2.0), None, Some(1.0)],
    ];
    let k = krippendorff_alpha(&matrix(cells.clone()), Metric::Interval).unwrap();
    let oracle = krippendorff_enumerated(&cells);
    // 73/85 is the same enumeration done in exact rationals.
    pass &= (k - oracle).abs() < 1e-9 && (oracle - 73.0 / 85.0).abs() < 1e-12;
    notes.push(format!("Krippendorff {k:.6} vs {oracle:.6}"));

    let grid = [[2.0, 3.0, 3.0], [4.0, 4.0, 5.0], [1.0, 2.0, 2.0], [5.0, 4.0, 6.0]];
    let var = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
    };
    let rater_vars: f64 = (0..3).map(|r| var(&grid.iter().map(|row| row[r]).collect::<Vec<_>>())).sum();
    let totals: Vec<f64> = grid.iter().map(|row| row.iter().sum()).collect();
    let hand = 1.5 * (1.0 - rater_vars / var(&totals));
    let c = cronbach_alpha(&matrix(grid.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect())).unwrap().unwrap();
    // 240/251 from the same formula in exact rationals.
    pass &= (c - hand).abs() < 1e-12 && (hand - 240.0 / 251.0).abs() < 1e-12;
    notes.push(format!("Cronbach {c:.12} vs {hand:.12}"));

    let same = matrix((0..10).map(|i| vec![Some(1.0 + (i % 10) as f64); 4]).collect());
    let (ci, ki) = (cronbach_alpha(&same).unwrap().unwrap(), krippendorff_alpha(&same, Metric::Interval).unwrap());
    pass &= (ci - 1.0).abs() < 1e-12 && (ki - 1.0).abs() < 1e-12;
    notes.push(format!("identical raters {ci}, {ki}"));

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let random = matrix((0..1000).map(|_| (0..5).map(|_| Some(rng.random_range(1..=10) as f64)).collect()).collect());
    let (cr, kr) = (cronbach_alpha(&random).unwrap().unwrap(), krippendorff_alpha(&random, Metric::Interval).unwrap());
    pass &= cr.abs() < 0.1 && kr.abs() < 0.1;
    notes.push(format!("random {cr:.4}, {kr:.4}"));
    outcome(pass, notes.join("; "))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let latent: Vec<f64> = (0..60).map(|_| rng.random_range(1.0..10.0)).collect();
    let mut values = Vec::new();
    for &l in &latent {
        let mut row = Vec::new();
        for r in 0..10 {
            let v: f64 = (l + rng.random_range(-1.0..1.0)).round().clamp(1.0, 10.0);
            row.push(Some(if r >= 8 { 11.0 - v } else { v }));
        }
        values.push(row);
    }
    let m = matrix(values);
    let (_, report) = filter_raters(&m, &FilterPolicy::default()).unwrap();
    let removed: HashSet<&str> = report.removed_raters.iter().map(|r| r.rater.as_str()).collect();
    let expected: HashSet<&str> = ["r8", "r9"].into_iter().collect();
    let (before, after) = (report.cronbach_alpha_before.unwrap(), report.cronbach_alpha.unwrap());
    outcome(removed == expected && after >= before, format!("removed {:?}; Cronbach {before:.4} -> {after:.4}", report.removed_raters.iter().map(|r| &r.rater).collect::<Vec<_>>()))
}

fn sine(freqs: &[f64], seconds: f64) -> AudioBuffer {
    let sr = 44_100.0;
    let n = (seconds * sr) as usize;
    let samples = (0..n).map(|k| freqs.iter().map(|f| (std::f64::consts::TAU * f * k as f64 / sr).sin() * 0.25).sum::<f64>() as f32).collect();
    AudioBuffer::new(samples, 44_100).unwrap()
}

fn triad_freqs(root: usize, major: bool) -> [f64; 3] {
    let midi = |n: usize| 440.0 * 2f64.powf((n as f64 - 69.0) / 12.0);
    let base = 60 + root;
    [midi(base), midi(base + if major { 4 } else { 3 }), midi(base + 7)]
}

fn criterion_5() -> Outcome {
    let config = FeatureConfig::default();
    let frames = mel_spectrogram(&sine(&[440.0], 12.0), &config).unwrap().frames;
    // Band centres from the mel formula, independent of the filterbank code.
    let htk = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let top = htk(22_050.0);
    let centres: Vec<f64> = (1..=299).map(|i| 700.0 * (10f64.powf(top * i as f64 / 300.0 / 2595.0) - 1.0)).collect();
    let want = (0..299).min_by(|&a, &b| (centres[a] - 440.0).abs().total_cmp(&(centres[b] - 440.0).abs())).unwrap();
    assert!((mel_to_hz(hz_to_mel(440.0)) - 440.0).abs() < 1e-9);
    let energies = mel_energies(&sine(&[440.0], 2.0), &config).unwrap();
    let argmax_ok = energies.iter().all(|f| (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap() == want);
    let mut triads_ok = 0;
    for root in 0..12 {
        for major in [true, false] {
            let c = chroma(&sine(&triad_freqs(root, major), 1.0), &config).unwrap();
            let mut got: Vec<usize> = c.ranked_classes()[..3].to_vec();
            got.sort();
            let mut expect = vec![root % 12, (root + if major { 4 } else { 3 }) % 12, (root + 7) % 12];
            expect.sort();
            triads_ok += usize::from(got == expect);
        }
    }
    outcome(
        frames == 515 && argmax_ok && triads_ok == 24,
        format!("frames {frames}; 440 Hz argmax band {want} in every frame: {argmax_ok}; triad chroma {triads_ok}/24"),
    )
}

fn criterion_6() -> Outcome {
    let config = FeatureConfig::default();
    let mut correct = 0;
    for root in 0..12 {
        for major in [true, false] {
            let s = keyprofile_majorness(&chroma(&sine(&triad_freqs(root, major), 1.0), &config).unwrap()).unwrap();
            correct += usize::from((s > 0.5) == major);
        }
    }
    outcome(correct == 24, format!("{correct}/24 triads on the right side of 0.5"))
}

fn criterion_7() -> Outcome {
    let arch = ArchConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mel = random_mel(&mut rng, "g", 50, arch.n_mels, -8.0, 0.0);
    let params = init_model(&arch, 3, Some(5.0)).unwrap();
    let err = grad_check(&params, &mel, 7.0, 1e-5).unwrap();

    let data: Vec<_> = (0..8).map(|i| (random_mel(&mut rng, &format!("o{i}"), 64, arch.n_mels, -8.0, 0.0), 1.0 + 9.0 * i as f64 / 7.0)).collect();
    let mean = data.iter().map(|(_, t)| t).sum::<f64>() / 8.0;
    let config = TrainConfig { learning_rate: 1e-2, batch_size: 8, epochs: 500, seed: 1, ..TrainConfig::default() };
    let fit = train(init_model(&arch, 4, Some(mean)).unwrap(), &data, &config).unwrap();
    let mse = data.iter().map(|(m, t)| (forward(&fit.params, m).unwrap() - t).powi(2)).sum::<f64>() / 8.0;

    let lengths_ok = [50, 500].iter().all(|&n| forward(&params, &random_mel(&mut rng, "v", n, arch.n_mels, -8.0, 0.0)).is_ok_and(f64::is_finite));
    let det = init_model(&arch, 9, None).unwrap() == init_model(&arch, 9, None).unwrap() && init_model(&arch, 9, None).unwrap() != init_model(&arch, 10, None).unwrap();
    outcome(
        err < 1e-3 && mse < 1e-2 && fit.steps <= 500 && lengths_ok && det,
        format!("grad check {err:.2e}; overfit MSE {mse:.2e} after {} steps; 50/500 frames ok: {lengths_ok}; deterministic init: {det}", fit.steps),
    )
}

fn criterion_8() -> Outcome {
    let corpus = gen_mode_corpus(48, 48, 81, 12.0).unwrap();
    let items: Vec<(String, AudioBuffer, bool)> = corpus.iter().map(|e| (e.item_id.clone(), e.plan.render(), e.major)).collect();
    let config = ModeExperimentConfig { clip_seconds: 12.0, folds: 10, seed: 82 };
    let report = mode_experiment_buffers(&items, &keyprofile_scorer, &config).unwrap();
    let acc = report.cv_accuracy.unwrap();
    let by_id: HashMap<&str, f64> = report.per_item.iter().map(|o| (o.item_id.as_str(), o.feature)).collect();
    let scores: Vec<f64> = items.iter().map(|(id, _, _)| by_id[id.as_str()]).collect();
    let mut labels: Vec<bool> = items.iter().map(|i| i.2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let shuffles = 40;
    let mut total = 0.0;
    for s in 0..shuffles {
        labels.shuffle(&mut rng);
        total += logistic_cv(&scores, &labels, 10, 84 + s).unwrap().cv_accuracy.unwrap();
    }
    let shuffled = total / shuffles as f64;
    outcome(acc >= 0.70 && (shuffled - 0.5).abs() <= 0.05, format!("accuracy {acc:.4}; shuffled-label mean over {shuffles} shuffles {shuffled:.4}"))
}

fn criterion_9(dir: &Path) -> Outcome {
    let config = StudyConfig { seed: 0, ..StudyConfig::default() };
    pipeline::simulate(dir, &config).unwrap();
    let start = Instant::now();
    let summary = pipeline::all(dir, &config).unwrap();
    let elapsed = start.elapsed();
    let r = summary.pearson_r.unwrap_or(f64::NAN);
    outcome(
        r >= 0.48 && summary.pearson_reference == "latent" && elapsed < Duration::from_secs(600),
        format!(
            "held-out r vs latent {r:.4} on {} items; cv_accuracy {:?}; `all` took {:.0} s",
            summary.test_items,
            summary.cv_accuracy,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_10(dir: &Path) -> Outcome {
    let ids: Vec<String> = (0..20).map(|i| format!("x{i:02}")).collect();
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("ranking_items.txt"), ids.join("\n")).unwrap();
    let config = StudyConfig::default();
    let study = Arc::new(Study::open(dir, &config, Arc::new(SystemClock)).unwrap());
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
    let (submitted, duplicates_acked) = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let app = majorness_service::server::router(study.clone(), None);
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        let client = reqwest::Client::new();
        let mut handles = Vec::new();
        for r in 0..50 {
            let client = client.clone();
            handles.push(tokio::spawn(async move {
                let (mut done, mut dup) = (0, 0);
                let rater = format!("rater{r:02}");
                loop {
                    let url = format!("http://{addr}/api/task?rater={rater}&kind=pair");
                    let task: TaskResponse = client.get(&url).send().await.unwrap().json().await.unwrap();
                    let TaskResponse::Assigned(task) = task else { break };
                    let body = serde_json::json!({ "task_id": task.task_id, "choice": if r % 2 == 0 { "left_more_major" } else { "right_more_major" } });
                    let post = || client.post(format!("http://{addr}/api/annotation")).json(&body).send();
                    let first: serde_json::Value = post().await.unwrap().json().await.unwrap();
                    if done % 3 == 0 {
                        let again: serde_json::Value = post().await.unwrap().json().await.unwrap();
                        dup += usize::from(again == first);
                    }
                    done += 1;
                }
                (done, dup)
            }));
        }
        let mut totals = (0, 0);
        for h in handles {
            let (d, u) = h.await.unwrap();
            totals.0 += d;
            totals.1 += u;
        }
        totals
    });
    let log = std::fs::read_to_string(dir.join("comparisons.jsonl")).unwrap();
    let records: Vec<ComparisonRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut per_pair: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut seen = HashSet::new();
    let mut task_ids = HashSet::new();
    let mut duplicates = 0;
    for rec in &records {
        let key = if rec.left < rec.right { (rec.left.clone(), rec.right.clone()) } else { (rec.right.clone(), rec.left.clone()) };
        *per_pair.entry(key.clone()).or_default() += 1;
        duplicates += usize::from(!seen.insert((rec.rater.clone(), key)));
        duplicates += usize::from(!task_ids.insert(rec.task_id.clone().unwrap()));
    }
    let all_five = per_pair.len() == 190 && per_pair.values().all(|&c| c == 5);
    let replayed = Study::open(dir, &config, Arc::new(SystemClock)).unwrap().snapshot();
    let replay_ok = replayed == study.snapshot();
    outcome(
        all_five && duplicates == 0 && replay_ok && submitted == 950 && records.len() == 950,
        format!(
            "{} records over {} pairs, all at 5: {all_five}; duplicates {duplicates}; resubmissions answered with the original ack {duplicates_acked}; replay matches: {replay_ok}",
            records.len(),
            per_pair.len()
        ),
    )
}

fn main() {
    let only: Option<HashSet<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let scratch = tempfile::tempdir().unwrap();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "Bradley-Terry oracle equivalence", Box::new(criterion_1)),
        (2, "ranking recovery", Box::new(criterion_2)),
        (3, "reliability oracles", Box::new(criterion_3)),
        (4, "rater filtering", Box::new(criterion_4)),
        (5, "DSP", Box::new(criterion_5)),
        (6, "baseline separation", Box::new(criterion_6)),
        (7, "model verification", Box::new(criterion_7)),
        (8, "mode experiment", Box::new(criterion_8)),
        (9, "end-to-end pipeline", Box::new(|| criterion_9(&scratch.path().join("e2e")))),
        (10, "service contract", Box::new(|| criterion_10(&scratch.path().join("service")))),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!result.pass);
        println!(
            "{} {n:>2} {name}: {} ({:.1} s)",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
