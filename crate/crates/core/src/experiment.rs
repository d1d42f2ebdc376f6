//! Experiment orchestration: grid runs with on-disk artifacts, summary
//! tables, cross-summary comparison, and checkpoint re-evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{ExperimentConfig, GridPoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    attack_dataset, clean_accuracy, fisher_ratio, interclass_neighbor_profile, pca_project, robust_accuracy,
    silhouette, spectral_norm, write_pca_csv, MetricsReport,
};
use crate::models::Network;
use crate::train::{train_with_monitor, write_epoch_csv, EpochRecord, Method};

pub const SUMMARY_HEADER: &str = "run_id,method,lambda,beta,seed,clean_acc,fgsm_acc,pgd20_acc,fisher,silhouette,spectral_norm";
/// Numeric columns of the summary, in order.
pub const METRIC_COLUMNS: [&str; 6] = ["clean_acc", "fgsm_acc", "pgd20_acc", "fisher", "silhouette", "spectral_norm"];
pub const FAILED: &str = "failed";

/// Fixed six-decimal rendering; non-finite values become `inf`, `-inf`, `nan`.
pub fn fmt6(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.6}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub epochs: Vec<EpochRecord>,
    pub network: Network,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub run_id: String,
    pub method: Method,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    /// `Err` carries the failure message.
    pub metrics: std::result::Result<[f64; 6], String>,
}

impl SummaryRow {
    pub fn to_csv(&self) -> String {
        let metrics = match &self.metrics {
            Ok(m) => m.iter().map(|v| fmt6(*v)).collect::<Vec<_>>().join(","),
            Err(_) => [FAILED; 6].join(","),
        };
        format!(
            "{},{},{},{},{},{}",
            self.run_id,
            self.method.name(),
            fmt6(self.lambda),
            fmt6(self.beta),
            self.seed,
            metrics
        )
    }
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Replaces the seed axis with this single seed.
    pub seed_override: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub jobs: usize,
    /// Print one progress line per finished run to stderr.
    pub verbose: bool,
}

/// Evaluates `net` on `test`: clean and attacked accuracy, then separability
/// diagnostics on penultimate features of the attacked inputs. With
/// `artifacts`, also writes PCA and neighbor dumps into that directory.
pub fn evaluate(net: &Network, test: &Dataset, cfg: &ExperimentConfig, artifacts: Option<&Path>) -> Result<MetricsReport> {
    let clean = clean_accuracy(net, test)?;
    let feature_attack = cfg.feature_attack();
    let mut robust = BTreeMap::new();
    let mut attacked = None;
    for named in cfg.eval_attacks() {
        let adv = attack_dataset(net, test, &named.attack)?;
        let (_, logits) = net.forward_values(&adv)?;
        robust.insert(named.name.clone(), crate::metrics::accuracy_of(&logits, &test.labels)?);
        if feature_attack.as_ref().is_some_and(|f| f.name == named.name) {
            attacked = Some(adv);
        }
    }
    let adv = attacked.unwrap_or_else(|| test.inputs.clone());
    let (clean_feats, _) = net.forward_values(&test.inputs)?;
    let (adv_feats, _) = net.forward_values(&adv)?;
    let k = cfg.analysis.neighbor_k.min(test.len().saturating_sub(1)).max(1);
    let adv_profile = interclass_neighbor_profile(&adv_feats, &test.labels, k)?;

    let report = MetricsReport {
        clean_accuracy: clean,
        robust_accuracy: robust,
        fisher_ratio: fisher_ratio(&adv_feats, &test.labels)?,
        silhouette: silhouette(&adv_feats, &test.labels)?,
        last_layer_spectral_norm: spectral_norm(net.last_layer_weights())?,
        interclass_neighbor_fraction: adv_profile.aggregate,
    };

    if let Some(dir) = artifacts {
        for (name, feats) in [("pca_clean.csv", &clean_feats), ("pca_adv.csv", &adv_feats)] {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            match pca_project(feats, 2.min(feats.row_len())) {
                Ok(p) if p.projected.row_len() == 2 => write_pca_csv(&p.projected, &test.labels, &mut w)?,
                // degenerate features: header only
                _ => writeln!(w, "x,y,label")?,
            }
            w.flush()?;
        }
        let clean_profile = interclass_neighbor_profile(&clean_feats, &test.labels, k)?;
        let mut w = BufWriter::new(File::create(dir.join("neighbors.csv"))?);
        writeln!(w, "index,label,clean_fraction,adv_fraction")?;
        for (i, l) in test.labels.iter().enumerate() {
            writeln!(w, "{i},{l},{},{}", clean_profile.per_sample[i], adv_profile.per_sample[i])?;
        }
        w.flush()?;
    }
    Ok(report)
}

fn best_epoch(epochs: &[EpochRecord]) -> Option<(usize, f64)> {
    epochs
        .iter()
        .filter_map(|e| e.robust_accuracy.map(|r| (e.epoch, r)))
        .fold(None, |best, (e, r)| match best {
            Some((_, b)) if b >= r => best,
            _ => Some((e, r)),
        })
}

/// Trains and evaluates one grid point, writing its artifacts into `dir`.
pub fn run_point(cfg: &ExperimentConfig, point: &GridPoint, train: &Dataset, test: &Dataset, dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(dir)?;
    let mut snapshot = cfg.clone();
    snapshot.train = cfg.train_spec_for(point);
    snapshot.network.seed = point.seed;
    snapshot.ablation = Default::default();
    fs::write(dir.join("config.snapshot"), snapshot.to_toml()?)?;

    let spec = cfg.train_spec_for(point);
    let net = Network::init(cfg.network.spec_for(train, point.seed))?;
    let monitor_set = match &cfg.monitor {
        Some(m) => {
            let attack = cfg
                .eval_attacks()
                .into_iter()
                .find(|a| a.name == m.attack)
                .ok_or_else(|| Error::Config(vec![format!("unknown monitor attack {}", m.attack)]))?;
            Some((test.take(m.samples.min(test.len()))?, attack.attack))
        }
        None => None,
    };
    let outcome = train_with_monitor(net, train, &spec, |_, net| match &monitor_set {
        Some((subset, attack)) => robust_accuracy(net, subset, attack).map(Some),
        None => Ok(None),
    })?;
    write_epoch_csv(&outcome.epochs, BufWriter::new(File::create(dir.join("epochs.csv"))?))?;
    outcome.network.save(&dir.join("model.ckpt"))?;

    let report = evaluate(&outcome.network, test, cfg, Some(dir))?;
    let mut extra = Vec::new();
    if let Some((epoch, acc)) = best_epoch(&outcome.epochs) {
        extra.push(("best_epoch".to_string(), epoch as f64));
        extra.push(("best_epoch_robust_accuracy".to_string(), acc));
    }
    fs::write(dir.join("metrics.json"), report.to_json_with(&extra))?;
    Ok(RunOutcome {
        report,
        epochs: outcome.epochs,
        network: outcome.network,
    })
}

fn summary_row(point: &GridPoint, result: &Result<RunOutcome>) -> SummaryRow {
    let metrics = match result {
        Ok(out) => {
            let r = &out.report;
            let acc = |name: &str| r.robust_accuracy.get(name).copied().unwrap_or(f64::NAN);
            Ok([
                r.clean_accuracy,
                acc("fgsm"),
                acc("pgd20"),
                r.fisher_ratio,
                r.silhouette,
                r.last_layer_spectral_norm,
            ])
        }
        Err(e) => Err(e.to_string()),
    };
    SummaryRow {
        run_id: point.run_id(),
        method: point.method,
        lambda: point.lambda,
        beta: point.beta,
        seed: point.seed,
        metrics,
    }
}

/// Runs every grid point (up to `opts.jobs` at once) and writes
/// `<out>/summary.csv` in grid order. Failed runs keep their row, marked
/// failed, and leave an `error.txt` in their directory. The output directory
/// is only created once the config and dataset have been accepted.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<SummaryRow>> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed_override {
        cfg.ablation.seeds = vec![seed];
    }
    if let Some(out) = &opts.output_dir {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    let (train, test) = cfg.dataset.load()?;
    let out = cfg.output_dir.clone();
    let grid = cfg.grid();
    fs::create_dir_all(&out)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SummaryRow>>> = Mutex::new(vec![None; grid.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(point) = grid.get(i) else { break };
        let dir = out.join(point.run_id());
        let result = run_point(&cfg, point, &train, &test, &dir);
        if let Err(e) = &result {
            let _ = fs::create_dir_all(&dir).and_then(|_| fs::write(dir.join("error.txt"), format!("{e}\n")));
        }
        let row = summary_row(point, &result);
        if opts.verbose {
            eprintln!("{}", row.to_csv());
        }
        results.lock().expect("collector poisoned")[i] = Some(row);
    };
    let jobs = opts.jobs.clamp(1, grid.len().max(1));
    std::thread::scope(|s| {
        for _ in 1..jobs {
            s.spawn(worker);
        }
        worker();
    });
    let rows: Vec<SummaryRow> = results
        .into_inner()
        .expect("collector poisoned")
        .into_iter()
        .map(|r| r.expect("every grid point produces a row"))
        .collect();
    write_summary(&rows, &out.join("summary.csv"))?;
    Ok(rows)
}

/// Re-evaluates a checkpoint on the config's test split.
pub fn eval_checkpoint(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let net = Network::load(checkpoint)?;
    let (_, test) = cfg.dataset.load()?;
    if net.spec().input_len() != test.input_len() || net.num_classes() < test.num_classes {
        return Err(Error::Contract(format!(
            "checkpoint expects {} inputs and {} classes, dataset has {} and {}",
            net.spec().input_len(),
            net.num_classes(),
            test.input_len(),
            test.num_classes
        )));
    }
    evaluate(&net, &test, cfg, None)
}

/// Parsed summary row: identity columns plus metrics (`None` when failed).
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRow {
    pub run_id: String,
    pub method: String,
    pub lambda: String,
    pub beta: String,
    pub seed: String,
    pub metrics: Option<[f64; 6]>,
}

fn parse_metric(s: &str, path: &Path) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        "nan" => Ok(f64::NAN),
        _ => s
            .parse()
            .map_err(|_| Error::Schema(format!("{}: bad numeric field {s:?}", path.display()))),
    }
}

pub fn read_summary(path: &Path) -> Result<Vec<ParsedRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != SUMMARY_HEADER {
        return Err(Error::Schema(format!(
            "{}: header {header:?} does not match {SUMMARY_HEADER:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Schema(format!(
                "{} line {}: {} fields, expected 11",
                path.display(),
                n + 2,
                f.len()
            )));
        }
        let metrics = if f[5..].iter().all(|v| *v == FAILED) {
            None
        } else {
            let mut m = [0.0; 6];
            for (slot, s) in m.iter_mut().zip(&f[5..]) {
                *slot = parse_metric(s, path)?;
            }
            Some(m)
        };
        rows.push(ParsedRow {
            run_id: f[0].into(),
            method: f[1].into(),
            lambda: f[2].into(),
            beta: f[3].into(),
            seed: f[4].into(),
            metrics,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonGroup {
    pub method: String,
    pub lambda: String,
    pub beta: String,
    /// Completed runs in the group.
    pub runs: usize,
    pub failed: usize,
    pub mean: [f64; 6],
    /// Sample standard deviation (`n − 1`); 0 for a single run.
    pub std: [f64; 6],
}

/// Method, λ and β as written in the summary.
type GroupKey = (String, String, String);

/// Groups rows by method and projection settings, ordered by method name.
pub fn compare(paths: &[PathBuf]) -> Result<Vec<ComparisonGroup>> {
    if paths.is_empty() {
        return Err(Error::Contract("compare needs at least one summary".into()));
    }
    let mut groups: BTreeMap<GroupKey, (Vec<[f64; 6]>, usize)> = BTreeMap::new();
    for p in paths {
        for row in read_summary(p)? {
            let entry = groups.entry((row.method, row.lambda, row.beta)).or_default();
            match row.metrics {
                Some(m) => entry.0.push(m),
                None => entry.1 += 1,
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|((method, lambda, beta), (rows, failed))| {
            let n = rows.len();
            let mut mean = [f64::NAN; 6];
            let mut std = [f64::NAN; 6];
            for c in 0..6 {
                if n == 0 {
                    continue;
                }
                let m = rows.iter().map(|r| r[c]).sum::<f64>() / n as f64;
                mean[c] = m;
                std[c] = if n == 1 {
                    0.0
                } else {
                    (rows.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                };
            }
            ComparisonGroup {
                method,
                lambda,
                beta,
                runs: n,
                failed,
                mean,
                std,
            }
        })
        .collect())
}

pub fn comparison_csv(groups: &[ComparisonGroup]) -> String {
    let mut s = String::from("method,lambda,beta,runs,failed");
    for c in METRIC_COLUMNS {
        let _ = write!(s, ",{c}_mean,{c}_std");
    }
    s.push('\n');
    for g in groups {
        let _ = write!(s, "{},{},{},{},{}", g.method, g.lambda, g.beta, g.runs, g.failed);
        for c in 0..6 {
            let _ = write!(s, ",{},{}", fmt6(g.mean[c]), fmt6(g.std[c]));
        }
        s.push('\n');
    }
    s
}

/// Fixed-width table with `mean±std` cells.
pub fn comparison_table(groups: &[ComparisonGroup]) -> String {
    let mut header = vec!["method".to_string(), "lambda".into(), "beta".into(), "runs".into()];
    header.extend(METRIC_COLUMNS.iter().map(|c| c.to_string()));
    let mut rows = vec![header];
    for g in groups {
        let mut r = vec![g.method.clone(), g.lambda.clone(), g.beta.clone(), format!("{}/{}", g.runs, g.runs + g.failed)];
        r.extend((0..6).map(|c| format!("{}±{}", fmt6(g.mean[c]), fmt6(g.std[c]))));
        rows.push(r);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}", w = *w))
            .collect();
        s.push_str(cells.join("  ").trim_end());
        s.push('\n');
    }
    s
}
