//! Evaluation metrics and feature-geometry diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{pgd, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Network;
use crate::tensor::{argmax, dot, Tensor};

/// Added to the within-class scatter before dividing.
pub const FISHER_GUARD: f64 = 1e-12;
pub const SPECTRAL_TOLERANCE: f64 = 1e-10;
pub const SPECTRAL_MAX_ITERATIONS: usize = 10_000;
const START_SEED: u64 = 0x5eed_5eed;
const EVAL_CHUNK: usize = 256;

/// Fraction of rows whose argmax logit matches the label.
pub fn accuracy_of(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = logits.dims2("accuracy_of")?;
    if n != labels.len() {
        return Err(Error::Dimension {
            op: "accuracy_of",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let hits = (0..n).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
    Ok(hits as f64 / n as f64)
}

pub fn clean_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    robust_accuracy(net, data, &AttackSpec::pgd(0.0, 0.0, 0))
}

/// Attacked inputs for the whole dataset, generated in fixed-size chunks.
pub fn attack_dataset(net: &Network, data: &Dataset, attack: &AttackSpec) -> Result<Tensor> {
    attack.validate()?;
    let mut out = Vec::with_capacity(data.inputs.numel());
    for (c, start) in (0..data.len()).step_by(EVAL_CHUNK).enumerate() {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let x = data.inputs.select_rows(&idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut spec = attack.clone();
        spec.seed = attack.seed.wrapping_add(c as u64);
        out.extend(pgd(net, &x, &labels, &spec)?.into_data());
    }
    Tensor::new(data.inputs.shape().to_vec(), out)
}

/// Accuracy after attacking every sample with `attack`.
pub fn robust_accuracy(net: &Network, data: &Dataset, attack: &AttackSpec) -> Result<f64> {
    let adv = attack_dataset(net, data, attack)?;
    let (_, logits) = net.forward_values(&adv)?;
    accuracy_of(&logits, &data.labels)
}

fn check_labelled(features: &Tensor, labels: &[usize], op: &'static str) -> Result<(usize, usize)> {
    let (n, k) = features.dims2(op)?;
    if n != labels.len() {
        return Err(Error::Dimension {
            op,
            left: features.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if n < 2 {
        return Err(Error::UndefinedMetric(format!("{op}: need at least 2 samples, got {n}")));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::UndefinedMetric(format!("{op}: only one class present")));
    }
    Ok((n, k))
}

fn class_groups(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

fn mean_row(features: &Tensor, rows: &[usize], k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k];
    for &i in rows {
        for (a, b) in m.iter_mut().zip(features.row(i)) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Between-class over within-class scatter, both as traces. Returns `+∞`
/// when the within-class scatter is exactly zero and the between-class
/// scatter is not.
pub fn fisher_ratio(features: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = check_labelled(features, labels, "fisher_ratio")?;
    let all: Vec<usize> = (0..n).collect();
    let global = mean_row(features, &all, k);
    let (mut between, mut within) = (0.0, 0.0);
    for rows in class_groups(labels).values() {
        let mu = mean_row(features, rows, k);
        between += rows.len() as f64 * sq_dist(&mu, &global);
        within += rows.iter().map(|&i| sq_dist(features.row(i), &mu)).sum::<f64>();
    }
    if within == 0.0 {
        return Ok(if between > 0.0 { f64::INFINITY } else { 0.0 });
    }
    Ok(between / (within + FISHER_GUARD))
}

/// Mean silhouette coefficient with Euclidean distance. Points alone in
/// their class score 0.
pub fn silhouette(features: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_labelled(features, labels, "silhouette")?;
    let groups = class_groups(labels);
    let mut total = 0.0;
    for i in 0..n {
        let own = &groups[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let mean_to = |rows: &[usize]| -> f64 {
            rows.iter()
                .filter(|&&j| j != i)
                .map(|&j| sq_dist(features.row(i), features.row(j)).sqrt())
                .sum::<f64>()
        };
        let a = mean_to(own) / (own.len() - 1) as f64;
        let b = groups
            .iter()
            .filter(|(&c, _)| c != labels[i])
            .map(|(_, rows)| mean_to(rows) / rows.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

fn gram(w: &Tensor) -> Result<(usize, Vec<f64>)> {
    let (r, c) = w.dims2("gram")?;
    let d = w.data();
    let mut g = vec![0.0; c * c];
    for i in 0..r {
        let row = &d[i * c..(i + 1) * c];
        for a in 0..c {
            for b in 0..c {
                g[a * c + b] += row[a] * row[b];
            }
        }
    }
    Ok((c, g))
}

fn sym_matvec(m: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn seeded_unit(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    v
}

/// Largest singular value by power iteration on `WᵀW`, stopping when the
/// Rayleigh quotient changes by less than 1e-10 relative.
pub fn spectral_norm(w: &Tensor) -> Result<f64> {
    if !w.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Contract("spectral_norm of a zero matrix".into()));
    }
    let (n, g) = gram(w)?;
    let mut v = seeded_unit(n, START_SEED);
    let mut mu = 0.0f64;
    for _ in 0..SPECTRAL_MAX_ITERATIONS {
        let mut gv = sym_matvec(&g, n, &v);
        let next = dot(&v, &gv);
        if normalize(&mut gv) == 0.0 {
            // start vector fell into the null space; restart elsewhere
            gv = seeded_unit(n, START_SEED + 1);
        }
        v = gv;
        if (next - mu).abs() <= SPECTRAL_TOLERANCE * next.abs() {
            return Ok(next.max(0.0).sqrt());
        }
        mu = next;
    }
    Err(Error::NoConvergence {
        iterations: SPECTRAL_MAX_ITERATIONS,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    /// `[n, dims]` coordinates of the centred data.
    pub projected: Tensor,
    /// Unit principal directions, one per output dimension.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Each eigenvalue over the total variance.
    pub explained_variance_ratio: Vec<f64>,
}

const PCA_MAX_ITERATIONS: usize = 200_000;

/// Top eigenpair of a symmetric PSD matrix; stops on a small residual so
/// repeated eigenvalues do not stall it.
fn top_eigenpair(m: &[f64], n: usize, scale: f64, seed: u64) -> Result<(f64, Vec<f64>)> {
    let mut v = seeded_unit(n, seed);
    for _ in 0..PCA_MAX_ITERATIONS {
        let mv = sym_matvec(m, n, &v);
        let mu = dot(&v, &mv);
        let residual = mv.iter().zip(&v).map(|(a, b)| (a - mu * b).powi(2)).sum::<f64>().sqrt();
        if residual <= 1e-13 * scale {
            return Ok((mu, v));
        }
        let mut next = mv;
        if normalize(&mut next) == 0.0 {
            return Ok((0.0, v));
        }
        v = next;
    }
    Err(Error::NoConvergence {
        iterations: PCA_MAX_ITERATIONS,
    })
}

/// Projects centred rows onto the top `dims` covariance eigenvectors. Each
/// direction's first nonzero entry is made positive.
pub fn pca_project(features: &Tensor, dims: usize) -> Result<PcaProjection> {
    let (n, k) = features.dims2("pca_project")?;
    if n < 2 {
        return Err(Error::Contract(format!("pca_project needs at least 2 rows, got {n}")));
    }
    if dims == 0 || dims > k {
        return Err(Error::Contract(format!("pca_project: dims {dims} must lie in 1..={k}")));
    }
    let all: Vec<usize> = (0..n).collect();
    let mean = mean_row(features, &all, k);
    let centred: Vec<f64> = (0..n)
        .flat_map(|i| features.row(i).iter().zip(&mean).map(|(a, b)| a - b).collect::<Vec<_>>())
        .collect();
    let (_, mut cov) = gram(&Tensor::new(vec![n, k], centred.clone())?)?;
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    let total: f64 = (0..k).map(|i| cov[i * k + i]).sum();
    if total <= 0.0 {
        return Err(Error::UndefinedMetric("pca_project: data has zero variance".into()));
    }

    let mut components = Vec::with_capacity(dims);
    let mut eigenvalues = Vec::with_capacity(dims);
    for d in 0..dims {
        let (lambda, mut v) = top_eigenpair(&cov, k, total, START_SEED + d as u64)?;
        if let Some(first) = v.iter().find(|x| **x != 0.0) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for a in 0..k {
            for b in 0..k {
                cov[a * k + b] -= lambda * v[a] * v[b];
            }
        }
        eigenvalues.push(lambda);
        components.push(v);
    }
    let mut projected = Vec::with_capacity(n * dims);
    for i in 0..n {
        let row = &centred[i * k..(i + 1) * k];
        projected.extend(components.iter().map(|c| dot(row, c)));
    }
    Ok(PcaProjection {
        projected: Tensor::new(vec![n, dims], projected)?,
        explained_variance_ratio: eigenvalues.iter().map(|e| e / total).collect(),
        components,
        eigenvalues,
    })
}

/// Writes `x,y,label` rows from the first two projected coordinates.
pub fn write_pca_csv<W: Write>(proj: &Tensor, labels: &[usize], mut w: W) -> Result<()> {
    let (n, d) = proj.dims2("write_pca_csv")?;
    if d < 2 || n != labels.len() {
        return Err(Error::Dimension {
            op: "write_pca_csv",
            left: proj.shape().to_vec(),
            right: vec![labels.len(), 2],
        });
    }
    writeln!(w, "x,y,label")?;
    for (i, l) in labels.iter().enumerate() {
        let r = proj.row(i);
        writeln!(w, "{},{},{}", r[0], r[1], l)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborProfile {
    /// Per sample, the share of its `k` nearest neighbors with another label.
    pub per_sample: Vec<f64>,
    pub aggregate: f64,
}

/// `k`-nearest-neighbor label disagreement; self is excluded, distance ties
/// go to the lower index.
pub fn interclass_neighbor_profile(features: &Tensor, labels: &[usize], k: usize) -> Result<NeighborProfile> {
    let (n, _) = features.dims2("interclass_neighbor_profile")?;
    if n != labels.len() {
        return Err(Error::Dimension {
            op: "interclass_neighbor_profile",
            left: features.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if k == 0 || k >= n {
        return Err(Error::Contract(format!("neighbor count k={k} must lie in 1..{n}")));
    }
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sq_dist(features.row(i), features.row(j)), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let differing = others[..k].iter().filter(|&&(_, j)| labels[j] != labels[i]).count();
        per_sample.push(differing as f64 / k as f64);
    }
    let aggregate = per_sample.iter().sum::<f64>() / n as f64;
    Ok(NeighborProfile { per_sample, aggregate })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub clean_accuracy: f64,
    pub robust_accuracy: BTreeMap<String, f64>,
    pub fisher_ratio: f64,
    pub silhouette: f64,
    pub last_layer_spectral_norm: f64,
    pub interclass_neighbor_fraction: f64,
}

fn json_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "\"nan\"".into()
    } else if v > 0.0 {
        "\"inf\"".into()
    } else {
        "\"-inf\"".into()
    }
}

impl MetricsReport {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.clean_accuracy) {
            v.push(format!("clean accuracy {} outside [0, 1]", self.clean_accuracy));
        }
        for (name, acc) in &self.robust_accuracy {
            if !unit(*acc) {
                v.push(format!("robust accuracy {name}={acc} outside [0, 1]"));
            }
        }
        if !(-1.0..=1.0).contains(&self.silhouette) {
            v.push(format!("silhouette {} outside [-1, 1]", self.silhouette));
        }
        if !unit(self.interclass_neighbor_fraction) {
            v.push(format!("neighbor fraction {} outside [0, 1]", self.interclass_neighbor_fraction));
        }
        v
    }

    /// One-level JSON object; robust accuracies are keyed `robust_accuracy.<attack>`.
    /// Non-finite values are written as the strings `"inf"`, `"-inf"`, `"nan"`.
    pub fn to_json(&self) -> String {
        self.to_json_with(&[])
    }

    /// [`Self::to_json`] with extra numeric fields appended.
    pub fn to_json_with(&self, extra: &[(String, f64)]) -> String {
        let mut fields = vec![("clean_accuracy".to_string(), self.clean_accuracy)];
        fields.extend(self.robust_accuracy.iter().map(|(k, v)| (format!("robust_accuracy.{k}"), *v)));
        fields.push(("fisher_ratio".into(), self.fisher_ratio));
        fields.push(("silhouette".into(), self.silhouette));
        fields.push(("last_layer_spectral_norm".into(), self.last_layer_spectral_norm));
        fields.push(("interclass_neighbor_fraction".into(), self.interclass_neighbor_fraction));
        fields.extend(extra.iter().cloned());
        let mut s = String::from("{\n");
        for (i, (k, v)) in fields.iter().enumerate() {
            let sep = if i + 1 == fields.len() { "" } else { "," };
            let _ = writeln!(s, "  \"{k}\": {}{sep}", json_number(*v));
        }
        s.push_str("}\n");
        s
    }
}
