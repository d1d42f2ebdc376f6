//! Helpers shared by the integration tests: finite differences, seeded
//! random data and brute-force reference implementations.
#![allow(dead_code, clippy::needless_range_loop)]

use nnprat::models::Network;
use nnprat::projection::{
    adversarial_neighbors, nnprat_loss, nnprat_loss_with_neighbors, projection_removal, NeighborAssignment, NormExponent,
    ProjectionSpec,
};
use nnprat::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` in every coordinate of `x`.
pub fn numeric_gradient(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Worst relative error between the tape gradient of `build` and central
/// differences, over every input tensor.
pub fn check_op(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad_tensor(*v);
        let numeric = numeric_gradient(&inputs[k], |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| t.constant(if j == k { probe.clone() } else { x.clone() }))
                .collect();
            let o = build(&mut t, &vs);
            t.value(o).item()
        });
        for (a, n) in analytic.data().iter().zip(&numeric) {
            worst = worst.max(rel_error(*a, *n));
        }
    }
    worst
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    for _ in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// `WᵀW` as nested rows.
pub fn gram_rows(w: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    (0..c)
        .map(|a| (0..c).map(|b| (0..r).map(|i| w.data()[i * c + a] * w.data()[i * c + b]).sum()).collect())
        .collect()
}

/// Sample covariance (divisor `n − 1`) of the rows of `x`.
pub fn covariance_rows(x: &Tensor) -> Vec<Vec<f64>> {
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let mean: Vec<f64> = (0..k).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
    (0..k)
        .map(|a| {
            (0..k)
                .map(|b| (0..n).map(|i| (x.row(i)[a] - mean[a]) * (x.row(i)[b] - mean[b])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn random_labels(r: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    // every class present
    (0..n).map(|i| if i < classes { i } else { r.random_range(0..classes) }).collect()
}

/// Full scatter matrices by double loops, then traces.
pub fn fisher_reference(f: &Tensor, labels: &[usize]) -> f64 {
    let (n, k) = (f.shape()[0], f.shape()[1]);
    let classes: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort();
        c.dedup();
        c
    };
    let mean = |rows: &[usize]| -> Vec<f64> {
        (0..k).map(|d| rows.iter().map(|&i| f.row(i)[d]).sum::<f64>() / rows.len() as f64).collect()
    };
    let all: Vec<usize> = (0..n).collect();
    let mu = mean(&all);
    let mut sb = vec![vec![0.0; k]; k];
    let mut sw = vec![vec![0.0; k]; k];
    for c in classes {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let mc = mean(&rows);
        for a in 0..k {
            for b in 0..k {
                sb[a][b] += rows.len() as f64 * (mc[a] - mu[a]) * (mc[b] - mu[b]);
                for &i in &rows {
                    sw[a][b] += (f.row(i)[a] - mc[a]) * (f.row(i)[b] - mc[b]);
                }
            }
        }
    }
    let tr = |m: &Vec<Vec<f64>>| (0..k).map(|i| m[i][i]).sum::<f64>();
    tr(&sb) / (tr(&sw) + 1e-12)
}

pub fn silhouette_reference(f: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for j in 0..n {
            if j != i {
                let e = sums.entry(labels[j]).or_default();
                e.0 += distance(f.row(i), f.row(j));
                e.1 += 1;
            }
        }
        let Some(&(own_sum, own_n)) = sums.get(&labels[i]) else { continue };
        let a = own_sum / own_n as f64;
        let b = sums
            .iter()
            .filter(|(c, _)| **c != labels[i])
            .map(|(_, (s, m))| s / *m as f64)
            .fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

pub fn profile_reference(f: &Tensor, labels: &[usize], k: usize) -> Vec<f64> {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| {
                let da: f64 = f.row(i).iter().zip(f.row(a)).map(|(x, y)| (x - y) * (x - y)).sum();
                let db: f64 = f.row(i).iter().zip(f.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            });
            order[..k].iter().filter(|&&j| labels[j] != labels[i]).count() as f64 / k as f64
        })
        .collect()
}

/// Loss value for finite differences. A detached neighbor is held at its
/// unperturbed assignment and feature values, matching what the analytic
/// gradient differentiates.
pub fn loss_value(net: &Network, x: &Tensor, xa: &Tensor, labels: &[usize], spec: &ProjectionSpec, frozen: &Frozen) -> f64 {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let av = tape.constant(xa.clone());
    let loss = match frozen {
        Some((assignment, feats)) => {
            nnprat_loss_with_neighbors(&mut tape, net, &params, xv, av, labels, assignment, feats, spec).unwrap()
        }
        None => nnprat_loss(&mut tape, net, &params, xv, av, labels, spec).unwrap(),
    };
    tape.value(loss).item()
}

pub type Frozen = Option<(NeighborAssignment, Tensor)>;

pub fn check_network_loss(net: &Network, x: &Tensor, xa: &Tensor, labels: &[usize], spec: &ProjectionSpec) -> f64 {
    let frozen: Frozen = spec
        .detach_neighbor
        .then(|| adversarial_neighbors(net, xa, labels, spec).unwrap());
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, true);
    let xv = tape.param(x.clone());
    let av = tape.param(xa.clone());
    let loss = nnprat_loss(&mut tape, net, &params, xv, av, labels, spec).unwrap();
    tape.backward(loss).unwrap();
    let grads = params.grads(&tape);
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let mut probe_net = net.clone();
        let numeric = numeric_gradient(&net.params()[k], |p| {
            probe_net.params_mut()[k] = p.clone();
            loss_value(&probe_net, x, xa, labels, spec, &frozen)
        });
        for (a, n) in g.data().iter().zip(&numeric) {
            worst = worst.max(rel_error(*a, *n));
        }
    }
    for (which, input) in [(xv, x), (av, xa)] {
        let analytic = tape.grad_tensor(which);
        let numeric = numeric_gradient(input, |p| {
            if which == xv {
                loss_value(net, p, xa, labels, spec, &frozen)
            } else {
                loss_value(net, x, p, labels, spec, &frozen)
            }
        });
        for (a, n) in analytic.data().iter().zip(&numeric) {
            worst = worst.max(rel_error(*a, *n));
        }
    }
    worst
}

/// Corrects a single row on a tape, with `z*` as that row's neighbor.
pub fn correct_on_tape(z: &[f64], z_star: &[f64], lambda: f64, exp: NormExponent) -> Vec<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::from_rows(&[z.to_vec()]).unwrap());
    let nv = tape.constant(Tensor::from_rows(&[z_star.to_vec()]).unwrap());
    let assignment = NeighborAssignment {
        neighbor: vec![Some(0)],
        distance: vec![Some(distance(z, z_star))],
    };
    let spec = ProjectionSpec {
        lambda,
        norm_exponent: exp,
        ..ProjectionSpec::default()
    };
    let out = projection_removal(&mut tape, zv, &assignment, nv, &spec).unwrap();
    tape.value(out).data().to_vec()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
