//! Nearest inter-class neighbor search and projection removal.
//!
//! For a feature row `z` with inter-class neighbor `z*`, the corrected row is
//!
//! ```text
//! z̃ = z − λ · (⟨z, z*⟩ / ‖z‖^p) · z  =  s · z,   s = 1 − λ⟨z, z*⟩ / ‖z‖^p
//! ```
//!
//! with `p = 2` ([`NormExponent::Squared`]) or `p = 1` ([`NormExponent::Unsquared`]).
//! The joint objective applies the same neighbor assignment, computed on the
//! adversarial batch, to both adversarial and clean features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{BoundParams, Network};
use crate::tensor::{dot, euclidean, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureStage {
    #[default]
    Logits,
    Penultimate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormExponent {
    /// Divide by `‖z‖²`.
    #[default]
    Squared,
    /// Divide by `‖z‖₂`.
    Unsquared,
}

impl NormExponent {
    pub fn power(self) -> i32 {
        match self {
            NormExponent::Squared => 2,
            NormExponent::Unsquared => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborSource {
    #[default]
    AdversarialFeatures,
}

fn default_lambda() -> f64 {
    0.001
}

fn default_beta() -> f64 {
    6.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub stage: FeatureStage,
    #[serde(default)]
    pub norm_exponent: NormExponent,
    #[serde(default)]
    pub neighbor_source: NeighborSource,
    /// Treat `z*` as a constant when differentiating.
    #[serde(default = "default_true")]
    pub detach_neighbor: bool,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            beta: default_beta(),
            stage: FeatureStage::default(),
            norm_exponent: NormExponent::default(),
            neighbor_source: NeighborSource::default(),
            detach_neighbor: true,
        }
    }
}

impl ProjectionSpec {
    pub fn with_lambda_beta(lambda: f64, beta: f64) -> Self {
        Self {
            lambda,
            beta,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            v.push(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            v.push(format!("beta {} must be finite and >= 0", self.beta));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborAssignment {
    /// Index of the nearest differently-labelled row, if any.
    pub neighbor: Vec<Option<usize>>,
    pub distance: Vec<Option<f64>>,
}

impl NeighborAssignment {
    pub fn len(&self) -> usize {
        self.neighbor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor.is_empty()
    }
}

/// Exhaustive search for each row's closest row with a different label.
/// Ties go to the lowest index.
pub fn nearest_interclass(features: &Tensor, labels: &[usize]) -> Result<NeighborAssignment> {
    let n = features.rows();
    if labels.len() != n || features.ndim() != 2 {
        return Err(Error::Dimension {
            op: "nearest_interclass",
            left: features.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut neighbor = vec![None; n];
    let mut distance = vec![None; n];
    for i in 0..n {
        let zi = features.row(i);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if labels[j] == labels[i] {
                continue;
            }
            let d = euclidean(zi, features.row(j));
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, d)) = best {
            neighbor[i] = Some(j);
            distance[i] = Some(d);
        }
    }
    Ok(NeighborAssignment { neighbor, distance })
}

/// `s = 1 − λ⟨z, z*⟩ / ‖z‖^p`; the corrected row equals `s · z`.
pub fn effective_scale_factor(z: &[f64], z_star: &[f64], lambda: f64, exponent: NormExponent) -> Result<f64> {
    let nsq = dot(z, z);
    if nsq == 0.0 {
        return Err(Error::DegenerateFeature { row: 0 });
    }
    let denom = match exponent {
        NormExponent::Squared => nsq,
        NormExponent::Unsquared => nsq.sqrt(),
    };
    Ok(1.0 - lambda * (dot(z, z_star) / denom))
}

/// Plain-value version of [`projection_removal`] for a single row.
pub fn remove_projection(z: &[f64], z_star: &[f64], lambda: f64, exponent: NormExponent) -> Result<Vec<f64>> {
    let s = effective_scale_factor(z, z_star, lambda, exponent)?;
    Ok(z.iter().map(|v| s * v).collect())
}

/// Applies projection removal to every row of `z` that has an assigned
/// neighbor; `neighbors` is the feature batch the assignment indexes into.
/// Unassigned rows pass through unchanged.
pub fn projection_removal(
    tape: &mut Tape,
    z: Var,
    assignment: &NeighborAssignment,
    neighbors: Var,
    spec: &ProjectionSpec,
) -> Result<Var> {
    let zv = tape.value(z);
    let (b, k) = zv.dims2("projection_removal")?;
    let nv = tape.value(neighbors);
    if assignment.len() != b || nv.ndim() != 2 || nv.shape()[1] != k {
        return Err(Error::Dimension {
            op: "projection_removal",
            left: zv.shape().to_vec(),
            right: nv.shape().to_vec(),
        });
    }
    for (row, nb) in assignment.neighbor.iter().enumerate() {
        if let Some(j) = *nb {
            if j >= nv.rows() {
                return Err(Error::Index {
                    op: "projection_removal",
                    index: j,
                    bound: nv.rows(),
                });
            }
            if zv.row(row).iter().all(|&x| x == 0.0) {
                return Err(Error::DegenerateFeature { row });
            }
        }
    }

    // unassigned rows get a zero neighbor (so ⟨z, z*⟩ = 0 and s = 1) and a
    // unit offset on the norm so the quotient stays finite
    let unassigned: Vec<f64> = assignment
        .neighbor
        .iter()
        .map(|n| if n.is_some() { 0.0 } else { 1.0 })
        .collect();
    let z_star = if spec.detach_neighbor {
        let mut rows = Vec::with_capacity(b * k);
        for nb in &assignment.neighbor {
            match *nb {
                Some(j) => rows.extend_from_slice(nv.row(j)),
                None => rows.extend(std::iter::repeat_n(0.0, k)),
            }
        }
        tape.constant(Tensor::new(vec![b, k], rows)?)
    } else {
        let idx: Vec<usize> = assignment
            .neighbor
            .iter()
            .enumerate()
            .map(|(i, n)| n.unwrap_or(i))
            .collect();
        let mask: Vec<f64> = unassigned.iter().flat_map(|&u| std::iter::repeat_n(1.0 - u, k)).collect();
        let gathered = tape.gather_rows(neighbors, &idx)?;
        let mask = tape.constant(Tensor::new(vec![b, k], mask)?);
        tape.mul(gathered, mask)?
    };

    let inner = tape.row_dot(z, z_star)?;
    let norm_sq = tape.row_norm_sq(z)?;
    let offset = tape.constant(Tensor::vector(unassigned));
    let norm_sq = tape.add(norm_sq, offset)?;
    let denom = match spec.norm_exponent {
        NormExponent::Squared => norm_sq,
        NormExponent::Unsquared => tape.sqrt(norm_sq)?,
    };
    let ratio = tape.div(inner, denom)?;
    let shrink = tape.scale(ratio, -spec.lambda)?;
    let factor = tape.add_scalar(shrink, 1.0)?;
    tape.row_scale(z, factor)
}

/// Joint loss `CE(z̃_adv, y) + β·CE(z̃, y)` built on `tape`.
///
/// Features are taken at `spec.stage`; for the penultimate stage the
/// corrected features go through the final layer before the loss. With
/// `β = 0` the clean branch is not evaluated at all.
pub fn nnprat_loss(
    tape: &mut Tape,
    net: &Network,
    params: &BoundParams,
    x: Var,
    x_adv: Var,
    labels: &[usize],
    spec: &ProjectionSpec,
) -> Result<Var> {
    joint_loss(tape, net, params, x, x_adv, labels, spec, None)
}

/// [`nnprat_loss`] with the neighbor assignment and neighbor feature rows
/// supplied and held constant. With a detached neighbor this is the function
/// whose gradient [`nnprat_loss`] computes.
#[allow(clippy::too_many_arguments)]
pub fn nnprat_loss_with_neighbors(
    tape: &mut Tape,
    net: &Network,
    params: &BoundParams,
    x: Var,
    x_adv: Var,
    labels: &[usize],
    assignment: &NeighborAssignment,
    neighbor_features: &Tensor,
    spec: &ProjectionSpec,
) -> Result<Var> {
    joint_loss(tape, net, params, x, x_adv, labels, spec, Some((assignment, neighbor_features)))
}

/// Stage features of `x_adv` and their nearest inter-class assignment.
pub fn adversarial_neighbors(
    net: &Network,
    x_adv: &Tensor,
    labels: &[usize],
    spec: &ProjectionSpec,
) -> Result<(NeighborAssignment, Tensor)> {
    let (penultimate, logits) = net.forward_values(x_adv)?;
    let feats = match spec.stage {
        FeatureStage::Logits => logits,
        FeatureStage::Penultimate => penultimate,
    };
    Ok((nearest_interclass(&feats, labels)?, feats))
}

#[allow(clippy::too_many_arguments)]
fn joint_loss(
    tape: &mut Tape,
    net: &Network,
    params: &BoundParams,
    x: Var,
    x_adv: Var,
    labels: &[usize],
    spec: &ProjectionSpec,
    frozen: Option<(&NeighborAssignment, &Tensor)>,
) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_adv) {
        return Err(Error::Dimension {
            op: "nnprat_loss",
            left: tape.shape(x).to_vec(),
            right: tape.shape(x_adv).to_vec(),
        });
    }
    let stage = |tape: &mut Tape, input: Var| -> Result<Var> {
        match spec.stage {
            FeatureStage::Logits => Ok(net.forward(tape, params, input)?.logits),
            FeatureStage::Penultimate => net.features(tape, params, input),
        }
    };
    let to_logits = |tape: &mut Tape, feats: Var| -> Result<Var> {
        match spec.stage {
            FeatureStage::Logits => Ok(feats),
            FeatureStage::Penultimate => net.head(tape, params, feats),
        }
    };

    let z_adv = stage(tape, x_adv)?;
    let (assignment, neighbors) = match frozen {
        Some((a, feats)) => (a.clone(), tape.constant(feats.clone())),
        None => (nearest_interclass(tape.value(z_adv), labels)?, z_adv),
    };
    let corrected_adv = projection_removal(tape, z_adv, &assignment, neighbors, spec)?;
    let logits_adv = to_logits(tape, corrected_adv)?;
    let adv_term = tape.cross_entropy(logits_adv, labels)?;
    if spec.beta == 0.0 {
        return Ok(adv_term);
    }

    let z_clean = stage(tape, x)?;
    let corrected_clean = projection_removal(tape, z_clean, &assignment, neighbors, spec)?;
    let logits_clean = to_logits(tape, corrected_clean)?;
    let clean_term = tape.cross_entropy(logits_clean, labels)?;
    let weighted = tape.scale(clean_term, spec.beta)?;
    tape.add(adv_term, weighted)
}

/// Scalar value of [`nnprat_loss`] without keeping a tape around.
pub fn nnprat_loss_value(net: &Network, x: &Tensor, x_adv: &Tensor, labels: &[usize], spec: &ProjectionSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let av = tape.constant(x_adv.clone());
    let loss = nnprat_loss(&mut tape, net, &params, xv, av, labels, spec)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn correct(z: &[f64], zs: &[f64], lambda: f64, exp: NormExponent) -> Vec<f64> {
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::from_rows(&[z.to_vec()]).unwrap());
        let nv = tape.constant(Tensor::from_rows(&[zs.to_vec()]).unwrap());
        let asg = NeighborAssignment {
            neighbor: vec![Some(0)],
            distance: vec![Some(euclidean(z, zs))],
        };
        let spec = ProjectionSpec {
            lambda,
            norm_exponent: exp,
            ..ProjectionSpec::default()
        };
        let out = projection_removal(&mut tape, zv, &asg, nv, &spec).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn worked_examples() {
        assert_eq!(correct(&[3.0, 4.0], &[6.0, 8.0], 0.5, NormExponent::Squared), vec![0.0, 0.0]);
        assert_eq!(correct(&[3.0, 4.0], &[6.0, 8.0], 0.5, NormExponent::Unsquared), vec![-12.0, -16.0]);
        assert_eq!(effective_scale_factor(&[3.0, 4.0], &[6.0, 8.0], 0.5, NormExponent::Unsquared).unwrap(), -4.0);
    }

    #[test]
    fn identity_cases() {
        let z = [0.3, -1.7, 2.2];
        assert_eq!(correct(&z, &[5.0, 1.0, -2.0], 0.0, NormExponent::Squared), z.to_vec());
        // orthogonal neighbor: ⟨z, z*⟩ = 0
        assert_eq!(correct(&[1.0, 2.0], &[-2.0, 1.0], 0.7, NormExponent::Unsquared), vec![1.0, 2.0]);
    }

    #[test]
    fn self_neighbor_gives_one_minus_lambda() {
        let z = [0.6, -0.8, 1.25];
        let s = effective_scale_factor(&z, &z, 0.3, NormExponent::Squared).unwrap();
        assert!((s - 0.7).abs() < 1e-15);
    }

    #[test]
    fn two_samples_are_each_others_neighbor() {
        let f = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let a = nearest_interclass(&f, &[0, 1]).unwrap();
        assert_eq!(a.neighbor, vec![Some(1), Some(0)]);
        assert_eq!(a.distance[0], Some(8f64.sqrt()));
    }

    #[test]
    fn single_class_batch_has_no_neighbors() {
        let f = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let a = nearest_interclass(&f, &[2, 2, 2]).unwrap();
        assert!(a.neighbor.iter().all(Option::is_none));
        assert!(a.distance.iter().all(Option::is_none));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let f = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![-1.0], vec![1.0]]).unwrap();
        let a = nearest_interclass(&f, &[0, 1, 1, 1]).unwrap();
        assert_eq!(a.neighbor[0], Some(1));
    }

    #[test]
    fn unassigned_rows_pass_through_even_at_zero() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap());
        let asg = NeighborAssignment {
            neighbor: vec![None, Some(0)],
            distance: vec![None, Some(1.0)],
        };
        let nb = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap());
        let spec = ProjectionSpec {
            lambda: 0.1,
            norm_exponent: NormExponent::Unsquared,
            ..ProjectionSpec::default()
        };
        let out = projection_removal(&mut tape, z, &asg, nb, &spec).unwrap();
        assert_eq!(tape.value(out).row(0), &[0.0, 0.0]);
        let s = tape.sum(out).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(z).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn zero_row_with_neighbor_is_degenerate() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let a = nearest_interclass(tape.value(z), &[0, 1]).unwrap();
        let err = projection_removal(&mut tape, z, &a, z, &ProjectionSpec::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateFeature { row: 1 }));
        assert!(effective_scale_factor(&[0.0, 0.0], &[1.0, 0.0], 0.1, NormExponent::Squared).is_err());
    }
}
