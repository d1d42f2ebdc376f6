//! L∞ adversarial examples: multi-step PGD with sign steps and FGSM as its
//! single-step special case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Network;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackInit {
    #[default]
    Zero,
    /// Uniform start inside the ε-box, clipped to the clamp range.
    UniformRandom,
}

/// Sign applied to the gradient step. `Ascent` increases the loss; `Descent`
/// is the literal minus-sign form of the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepDirection {
    #[default]
    Ascent,
    Descent,
}

impl StepDirection {
    fn sign(self) -> f64 {
        match self {
            StepDirection::Ascent => 1.0,
            StepDirection::Descent => -1.0,
        }
    }
}

fn unit_range() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default)]
    pub init: AttackInit,
    #[serde(default)]
    pub direction: StepDirection,
    #[serde(default = "unit_range")]
    pub clamp: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    pub fn pgd(epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            epsilon,
            alpha,
            steps,
            init: AttackInit::Zero,
            direction: StepDirection::Ascent,
            clamp: unit_range(),
            seed: 0,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self::pgd(epsilon, epsilon, 1)
    }

    /// `ε == 0` is accepted as the null attack, for which `alpha` is ignored.
    pub fn is_null(&self) -> bool {
        self.epsilon == 0.0
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let [lo, hi] = self.clamp;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            v.push(format!("clamp range [{lo}, {hi}] must be finite with lo < hi"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon <= hi - lo) {
            v.push(format!("epsilon {} must lie in [0, {}]", self.epsilon, hi - lo));
        }
        if !self.is_null() && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            v.push(format!("alpha {} must be positive", self.alpha));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().as_slice() {
            [] => Ok(()),
            v => Err(Error::Spec(v.join("; "))),
        }
    }
}

/// `∇_x CE(f(x), y)` with the network parameters held fixed.
pub fn input_gradient(net: &Network, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, false);
    let xv = tape.param(x.clone());
    let out = net.forward(&mut tape, &params, xv)?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    tape.backward(loss)?;
    Ok(tape.grad_tensor(xv))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected sign-gradient attack inside the ε-box around `x` intersected
/// with the clamp range. Performs exactly `spec.steps` gradient evaluations.
pub fn pgd(net: &Network, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    spec.validate()?;
    let [lo, hi] = spec.clamp;
    if let Some(v) = x.data().iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::Contract(format!("input value {v} outside clamp range [{lo}, {hi}]")));
    }
    if spec.is_null() {
        return Ok(x.clone());
    }
    let eps = spec.epsilon;
    let box_lo: Vec<f64> = x.data().iter().map(|v| (v - eps).max(lo)).collect();
    let box_hi: Vec<f64> = x.data().iter().map(|v| (v + eps).min(hi)).collect();

    let mut adv = x.clone();
    if spec.init == AttackInit::UniformRandom {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for (i, v) in adv.data_mut().iter_mut().enumerate() {
            let delta: f64 = rng.random_range(-eps..=eps);
            *v = (*v + delta).clamp(box_lo[i], box_hi[i]);
        }
    }
    let step = spec.direction.sign() * spec.alpha;
    for _ in 0..spec.steps {
        let g = input_gradient(net, &adv, labels)?;
        for (i, (v, gi)) in adv.data_mut().iter_mut().zip(g.data()).enumerate() {
            *v = (*v + step * sign(*gi)).clamp(box_lo[i], box_hi[i]);
        }
    }
    Ok(adv)
}

/// Single full-budget ascent step from the clean input.
pub fn fgsm(net: &Network, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    pgd(net, x, labels, &AttackSpec::fgsm(epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NetworkSpec;

    /// Two logits `[0, w·x]`: the class-1 margin grows with `x` when `w > 0`.
    fn scalar_logistic(w: f64) -> Network {
        let spec = NetworkSpec::mlp(1, &[], 2, 0);
        let params = vec![
            Tensor::new(vec![2, 1], vec![0.0, w]).unwrap(),
            Tensor::zeros(vec![2]),
        ];
        Network::from_params(spec, params).unwrap()
    }

    #[test]
    fn zero_steps_is_identity() {
        let net = Network::init(NetworkSpec::mlp(3, &[4], 2, 1)).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.5, 0.9]]).unwrap();
        let adv = pgd(&net, &x, &[1], &AttackSpec::pgd(0.1, 0.01, 0)).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn one_ascent_step_on_scalar_model() {
        let net = scalar_logistic(2.0);
        let x = Tensor::from_rows(&[vec![0.3], vec![0.95]]).unwrap();
        // label 0: the loss grows with x, so each coordinate moves up by
        // alpha, capped by x + epsilon and by the upper clamp bound
        let adv = pgd(&net, &x, &[0, 0], &AttackSpec::pgd(0.1, 0.04, 1)).unwrap();
        assert_eq!(adv.data(), &[0.3 + 0.04, (0.95f64 + 0.04).min(1.0)]);
        let capped = pgd(&net, &x, &[0, 0], &AttackSpec::pgd(0.02, 0.04, 1)).unwrap();
        assert_eq!(capped.data(), &[0.3 + 0.02, (0.95f64 + 0.02).min(1.0)]);
    }

    #[test]
    fn fgsm_moves_against_the_label() {
        let net = scalar_logistic(3.0);
        let x = Tensor::from_rows(&[vec![0.5], vec![0.5]]).unwrap();
        let adv = fgsm(&net, &x, &[0, 1], 0.1).unwrap();
        assert_eq!(adv.data(), &[0.5 + 0.1, 0.5 - 0.1]);
        let neg = scalar_logistic(-3.0);
        let adv = fgsm(&neg, &x, &[0, 1], 0.1).unwrap();
        assert_eq!(adv.data(), &[0.5 - 0.1, 0.5 + 0.1]);
    }

    #[test]
    fn descent_direction_reduces_the_margin_attack() {
        let net = scalar_logistic(2.0);
        let x = Tensor::from_rows(&[vec![0.5]]).unwrap();
        let mut spec = AttackSpec::pgd(0.1, 0.05, 1);
        spec.direction = StepDirection::Descent;
        assert_eq!(pgd(&net, &x, &[0], &spec).unwrap().data(), &[0.5 - 0.05]);
    }

    #[test]
    fn fgsm_with_zero_epsilon_is_identity() {
        let net = Network::init(NetworkSpec::mlp(2, &[3], 2, 4)).unwrap();
        let x = Tensor::from_rows(&[vec![0.2, 0.7]]).unwrap();
        assert_eq!(fgsm(&net, &x, &[1], 0.0).unwrap(), x);
    }

    #[test]
    fn fgsm_equals_one_step_pgd() {
        let net = Network::init(NetworkSpec::mlp(4, &[5], 3, 2)).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![0.9, 0.5, 0.0, 1.0]]).unwrap();
        let a = fgsm(&net, &x, &[2, 0], 0.07).unwrap();
        let b = pgd(&net, &x, &[2, 0], &AttackSpec::pgd(0.07, 0.07, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_start_is_seeded() {
        let net = Network::init(NetworkSpec::mlp(4, &[5], 2, 2)).unwrap();
        let x = Tensor::from_rows(&[vec![0.5; 4]]).unwrap();
        let mut spec = AttackSpec::pgd(0.1, 0.02, 3);
        spec.init = AttackInit::UniformRandom;
        spec.seed = 11;
        assert_eq!(pgd(&net, &x, &[0], &spec).unwrap(), pgd(&net, &x, &[0], &spec).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let net = Network::init(NetworkSpec::mlp(1, &[], 2, 0)).unwrap();
        let x = Tensor::from_rows(&[vec![0.5]]).unwrap();
        for spec in [
            AttackSpec::pgd(-0.1, 0.01, 1),
            AttackSpec::pgd(0.1, 0.0, 1),
            AttackSpec::pgd(1.5, 0.1, 1),
        ] {
            assert!(matches!(pgd(&net, &x, &[0], &spec), Err(Error::Spec(_))), "{spec:?}");
        }
        let outside = Tensor::from_rows(&[vec![1.5]]).unwrap();
        assert!(pgd(&net, &outside, &[0], &AttackSpec::pgd(0.1, 0.01, 1)).is_err());
    }
}
