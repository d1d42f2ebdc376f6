//! Outer training loop: per-batch attack generation, the configured loss, and
//! momentum SGD with L2 weight decay folded into the gradient.

use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackSpec};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::spectral_norm;
use crate::models::Network;
use crate::projection::{nnprat_loss, ProjectionSpec};
use crate::tensor::{argmax, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Projection-removal adversarial training.
    Nnprat,
    /// Cross-entropy on PGD examples only.
    VanillaAt,
    /// Cross-entropy on clean inputs.
    Clean,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Nnprat => "nnprat",
            Method::VanillaAt => "vanilla-at",
            Method::Clean => "clean",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply the rate by `factor` at each listed epoch (0-based).
    StepDecay { milestones: Vec<usize>, factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(passed as i32)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub method: Method,
    pub attack: AttackSpec,
    #[serde(default)]
    pub projection: ProjectionSpec,
    #[serde(default)]
    pub seed: u64,
}

impl TrainSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("epochs must be >= 1".into());
        }
        if self.batch_size == 0 || (self.method == Method::Nnprat && self.batch_size < 2) {
            v.push(format!("batch_size {} must be >= 2 (>= 1 without projection removal)", self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if let LrSchedule::StepDecay { factor, .. } = self.lr_schedule {
            if !(factor > 0.0 && factor.is_finite()) {
                v.push(format!("lr_schedule factor {factor} must be positive"));
            }
        }
        v.extend(self.attack.violations().into_iter().map(|e| format!("train attack: {e}")));
        v.extend(self.projection.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().as_slice() {
            [] => Ok(()),
            v => Err(Error::Spec(v.join("; "))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub clean_train_accuracy: f64,
    /// Filled by the monitor callback, when one is given.
    pub robust_accuracy: Option<f64>,
    pub last_layer_spectral_norm: f64,
    pub skipped_batches: usize,
    pub wall_time: Duration,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,loss,clean_acc,robust_acc,spectral_norm,skipped_batches,wall_ms";

pub fn write_epoch_csv<W: Write>(records: &[EpochRecord], mut w: W) -> Result<()> {
    writeln!(w, "{EPOCH_CSV_HEADER}")?;
    for r in records {
        let robust = r.robust_accuracy.map_or_else(String::new, |v| format!("{v:.6}"));
        writeln!(
            w,
            "{},{:.6},{:.6},{},{:.6},{},{}",
            r.epoch,
            r.mean_train_loss,
            r.clean_train_accuracy,
            robust,
            r.last_layer_spectral_norm,
            r.skipped_batches,
            r.wall_time.as_millis()
        )?;
    }
    Ok(())
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// `v ← μ·v + g + wd·θ`, then `θ ← θ − η·v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Contract(format!(
            "sgd_step: {} params, {} grads, {} state buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.numel() != v.len() {
            return Err(Error::Contract(format!(
                "sgd_step: param {:?} vs grad {:?} vs state {}",
                p.shape(),
                g.shape(),
                v.len()
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((theta, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *theta;
            *theta -= learning_rate * *vi;
        }
    }
    Ok(())
}

/// Loss for one batch under `method`, with gradients on the returned tape.
fn batch_loss(
    net: &Network,
    inputs: &Tensor,
    labels: &[usize],
    adv: Option<&Tensor>,
    spec: &TrainSpec,
) -> Result<(Tape, crate::models::BoundParams, f64)> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, true);
    let loss = match (spec.method, adv) {
        (Method::Nnprat, Some(adv)) => {
            let x = tape.constant(inputs.clone());
            let xa = tape.constant(adv.clone());
            nnprat_loss(&mut tape, net, &params, x, xa, labels, &spec.projection)?
        }
        (Method::VanillaAt, Some(adv)) => {
            let xa = tape.constant(adv.clone());
            let out = net.forward(&mut tape, &params, xa)?;
            tape.cross_entropy(out.logits, labels)?
        }
        _ => {
            let x = tape.constant(inputs.clone());
            let out = net.forward(&mut tape, &params, x)?;
            tape.cross_entropy(out.logits, labels)?
        }
    };
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    Ok((tape, params, value))
}

/// Per-batch attack seed; only matters for random-start attacks.
fn attack_seed(base: u64, epoch: usize, batch: usize) -> u64 {
    base ^ ((epoch as u64) << 32 | batch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fraction of `data` the network classifies correctly, evaluated in chunks.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(512) {
        let idx: Vec<usize> = (start..(start + 512).min(data.len())).collect();
        let x = data.inputs.select_rows(&idx)?;
        let (_, logits) = net.forward_values(&x)?;
        correct += idx
            .iter()
            .enumerate()
            .filter(|&(k, &i)| argmax(logits.row(k)) == data.labels[i])
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub epochs: Vec<EpochRecord>,
    /// Loss of every completed optimizer step, in order.
    pub step_losses: Vec<f64>,
}

pub fn train(net: Network, data: &Dataset, spec: &TrainSpec) -> Result<TrainOutcome> {
    train_with_monitor(net, data, spec, |_, _| Ok(None))
}

/// Like [`train`], calling `monitor(epoch, &net)` after each epoch; its value
/// is stored as the epoch's robust accuracy.
pub fn train_with_monitor<F>(mut net: Network, data: &Dataset, spec: &TrainSpec, mut monitor: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Network) -> Result<Option<f64>>,
{
    spec.validate()?;
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= net.num_classes()) {
        return Err(Error::Index {
            op: "train",
            index: bad,
            bound: net.num_classes(),
        });
    }
    let mut state = SgdState::new(net.params());
    let mut epochs = Vec::with_capacity(spec.epochs);
    let mut step_losses = Vec::new();

    for epoch in 0..spec.epochs {
        let start = Instant::now();
        let lr = spec.lr_schedule.rate(spec.learning_rate, epoch);
        let plan = batches(data, spec.batch_size, spec.seed, epoch as u64)?;
        let (mut loss_sum, mut done, mut skipped) = (0.0, 0usize, 0usize);

        for (b, batch) in plan.iter().enumerate() {
            let adv = match spec.method {
                Method::Clean => None,
                Method::Nnprat | Method::VanillaAt => {
                    let mut attack = spec.attack.clone();
                    attack.seed = attack_seed(spec.attack.seed ^ spec.seed, epoch, b);
                    Some(pgd(&net, &batch.inputs, &batch.labels, &attack)?)
                }
            };
            let (tape, params, loss) = match batch_loss(&net, &batch.inputs, &batch.labels, adv.as_ref(), spec) {
                Ok(v) => v,
                Err(Error::DegenerateFeature { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let grads = params.grads(&tape);
            sgd_step(net.params_mut(), &grads, &mut state, lr, spec.momentum, spec.weight_decay)?;
            loss_sum += loss;
            done += 1;
            step_losses.push(loss);
        }

        if skipped * 10 > plan.len() {
            return Err(Error::TooManySkipped {
                epoch,
                skipped,
                total: plan.len(),
            });
        }
        let mean_train_loss = if done > 0 { loss_sum / done as f64 } else { f64::NAN };
        let clean_train_accuracy = accuracy(&net, data)?;
        let last_layer_spectral_norm = spectral_norm(net.last_layer_weights())?;
        let robust_accuracy = monitor(epoch, &net)?;
        epochs.push(EpochRecord {
            epoch,
            mean_train_loss,
            clean_train_accuracy,
            robust_accuracy,
            last_layer_spectral_norm,
            skipped_batches: skipped,
            wall_time: start.elapsed(),
        });
    }
    Ok(TrainOutcome {
        network: net,
        epochs,
        step_losses,
    })
}
