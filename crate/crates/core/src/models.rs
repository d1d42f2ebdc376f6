//! Classifiers that expose the penultimate representation and the logits
//! separately, plus the versioned parameter checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NNPR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Channel plan of the small CNN: two 3×3 conv blocks, then a 64-wide hidden layer.
const CNN_CONV1: usize = 8;
const CNN_CONV2: usize = 16;
const CNN_HIDDEN: usize = 64;
const CNN_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    Mlp,
    CnnSmall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    /// `[d]` for flat inputs, `[channels, height, width]` for images.
    pub input_shape: Vec<usize>,
    /// Hidden widths of an MLP; ignored by `cnn-small`.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkSpec {
    pub fn mlp(input: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Self {
        Self {
            kind: NetworkKind::Mlp,
            input_shape: vec![input],
            hidden: hidden.to_vec(),
            num_classes,
            seed,
        }
    }

    pub fn cnn_small(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Self {
        Self {
            kind: NetworkKind::CnnSmall,
            input_shape: input_shape.to_vec(),
            hidden: vec![],
            num_classes,
            seed,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Spec(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("bad input shape {:?}", self.input_shape)));
        }
        match self.kind {
            NetworkKind::Mlp => {
                if self.hidden.contains(&0) {
                    return Err(Error::Spec(format!("zero-width hidden layer in {:?}", self.hidden)));
                }
            }
            NetworkKind::CnnSmall => {
                let &[_, h, w] = &self.input_shape[..] else {
                    return Err(Error::Spec("cnn-small needs a [channels, height, width] input".into()));
                };
                if cnn_flat_side(h) == 0 || cnn_flat_side(w) == 0 {
                    return Err(Error::Spec(format!("input {h}x{w} too small for cnn-small")));
                }
            }
        }
        Ok(())
    }

    fn layers(&self) -> Vec<Layer> {
        match self.kind {
            NetworkKind::Mlp => {
                let mut dims = vec![self.input_len()];
                dims.extend(&self.hidden);
                dims.push(self.num_classes);
                dims.windows(2)
                    .map(|w| Layer::Linear {
                        inputs: w[0],
                        outputs: w[1],
                    })
                    .collect()
            }
            NetworkKind::CnnSmall => {
                let (c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let flat = CNN_CONV2 * cnn_flat_side(h) * cnn_flat_side(w);
                vec![
                    Layer::Conv {
                        in_channels: c,
                        out_channels: CNN_CONV1,
                    },
                    Layer::Conv {
                        in_channels: CNN_CONV1,
                        out_channels: CNN_CONV2,
                    },
                    Layer::Linear {
                        inputs: flat,
                        outputs: CNN_HIDDEN,
                    },
                    Layer::Linear {
                        inputs: CNN_HIDDEN,
                        outputs: self.num_classes,
                    },
                ]
            }
        }
    }
}

/// Spatial side after conv → pool → conv → pool.
fn cnn_flat_side(side: usize) -> usize {
    let a = side.saturating_sub(CNN_KERNEL - 1) / 2;
    a.saturating_sub(CNN_KERNEL - 1) / 2
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Linear { inputs: usize, outputs: usize },
    Conv { in_channels: usize, out_channels: usize },
}

impl Layer {
    fn weight_shape(&self) -> Vec<usize> {
        match *self {
            Layer::Linear { inputs, outputs } => vec![outputs, inputs],
            Layer::Conv {
                in_channels,
                out_channels,
            } => vec![out_channels, in_channels, CNN_KERNEL, CNN_KERNEL],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Linear { inputs, .. } => inputs,
            Layer::Conv { in_channels, .. } => in_channels * CNN_KERNEL * CNN_KERNEL,
        }
    }

    fn outputs(&self) -> usize {
        match *self {
            Layer::Linear { outputs, .. } => outputs,
            Layer::Conv { out_channels, .. } => out_channels,
        }
    }
}

/// Both feature stages of one forward pass, as nodes on the same tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardResult {
    /// `h(x)`: activations feeding the final linear layer, `[batch×m]`.
    pub penultimate: Var,
    /// `z = W_r h(x) + b`, `[batch×C]`.
    pub logits: Var,
}

/// Parameters registered on a tape, in declaration order (weight, bias per layer).
#[derive(Clone, Debug)]
pub struct BoundParams(pub Vec<Var>);

impl BoundParams {
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.0.iter().map(|&v| tape.grad_tensor(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
}

impl Network {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases, drawn in
    /// declaration order from a ChaCha8 stream seeded with `spec.seed`.
    pub fn init(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::new();
        for layer in spec.layers() {
            let shape = layer.weight_shape();
            let n: usize = shape.iter().product();
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Spec(e.to_string()))?;
            let w = (0..n).map(|_| normal.sample(&mut rng)).collect();
            params.push(Tensor::new(shape, w)?);
            params.push(Tensor::zeros(vec![layer.outputs()]));
        }
        Ok(Self { spec, params })
    }

    /// Rebuilds a network from explicit parameters, checking every shape.
    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        if params.len() != 2 * layers.len() {
            return Err(Error::Spec(format!(
                "expected {} parameter tensors, got {}",
                2 * layers.len(),
                params.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            let (w, b) = (&params[2 * i], &params[2 * i + 1]);
            if w.shape() != layer.weight_shape() || b.shape() != [layer.outputs()] {
                return Err(Error::Dimension {
                    op: "from_params",
                    left: layer.weight_shape(),
                    right: w.shape().to_vec(),
                });
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Width `m` of the penultimate representation.
    pub fn feature_dim(&self) -> usize {
        self.last_layer_weights().shape()[1]
    }

    /// `W_r`, shape `C×m`.
    pub fn last_layer_weights(&self) -> &Tensor {
        &self.params[self.params.len() - 2]
    }

    pub fn last_layer_bias(&self) -> &Tensor {
        &self.params[self.params.len() - 1]
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| tape.leaf(p.clone().with_requires_grad(requires_grad)))
                .collect(),
        )
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize> {
        let shape = tape.shape(x);
        let batch = shape.first().copied().unwrap_or(0);
        let ok = match shape.len() {
            2 => shape[1] == self.spec.input_len(),
            n => n == self.spec.input_shape.len() + 1 && shape[1..] == self.spec.input_shape[..],
        };
        if !ok || batch == 0 {
            let mut expected = vec![batch];
            expected.extend(&self.spec.input_shape);
            return Err(Error::Dimension {
                op: "forward",
                left: shape.to_vec(),
                right: expected,
            });
        }
        Ok(batch)
    }

    fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        tape.add_row_bias(y, b)
    }

    /// Penultimate representation `h(x)`.
    pub fn features(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let batch = self.check_input(tape, x)?;
        let p = &params.0;
        let last = p.len() - 2;
        match self.spec.kind {
            NetworkKind::Mlp => {
                let mut h = tape.reshape(x, vec![batch, self.spec.input_len()])?;
                for l in (0..last).step_by(2) {
                    let y = Self::linear(tape, h, p[l], p[l + 1])?;
                    h = tape.relu(y)?;
                }
                Ok(h)
            }
            NetworkKind::CnnSmall => {
                let mut shape = vec![batch];
                shape.extend(&self.spec.input_shape);
                let mut h = tape.reshape(x, shape)?;
                for l in [0, 2] {
                    let c = tape.conv2d(h, p[l], p[l + 1])?;
                    let r = tape.relu(c)?;
                    h = tape.max_pool2(r)?;
                }
                let flat = tape.flatten(h)?;
                let y = Self::linear(tape, flat, p[4], p[5])?;
                tape.relu(y)
            }
        }
    }

    /// Final linear layer applied to (possibly modified) penultimate features.
    pub fn head(&self, tape: &mut Tape, params: &BoundParams, features: Var) -> Result<Var> {
        let n = params.0.len();
        Self::linear(tape, features, params.0[n - 2], params.0[n - 1])
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<ForwardResult> {
        let penultimate = self.features(tape, params, x)?;
        let logits = self.head(tape, params, penultimate)?;
        Ok(ForwardResult { penultimate, logits })
    }

    /// Gradient-free forward pass returning `(penultimate, logits)` values.
    pub fn forward_values(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv)?;
        Ok((tape.value(out.penultimate).clone(), tape.value(out.logits).clone()))
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (_, logits) = self.forward_values(x)?;
        Ok((0..logits.rows()).map(|i| crate::tensor::argmax(logits.row(i))).collect())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let s = &self.spec;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[match s.kind {
            NetworkKind::Mlp => 0u8,
            NetworkKind::CnnSmall => 1u8,
        }])?;
        write_dims(&mut w, &s.input_shape)?;
        write_dims(&mut w, &s.hidden)?;
        w.write_all(&(s.num_classes as u32).to_le_bytes())?;
        w.write_all(&s.seed.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            write_dims(&mut w, p.shape())?;
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(ckpt_io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind).map_err(ckpt_io)?;
        let kind = match kind[0] {
            0 => NetworkKind::Mlp,
            1 => NetworkKind::CnnSmall,
            k => return Err(Error::Checkpoint(format!("unknown network kind {k}"))),
        };
        let input_shape = read_dims(&mut r)?;
        let hidden = read_dims(&mut r)?;
        let num_classes = read_u32(&mut r)? as usize;
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed).map_err(ckpt_io)?;
        let spec = NetworkSpec {
            kind,
            input_shape,
            hidden,
            num_classes,
            seed: u64::from_le_bytes(seed),
        };
        let count = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let shape = read_dims(&mut r)?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(ckpt_io)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Self::from_params(spec, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&bytes[..])
    }
}

fn ckpt_io(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

fn write_dims<W: Write>(w: &mut W, dims: &[usize]) -> Result<()> {
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(ckpt_io)?;
    Ok(u32::from_le_bytes(b))
}

fn read_dims<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let n = read_u32(r)? as usize;
    if n > 8 {
        return Err(Error::Checkpoint(format!("implausible rank {n}")));
    }
    (0..n).map(|_| read_u32(r).map(|d| d as usize)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let spec = NetworkSpec::mlp(5, &[7, 3], 4, 99);
        assert_eq!(Network::init(spec.clone()).unwrap(), Network::init(spec).unwrap());
    }

    #[test]
    fn mnist_mlp_parameter_count() {
        let net = Network::init(NetworkSpec::mlp(784, &[128], 10, 0)).unwrap();
        assert_eq!(net.param_count(), 784 * 128 + 128 + 128 * 10 + 10);
        assert_eq!(net.param_count(), 101_770);
    }

    #[test]
    fn cnn_small_logits_shape() {
        let net = Network::init(NetworkSpec::cnn_small([1, 28, 28], 3, 1)).unwrap();
        let x = Tensor::new(vec![2, 784], vec![0.5; 2 * 784]).unwrap();
        let (h, z) = net.forward_values(&x).unwrap();
        assert_eq!(z.shape(), &[2, 3]);
        assert_eq!(h.shape(), &[2, 64]);
        assert_eq!(net.last_layer_weights().shape(), &[3, 64]);
    }

    #[test]
    fn rejects_zero_width_and_single_class() {
        assert!(Network::init(NetworkSpec::mlp(4, &[3, 0], 2, 0)).is_err());
        assert!(Network::init(NetworkSpec::mlp(4, &[3], 1, 0)).is_err());
        assert!(Network::init(NetworkSpec::cnn_small([1, 6, 6], 2, 0)).is_err());
    }

    #[test]
    fn zero_final_layer_gives_bias_logits() {
        let mut net = Network::init(NetworkSpec::mlp(3, &[4], 2, 5)).unwrap();
        let n = net.params().len();
        net.params_mut()[n - 2].data_mut().fill(0.0);
        net.params_mut()[n - 1].data_mut().copy_from_slice(&[0.25, -1.5]);
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.9, 0.8, 0.7]]).unwrap();
        let (_, z) = net.forward_values(&x).unwrap();
        assert_eq!(z.data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn single_layer_mlp_is_affine() {
        let net = Network::init(NetworkSpec::mlp(3, &[], 2, 8)).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, -0.2, 0.3]]).unwrap();
        let (h, z) = net.forward_values(&x).unwrap();
        assert_eq!(h.data(), x.data());
        let (w, b) = (net.last_layer_weights(), net.last_layer_bias());
        for c in 0..2 {
            let mut s = 0.0;
            for k in 0..3 {
                s += x.data()[k] * w.data()[c * 3 + k];
            }
            assert_eq!(z.data()[c], s + b.data()[c]);
        }
    }

    #[test]
    fn wrong_input_width_is_a_dimension_error() {
        let net = Network::init(NetworkSpec::mlp(3, &[4], 2, 0)).unwrap();
        let x = Tensor::zeros(vec![1, 4]);
        assert!(matches!(net.forward_values(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let net = Network::init(NetworkSpec::mlp(2, &[3], 2, 0)).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(Network::read_checkpoint(&buf[..]).unwrap(), net);
        assert!(Network::read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Network::read_checkpoint(&bad[..]).is_err());
    }
}
