//! Python bindings. Matrices cross the boundary as lists of row lists and
//! labels as lists of ints; library errors surface as `NnpratError`.

use std::path::PathBuf;

use nnprat_core::attacks::{self, AttackInit, AttackSpec};
use nnprat_core::config::ExperimentConfig;
use nnprat_core::data::{self, Dataset, GaussianSpec, Split};
use nnprat_core::experiment::{self, RunOptions};
use nnprat_core::metrics;
use nnprat_core::models::{Network, NetworkSpec};
use nnprat_core::projection::{self, FeatureStage, NormExponent, ProjectionSpec};
use nnprat_core::train::{LrSchedule, Method, TrainSpec};
use nnprat_core::{Error, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(nnprat_py, NnpratError, PyException);

fn err(e: Error) -> PyErr {
    NnpratError::new_err(e.to_string())
}

type Rows = Vec<Vec<f64>>;

fn tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(err)
}

fn exponent(name: &str) -> PyResult<NormExponent> {
    match name {
        "squared" => Ok(NormExponent::Squared),
        "unsquared" => Ok(NormExponent::Unsquared),
        other => Err(NnpratError::new_err(format!("unknown norm exponent {other:?}"))),
    }
}

fn method(name: &str) -> PyResult<Method> {
    match name {
        "nnprat" => Ok(Method::Nnprat),
        "vanilla-at" => Ok(Method::VanillaAt),
        "clean" => Ok(Method::Clean),
        other => Err(NnpratError::new_err(format!("unknown method {other:?}"))),
    }
}

#[pyclass(name = "Network", module = "nnprat_py", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    #[pyo3(signature = (inputs, hidden, num_classes, seed=0))]
    fn mlp(inputs: usize, hidden: Vec<usize>, num_classes: usize, seed: u64) -> PyResult<Self> {
        let inner = Network::init(NetworkSpec::mlp(inputs, &hidden, num_classes, seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (num_classes, seed=0, input_shape=[1, 28, 28]))]
    fn cnn_small(num_classes: usize, seed: u64, input_shape: [usize; 3]) -> PyResult<Self> {
        let inner = Network::init(NetworkSpec::cnn_small(input_shape, num_classes, seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Network::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// `(penultimate, logits)` for a batch of flattened inputs.
    fn forward(&self, x: Rows) -> PyResult<(Rows, Rows)> {
        let (h, z) = self.inner.forward_values(&tensor(&x)?).map_err(err)?;
        Ok((h.to_rows(), z.to_rows()))
    }

    fn predict(&self, x: Rows) -> PyResult<Vec<usize>> {
        self.inner.predict(&tensor(&x)?).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn last_layer_weights(&self) -> Rows {
        self.inner.last_layer_weights().to_rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "Network({:?}, {} classes, {} parameters)",
            self.inner.spec().kind,
            self.inner.num_classes(),
            self.inner.param_count()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (net, x, labels, epsilon, alpha, steps, random_init=false, seed=0))]
#[allow(clippy::too_many_arguments)]
fn pgd(
    net: &PyNetwork,
    x: Rows,
    labels: Vec<usize>,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    random_init: bool,
    seed: u64,
) -> PyResult<Rows> {
    let mut spec = AttackSpec::pgd(epsilon, alpha, steps);
    spec.init = if random_init { AttackInit::UniformRandom } else { AttackInit::Zero };
    spec.seed = seed;
    let adv = attacks::pgd(&net.inner, &tensor(&x)?, &labels, &spec).map_err(err)?;
    Ok(adv.to_rows())
}

#[pyfunction]
fn fgsm(net: &PyNetwork, x: Rows, labels: Vec<usize>, epsilon: f64) -> PyResult<Rows> {
    let adv = attacks::fgsm(&net.inner, &tensor(&x)?, &labels, epsilon).map_err(err)?;
    Ok(adv.to_rows())
}

#[pyfunction]
#[pyo3(signature = (z, z_star, lam, exponent="squared"))]
fn effective_scale_factor(z: Vec<f64>, z_star: Vec<f64>, lam: f64, exponent: &str) -> PyResult<f64> {
    projection::effective_scale_factor(&z, &z_star, lam, self::exponent(exponent)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (z, z_star, lam, exponent="squared"))]
fn remove_projection(z: Vec<f64>, z_star: Vec<f64>, lam: f64, exponent: &str) -> PyResult<Vec<f64>> {
    projection::remove_projection(&z, &z_star, lam, self::exponent(exponent)?).map_err(err)
}

/// Index of each row's nearest differently-labelled row, or `None`.
#[pyfunction]
fn nearest_interclass(features: Rows, labels: Vec<usize>) -> PyResult<Vec<Option<usize>>> {
    Ok(projection::nearest_interclass(&tensor(&features)?, &labels).map_err(err)?.neighbor)
}

/// Joint loss value on a batch: corrected adversarial CE plus `beta` times
/// corrected clean CE.
#[pyfunction]
#[pyo3(signature = (net, x, x_adv, labels, lam=0.001, beta=6.0, stage="penultimate", exponent="squared"))]
#[allow(clippy::too_many_arguments)]
fn nnprat_loss(
    net: &PyNetwork,
    x: Rows,
    x_adv: Rows,
    labels: Vec<usize>,
    lam: f64,
    beta: f64,
    stage: &str,
    exponent: &str,
) -> PyResult<f64> {
    let stage = match stage {
        "penultimate" => FeatureStage::Penultimate,
        "logits" => FeatureStage::Logits,
        other => return Err(NnpratError::new_err(format!("unknown stage {other:?}"))),
    };
    let spec = ProjectionSpec {
        lambda: lam,
        beta,
        stage,
        norm_exponent: self::exponent(exponent)?,
        ..ProjectionSpec::default()
    };
    projection::nnprat_loss_value(&net.inner, &tensor(&x)?, &tensor(&x_adv)?, &labels, &spec).map_err(err)
}

#[pyfunction]
fn fisher_ratio(features: Rows, labels: Vec<usize>) -> PyResult<f64> {
    metrics::fisher_ratio(&tensor(&features)?, &labels).map_err(err)
}

#[pyfunction]
fn silhouette(features: Rows, labels: Vec<usize>) -> PyResult<f64> {
    metrics::silhouette(&tensor(&features)?, &labels).map_err(err)
}

#[pyfunction]
fn spectral_norm(w: Rows) -> PyResult<f64> {
    metrics::spectral_norm(&tensor(&w)?).map_err(err)
}

/// `(per_sample, aggregate)` share of off-class points among the `k` nearest.
#[pyfunction]
fn neighbor_profile(features: Rows, labels: Vec<usize>, k: usize) -> PyResult<(Vec<f64>, f64)> {
    let p = metrics::interclass_neighbor_profile(&tensor(&features)?, &labels, k).map_err(err)?;
    Ok((p.per_sample, p.aggregate))
}

/// `(coordinates, explained_variance_ratio)` of a PCA projection.
#[pyfunction]
#[pyo3(signature = (features, dims=2))]
fn pca(features: Rows, dims: usize) -> PyResult<(Rows, Vec<f64>)> {
    let p = metrics::pca_project(&tensor(&features)?, dims).map_err(err)?;
    Ok((p.projected.to_rows(), p.explained_variance_ratio))
}

type Split2 = ((Rows, Vec<usize>), (Rows, Vec<usize>));

/// Default two-Gaussian task as `((x_train, y_train), (x_test, y_test))`.
#[pyfunction]
#[pyo3(signature = (samples_per_class=500, test_per_class=500, sigma=0.6, seed=0))]
fn gen_gaussian(samples_per_class: usize, test_per_class: usize, sigma: f64, seed: u64) -> PyResult<Split2> {
    let spec = GaussianSpec {
        samples_per_class,
        test_per_class,
        sigma,
        seed,
        ..GaussianSpec::default()
    };
    let (tr, te) = data::gen_gaussian_splits(&spec).map_err(err)?;
    Ok(((tr.inputs.to_rows(), tr.labels), (te.inputs.to_rows(), te.labels)))
}

/// Images scaled to `[0, 1]` and flattened, with their raw labels.
#[pyfunction]
fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<(Rows, Vec<usize>)> {
    let ds = data::load_idx(&images, &labels).map_err(err)?;
    Ok((ds.inputs.to_rows(), ds.labels))
}

/// Trains a copy of `net`; returns the trained network and per-epoch mean loss.
#[pyfunction]
#[pyo3(signature = (
    net, x, labels, method="nnprat", epochs=10, batch_size=64, learning_rate=0.05, momentum=0.9,
    weight_decay=5e-4, epsilon=0.15, alpha=0.0375, steps=10, lam=0.001, beta=6.0, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn train(
    net: &PyNetwork,
    x: Rows,
    labels: Vec<usize>,
    method: &str,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    lam: f64,
    beta: f64,
    seed: u64,
) -> PyResult<(PyNetwork, Vec<f64>)> {
    let inputs = tensor(&x)?;
    let input_shape = net.inner.spec().input_shape.clone();
    let data = Dataset::new(inputs, labels, net.inner.num_classes(), Split::Train, input_shape).map_err(err)?;
    let spec = TrainSpec {
        epochs,
        batch_size,
        learning_rate,
        momentum,
        weight_decay,
        lr_schedule: LrSchedule::Constant,
        method: self::method(method)?,
        attack: AttackSpec::pgd(epsilon, alpha, steps),
        projection: ProjectionSpec::with_lambda_beta(lam, beta),
        seed,
    };
    let out = nnprat_core::train::train(net.inner.clone(), &data, &spec).map_err(err)?;
    let losses = out.epochs.iter().map(|e| e.mean_train_loss).collect();
    Ok((PyNetwork { inner: out.network }, losses))
}

/// Runs a TOML experiment config; returns the summary.csv lines.
#[pyfunction]
#[pyo3(signature = (config, output_dir=None))]
fn run_config(config: PathBuf, output_dir: Option<PathBuf>) -> PyResult<Vec<String>> {
    let cfg = ExperimentConfig::from_file(&config).map_err(err)?;
    let opts = RunOptions {
        output_dir,
        jobs: 1,
        ..RunOptions::default()
    };
    let rows = experiment::run(&cfg, &opts).map_err(err)?;
    Ok(rows.iter().map(|r| r.to_csv()).collect())
}

#[pymodule]
fn nnprat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NnpratError", m.py().get_type::<NnpratError>())?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(pgd, m)?)?;
    m.add_function(wrap_pyfunction!(fgsm, m)?)?;
    m.add_function(wrap_pyfunction!(effective_scale_factor, m)?)?;
    m.add_function(wrap_pyfunction!(remove_projection, m)?)?;
    m.add_function(wrap_pyfunction!(nearest_interclass, m)?)?;
    m.add_function(wrap_pyfunction!(nnprat_loss, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_norm, m)?)?;
    m.add_function(wrap_pyfunction!(neighbor_profile, m)?)?;
    m.add_function(wrap_pyfunction!(pca, m)?)?;
    m.add_function(wrap_pyfunction!(gen_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
