//! TOML experiment configuration: dataset source, network, training recipe,
//! evaluation attacks and the optional ablation grid.
//!
//! Relative paths are resolved against the directory of the config file when
//! it is loaded, so the snapshot written next to each run is self-contained.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::data::{gen_gaussian_splits, load_idx, Dataset, GaussianSpec, Split};
use crate::error::{Error, Result};
use crate::models::{NetworkKind, NetworkSpec};
use crate::train::{Method, TrainSpec};

pub const DEFAULT_GRID_CAP: usize = 64;
pub const DEFAULT_NEIGHBOR_K: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Default two-class Gaussian task.
    ToyGaussian,
    /// MNIST digits 3, 5 and 8 from `<root>/{train,t10k}-*-ubyte`.
    Mnist358,
}

fn default_mnist_root() -> PathBuf {
    PathBuf::from("data/mnist358")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Gaussian(GaussianSpec),
    Idx(IdxSource),
    Preset {
        name: Preset,
        #[serde(default = "default_mnist_root")]
        root: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Keep only these original labels, relabelled `0..classes.len()` in order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

impl IdxSource {
    fn mnist358(root: &Path) -> Self {
        Self {
            train_images: root.join("train-images-idx3-ubyte"),
            train_labels: root.join("train-labels-idx1-ubyte"),
            test_images: root.join("t10k-images-idx3-ubyte"),
            test_labels: root.join("t10k-labels-idx1-ubyte"),
            classes: Some(vec![3, 5, 8]),
            train_limit: None,
            test_limit: None,
        }
    }

    fn paths_mut(&mut self) -> [&mut PathBuf; 4] {
        [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
        ]
    }

    fn load(&self) -> Result<(Dataset, Dataset)> {
        let prepare = |images: &Path, labels: &Path, limit: Option<usize>, split: Split| -> Result<Dataset> {
            let mut ds = load_idx(images, labels)?;
            ds.split = split;
            if let Some(classes) = &self.classes {
                ds = ds.select_classes(classes)?;
            }
            if let Some(n) = limit {
                ds = ds.take(n)?;
            }
            Ok(ds)
        };
        let train = prepare(&self.train_images, &self.train_labels, self.train_limit, Split::Train)?;
        let mut test = prepare(&self.test_images, &self.test_labels, self.test_limit, Split::Test)?;
        // both splits must agree on the class count the network is built for
        test.num_classes = test.num_classes.max(train.num_classes);
        let mut train = train;
        train.num_classes = test.num_classes;
        Ok((train, test))
    }
}

impl DatasetConfig {
    /// Train and test splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Gaussian(spec) => gen_gaussian_splits(spec),
            DatasetConfig::Idx(src) => src.load(),
            DatasetConfig::Preset { name: Preset::ToyGaussian, .. } => gen_gaussian_splits(&GaussianSpec::default()),
            DatasetConfig::Preset {
                name: Preset::Mnist358,
                root,
            } => IdxSource::mnist358(root).load(),
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetConfig::Gaussian(_) => {}
            DatasetConfig::Idx(src) => src.paths_mut().into_iter().for_each(fix),
            DatasetConfig::Preset { root, .. } => fix(root),
        }
    }

    fn violations(&self) -> Vec<String> {
        let missing = |paths: &[&Path]| -> Vec<String> {
            paths
                .iter()
                .filter(|p| !p.is_file())
                .map(|p| format!("dataset file {} does not exist", p.display()))
                .collect()
        };
        match self {
            DatasetConfig::Gaussian(spec) => {
                let mut v = spec.violations();
                if spec.test_per_class == 0 {
                    v.push("gaussian test_per_class must be >= 1 for evaluation".into());
                }
                v
            }
            DatasetConfig::Idx(src) => {
                let mut v = missing(&[&src.train_images, &src.train_labels, &src.test_images, &src.test_labels]);
                if let Some(c) = &src.classes {
                    if c.len() < 2 {
                        v.push("dataset classes must list at least 2 labels".into());
                    }
                    if c.iter().collect::<BTreeSet<_>>().len() != c.len() {
                        v.push(format!("dataset classes {c:?} contain duplicates"));
                    }
                }
                v
            }
            DatasetConfig::Preset { name: Preset::ToyGaussian, .. } => vec![],
            DatasetConfig::Preset {
                name: Preset::Mnist358,
                root,
            } => {
                let src = IdxSource::mnist358(root);
                missing(&[&src.train_images, &src.train_labels, &src.test_images, &src.test_labels])
            }
        }
    }
}

/// Network section; input shape and class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub kind: NetworkKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    pub fn spec_for(&self, data: &Dataset, seed: u64) -> NetworkSpec {
        NetworkSpec {
            kind: self.kind,
            input_shape: data.input_shape.clone(),
            hidden: self.hidden.clone(),
            num_classes: data.num_classes,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub name: String,
    pub attack: AttackSpec,
}

fn default_cap() -> usize {
    DEFAULT_GRID_CAP
}

/// Cartesian grid; an empty axis keeps the base config's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_cap")]
    pub cap: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            methods: vec![],
            lambda: vec![],
            beta: vec![],
            seeds: vec![],
            cap: DEFAULT_GRID_CAP,
        }
    }
}

/// Per-epoch robust accuracy on the first `samples` test points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    pub attack: String,
    pub samples: usize,
}

fn default_neighbor_k() -> usize {
    DEFAULT_NEIGHBOR_K
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Attack whose outputs feed the attacked-feature diagnostics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_attack: Option<String>,
    #[serde(default = "default_neighbor_k")]
    pub neighbor_k: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            feature_attack: None,
            neighbor_k: DEFAULT_NEIGHBOR_K,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainSpec,
    /// Defaults to `fgsm` and `pgd20` built from the training attack.
    #[serde(default)]
    pub eval_attacks: Vec<NamedAttack>,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor: Option<MonitorConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// One point of the expanded grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub method: Method,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
}

impl GridPoint {
    pub fn run_id(&self) -> String {
        format!(
            "{:03}-{}-lambda{}-beta{}-seed{}",
            self.index,
            self.method.name(),
            self.lambda,
            self.beta,
            self.seed
        )
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Parses, resolves relative paths against the file's directory, and
    /// validates.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        self.dataset.resolve(base);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Configured attacks, or the `fgsm`/`pgd20` defaults.
    pub fn eval_attacks(&self) -> Vec<NamedAttack> {
        if !self.eval_attacks.is_empty() {
            return self.eval_attacks.clone();
        }
        let train = &self.train.attack;
        let mut pgd20 = AttackSpec::pgd(train.epsilon, train.alpha, 20);
        pgd20.clamp = train.clamp;
        let mut fgsm = AttackSpec::fgsm(train.epsilon);
        fgsm.clamp = train.clamp;
        vec![
            NamedAttack {
                name: "fgsm".into(),
                attack: fgsm,
            },
            NamedAttack {
                name: "pgd20".into(),
                attack: pgd20,
            },
        ]
    }

    /// Attack used for the attacked-feature diagnostics: the configured one,
    /// else `pgd20` when present, else the last listed attack.
    pub fn feature_attack(&self) -> Option<NamedAttack> {
        let attacks = self.eval_attacks();
        let wanted = self.analysis.feature_attack.as_deref().unwrap_or("pgd20");
        attacks
            .iter()
            .find(|a| a.name == wanted)
            .or(attacks.last())
            .cloned()
    }

    /// Grid in run order: method, then lambda, then beta, then seed. Methods
    /// without projection removal do not expand over lambda or beta.
    pub fn grid(&self) -> Vec<GridPoint> {
        let a = &self.ablation;
        let methods = if a.methods.is_empty() { vec![self.train.method] } else { a.methods.clone() };
        let or_base = |axis: &[f64], base: f64| if axis.is_empty() { vec![base] } else { axis.to_vec() };
        let lambdas = or_base(&a.lambda, self.train.projection.lambda);
        let betas = or_base(&a.beta, self.train.projection.beta);
        let seeds = if a.seeds.is_empty() { vec![self.train.seed] } else { a.seeds.clone() };
        let mut points = Vec::new();
        for &method in &methods {
            let (ls, bs) = if method == Method::Nnprat {
                (lambdas.clone(), betas.clone())
            } else {
                (vec![self.train.projection.lambda], vec![self.train.projection.beta])
            };
            for &lambda in &ls {
                for &beta in &bs {
                    for &seed in &seeds {
                        points.push(GridPoint {
                            index: points.len(),
                            method,
                            lambda,
                            beta,
                            seed,
                        });
                    }
                }
            }
        }
        points
    }

    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.dataset.violations();
        if let NetworkKind::Mlp = self.network.kind {
            if self.network.hidden.contains(&0) {
                v.push(format!("network hidden widths {:?} contain zero", self.network.hidden));
            }
        }
        v.extend(self.train.violations());

        let attacks = self.eval_attacks();
        let mut names = BTreeSet::new();
        for a in &attacks {
            if a.name.is_empty() || a.name.contains([',', '"', '\n']) {
                v.push(format!("eval attack name {:?} is empty or has reserved characters", a.name));
            }
            if !names.insert(a.name.as_str()) {
                v.push(format!("eval attack name {:?} is not unique", a.name));
            }
            v.extend(a.attack.violations().into_iter().map(|e| format!("eval attack {}: {e}", a.name)));
        }
        if let Some(name) = &self.analysis.feature_attack {
            if !names.contains(name.as_str()) {
                v.push(format!("analysis feature_attack {name:?} is not an eval attack"));
            }
        }
        if self.analysis.neighbor_k == 0 {
            v.push("analysis neighbor_k must be >= 1".into());
        }
        if let Some(m) = &self.monitor {
            if !names.contains(m.attack.as_str()) {
                v.push(format!("monitor attack {:?} is not an eval attack", m.attack));
            }
            if m.samples == 0 {
                v.push("monitor samples must be >= 1".into());
            }
        }

        let a = &self.ablation;
        for &l in &a.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                v.push(format!("ablation lambda {l} must be finite and >= 0"));
            }
        }
        for &b in &a.beta {
            if !(b >= 0.0 && b.is_finite()) {
                v.push(format!("ablation beta {b} must be finite and >= 0"));
            }
        }
        if (a.methods.contains(&Method::Nnprat) || (a.methods.is_empty() && self.train.method == Method::Nnprat))
            && self.train.batch_size < 2 {
                v.push("projection removal needs batch_size >= 2".into());
            }
        let n = self.grid().len();
        if n > a.cap {
            v.push(format!("ablation grid has {n} points, above the cap of {}", a.cap));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            v if v.is_empty() => Ok(()),
            v => Err(Error::Config(v)),
        }
    }

    pub fn train_spec_for(&self, point: &GridPoint) -> TrainSpec {
        let mut spec = self.train.clone();
        spec.method = point.method;
        spec.projection.lambda = point.lambda;
        spec.projection.beta = point.beta;
        spec.seed = point.seed;
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
output_dir = "out"

[dataset]
kind = "preset"
name = "toy-gaussian"

[network]
kind = "mlp"
hidden = [16, 16]

[train]
epochs = 2
batch_size = 32
learning_rate = 0.1
method = "nnprat"
attack = { epsilon = 0.15, alpha = 0.03, steps = 10 }
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::parse(BASE).unwrap();
        assert!(cfg.validate().is_ok(), "{:?}", cfg.violations());
        assert_eq!(cfg.train.projection.lambda, 0.001);
        let names: Vec<_> = cfg.eval_attacks().into_iter().map(|a| a.name).collect();
        assert_eq!(names, ["fgsm", "pgd20"]);
        assert_eq!(cfg.grid().len(), 1);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = ExperimentConfig::parse(&format!("{BASE}\n[ablation]\nlambda = [0.1, 0.01]\nseeds = [1, 2]\n")).unwrap();
        cfg.resolve(Path::new("/tmp/x"));
        let again = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn lambda_grid_order() {
        let cfg = ExperimentConfig::parse(&format!("{BASE}\n[ablation]\nlambda = [0.1, 0.01, 0.001, 0.0001]\n")).unwrap();
        let g = cfg.grid();
        assert_eq!(g.iter().map(|p| p.lambda).collect::<Vec<_>>(), [0.1, 0.01, 0.001, 0.0001]);
        assert!(g.iter().all(|p| p.beta == 6.0));
    }

    #[test]
    fn every_violation_is_listed() {
        let text = BASE.replace("epsilon = 0.15", "epsilon = -0.5").replace("batch_size = 32", "batch_size = 1")
            + "\n[[eval_attacks]]\nname = \"a\"\nattack = { epsilon = 0.1, alpha = 0.1, steps = 1 }\n[[eval_attacks]]\nname = \"a\"\nattack = { epsilon = 0.1, alpha = 0.1, steps = 1 }\n";
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let Err(Error::Config(v)) = cfg.validate() else {
            panic!("expected config error")
        };
        assert!(v.iter().any(|m| m.contains("epsilon")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("batch_size")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("not unique")), "{v:?}");
    }

    #[test]
    fn grid_cap_is_enforced() {
        let cfg = ExperimentConfig::parse(&format!("{BASE}\n[ablation]\nseeds = [1, 2, 3]\ncap = 2\n")).unwrap();
        assert!(cfg.violations().iter().any(|m| m.contains("cap")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse(&format!("{BASE}\nbogus = 1\n")).is_err());
    }
}
